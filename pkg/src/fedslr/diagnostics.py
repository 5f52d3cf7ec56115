"""Computable theory quantities and communication accounting.

All objective evaluations here are full-batch.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import HyperParams, phase1_grad, phase1_value
from .linalg_prox import prox_l1, svd
from .reshape import FactorizedModel, ParamSet, is_regularized, mean_params, to_matrix

BYTES_PER_ELEMENT = 4


@dataclass
class RoundMetrics:
    """Observables for one round; ``None`` marks a metric the method does not produce."""
    round: int
    ranks: List[int] = field(default_factory=list)
    downlink_bytes: int = 0
    uplink_bytes: int = 0
    potential: Optional[float] = None
    potential_delta: Optional[float] = None
    stationarity_residual: Optional[float] = None
    grad_map_norm: Optional[float] = None
    p_sparsity: Optional[float] = None
    gkr_acc: Optional[float] = None
    mixed_acc: Optional[float] = None

    @property
    def mean_rank(self) -> Optional[float]:
        return float(np.mean(self.ranks)) if self.ranks else None

    def as_row(self, method: str, seed: int) -> dict:
        return {"round": self.round, "method": method, "seed": seed,
                "potential": self.potential, "potential_delta": self.potential_delta,
                "stationarity_residual": self.stationarity_residual,
                "grad_map_norm": self.grad_map_norm, "mean_rank": self.mean_rank,
                "p_sparsity": self.p_sparsity, "downlink_bytes": self.downlink_bytes,
                "uplink_bytes": self.uplink_bytes, "gkr_acc": self.gkr_acc,
                "mixed_acc": self.mixed_acc}


def regularizer(w: ParamSet, lam: float) -> float:
    """``lam * sum_l ||pi(w_l)||_*`` over regularized layers."""
    total = 0.0
    for kind, v in zip(w.kinds, w.values):
        if is_regularized(kind):
            total += float(np.sum(svd(to_matrix(kind, v)).sigma))
    return lam * total


def potential(objectives: Sequence, w: ParamSet, locals_: Sequence[ParamSet],
              gammas: Sequence[ParamSet], hp: HyperParams) -> float:
    M = len(objectives)
    if not (len(locals_) == len(gammas) == M):
        raise ValueError("need one local model and one gamma per client")
    inv = 1.0 / (2.0 * hp.eta_g)
    acc = 0.0
    for obj, y, g in zip(objectives, locals_, gammas):
        diff = w - y
        acc += phase1_value(obj, y, hp.weight_decay) + g.dot(diff) + inv * diff.dot(diff)
    return acc / M + regularizer(w, hp.lam)


@dataclass
class DescentReport:
    deltas: List[float]
    violation: Optional[int]
    tol: float

    @property
    def ok(self) -> bool:
        return self.violation is None


def potential_descent_check(history: Sequence[float], tol: float = 1e-9) -> DescentReport:
    """Per-round deltas of a potential history; flags the first round whose
    delta exceeds ``tol``."""
    deltas = [float(b - a) for a, b in zip(history[:-1], history[1:])]
    bad = next((k + 1 for k, d in enumerate(deltas) if d > tol), None)
    return DescentReport(deltas=deltas, violation=bad, tol=tol)


def gradient_mapping(obj, w: ParamSet, p: ParamSet, hp: HyperParams, lr: Optional[float] = None) -> ParamSet:
    """``(p - prox_{mu*lr}(p - lr * grad f_i(w + p))) / lr``."""
    w.check_compatible(p)
    lr = hp.eta_l if lr is None else lr
    g = obj.grad(w + p)
    if hp.mu == 0:
        # the prox is the identity, so the mapping is the gradient itself
        return g
    step = p - lr * g
    proxed = ParamSet(p.kinds, [prox_l1(v, hp.mu * lr) for v in step.values])
    return (p - proxed) * (1.0 / lr)


def stationarity_residual(objectives: Sequence, w_t: ParamSet, locals_: Sequence[ParamSet],
                          hp: HyperParams) -> float:
    """Norm of ``mean_i(grad f_i(w_t) - grad f_i(w_{i,t})) - (w_t - mean_i w_{i,t}) / eta_g``."""
    if len(locals_) != len(objectives):
        raise ValueError("need one local model per client")
    # averaged per client so that every term vanishes exactly at consensus
    inv = 1.0 / hp.eta_g
    terms = [phase1_grad(o, w_t, hp.weight_decay) - phase1_grad(o, y, hp.weight_decay) - (w_t - y) * inv
             for o, y in zip(objectives, locals_)]
    return mean_params(terms).norm()


def consensus_gap(w_t: ParamSet, locals_: Sequence[ParamSet]) -> float:
    return max((w_t - y).norm() for y in locals_)


def estimate_grad_variance(obj, w: ParamSet, p: ParamSet, batch_size: int, n_draws: int,
                           rng: np.random.Generator) -> float:
    """Mean squared deviation of minibatch gradients at ``w + p`` from the full gradient."""
    if n_draws < 2:
        raise ValueError("n_draws must be >= 2")
    if batch_size > obj.n_samples:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {obj.n_samples}")
    x = w + p
    full = obj.grad(x)
    total = 0.0
    for _ in range(n_draws):
        d = obj.stoch_grad(x, rng, batch_size) - full
        total += d.dot(d)
    return total / n_draws


@dataclass
class CommLedger:
    bytes_per_element: int = BYTES_PER_ELEMENT
    downlink_total: int = 0
    uplink_total: int = 0
    entries: List[dict] = field(default_factory=list)

    def add(self, round_idx: int, direction: str, nbytes: int):
        if direction == "down":
            self.downlink_total += nbytes
        elif direction == "up":
            self.uplink_total += nbytes
        else:
            raise ValueError(f"unknown direction {direction!r}")
        self.entries.append({"round": round_idx, "direction": direction, "bytes": nbytes})

    def round_bytes(self, round_idx: int, direction: str) -> int:
        return sum(e["bytes"] for e in self.entries
                   if e["round"] == round_idx and e["direction"] == direction)


def downlink_elements(fact: FactorizedModel) -> int:
    """Per layer, the cheaper of the (U, V) pair and the dense matrix."""
    return sum(min(f, d) for f, d in fact.layer_counts())


def comm_account(fact: Optional[FactorizedModel], dense_count: int, direction: str,
                 ledger: CommLedger, round_idx: int = 0, copies: int = 1) -> CommLedger:
    """Charge one transmission to ``ledger``.

    Downlink of a factorized model costs ``sum_l min(r_l (d1 + d2), d1 d2)``
    plus passthrough entries; without a factorization, or for uplink, the
    dense count is charged. ``copies`` scales the charge (e.g. number of clients).
    """
    if direction == "down" and fact is not None:
        elems = downlink_elements(fact)
    else:
        elems = dense_count
    ledger.add(round_idx, direction, elems * ledger.bytes_per_element * copies)
    return ledger


def dense_profile_bytes(params: float, clients_per_round: int, rounds: int,
                        models_per_direction: int = 1, bytes_per_element: int = BYTES_PER_ELEMENT) -> float:
    """Total up+down bytes when every transmission is a dense model."""
    per_dir = params * bytes_per_element * models_per_direction * clients_per_round * rounds
    return 2.0 * per_dir
