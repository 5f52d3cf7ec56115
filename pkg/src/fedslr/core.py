"""FedSLR protocol: Phase-I local subproblem and auxiliary update, Phase-II
sparse proximal fusion, and the three server aggregation variants
(full table, partial participation, memory-efficient running mean)."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .linalg_prox import prox_l1, prox_nuclear
from .reshape import (FactorizedModel, ParamSet, factorize, from_matrix, is_regularized,
                      mean_params, to_matrix)


class DivergenceError(RuntimeError):
    def __init__(self, where: str, step: int):
        super().__init__(f"{where}: non-finite iterate at step {step}")
        self.step = step


class ProtocolError(ValueError):
    pass


@dataclass
class HyperParams:
    eta_g: float = 10.0
    eta_l: float = 0.1
    lam: float = 1e-4
    mu: float = 1e-3
    K_local: int = 10
    K_fusion: int = 5
    T: int = 100
    batch_size: int = 20
    lr_decay: float = 0.998
    participation: float = 0.1
    weight_decay: float = 1e-3

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = [
            ("eta_g", self.eta_g, self.eta_g > 0), ("eta_l", self.eta_l, self.eta_l > 0),
            ("lambda", self.lam, self.lam >= 0), ("mu", self.mu, self.mu >= 0),
            ("K_local", self.K_local, self.K_local >= 0),
            ("K_fusion", self.K_fusion, self.K_fusion >= 0),
            ("T", self.T, self.T >= 0), ("batch_size", self.batch_size, self.batch_size >= 1),
            ("lr_decay", self.lr_decay, 0 < self.lr_decay <= 1),
            ("participation", self.participation, 0 < self.participation <= 1),
            ("weight_decay", self.weight_decay, self.weight_decay >= 0),
        ]
        for name, value, ok in checks:
            if not ok:
                raise ValueError(f"invalid hyperparameter {name}={value}")

    def local_lr(self, round_idx: int) -> float:
        return self.eta_l * self.lr_decay ** round_idx


@dataclass
class ClientState:
    gamma: ParamSet
    p: ParamSet
    # last uploaded local model w_{i,t}; used by the diagnostics
    local: ParamSet

    @classmethod
    def fresh(cls, w0: ParamSet) -> "ClientState":
        return cls(gamma=ParamSet.zeros(w0.kinds), p=ParamSet.zeros(w0.kinds), local=w0.copy())


@dataclass
class ServerState:
    w: ParamSet
    gamma_table: Optional[List[ParamSet]] = None
    gamma_bar: Optional[ParamSet] = None
    round: int = 0

    @classmethod
    def fresh(cls, w0: ParamSet, clients: int, memory_efficient: bool = False) -> "ServerState":
        if memory_efficient:
            return cls(w=w0.copy(), gamma_bar=ParamSet.zeros(w0.kinds))
        return cls(w=w0.copy(), gamma_table=[ParamSet.zeros(w0.kinds) for _ in range(clients)])

    @property
    def memory_efficient(self) -> bool:
        return self.gamma_bar is not None


def client_rng(seed: int, client: int, round_idx: int, stream: int = 0) -> np.random.Generator:
    """Independent stream keyed by (seed, client, round, stream)."""
    return np.random.default_rng(np.random.SeedSequence([seed, client, round_idx, stream]))


def phase1_grad(obj, w: ParamSet, weight_decay: float, rng=None, batch_size=None) -> ParamSet:
    g = obj.grad(w) if rng is None else obj.stoch_grad(w, rng, batch_size)
    if weight_decay:
        g = g + weight_decay * w
    return g


def phase1_value(obj, w: ParamSet, weight_decay: float) -> float:
    v = obj.value(w)
    if weight_decay:
        v += 0.5 * weight_decay * w.dot(w)
    return v


def solve_local_subproblem(obj, w_t: ParamSet, gamma: ParamSet, hp: HyperParams,
                           rng: np.random.Generator, lr: Optional[float] = None,
                           exact: bool = False) -> ParamSet:
    """Approximately minimize ``f_i(w) - <gamma, w> + |w_t - w|^2 / (2 eta_g)``.

    Runs ``K_local`` minibatch gradient steps from ``w_t``; with ``exact`` the
    objective's closed-form minimizer is returned instead.
    """
    w_t.check_compatible(gamma)
    if exact:
        if not getattr(obj, "exact", False):
            raise ValueError("exact local solve requires a quadratic objective")
        return obj.exact_local_solve(w_t, gamma, hp.eta_g, hp.weight_decay)
    lr = hp.eta_l if lr is None else lr
    inv_eta = 1.0 / hp.eta_g
    w = w_t.copy()
    for k in range(hp.K_local):
        g = phase1_grad(obj, w, hp.weight_decay, rng, hp.batch_size)
        w = w - lr * (g - gamma - inv_eta * (w_t - w))
        if not w.is_finite():
            raise DivergenceError("local subproblem", k)
    return w


def update_aux(gamma: ParamSet, w_t: ParamSet, w_next: ParamSet, eta_g: float) -> ParamSet:
    return gamma + (w_t - w_next) * (1.0 / eta_g)


def prox_layers(x: ParamSet, tau: float):
    """Nuclear-norm prox on every regularized layer; passthrough layers copied.

    Returns ``(ParamSet, ranks)``.
    """
    values, ranks = [], []
    for kind, v in zip(x.kinds, x.values):
        if is_regularized(kind):
            m, r = prox_nuclear(to_matrix(kind, v), tau)
            values.append(from_matrix(kind, m))
            ranks.append(r)
        else:
            values.append(v.copy())
    return ParamSet(x.kinds, values), ranks


def _check_same_shapes(sets: Sequence[ParamSet]):
    kinds = sets[0].kinds
    for s in sets[1:]:
        if s.kinds != kinds:
            raise ProtocolError("client uploads have mismatched shapes")


def _global_prox_step(locals_mean: ParamSet, gamma_mean: ParamSet, hp: HyperParams):
    return prox_layers(locals_mean - hp.eta_g * gamma_mean, hp.eta_g * hp.lam)


def aggregate_full(locals_: Sequence[ParamSet], gammas: Sequence[ParamSet], hp: HyperParams,
                   return_ranks: bool = False):
    """``Prox(mean(locals) - eta_g * mean(gammas))`` with threshold ``eta_g * lambda``."""
    if not locals_ or len(locals_) != len(gammas):
        raise ProtocolError("need one gamma per local model")
    _check_same_shapes(list(locals_) + list(gammas))
    w, ranks = _global_prox_step(mean_params(locals_), mean_params(gammas), hp)
    return (w, ranks) if return_ranks else w


def aggregate_partial(locals_: Sequence[ParamSet], gamma_table: Sequence[ParamSet],
                      hp: HyperParams, return_ranks: bool = False):
    """Weights averaged over the selected clients, gammas over the whole population."""
    if not locals_:
        raise ProtocolError("empty client selection")
    if not gamma_table:
        raise ProtocolError("empty gamma table")
    _check_same_shapes(list(locals_) + list(gamma_table))
    w, ranks = _global_prox_step(mean_params(locals_), mean_params(gamma_table), hp)
    return (w, ranks) if return_ranks else w


def aggregate_memory_efficient(locals_: Sequence[ParamSet], gamma_bar: ParamSet, w_t: ParamSet,
                               hp: HyperParams, return_ranks: bool = False):
    """Track only the population mean of the gammas.

    Returns ``(w_next, gamma_bar_next)`` (plus ranks when requested).
    """
    if not locals_:
        raise ProtocolError("empty client list")
    _check_same_shapes(list(locals_) + [gamma_bar, w_t])
    deltas = [(w_t - w_i) * (1.0 / hp.eta_g) for w_i in locals_]
    gamma_next = gamma_bar + mean_params(deltas)
    w, ranks = _global_prox_step(mean_params(locals_), gamma_next, hp)
    return (w, gamma_next, ranks) if return_ranks else (w, gamma_next)


def local_fusion(obj, w_t: ParamSet, p: ParamSet, hp: HyperParams, rng: np.random.Generator,
                 lr: Optional[float] = None, trace: Optional[list] = None) -> ParamSet:
    """``K_fusion`` proximal SGD steps on the personalized component.

    ``p <- S_{mu*lr}(p - lr * grad f_i(w_t + p; xi))`` on every coordinate.
    When ``trace`` is a list, every iterate (including the start) is appended.
    """
    w_t.check_compatible(p)
    lr = hp.eta_l if lr is None else lr
    thresh = hp.mu * lr
    p = p.copy()
    if trace is not None:
        trace.append(p.copy())
    for k in range(hp.K_fusion):
        g = obj.stoch_grad(w_t + p, rng, hp.batch_size)
        step = p - lr * g
        p = ParamSet(p.kinds, [prox_l1(v, thresh) for v in step.values])
        if not p.is_finite():
            raise DivergenceError("local fusion", k)
        if trace is not None:
            trace.append(p.copy())
    return p


@dataclass
class RoundInfo:
    round: int
    selection: List[int]
    locals: Dict[int, ParamSet]
    w_sent: ParamSet
    downlink: FactorizedModel
    ranks: List[int]
    lr: float


def run_round(server: ServerState, clients: Sequence[ClientState], objectives, hp: HyperParams,
              selection: Optional[Sequence[int]] = None, seed: int = 0,
              exact: bool = False, fusion: bool = True):
    """One communication round; mutates ``clients`` in place, returns a new ServerState.

    Clients train from the server's ``w_t`` directly: the (U, V) factorization
    is produced for transmission accounting and reconstructs ``w_t`` exactly
    up to floating-point rounding.
    """
    M = len(clients)
    selection = list(range(M)) if selection is None else sorted(set(int(i) for i in selection))
    if not selection:
        raise ProtocolError("empty client selection")
    if server.memory_efficient and len(selection) != M:
        raise ProtocolError("memory-efficient aggregation requires full participation")
    t = server.round
    lr = hp.local_lr(t)
    w_t = server.w
    downlink = factorize(w_t)

    locals_: Dict[int, ParamSet] = {}
    for i in selection:
        c = clients[i]
        w_i = solve_local_subproblem(objectives[i], w_t, c.gamma, hp, client_rng(seed, i, t, 1), lr, exact)
        c.gamma = update_aux(c.gamma, w_t, w_i, hp.eta_g)
        c.local = w_i
        if fusion:
            c.p = local_fusion(objectives[i], w_t, c.p, hp, client_rng(seed, i, t, 2), lr)
        locals_[i] = w_i

    uploads = [locals_[i] for i in selection]
    if server.memory_efficient:
        w_next, gamma_bar, ranks = aggregate_memory_efficient(uploads, server.gamma_bar, w_t, hp,
                                                              return_ranks=True)
        new = ServerState(w=w_next, gamma_bar=gamma_bar, round=t + 1)
    else:
        table = list(server.gamma_table)
        for i in selection:
            table[i] = update_aux(table[i], w_t, locals_[i], hp.eta_g)
        if len(selection) == M:
            w_next, ranks = aggregate_full(uploads, table, hp, return_ranks=True)
        else:
            w_next, ranks = aggregate_partial(uploads, table, hp, return_ranks=True)
        new = ServerState(w=w_next, gamma_table=table, round=t + 1)
    return new, RoundInfo(round=t, selection=selection, locals=locals_, w_sent=w_t,
                          downlink=downlink, ranks=ranks, lr=lr)


def sample_clients(M: int, fraction: float, seed: int, round_idx: int) -> List[int]:
    """Uniform sampling without replacement; at least one client."""
    k = max(1, int(round(fraction * M)))
    if k >= M:
        return list(range(M))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1, round_idx]))
    return sorted(int(i) for i in rng.choice(M, size=k, replace=False))
