"""Per-client local objectives f_i.

Two kinds share one small interface (``value``, ``grad``, ``stoch_grad``):
a cross-entropy objective over a client's data, and a quadratic objective
with a closed-form local solve used by the theory checks.
"""

from typing import List, Sequence

import numpy as np

from . import model
from .model import Batch, ModelSpec
from .reshape import LayerKind, ParamSet


class ModelObjective:
    exact = False

    def __init__(self, spec: ModelSpec, data: Batch):
        self.spec = spec
        self.data = data

    @property
    def kinds(self):
        return self.spec.kinds

    @property
    def n_samples(self) -> int:
        return len(self.data)

    def value(self, w: ParamSet) -> float:
        return model.loss(self.spec, w, self.data)

    def grad(self, w: ParamSet) -> ParamSet:
        return model.gradient(self.spec, w, self.data)

    def sample(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        n = self.n_samples
        if batch_size >= n:
            return np.arange(n)
        return np.sort(rng.choice(n, size=batch_size, replace=False))

    def stoch_grad(self, w: ParamSet, rng: np.random.Generator, batch_size: int) -> ParamSet:
        if batch_size >= self.n_samples:
            return self.grad(w)
        return model.gradient(self.spec, w, self.data.subset(self.sample(rng, batch_size)))

    def accuracy(self, w: ParamSet, p=None, test: Batch = None) -> float:
        return model.evaluate(self.spec, w, p, self.data if test is None else test)


class QuadraticObjective:
    """``f(w) = 0.5 (w - a)^T H (w - a)`` on the flattened parameters."""

    exact = True
    n_samples = 1

    def __init__(self, kinds: Sequence[LayerKind], hessian, center):
        self.kinds = tuple(kinds)
        self.H = np.asarray(hessian, dtype=np.float64)
        self.a = np.asarray(center, dtype=np.float64).reshape(-1)
        n = self.a.size
        if self.H.shape != (n, n):
            raise ValueError(f"hessian must be {n}x{n}")

    @property
    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.H).max())

    def value(self, w: ParamSet) -> float:
        d = w.flat() - self.a
        return float(0.5 * d @ self.H @ d)

    def grad(self, w: ParamSet) -> ParamSet:
        return ParamSet.from_flat(self.kinds, self.H @ (w.flat() - self.a))

    def stoch_grad(self, w, rng, batch_size):
        return self.grad(w)

    def exact_local_solve(self, w_t: ParamSet, gamma: ParamSet, eta_g: float,
                          weight_decay: float = 0.0) -> ParamSet:
        """Minimizer of ``f(w) + wd/2 |w|^2 - <gamma, w> + |w_t - w|^2 / (2 eta_g)``."""
        n = self.a.size
        lhs = self.H + (weight_decay + 1.0 / eta_g) * np.eye(n)
        rhs = self.H @ self.a + gamma.flat() + w_t.flat() / eta_g
        return ParamSet.from_flat(self.kinds, np.linalg.solve(lhs, rhs))


def random_spd(n: int, eig_min: float, eig_max: float, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigs = rng.uniform(eig_min, eig_max, size=n)
    eigs[0], eigs[-1] = eig_min, eig_max
    h = (q * eigs) @ q.T
    return 0.5 * (h + h.T)


def quadratic_federation(kinds: Sequence[LayerKind], clients: int, seed: int,
                         eig_min: float = 0.5, eig_max: float = 2.0,
                         spread: float = 1.0) -> List[QuadraticObjective]:
    """Seeded heterogeneous quadratic clients (distinct Hessians and centers)."""
    kinds = tuple(kinds)
    n = sum(k.size for k in kinds)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0A4D]))
    out = []
    for _ in range(clients):
        h = random_spd(n, eig_min, eig_max, rng)
        out.append(QuadraticObjective(kinds, h, spread * rng.normal(size=n)))
    return out


def smoothness(objectives) -> float:
    """Largest Hessian eigenvalue over quadratic clients."""
    return max(o.smoothness for o in objectives)
