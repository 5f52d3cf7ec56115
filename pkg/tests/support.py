"""Independent oracles and small fixtures shared by the test modules.

Nothing here calls into the library's numerical routines: the oracles are
deliberately naive re-implementations used as references.
"""

import numpy as np

from fedslr.core import ClientState, HyperParams, ServerState, run_round
from fedslr.objectives import QuadraticObjective, quadratic_federation, smoothness
from fedslr.reshape import Dense, ParamSet, Passthrough

QUAD_KINDS = (Dense(6, 4), Passthrough(6), Dense(5, 6))


def jacobi_svd(a, sweeps=60, tol=1e-15):
    """One-sided (Hestenes) Jacobi SVD. Returns U, sigma (descending), Vt."""
    a = np.array(a, dtype=np.float64)
    flip = a.shape[0] < a.shape[1]
    A = a.T.copy() if flip else a.copy()
    n = A.shape[1]
    V = np.eye(n)
    for _ in range(sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = A[:, p] @ A[:, p]
                beta = A[:, q] @ A[:, q]
                gamma = A[:, p] @ A[:, q]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                if abs(beta - alpha) > 1e150 * abs(gamma):
                    t = gamma / (beta - alpha)  # large-zeta limit of the formula below
                else:
                    zeta = (beta - alpha) / (2.0 * gamma)
                    t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for M in (A, V):
                    mp = M[:, p].copy()
                    M[:, p] = c * mp - s * M[:, q]
                    M[:, q] = s * mp + c * M[:, q]
        if not rotated:
            break
    sigma = np.sqrt(np.sum(A * A, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    U = np.zeros_like(A)
    nz = sigma > 0
    U[:, nz] = A[:, order][:, nz] / sigma[nz]
    Vt = V[:, order].T
    if flip:
        return Vt.T, sigma, U.T
    return U, sigma, Vt


def grid_lasso_1d(x, tau, tol=1e-9):
    """argmin_z 0.5 (z - x)^2 + tau |z| by repeatedly refined dense grids."""
    f = lambda z: 0.5 * (z - x) ** 2 + tau * np.abs(z)
    lo, hi = min(0.0, x) - 1.0, max(0.0, x) + 1.0
    while True:
        grid = np.linspace(lo, hi, 2001)
        best = grid[int(np.argmin(f(grid)))]
        step = grid[1] - grid[0]
        if step < tol:
            return best
        lo, hi = best - 2 * step, best + 2 * step


def central_fd(fn, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-4):
    """Largest coordinate-wise relative error, with a magnitude floor for near-zero entries."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def quad_setup(clients=8, seed=0, lam=0.5, eta_scale=0.5, kinds=QUAD_KINDS):
    """Quadratic federation with eta_g = eta_scale / L and no weight decay."""
    objs = quadratic_federation(kinds, clients, seed)
    L = smoothness(objs)
    hp = HyperParams(eta_g=eta_scale / L, lam=lam, mu=0.0, weight_decay=0.0, participation=1.0,
                     lr_decay=1.0)
    rng = np.random.default_rng(1000 + seed)
    w0 = ParamSet.from_flat(kinds, rng.normal(size=sum(k.size for k in kinds)))
    return objs, hp, w0


def run_exact(objs, hp, w0, rounds, memory_efficient=False, on_round=None):
    """Exact-solve FedSLR rounds (no fusion). ``on_round(server, clients, info)`` after each."""
    server = ServerState.fresh(w0, len(objs), memory_efficient)
    clients = [ClientState.fresh(w0) for _ in objs]
    for _ in range(rounds):
        server, info = run_round(server, clients, objs, hp, exact=True, fusion=False)
        if on_round is not None:
            on_round(server, clients, info)
    return server, clients


def scalar_quadratic(a, h=1.0):
    """f(x) = h/2 (x - a)^2 on a single coordinate."""
    return QuadraticObjective((Passthrough(1),), np.array([[h]]), np.array([a]))
