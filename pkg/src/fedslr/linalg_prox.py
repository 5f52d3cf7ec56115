"""Dense matrix kernels: deterministic SVD and the two closed-form proximal operators.

Everything here is a pure function of its inputs and works in float64.
"""

from dataclasses import dataclass

import numpy as np

# post-shrinkage singular values below this are counted as zero
RANK_EPS = 1e-12


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    sigma: np.ndarray
    Vt: np.ndarray


def _as_finite_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def soft_threshold(x, a):
    """Coordinate-wise shrinkage toward zero by ``a``.

    Entries with magnitude at most ``a`` become exactly zero; the rest move
    ``a`` closer to zero.
    """
    if a < 0:
        raise ValueError(f"threshold must be nonnegative, got {a}")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    hi = x > a
    lo = x < -a
    out[hi] = x[hi] - a
    out[lo] = x[lo] + a
    return out


def prox_l1(x, tau):
    """Proximal operator of ``tau * ||.||_1``; identical to :func:`soft_threshold`."""
    return soft_threshold(x, tau)


def svd(m):
    """Thin SVD with a fixed sign convention.

    Each left singular vector is flipped so that its largest-magnitude entry
    is nonnegative (ties go to the lowest index); the matching row of ``Vt``
    is flipped with it.
    """
    m = _as_finite_matrix(m)
    U, s, Vt = np.linalg.svd(m, full_matrices=False)
    # argmax returns the first maximal index, which is the tie rule we want
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[pivots, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    U = U * signs
    Vt = Vt * signs[:, None]
    return SvdResult(U=U, sigma=s, Vt=Vt)


def prox_nuclear(m, tau):
    """Singular value soft-thresholding.

    Returns ``(Z, retained_rank)`` where ``Z`` minimizes
    ``0.5 * ||Z - m||_F^2 + tau * ||Z||_*``.
    """
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    m = _as_finite_matrix(m)
    if tau == 0:
        dec = svd(m)
        return m.copy(), int(np.count_nonzero(dec.sigma > RANK_EPS))
    dec = svd(m)
    shrunk = soft_threshold(dec.sigma, tau)
    shrunk[shrunk < RANK_EPS] = 0.0
    rank = int(np.count_nonzero(shrunk))
    out = (dec.U[:, :rank] * shrunk[:rank]) @ dec.Vt[:rank]
    return out, rank


def nuclear_norm(m):
    return float(np.sum(svd(m).sigma))
