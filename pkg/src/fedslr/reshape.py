"""Layered parameter containers, the layer-to-matrix map and its inverse, and
rank-r factorization of the low-rank layers for downlink transmission."""

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .linalg_prox import RANK_EPS, svd


@dataclass(frozen=True)
class Conv:
    out_channels: int
    in_channels: int
    kernel: int

    @property
    def size(self) -> int:
        return self.out_channels * self.kernel * self.in_channels * self.kernel

    @property
    def matrix_shape(self) -> Tuple[int, int]:
        return (self.out_channels * self.kernel, self.in_channels * self.kernel)


@dataclass(frozen=True)
class Dense:
    out_features: int
    in_features: int

    @property
    def size(self) -> int:
        return self.out_features * self.in_features

    @property
    def matrix_shape(self) -> Tuple[int, int]:
        return (self.out_features, self.in_features)


@dataclass(frozen=True)
class Passthrough:
    length: int

    @property
    def size(self) -> int:
        return self.length


LayerKind = Union[Conv, Dense, Passthrough]


def is_regularized(kind: LayerKind) -> bool:
    return isinstance(kind, (Conv, Dense))


def kind_to_dict(kind: LayerKind) -> dict:
    if isinstance(kind, Conv):
        return {"kind": "conv", "out_channels": kind.out_channels,
                "in_channels": kind.in_channels, "kernel": kind.kernel}
    if isinstance(kind, Dense):
        return {"kind": "dense", "out_features": kind.out_features, "in_features": kind.in_features}
    return {"kind": "passthrough", "length": kind.length}


def kind_from_dict(d: dict) -> LayerKind:
    d = dict(d)
    tag = d.pop("kind")
    cls = {"conv": Conv, "dense": Dense, "passthrough": Passthrough}.get(tag)
    if cls is None:
        raise ValueError(f"unknown layer kind {tag!r}")
    return cls(**{k: int(v) for k, v in d.items()})


class ParamSet:
    """Ordered list of (LayerKind, flat float64 vector) pairs.

    Supports ``+``, ``-``, unary ``-`` and scalar ``*`` between
    shape-compatible sets (identical LayerKind lists).
    """

    __slots__ = ("kinds", "values")

    def __init__(self, kinds: Sequence[LayerKind], values: Sequence[np.ndarray]):
        kinds = tuple(kinds)
        if len(kinds) != len(values):
            raise ValueError("kinds and values differ in length")
        vals = []
        for kind, v in zip(kinds, values):
            v = np.asarray(v, dtype=np.float64).reshape(-1)
            if v.size != kind.size:
                raise ValueError(f"{kind} expects {kind.size} values, got {v.size}")
            vals.append(v)
        self.kinds = kinds
        self.values = vals

    @classmethod
    def zeros(cls, kinds: Sequence[LayerKind]) -> "ParamSet":
        return cls(kinds, [np.zeros(k.size) for k in kinds])

    @classmethod
    def from_flat(cls, kinds: Sequence[LayerKind], flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(k.size for k in kinds)
        if flat.size != total:
            raise ValueError(f"flat vector has {flat.size} entries, expected {total}")
        out, start = [], 0
        for k in kinds:
            out.append(flat[start:start + k.size].copy())
            start += k.size
        return cls(kinds, out)

    def flat(self) -> np.ndarray:
        if not self.values:
            return np.zeros(0)
        return np.concatenate(self.values)

    def copy(self) -> "ParamSet":
        return ParamSet(self.kinds, [v.copy() for v in self.values])

    @property
    def size(self) -> int:
        return sum(k.size for k in self.kinds)

    def check_compatible(self, other: "ParamSet") -> None:
        if self.kinds != other.kinds:
            raise ValueError("ParamSets are not shape-compatible")

    def _combine(self, other, op):
        self.check_compatible(other)
        return ParamSet(self.kinds, [op(a, b) for a, b in zip(self.values, other.values)])

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __neg__(self):
        return ParamSet(self.kinds, [-v for v in self.values])

    def __mul__(self, scalar):
        scalar = float(scalar)
        return ParamSet(self.kinds, [scalar * v for v in self.values])

    __rmul__ = __mul__

    def dot(self, other: "ParamSet") -> float:
        self.check_compatible(other)
        return float(sum(np.dot(a, b) for a, b in zip(self.values, other.values)))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def max_abs(self) -> float:
        return float(max((np.max(np.abs(v)) for v in self.values if v.size), default=0.0))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality."""
        return self.kinds == other.kinds and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.values, other.values))

    def __repr__(self):
        return f"ParamSet({len(self.kinds)} layers, {self.size} values)"


def mean_params(sets: Sequence[ParamSet]) -> ParamSet:
    """Mean with a fixed left-to-right summation order."""
    if not sets:
        raise ValueError("cannot average an empty list")
    acc = sets[0].copy()
    for s in sets[1:]:
        acc.check_compatible(s)
        for a, b in zip(acc.values, s.values):
            a += b
    return acc * (1.0 / len(sets))


def to_matrix(kind: LayerKind, values) -> np.ndarray:
    if isinstance(kind, Passthrough):
        raise ValueError("passthrough layers have no matrix form")
    values = np.asarray(values, dtype=np.float64)
    if values.size != kind.size:
        raise ValueError(f"{kind} expects {kind.size} values, got {values.size}")
    # conv weights are laid out (o, d, i, d); C-order reshape groups (o,d) x (i,d)
    return values.reshape(kind.matrix_shape)


def from_matrix(kind: LayerKind, m) -> np.ndarray:
    if isinstance(kind, Passthrough):
        raise ValueError("passthrough layers have no matrix form")
    m = np.asarray(m, dtype=np.float64)
    if m.shape != kind.matrix_shape:
        raise ValueError(f"{kind} expects matrix shape {kind.matrix_shape}, got {m.shape}")
    return m.reshape(-1).copy()


@dataclass
class FactorLayer:
    U: np.ndarray  # d1 x r, absorbs the singular values
    V: np.ndarray  # d2 x r, orthonormal columns

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def element_count(self) -> int:
        return self.U.shape[1] * (self.U.shape[0] + self.V.shape[0])


@dataclass
class FactorizedModel:
    kinds: Tuple[LayerKind, ...]
    # FactorLayer for regularized layers, raw vector for passthrough
    layers: List[Union[FactorLayer, np.ndarray]]

    @property
    def ranks(self) -> List[int]:
        return [l.rank for l in self.layers if isinstance(l, FactorLayer)]

    def element_count(self) -> int:
        return sum(l.element_count if isinstance(l, FactorLayer) else l.size for l in self.layers)

    def layer_counts(self) -> List[Tuple[int, int]]:
        """(factorized, dense) element counts per layer."""
        out = []
        for kind, l in zip(self.kinds, self.layers):
            if isinstance(l, FactorLayer):
                out.append((l.element_count, kind.size))
            else:
                out.append((l.size, l.size))
        return out


def factorize(w: ParamSet) -> FactorizedModel:
    layers = []
    for kind, v in zip(w.kinds, w.values):
        if not is_regularized(kind):
            layers.append(v.copy())
            continue
        dec = svd(to_matrix(kind, v))
        r = int(np.count_nonzero(dec.sigma > RANK_EPS))
        layers.append(FactorLayer(U=dec.U[:, :r] * dec.sigma[:r], V=dec.Vt[:r].T.copy()))
    return FactorizedModel(kinds=w.kinds, layers=layers)


def reconstruct(f: FactorizedModel, shapes: Sequence[LayerKind]) -> ParamSet:
    shapes = tuple(shapes)
    if shapes != f.kinds:
        raise ValueError("layer kinds do not match the factorized model")
    values = []
    for kind, l in zip(shapes, f.layers):
        if isinstance(l, FactorLayer):
            d1, d2 = kind.matrix_shape
            if l.U.shape[0] != d1 or l.V.shape[0] != d2:
                raise ValueError(f"factor shapes {l.U.shape}, {l.V.shape} do not fit {kind}")
            values.append(from_matrix(kind, l.U @ l.V.T))
        else:
            values.append(np.asarray(l, dtype=np.float64).copy())
    return ParamSet(shapes, values)


def layer_ranks(w: ParamSet) -> List[int]:
    ranks = []
    for kind, v in zip(w.kinds, w.values):
        if is_regularized(kind):
            ranks.append(int(np.count_nonzero(svd(to_matrix(kind, v)).sigma > RANK_EPS)))
    return ranks
