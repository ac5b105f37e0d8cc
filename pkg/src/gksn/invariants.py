"""Symmetry-invariant scalar features of point clouds.

Points are rows of an ``m x n`` coordinate matrix. A group element ``Q`` acts
on each row, so a transformed frame is ``X @ Q.T``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .diffengine import Node, Tape

FEATURES = ("n1", "n12", "inner", "outer", "cos", "sin")
DEFAULT_FEATURES = ("n1", "n12", "inner", "outer")
BASIS_RULES = ("index", "ranked")

# per-pair scalar emitted by each feature, in canonical order
_COLUMNS = (("n1", "n1_x"), ("n1", "n1_y"), ("n12", "n12"), ("inner", "inner"),
            ("outer", "outer"), ("cos", "cos"), ("sin", "sin"))


class DegenerateFeatureWarning(RuntimeWarning):
    """cos/sin requested for a pair with a zero-norm operand."""


class DegenerateFeatureError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    """One configuration: ``m`` points in ``n`` dimensions."""

    coords: np.ndarray
    types: Optional[np.ndarray] = None
    energy: Optional[float] = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[0] < 1 or coords.shape[1] < 1:
            raise ValueError(f"coords must be a non-empty m x n matrix, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        object.__setattr__(self, "coords", coords)
        if self.types is not None:
            types = np.array(self.types, dtype=np.int64).ravel()
            if types.size != coords.shape[0]:
                raise ValueError(f"types has length {types.size}, expected {coords.shape[0]}")
            object.__setattr__(self, "types", types)
        if self.energy is not None:
            object.__setattr__(self, "energy", float(self.energy))

    @property
    def m(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True)
class Metric:
    """Inner-product signature.

    ``minkowski`` uses diag(1, -1, ..., -1).
    """

    kind: str = "euclidean"
    matrix: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("euclidean", "minkowski", "bilinear"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == "bilinear":
            if self.matrix is None:
                raise ValueError("bilinear metric needs a matrix")
            A = np.array(self.matrix, dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ValueError("bilinear matrix must be square")
            if not np.array_equal(A, A.T):
                raise ValueError("bilinear matrix must be symmetric")
            object.__setattr__(self, "matrix", A)

    @classmethod
    def euclidean(cls) -> "Metric":
        return cls("euclidean")

    @classmethod
    def minkowski(cls) -> "Metric":
        return cls("minkowski")

    @classmethod
    def bilinear(cls, matrix) -> "Metric":
        return cls("bilinear", np.asarray(matrix, dtype=float))

    def signature(self, n: int) -> np.ndarray:
        if self.kind == "euclidean":
            return np.eye(n)
        if self.kind == "minkowski":
            return np.diag([1.0] + [-1.0] * (n - 1))
        if self.matrix.shape[0] != n:
            raise ValueError(f"metric is {self.matrix.shape[0]}-dimensional, data is {n}-dimensional")
        return self.matrix

    def diagonal(self, n: int) -> Optional[np.ndarray]:
        if self.kind == "bilinear":
            return None
        return np.diag(self.signature(n)).copy()

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "bilinear":
            d["matrix"] = self.matrix.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Metric":
        return cls(d["kind"], None if d.get("matrix") is None else np.array(d["matrix"], dtype=float))


@dataclass(frozen=True)
class FeatureConfig:
    node_index: bool = False
    linear: bool = True
    features: tuple = DEFAULT_FEATURES
    center: bool = True
    include_types: bool = False
    # "index": basis rows are the first n points; "ranked": the n points with the
    # largest self inner product, which does not depend on the point order
    basis: str = "index"

    def __post_init__(self):
        if self.basis not in BASIS_RULES:
            raise ValueError(f"unknown basis rule {self.basis!r}; choose from {BASIS_RULES}")
        feats = tuple(self.features)
        if not feats:
            raise ValueError("feature set must be non-empty")
        unknown = set(feats) - set(FEATURES)
        if unknown:
            raise ValueError(f"unknown features {sorted(unknown)}; choose from {FEATURES}")
        # canonical order, no repeats
        object.__setattr__(self, "features", tuple(f for f in FEATURES if f in feats))

    @property
    def columns(self) -> list[str]:
        return [col for feat, col in _COLUMNS if feat in self.features]

    @property
    def pair_width(self) -> int:
        return len(self.columns) + int(self.node_index) + 2 * int(self.include_types)

    def pairs(self, m: int, n: int) -> list[tuple[int, int]]:
        """Canonical row-major pair grid."""
        if self.linear:
            if m < n:
                raise ValueError(f"linear features need m >= n, got m={m}, n={n}")
            return [(i, j) for i in range(m) for j in range(n)]
        return [(i, j) for i in range(m) for j in range(m)]

    def input_dim(self, m: int, n: int) -> int:
        return len(self.pairs(m, n)) * self.pair_width

    def flags(self) -> str:
        return f"({'T' if self.node_index else 'F'},{'T' if self.linear else 'F'})"

    def to_dict(self) -> dict:
        return {"node_index": self.node_index, "linear": self.linear, "features": list(self.features),
                "center": self.center, "include_types": self.include_types, "basis": self.basis}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(node_index=d["node_index"], linear=d["linear"], features=tuple(d["features"]),
                   center=d["center"], include_types=d["include_types"], basis=d.get("basis", "index"))


def _as_frame(frame) -> Frame:
    return frame if isinstance(frame, Frame) else Frame(frame)


def column_means(X: np.ndarray) -> np.ndarray:
    """Mean over the point axis (-2), summed in sorted order.

    Sorting makes the result independent of point ordering, bit for bit.
    """
    S = np.sort(X, axis=-2)
    acc = np.zeros(S.shape[:-2] + S.shape[-1:])
    for i in range(S.shape[-2]):
        acc = acc + S[..., i, :]
    return acc / S.shape[-2]


def center(frame: Frame) -> Frame:
    frame = _as_frame(frame)
    coords = frame.coords - column_means(frame.coords)[None, :]
    return replace(frame, coords=coords)


def _bilinear(X: np.ndarray, Y: np.ndarray, metric: Metric) -> np.ndarray:
    """``X_i^T L Y_j`` for every pair of rows; leading batch axes broadcast."""
    n = X.shape[-1]
    diag = metric.diagonal(n)
    if diag is None:
        Y = np.einsum("...jd,ed->...je", Y, metric.signature(n))
        diag = np.ones(n)
    out = 0.0
    for d in range(n):
        term = X[..., :, None, d] * Y[..., None, :, d]
        out = out + (term if diag[d] == 1.0 else diag[d] * term)
    return out


def gram(frame, metric: Metric = Metric()) -> np.ndarray:
    X = _as_frame(frame).coords
    metric.signature(X.shape[1])
    return _bilinear(X, X, metric)


def basis_subset(frame, n: int) -> np.ndarray:
    X = _as_frame(frame).coords
    if X.shape[0] < n:
        raise ValueError(f"basis subset needs m >= n, got m={X.shape[0]}, n={n}")
    return X[:n].copy()


def _self_quad(X: np.ndarray, metric: Metric) -> np.ndarray:
    n = X.shape[-1]
    diag = metric.diagonal(n)
    if diag is None:
        return np.einsum("...d,de,...e->...", X, metric.signature(n), X)
    out = 0.0
    for d in range(n):
        term = X[..., d] * X[..., d]
        out = out + (term if diag[d] == 1.0 else diag[d] * term)
    return out


def basis_indices(coords, n: int, metric: "Metric" = None, rule: str = "index") -> np.ndarray:
    """Indices of the basis rows for a batch ``(F, m, n)`` of (already centered) frames.

    ``ranked`` orders points by their self inner product, largest first, with a
    stable sort; each key is computed from its own row only, so permuting the
    points permutes the keys and selects the same set of vectors.
    """
    X = np.asarray(coords, dtype=float)
    F, m = X.shape[:2]
    if m < n:
        raise ValueError(f"linear features need m >= n, got m={m}, n={n}")
    if rule == "index":
        return np.broadcast_to(np.arange(n), (F, n))
    if rule != "ranked":
        raise ValueError(f"unknown basis rule {rule!r}")
    q = _self_quad(X, metric if metric is not None else Metric())
    return np.argsort(-q, axis=-1, kind="stable")[:, :n]


def signed_sqrt(q):
    return np.sign(q) * np.sqrt(np.abs(q))


def _outer_quad(X, Y, metric, qx, qy, ip):
    """``|x|^2 |y|^2 - <x,y>^2`` for every pair of rows.

    For the Euclidean metric this is summed as squared 2x2 minors (Lagrange's
    identity), which is exactly zero for parallel vectors instead of a
    rounding residue that the square root would amplify.
    """
    n = X.shape[-1]
    if metric.kind != "euclidean":
        return np.abs(qx) * np.abs(qy) - ip * ip
    out = np.zeros(ip.shape)
    for a in range(n):
        for b in range(a + 1, n):
            minor = X[..., :, None, a] * Y[..., None, :, b] - X[..., :, None, b] * Y[..., None, :, a]
            out = out + minor * minor
    return out


def _pair_columns(X, Y, metric, columns, self_mask):
    """Per-pair scalars for every (row of X, row of Y); returns (..., mx, my, w) and a degeneracy mask."""
    qx = _self_quad(X, metric)[..., :, None]
    qy = _self_quad(Y, metric)[..., None, :]
    nx, ny = signed_sqrt(qx), signed_sqrt(qy)
    ip = _bilinear(X, Y, metric)
    shape = ip.shape
    out = {}
    degenerate = np.zeros(shape, dtype=bool)
    need_outer = any(c in columns for c in ("outer", "sin"))
    if need_outer:
        outer = np.sqrt(np.maximum(0.0, _outer_quad(X, Y, metric, qx, qy, ip)))
        outer = np.where(self_mask, 0.0, outer)
    if "n1_x" in columns:
        out["n1_x"] = np.broadcast_to(nx, shape)
        out["n1_y"] = np.broadcast_to(ny, shape)
    if "n12" in columns:
        diff = X[..., :, None, :] - Y[..., None, :, :]
        out["n12"] = np.where(self_mask, 0.0, signed_sqrt(_self_quad(diff, metric)))
    if "inner" in columns:
        out["inner"] = ip
    if "outer" in columns:
        out["outer"] = outer
    if "cos" in columns or "sin" in columns:
        denom = nx * ny
        degenerate = np.broadcast_to(denom == 0.0, shape)
        safe = np.where(degenerate, 1.0, denom)
        if "cos" in columns:
            out["cos"] = np.where(degenerate, 0.0, ip / safe)
        if "sin" in columns:
            out["sin"] = np.where(degenerate, 0.0, outer / safe)
    return np.stack([out[c] for c in columns], axis=-1), degenerate


def pair_features(x, y, metric: Metric = Metric(), features: Iterable[str] = DEFAULT_FEATURES) -> np.ndarray:
    """Invariant scalars of one pair of points, in canonical order."""
    cfg = FeatureConfig(features=tuple(features))
    x = np.asarray(x, dtype=float)[None, :]
    y = np.asarray(y, dtype=float)[None, :]
    vals, degenerate = _pair_columns(x, y, metric, cfg.columns, np.zeros((1, 1), dtype=bool))
    if degenerate.any():
        warnings.warn("zero-norm operand in cos/sin feature; set to 0", DegenerateFeatureWarning, stacklevel=2)
    return vals[0, 0]


def pair_table(coords, config: FeatureConfig, metric: Metric = Metric(), types=None,
               return_degenerate: bool = False):
    """Per-pair feature rows for a batch of frames.

    ``coords`` is ``(F, m, n)`` (or a single ``(m, n)``). Returns ``(F, P, w)``
    with pairs in canonical row-major order and ``w = config.pair_width``.
    """
    X = np.asarray(coords, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    F, m, n = X.shape
    metric.signature(n)
    if config.center:
        X = X - column_means(X)[:, None, :]
    if config.linear:
        B = basis_indices(X, n, metric, config.basis)
        Y = np.take_along_axis(X, B[:, :, None], axis=1)
        my = n
    else:
        B = np.broadcast_to(np.arange(m), (F, m))
        Y = X
        my = m
    self_mask = np.arange(m)[None, :, None] == B[:, None, :]
    vals, degenerate = _pair_columns(X, Y, metric, config.columns, self_mask)
    parts = [vals]
    if config.node_index:
        idx = np.broadcast_to(np.arange(m, dtype=float)[None, :, None, None], (F, m, my, 1))
        parts.append(idx)
    if config.include_types:
        if types is None:
            raise ValueError("include_types requires type labels")
        T = np.asarray(types, dtype=float)
        if single or T.ndim == 1:
            T = np.broadcast_to(T.reshape(-1, m), (F, m))
        ti = np.broadcast_to(T[:, :, None, None], (F, m, my, 1))
        tj = np.broadcast_to(np.take_along_axis(T, B, axis=1)[:, None, :, None], (F, m, my, 1))
        parts += [ti, tj]
    table = np.concatenate(parts, axis=-1).reshape(F, m * my, config.pair_width)
    deg = degenerate.reshape(F, m * my)
    if deg.any() and not return_degenerate:
        warnings.warn("zero-norm operand in cos/sin feature; set to 0", DegenerateFeatureWarning, stacklevel=2)
    if single:
        table, deg = table[0], deg[0]
    return (table, deg) if return_degenerate else table


def featurize_batch(coords, config: FeatureConfig, metric: Metric = Metric(), types=None,
                    return_degenerate: bool = False):
    """Flattened invariant feature vectors, one row per frame."""
    out = pair_table(coords, config, metric, types, return_degenerate=True)
    table, deg = out
    flat = table.reshape(table.shape[:-2] + (-1,))
    if return_degenerate:
        return flat, deg.any(axis=-1)
    if deg.any():
        warnings.warn("zero-norm operand in cos/sin feature; set to 0", DegenerateFeatureWarning, stacklevel=2)
    return flat


def featurize(frame, config: FeatureConfig, metric: Metric = Metric()) -> np.ndarray:
    frame = _as_frame(frame)
    return featurize_batch(frame.coords, config, metric, types=frame.types)


def pinv(A: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse by SVD; singular values below ``rtol * s_max`` are dropped."""
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("pinv input must be finite")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0:
        return np.zeros(A.T.shape)
    keep = s > rtol * s[0]
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (Vt.T * inv) @ U.T


def reconstruct_gram(XYt, YYt) -> np.ndarray:
    """Recover ``X X^T`` from projections on ``Y``: ``XY^T (YY^T)^+ YX^T``."""
    XYt = np.asarray(XYt, dtype=float)
    YYt = np.asarray(YYt, dtype=float)
    if not (np.all(np.isfinite(XYt)) and np.all(np.isfinite(YYt))):
        raise ValueError("reconstruct_gram inputs must be finite")
    if not np.allclose(YYt, YYt.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(YYt).max(initial=0.0))):
        raise ValueError("YY^T must be symmetric")
    return XYt @ pinv(YYt) @ XYt.T


# ---------------------------------------------------------------------------
# traced featurization, for gradients with respect to coordinates


def _t_signed_sqrt(tape: Tape, q):
    v = q.value if isinstance(q, Node) else float(q)
    if v >= 0.0:
        return tape.sqrt(q)
    return -tape.sqrt(-q)


def trace_pair_table(tape: Tape, coords: list, m: int, n: int, config: FeatureConfig,
                     metric: Metric = Metric(), types=None) -> list[list]:
    """Same values as :func:`pair_table` for one frame, recorded on ``tape``.

    ``coords`` is a flat row-major list of ``m*n`` nodes (or numbers). Returns
    one list of per-pair scalars per pair, in canonical order.
    """
    L = metric.signature(n)
    rows = [list(coords[i * n:(i + 1) * n]) for i in range(m)]
    if config.linear:
        # the basis choice is piecewise constant, so it is made on plain values
        vals = np.array([[c.value if isinstance(c, Node) else float(c) for c in r] for r in rows])[None]
        if config.center:
            vals = vals - column_means(vals)[:, None, :]
        basis = [int(b) for b in basis_indices(vals, n, metric, config.basis)[0]]
    else:
        basis = list(range(m))
    if config.center:
        w = [1.0 / m] * m
        means = [tape.dot([rows[i][d] for i in range(m)], w) for d in range(n)]
        rows = [[r[d] - means[d] for d in range(n)] for r in rows]
    diag = metric.diagonal(n)
    # metric-weighted copies, so every inner product is a single dot
    if diag is None:
        lrows = [[tape.dot(r, list(L[d])) for d in range(n)] for r in rows]
    else:
        lrows = [[r[d] if diag[d] == 1.0 else diag[d] * r[d] for d in range(n)] for r in rows]
    my = len(basis)
    cols = config.columns
    q = [tape.dot(rows[i], lrows[i]) for i in range(m)]
    norms = [_t_signed_sqrt(tape, qi) for qi in q]
    absq = [qi if qi.value >= 0.0 else -qi for qi in q]
    type_vals = None if types is None else [float(t) for t in np.ravel(types)]
    table = []
    for i in range(m):
        for j in basis:
            same = i == j
            ip = q[i] if same else tape.dot(rows[i], lrows[j])
            feats = []
            need_outer = "outer" in cols or "sin" in cols
            if need_outer:
                if same:
                    outer = 0.0
                elif metric.kind == "euclidean":
                    minors = [rows[i][a] * rows[j][b] - rows[i][b] * rows[j][a]
                              for a in range(n) for b in range(a + 1, n)]
                    outer = tape.sqrt(tape.dot(minors, minors)) if minors else 0.0
                else:
                    outer = tape.sqrt(tape.max0(absq[i] * absq[j] - ip * ip))
            if "n1_x" in cols:
                feats += [norms[i], norms[j]]
            if "n12" in cols:
                if same:
                    feats.append(0.0)
                else:
                    diff = [rows[i][d] - rows[j][d] for d in range(n)]
                    if diag is None:
                        ldiff = [tape.dot(diff, list(L[d])) for d in range(n)]
                    else:
                        ldiff = [diff[d] if diag[d] == 1.0 else diag[d] * diff[d] for d in range(n)]
                    feats.append(_t_signed_sqrt(tape, tape.dot(diff, ldiff)))
            if "inner" in cols:
                feats.append(ip)
            if "outer" in cols:
                feats.append(outer)
            if "cos" in cols or "sin" in cols:
                denom = norms[i] * norms[j]
                if denom.value == 0.0:
                    raise DegenerateFeatureError(f"zero-norm operand in pair ({i}, {j})")
                if "cos" in cols:
                    feats.append(ip / denom)
                if "sin" in cols:
                    feats.append(outer / denom if isinstance(outer, Node) else 0.0)
            if config.node_index:
                feats.append(float(i))
            if config.include_types:
                if type_vals is None:
                    raise ValueError("include_types requires type labels")
                feats += [type_vals[i], type_vals[j]]
            table.append(feats)
    return table


def trace_featurize(tape: Tape, coords: list, m: int, n: int, config: FeatureConfig,
                    metric: Metric = Metric(), types=None) -> list:
    return [v for row in trace_pair_table(tape, coords, m, n, config, metric, types) for v in row]


def trace_gram(tape: Tape, coords: list, m: int, n: int, metric: Metric = Metric()) -> list[list]:
    L = metric.signature(n)
    rows = [list(coords[i * n:(i + 1) * n]) for i in range(m)]
    lrows = [[tape.dot(r, list(L[d])) for d in range(n)] for r in rows]
    return [[tape.dot(rows[i], lrows[j]) for j in range(m)] for i in range(m)]

