"""GKSN layers, MLP baselines and permutation-pooled models.

Every learnable univariate function is piecewise linear::

    f(x) = slope * x + sum_b coeffs[b] * relu(x - knots[b])

with knots fixed on a uniform grid. A GKSN layer maps ``z`` (width m) to

    out_i = sum_k psi_ik( sum_j phi_kj(z_j) ) + sum_k w_psi[i, k] * relu( sum_j w_phi[k, j] * z_j )

Batch forward/backward passes are vectorized numpy; :func:`trace_model`
records the same computation on a scalar :class:`~gksn.diffengine.Tape`,
which is what :func:`forces` differentiates.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .diffengine import Node, Tape
from .invariants import (DegenerateFeatureError, FeatureConfig, Frame, Metric, pair_table,
                         trace_pair_table)

N_KNOTS = 8
KNOT_RANGE = (-3.0, 3.0)
KAN_HIDDEN = {"small": (16, 16), "medium": (32, 32), "large": (64, 64)}
MLP_HIDDEN = {"small": (128, 128), "medium": (256, 256), "large": (512, 512)}
POOL_WIDTH = 32
CHECKPOINT_FORMAT = "gksn-checkpoint"
CHECKPOINT_VERSION = 1


def default_knots(n_knots: int = N_KNOTS) -> np.ndarray:
    return np.linspace(KNOT_RANGE[0], KNOT_RANGE[1], n_knots)


@dataclass
class UnivariateFunction:
    knots: np.ndarray
    coeffs: np.ndarray
    slope: float = 0.0

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float).ravel()
        self.coeffs = np.asarray(self.coeffs, dtype=float).ravel()
        if self.knots.size < 1 or self.knots.size != self.coeffs.size:
            raise ValueError("need B >= 1 knots and one coefficient per knot")
        if np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be strictly increasing")

    def __call__(self, x):
        return univariate_eval(self, x)

    @property
    def n_params(self) -> int:
        return self.coeffs.size + 1

    @classmethod
    def identity(cls, knots=None) -> "UnivariateFunction":
        knots = default_knots() if knots is None else knots
        return cls(knots, np.zeros(len(knots)), 1.0)


def univariate_eval(f: UnivariateFunction, x):
    x = np.asarray(x, dtype=float)
    r = np.maximum(x[..., None] - f.knots, 0.0)
    out = f.slope * x
    for b in range(f.knots.size):
        out = out + f.coeffs[b] * r[..., b]
    return out if out.ndim else float(out)


def _relu(x):
    return np.maximum(x, 0.0)


class FunctionGrid:
    """A ``rows x cols`` grid of univariate functions; ``out_r = sum_c f_rc(z_c)``."""

    def __init__(self, slope: np.ndarray, coeffs: np.ndarray, knots: np.ndarray):
        self.slope = np.asarray(slope, dtype=float)
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.knots = np.asarray(knots, dtype=float)
        r, c = self.slope.shape
        if self.coeffs.shape != (r, c, self.knots.size):
            raise ValueError(f"coeffs shape {self.coeffs.shape} != {(r, c, self.knots.size)}")

    @classmethod
    def init(cls, rows, cols, knots, rng, fan_in=None):
        fan_in = cols if fan_in is None else fan_in
        B = len(knots)
        coeffs = rng.normal(0.0, np.sqrt(2.0 / (fan_in * B)), size=(rows, cols, B))
        slope = np.full((rows, cols), 1.0 / fan_in)
        return cls(slope, coeffs, knots)

    @classmethod
    def zeros(cls, rows, cols, knots):
        return cls(np.zeros((rows, cols)), np.zeros((rows, cols, len(knots))), knots)

    @property
    def shape(self):
        return self.slope.shape

    def function(self, r: int, c: int) -> UnivariateFunction:
        return UnivariateFunction(self.knots, self.coeffs[r, c], float(self.slope[r, c]))

    def params(self):
        return [self.slope, self.coeffs]

    def forward(self, Z):
        N, c = Z.shape
        rows = self.slope.shape[0]
        R = _relu(Z[:, :, None] - self.knots)
        Rf = R.reshape(N, -1)
        out = Z @ self.slope.T + Rf @ self.coeffs.reshape(rows, -1).T
        return out, (Z, R)

    def backward(self, cache, dout):
        Z, R = cache
        N = Z.shape[0]
        rows = self.slope.shape[0]
        Rf = R.reshape(N, -1)
        dslope = dout.T @ Z
        dcoeffs = (dout.T @ Rf).reshape(self.coeffs.shape)
        back = (dout @ self.coeffs.reshape(rows, -1)).reshape(R.shape)
        dZ = dout @ self.slope + (back * (R > 0)).sum(axis=-1)
        return dZ, [dslope, dcoeffs]

    def trace(self, tape: Tape, z: list, pnodes=None) -> list:
        rows, cols = self.slope.shape
        B = self.knots.size
        basis = []
        for j in range(cols):
            basis.append(z[j])
            zj = z[j]
            for t in self.knots:
                basis.append(tape.relu(zj - float(t)) if isinstance(zj, Node) else max(0.0, zj - float(t)))
        if pnodes is None:
            P = np.concatenate([self.slope[:, :, None], self.coeffs], axis=2).reshape(rows, -1)
            return [tape.dot(basis, P[r].tolist()) for r in range(rows)]
        slope_n, coeff_n = pnodes
        out = []
        for r in range(rows):
            w = []
            for j in range(cols):
                w.append(slope_n[r * cols + j])
                w.extend(coeff_n[(r * cols + j) * B:(r * cols + j + 1) * B])
            out.append(tape.dot(basis, w))
        return out


class GksnLayer:
    """KST term ``Psi o Phi`` plus a one-hidden-layer rectified-linear residual path."""

    kind = "gksn"

    def __init__(self, phi: FunctionGrid, psi: FunctionGrid, w_phi: np.ndarray, w_psi: np.ndarray):
        self.phi, self.psi = phi, psi
        self.w_phi = np.asarray(w_phi, dtype=float)
        self.w_psi = np.asarray(w_psi, dtype=float)
        k, m = phi.shape
        l, k2 = psi.shape
        if k2 != k or self.w_phi.shape[1] != m or self.w_psi.shape != (l, self.w_phi.shape[0]):
            raise ValueError("inconsistent GKSN layer dimensions")

    @classmethod
    def init(cls, m, l, k=None, knots=None, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        knots = default_knots() if knots is None else knots
        k = l if k is None else k
        kr = l  # residual width equals output width
        phi = FunctionGrid.init(k, m, knots, rng)
        psi = FunctionGrid.init(l, k, knots, rng)
        w_phi = rng.normal(0.0, np.sqrt(2.0 / m), size=(kr, m))
        w_psi = rng.normal(0.0, np.sqrt(2.0 / kr), size=(l, kr))
        return cls(phi, psi, w_phi, w_psi)

    @classmethod
    def zeros(cls, m, l, k=None, knots=None):
        knots = default_knots() if knots is None else knots
        k = l if k is None else k
        return cls(FunctionGrid.zeros(k, m, knots), FunctionGrid.zeros(l, k, knots),
                   np.zeros((l, m)), np.zeros((l, l)))

    @property
    def in_dim(self):
        return self.phi.shape[1]

    @property
    def out_dim(self):
        return self.psi.shape[0]

    def params(self):
        return self.phi.params() + self.psi.params() + [self.w_phi, self.w_psi]

    def forward(self, Z):
        S, c_phi = self.phi.forward(Z)
        K, c_psi = self.psi.forward(S)
        H = Z @ self.w_phi.T
        A = _relu(H)
        return K + A @ self.w_psi.T, (Z, c_phi, c_psi, H, A)

    def backward(self, cache, dout):
        Z, c_phi, c_psi, H, A = cache
        dS, g_psi = self.psi.backward(c_psi, dout)
        dZ, g_phi = self.phi.backward(c_phi, dS)
        dw_psi = dout.T @ A
        dH = (dout @ self.w_psi) * (H > 0)
        dw_phi = dH.T @ Z
        dZ = dZ + dH @ self.w_phi
        return dZ, g_phi + g_psi + [dw_phi, dw_psi]

    def trace(self, tape, z, pnodes=None):
        if pnodes is None:
            s = self.phi.trace(tape, z)
            kst = self.psi.trace(tape, s)
            h = [tape.relu(tape.dot(z, row.tolist())) for row in self.w_phi]
            res = [tape.dot(h, row.tolist()) for row in self.w_psi]
        else:
            s = self.phi.trace(tape, z, pnodes[0:2])
            kst = self.psi.trace(tape, s, pnodes[2:4])
            wphi, wpsi = pnodes[4], pnodes[5]
            kr, m = self.w_phi.shape
            h = [tape.relu(tape.dot(z, wphi[r * m:(r + 1) * m])) for r in range(kr)]
            res = [tape.dot(h, wpsi[i * kr:(i + 1) * kr]) for i in range(self.w_psi.shape[0])]
        return [a + b for a, b in zip(kst, res)]


class DenseLayer:
    kind = "dense"

    def __init__(self, W, b, activation: bool = True):
        self.W = np.asarray(W, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.activation = activation

    @classmethod
    def init(cls, m, l, activation=True, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        return cls(rng.normal(0.0, np.sqrt(2.0 / m), size=(l, m)), np.zeros(l), activation)

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    def params(self):
        return [self.W, self.b]

    def forward(self, Z):
        H = Z @ self.W.T + self.b
        return (_relu(H) if self.activation else H), (Z, H)

    def backward(self, cache, dout):
        Z, H = cache
        dH = dout * (H > 0) if self.activation else dout
        return dH @ self.W, [dH.T @ Z, dH.sum(axis=0)]

    def trace(self, tape, z, pnodes=None):
        l, m = self.W.shape
        if pnodes is None:
            H = [tape.dot(z, self.W[i].tolist()) + float(self.b[i]) for i in range(l)]
        else:
            Wn, bn = pnodes
            H = [tape.dot(z, Wn[i * m:(i + 1) * m]) + bn[i] for i in range(l)]
        return [tape.relu(h) for h in H] if self.activation else H


class PermPool:
    """Shared bank of M univariate functions summed over every per-pair scalar.

    ``out_q = sum_{pairs p} sum_{channels c} f_q(s_pc)``. Scalars are sorted
    before summation so the result does not depend on point ordering.
    """

    def __init__(self, slope, coeffs, knots):
        self.slope = np.asarray(slope, dtype=float)
        self.coeffs = np.asarray(coeffs, dtype=float)
        self.knots = np.asarray(knots, dtype=float)

    @classmethod
    def init(cls, width, knots, rng, n_terms=1):
        B = len(knots)
        return cls(np.full(width, 1.0 / n_terms),
                   rng.normal(0.0, np.sqrt(2.0 / (n_terms * B)), size=(width, B)), knots)

    @property
    def width(self):
        return self.slope.size

    def functions(self) -> list[UnivariateFunction]:
        return [UnivariateFunction(self.knots, self.coeffs[q], float(self.slope[q])) for q in range(self.width)]

    def params(self):
        return [self.slope, self.coeffs]

    def forward(self, T):
        N = T.shape[0]
        V = np.sort(T.reshape(N, -1), axis=1)
        vsum = V.sum(axis=1)
        rsum = _relu(V[:, :, None] - self.knots).sum(axis=1)
        out = vsum[:, None] * self.slope
        for b in range(self.knots.size):
            out = out + rsum[:, b, None] * self.coeffs[:, b]
        return out, (vsum, rsum)

    def backward(self, cache, dout):
        vsum, rsum = cache
        return None, [dout.T @ vsum, dout.T @ rsum]

    def trace(self, tape, values: list, pnodes=None):
        order = sorted(range(len(values)), key=lambda i: _val(values[i]))
        vals = [values[i] for i in order]
        vsum = _tsum(tape, vals)
        rsums = []
        for t in self.knots:
            terms = [tape.relu(v - float(t)) if isinstance(v, Node) else max(0.0, v - float(t)) for v in vals]
            rsums.append(_tsum(tape, terms))
        basis = [vsum] + rsums
        B = self.knots.size
        if pnodes is None:
            P = np.concatenate([self.slope[:, None], self.coeffs], axis=1)
            return [tape.dot(basis, P[q].tolist()) for q in range(self.width)]
        sn, cn = pnodes
        return [tape.dot(basis, [sn[q]] + cn[q * B:(q + 1) * B]) for q in range(self.width)]


def _val(x):
    return x.value if isinstance(x, Node) else float(x)


def _tsum(tape, xs):
    if any(isinstance(x, Node) for x in xs):
        return tape.sum(xs)
    return float(sum(xs))


def pooled_features(frame, bank, config: FeatureConfig, metric: Metric = Metric()) -> np.ndarray:
    """Permutation-invariant summary: per bank function, the sum over all pairs and scalars."""
    if config.node_index:
        raise ValueError("node index breaks permutation invariance; pooled features need node_index=False")
    if config.linear:
        config = replace(config, basis="ranked")
    frame = frame if isinstance(frame, Frame) else Frame(frame)
    if isinstance(bank, PermPool):
        pool = bank
    else:
        bank = list(bank)
        pool = PermPool([f.slope for f in bank], np.stack([f.coeffs for f in bank]), bank[0].knots)
    T = pair_table(frame.coords, config, metric, types=frame.types)
    return pool.forward(T[None])[0][0]


@dataclass
class Model:
    kind: str
    layers: list
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    metric: Metric = field(default_factory=Metric)
    pool: Optional[PermPool] = None
    input_mean: Optional[np.ndarray] = None
    input_std: Optional[np.ndarray] = None
    output_scaler: tuple = (0.0, 1.0)

    @property
    def perm(self) -> bool:
        return self.pool is not None

    @property
    def name(self) -> str:
        prefix = "π O(n)" if self.perm else "O(n)"
        return f"{prefix} {self.kind.upper()}{self.feature_config.flags()}"

    def parameters(self) -> list[np.ndarray]:
        ps = self.pool.params() if self.pool is not None else []
        for layer in self.layers:
            ps += layer.params()
        return ps

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def get_flat(self) -> np.ndarray:
        ps = self.parameters()
        return np.concatenate([p.ravel() for p in ps]) if ps else np.zeros(0)

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        i = 0
        for p in self.parameters():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size
        if i != vec.size:
            raise ValueError(f"expected {i} parameters, got {vec.size}")

    # --- input handling -------------------------------------------------

    def features(self, coords, types=None) -> np.ndarray:
        """Model input for a batch of frames: flat vectors, or pair tables when pooled."""
        T = pair_table(coords, self.feature_config, self.metric, types=types)
        if self.perm:
            return T
        return T.reshape(T.shape[:-2] + (-1,))

    def fit_input_scaler(self, X) -> None:
        X = np.asarray(X, dtype=float)
        axes = (0, 1) if self.perm else (0,)
        mean = X.mean(axis=axes)
        std = X.std(axis=axes)
        self.input_mean = mean
        self.input_std = np.where(std > 1e-12, std, 1.0)

    def _standardize(self, X):
        if self.input_mean is None:
            return X
        return (X - self.input_mean) / self.input_std

    # --- batch evaluation -----------------------------------------------

    def forward(self, X) -> np.ndarray:
        out, _ = self._forward(np.asarray(X, dtype=float))
        return out

    def _forward(self, X):
        Z = self._standardize(X)
        caches = []
        if self.pool is not None:
            Z, c = self.pool.forward(Z)
            caches.append(c)
        for layer in self.layers:
            Z, c = layer.forward(Z)
            caches.append(c)
        return Z[:, 0], caches

    def loss_and_grads(self, X, y, delta: float = 1.0):
        """Mean Huber loss over the batch and its gradient for every parameter array."""
        pred, caches = self._forward(np.asarray(X, dtype=float))
        err = pred - y
        a = np.abs(err)
        quad = a <= delta
        losses = np.where(quad, 0.5 * err * err, delta * (a - 0.5 * delta))
        N = err.size
        dpred = np.where(quad, err, delta * np.sign(err)) / N
        d = dpred[:, None]
        grads = []
        layer_caches = caches[1:] if self.pool is not None else caches
        for layer, c in zip(reversed(self.layers), reversed(layer_caches)):
            d, g = layer.backward(c, d)
            grads = g + grads
        if self.pool is not None:
            _, g = self.pool.backward(caches[0], d)
            grads = g + grads
        return float(losses.mean()), grads, pred

    def predict(self, coords, types=None) -> np.ndarray:
        return self.forward(self.features(coords, types))

    def energy(self, frame) -> float:
        frame = frame if isinstance(frame, Frame) else Frame(frame)
        return float(self.predict(frame.coords[None], None if frame.types is None else frame.types[None])[0])


# --- construction -----------------------------------------------------------


def _inner_width(m, l):
    # the scalar output layer keeps an inner sum per input
    return l if l > 1 else m


def build_model(kind: str, feature_config: FeatureConfig, m: int, n: int, *, perm: bool = False,
                metric: Metric = Metric(), hidden=None, size: str = "small", pool_width: int = POOL_WIDTH,
                knots=None, rng=None) -> Model:
    """Randomly initialized model for frames of ``m`` points in ``n`` dimensions."""
    rng = np.random.default_rng(0) if rng is None else rng
    knots = default_knots() if knots is None else np.asarray(knots, dtype=float)
    if kind not in ("kan", "mlp"):
        raise ValueError(f"unknown model kind {kind!r}")
    if hidden is None:
        hidden = (KAN_HIDDEN if kind == "kan" else MLP_HIDDEN)[size]
    pool = None
    if perm:
        if feature_config.node_index:
            raise ValueError("permutation-pooled models need node_index=False")
        # a fixed first-n basis would tie the output to the point order
        if feature_config.linear:
            feature_config = replace(feature_config, basis="ranked")
        n_terms = feature_config.input_dim(m, n)
        pool = PermPool.init(pool_width, knots, rng, n_terms=n_terms)
        in_dim = pool_width
    else:
        in_dim = feature_config.input_dim(m, n)
    widths = [in_dim, *hidden, 1]
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if kind == "kan":
            layers.append(GksnLayer.init(a, b, _inner_width(a, b), knots, rng))
        else:
            layers.append(DenseLayer.init(a, b, activation=i < len(widths) - 2, rng=rng))
    return Model(kind, layers, feature_config, metric, pool)


def zero_model(kind: str, feature_config: FeatureConfig, m: int, n: int, **kw) -> Model:
    model = build_model(kind, feature_config, m, n, **kw)
    model.set_flat(np.zeros(model.param_count()))
    return model


def param_count(model: Model) -> int:
    return model.param_count()


def gksn_forward(layer: GksnLayer, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (layer.in_dim,):
        raise ValueError(f"expected input of width {layer.in_dim}, got shape {z.shape}")
    return layer.forward(z[None])[0][0]


def model_forward(model: Model, features) -> float:
    X = np.asarray(features, dtype=float)
    expected = model.input_mean.shape if model.input_mean is not None else None
    if model.perm:
        if X.ndim != 2 or X.shape[1] != model.feature_config.pair_width:
            raise ValueError(f"pooled model expects a (pairs, {model.feature_config.pair_width}) table")
    else:
        width = model.layers[0].in_dim if model.layers else X.size
        if X.ndim != 1 or X.size != width or (expected is not None and expected != X.shape):
            raise ValueError(f"expected a feature vector of length {width}, got shape {X.shape}")
    if not model.layers:
        return 0.0
    return float(model.forward(X[None])[0])


# --- tape evaluation and forces ------------------------------------------------


def param_nodes(tape: Tape, model: Model) -> list[list[Node]]:
    return [tape.leaves(p) for p in model.parameters()]


def trace_model(tape: Tape, model: Model, inputs, pnodes=None):
    """Record the model on ``tape``.

    ``inputs`` is a flat feature list, or for pooled models a list of per-pair
    rows. ``pnodes`` (from :func:`param_nodes`) makes parameters differentiable.
    """
    mean, std = model.input_mean, model.input_std
    pi = 0

    def take(k):
        nonlocal pi
        if pnodes is None:
            return None
        out = pnodes[pi:pi + k]
        pi += k
        return out

    if model.perm:
        vals = []
        for row in inputs:
            for c, v in enumerate(row):
                vals.append(v if mean is None else (v - float(mean[c])) * (1.0 / float(std[c])))
        z = model.pool.trace(tape, vals, take(2))
    else:
        z = list(inputs)
        if mean is not None:
            z = [(v - float(mu)) * (1.0 / float(s)) for v, mu, s in zip(z, mean, std)]
    for layer in model.layers:
        z = layer.trace(tape, z, take(len(layer.params())))
    if not model.layers:
        return 0.0
    return z[0]


def traced_energy(tape: Tape, model: Model, coord_nodes: list, m: int, n: int, types=None):
    table = trace_pair_table(tape, coord_nodes, m, n, model.feature_config, model.metric, types)
    if model.perm:
        return trace_model(tape, model, table)
    return trace_model(tape, model, [v for row in table for v in row])


def forces(model: Model, frame, config: FeatureConfig = None, metric: Metric = None) -> np.ndarray:
    """Negative gradient of the model energy with respect to the coordinates."""
    frame = frame if isinstance(frame, Frame) else Frame(frame)
    if config is not None and config != model.feature_config:
        raise ValueError("feature config does not match the model's")
    if metric is not None and metric != model.metric:
        raise ValueError("metric does not match the model's")
    m, n = frame.coords.shape
    tape = Tape()
    xs = tape.leaves(frame.coords)
    out = traced_energy(tape, model, xs, m, n, frame.types)
    if not isinstance(out, Node):
        return np.zeros((m, n))
    return -tape.backward(out).of(xs).reshape(m, n)


def param_gradient(model: Model, features) -> tuple[float, np.ndarray]:
    """Model output and its gradient with respect to the flat parameter vector, via the tape."""
    tape = Tape()
    pn = param_nodes(tape, model)
    out = trace_model(tape, model, features, pn)
    if not isinstance(out, Node):
        return float(out), np.zeros(model.param_count())
    grads = tape.backward(out)
    return out.value, np.concatenate([grads.of(p) for p in pn]) if pn else np.zeros(0)


# --- checkpoints -------------------------------------------------------------


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def _layer_dict(layer):
    if isinstance(layer, GksnLayer):
        return {"type": "gksn", "knots": _arr(layer.phi.knots),
                "phi_slope": _arr(layer.phi.slope), "phi_coeffs": _arr(layer.phi.coeffs),
                "psi_slope": _arr(layer.psi.slope), "psi_coeffs": _arr(layer.psi.coeffs),
                "w_phi": _arr(layer.w_phi), "w_psi": _arr(layer.w_psi)}
    return {"type": "dense", "W": _arr(layer.W), "b": _arr(layer.b), "activation": layer.activation}


def _layer_from(d):
    A = lambda k: np.array(d[k], dtype=float)  # noqa: E731
    if d["type"] == "gksn":
        knots = A("knots")
        return GksnLayer(FunctionGrid(A("phi_slope"), A("phi_coeffs"), knots),
                         FunctionGrid(A("psi_slope"), A("psi_coeffs"), knots), A("w_phi"), A("w_psi"))
    if d["type"] == "dense":
        return DenseLayer(A("W"), A("b"), bool(d["activation"]))
    raise ValueError(f"unknown layer type {d['type']!r}")


def model_to_dict(model: Model) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "name": model.name,
        "feature_config": model.feature_config.to_dict(),
        "metric": model.metric.to_dict(),
        "pool": None if model.pool is None else {"knots": _arr(model.pool.knots), "slope": _arr(model.pool.slope),
                                                  "coeffs": _arr(model.pool.coeffs)},
        "layers": [_layer_dict(layer) for layer in model.layers],
        "input_mean": None if model.input_mean is None else _arr(model.input_mean),
        "input_std": None if model.input_std is None else _arr(model.input_std),
        "output_scaler": [float(v) for v in model.output_scaler],
    }


def model_from_dict(d: dict) -> Model:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a GKSN checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    pool = None
    if d["pool"] is not None:
        p = d["pool"]
        pool = PermPool(np.array(p["slope"], dtype=float), np.array(p["coeffs"], dtype=float),
                        np.array(p["knots"], dtype=float))
    return Model(
        kind=d["kind"],
        layers=[_layer_from(x) for x in d["layers"]],
        feature_config=FeatureConfig.from_dict(d["feature_config"]),
        metric=Metric.from_dict(d["metric"]),
        pool=pool,
        input_mean=None if d["input_mean"] is None else np.array(d["input_mean"], dtype=float),
        input_std=None if d["input_std"] is None else np.array(d["input_std"], dtype=float),
        output_scaler=tuple(float(v) for v in d["output_scaler"]),
    )


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: Model, path, extra: Optional[dict] = None) -> None:
    """JSON checkpoint; floats are written with ``repr`` so reloading is bit-exact."""
    d = model_to_dict(model)
    if extra:
        d["extra"] = extra
    atomic_write_text(path, json.dumps(d))


def load_model(path) -> Model:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return model_from_dict(d), d.get("extra", {})


def check_frame(model: Model, frame: Frame) -> None:
    """Raise if cos/sin features are degenerate for this frame."""
    _, deg = pair_table(frame.coords, model.feature_config, model.metric, types=frame.types,
                        return_degenerate=True)
    if np.any(deg):
        raise DegenerateFeatureError("frame has zero-norm operands in cos/sin features")
