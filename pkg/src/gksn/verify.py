"""Numerical checks of the invariance identities and of model symmetry.

Every check returns a :class:`VerifyReport` that is reproducible from its
check name, dims and seed. Negative controls carry ``expect_pass=False``; a
report is *ok* when its outcome matches that expectation.
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .invariants import FeatureConfig, Frame, Metric, basis_subset, gram, pinv, reconstruct_gram
from .network import Model, build_model, forces

ALGEBRA_TOL = 1e-8
MODEL_TOL = 1e-6
FORCE_TOL = 1e-5
BOOST_TOL = 1e-10
MAX_RAPIDITY = 2.0


@dataclass
class VerifyReport:
    check: str
    residual: float
    tolerance: float
    passed: bool
    seed: int
    dims: dict
    expect_pass: bool = True
    details: dict = field(default_factory=dict)

    @classmethod
    def make(cls, check, residual, tolerance, seed, dims, expect_pass=True, **details) -> "VerifyReport":
        residual = float(residual)
        return cls(check, residual, tolerance, bool(residual <= tolerance), seed, dims, expect_pass, details)

    @property
    def ok(self) -> bool:
        return self.passed == self.expect_pass

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no inf/nan
        if not math.isfinite(self.residual):
            d["residual"] = repr(self.residual)
        return d


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.linalg.norm(b)
    diff = np.linalg.norm(a - b)
    return float(diff / scale) if scale > 0 else float(diff)


# --- group elements ------------------------------------------------------------


def random_orthogonal(n: int, seed=None) -> np.ndarray:
    """Left singular factor of a standard normal matrix."""
    if n < 1:
        raise ValueError("n must be positive")
    return np.linalg.svd(_rng(seed).standard_normal((n, n)))[0]


def boost_matrix(n: int, rapidity: float, axis) -> np.ndarray:
    """Pure boost along a unit spatial ``axis`` (length n-1)."""
    u = np.asarray(axis, dtype=float)
    ch, sh = math.cosh(rapidity), math.sinh(rapidity)
    L = np.eye(n)
    L[0, 0] = ch
    L[0, 1:] = sh * u
    L[1:, 0] = sh * u
    L[1:, 1:] += (ch - 1.0) * np.outer(u, u)
    return L


def random_boost(n: int, rapidity: float, seed=None) -> np.ndarray:
    """Boost along a random spatial axis composed with a random proper spatial rotation."""
    if abs(rapidity) > MAX_RAPIDITY:
        raise ValueError(f"|rapidity| must be <= {MAX_RAPIDITY}")
    if n < 1:
        raise ValueError("n must be positive")
    if n == 1:
        if rapidity != 0:
            raise ValueError("a 1-dimensional Minkowski space has no boosts")
        return np.eye(1)
    rng = _rng(seed)
    u = rng.standard_normal(n - 1)
    u /= np.linalg.norm(u)
    R = np.eye(n)
    Q = random_orthogonal(n - 1, rng)
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    R[1:, 1:] = Q
    return boost_matrix(n, rapidity, u) @ R


def basis_stabilizer(config: FeatureConfig, m: int, n: int):
    """Permutations of the points that map the model's pair set onto itself."""
    if not config.linear or config.basis == "ranked":
        yield from itertools.permutations(range(m))
        return
    for head in itertools.permutations(range(n)):
        for tail in itertools.permutations(range(n, m)):
            yield head + tail


# --- algebraic identities ----------------------------------------------------------


def verify_lemma_a14(m: int, n: int, k: int, seed=0, Y=None, X=None) -> VerifyReport:
    """Relative residual of recovering ``XX^T`` from ``XY^T`` and ``YY^T``."""
    if k < n:
        raise ValueError("need k >= n")
    rng = _rng(seed)
    X = rng.standard_normal((m, n)) if X is None else np.asarray(X, dtype=float)
    Y = rng.standard_normal((k, n)) if Y is None else np.asarray(Y, dtype=float)
    G = X @ X.T
    R = reconstruct_gram(X @ Y.T, Y @ Y.T)
    return VerifyReport.make("lemma-a14", _rel(R, G), ALGEBRA_TOL, _seed(seed), {"m": m, "n": n, "k": k},
                             rank_Y=int(np.linalg.matrix_rank(Y)),
                             absolute=float(np.linalg.norm(R - G)))


def rank_deficient_control(m: int, n: int, k: int, seed=0) -> VerifyReport:
    """Lemma check with duplicated rows in Y; must fail."""
    if n < 2 or k < n:
        raise ValueError("the rank-deficient control needs n >= 2 and k >= n")
    rng = _rng(seed)
    X = rng.standard_normal((m, n))
    rows = rng.standard_normal((n - 1, n))
    Y = rows[np.arange(k) % (n - 1)]
    r = verify_lemma_a14(m, n, k, seed, Y=Y, X=X)
    r.check = "control-rank-deficient"
    r.expect_pass = False
    return r


def verify_rotation_listing(m: int, n: int, seed=0, rotation=None) -> VerifyReport:
    """Gram, feature-gram and basis features before and after an orthogonal map."""
    if m < n:
        raise ValueError("need m >= n")
    rng = _rng(seed)
    X1 = rng.standard_normal((m, n))
    R = random_orthogonal(n, rng) if rotation is None else np.asarray(rotation, dtype=float)
    X2 = X1 @ R
    Z1 = X1 @ basis_subset(X1, n).T
    Z2 = X2 @ basis_subset(X2, n).T
    res = {"C": _rel(gram(X2), gram(X1)), "D": _rel(Z2 @ Z2.T, Z1 @ Z1.T), "Z": _rel(Z2, Z1)}
    return VerifyReport.make("rotation-listing", max(res.values()), ALGEBRA_TOL, _seed(seed), {"m": m, "n": n},
                             basis_rank=int(np.linalg.matrix_rank(X1[:n])), **res)


def verify_boost_metric(n: int, rapidity: float, seed=0) -> VerifyReport:
    """``L^T eta L = eta`` for a random boost."""
    L = random_boost(n, rapidity, seed)
    eta = Metric.minkowski().signature(n)
    return VerifyReport.make("boost-metric", np.abs(L.T @ eta @ L - eta).max(), BOOST_TOL, _seed(seed),
                             {"n": n}, rapidity=rapidity)


def verify_boost_gram(m: int, n: int, rapidity: float, seed=0) -> VerifyReport:
    """Minkowski gram of random points before and after a boost."""
    rng = _rng(seed)
    X = rng.standard_normal((m, n))
    L = random_boost(n, rapidity, rng)
    mk = Metric.minkowski()
    return VerifyReport.make("boost-gram", _rel(gram(X @ L.T, mk), gram(X, mk)), MODEL_TOL, _seed(seed),
                             {"m": m, "n": n}, rapidity=rapidity)


def _seed(seed) -> int | None:
    return int(seed) if isinstance(seed, (int, np.integer)) else None


# --- model-level checks ------------------------------------------------------------


def _group_element(group: str, n: int, rng):
    if group == "orthogonal":
        return random_orthogonal(n, rng).T
    if group == "lorentz":
        return random_boost(n, float(rng.uniform(-MAX_RAPIDITY, MAX_RAPIDITY)), rng)
    raise ValueError(f"unknown group {group!r}")


def invariance_residual(energy, m: int, n: int, group: str, trials: int, rng, config: FeatureConfig = None,
                        translate: bool = True) -> float:
    """Max of ``|E(gX) - E(X)| / (1 + |E(X)|)`` over sampled frames and group elements.

    ``energy(coords) -> float``. For ``group="permutation"`` every permutation in
    the stabilizer of the pair set is tried on each frame.
    """
    worst = 0.0
    for _ in range(trials):
        X = rng.standard_normal((m, n))
        e0 = energy(X)
        if group == "permutation":
            cands = [X[list(p)] for p in basis_stabilizer(config, m, n)]
        else:
            A = _group_element(group, n, rng)
            Y = X @ A.T
            if translate:
                Y = Y + rng.standard_normal(n)
            cands = [Y]
        for Y in cands:
            worst = max(worst, abs(energy(Y) - e0) / (1.0 + abs(e0)))
    return worst


def _model_dims(model: Model, m, n):
    return {"m": m, "n": n, "kind": model.kind, "perm": model.perm, "flags": model.feature_config.flags(),
            "metric": model.metric.kind}


def verify_model_invariance(model: Model, m: int, n: int, group: str = None, trials: int = 100,
                            seed=0, translate: bool = None) -> VerifyReport:
    """Energy invariance of ``model`` under its metric's group, or under point permutations.

    Frames are evaluated one per call so permuted inputs see identical arithmetic.
    """
    if group is None:
        group = "lorentz" if model.metric.kind == "minkowski" else "orthogonal"
    if group == "permutation" and not model.perm:
        raise ValueError("permutation invariance applies to pooled models only")
    if translate is None:
        translate = model.feature_config.center
    rng = _rng(seed)
    res = invariance_residual(lambda X: model.energy(X), m, n, group, trials, rng, model.feature_config, translate)
    tol = 0.0 if group == "permutation" else MODEL_TOL
    return VerifyReport.make(f"model-invariance-{group}", res, tol, _seed(seed), _model_dims(model, m, n),
                             trials=trials)


class RawCoordinateModel:
    """A model whose input also contains the raw coordinates; not invariant by construction."""

    def __init__(self, model: Model, m: int, n: int, rng):
        self.model = model
        self.w = rng.standard_normal(m * n)

    def energy(self, X) -> float:
        return self.model.energy(X) + float(np.tanh(np.asarray(X, dtype=float).ravel() @ self.w))


def broken_featurization_control(m: int = 4, n: int = 3, trials: int = 5, seed=0) -> VerifyReport:
    """Invariance check on a symmetry-breaking model; must fail."""
    rng = _rng(seed)
    model = build_model("kan", FeatureConfig(), m, n, rng=rng)
    broken = RawCoordinateModel(model, m, n, rng)
    res = invariance_residual(broken.energy, m, n, "orthogonal", trials, rng)
    return VerifyReport.make("control-broken-featurization", res, MODEL_TOL, _seed(seed), {"m": m, "n": n},
                             expect_pass=False, trials=trials)


def finite_difference_forces(model: Model, X, step: float = 1e-6) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    F = np.empty_like(X)
    for idx in np.ndindex(*X.shape):
        P = X.copy()
        P[idx] += step
        M = X.copy()
        M[idx] -= step
        F[idx] = -(model.energy(P) - model.energy(M)) / (2 * step)
    return F


def verify_force_equivariance(model: Model, m: int, n: int, trials: int = 50, seed=0) -> VerifyReport:
    """``forces(X Q^T) = forces(X) Q^T`` for orthogonal ``Q``."""
    rng = _rng(seed)
    worst = 0.0
    for _ in range(trials):
        X = rng.standard_normal((m, n))
        Q = random_orthogonal(n, rng)
        F = forces(model, Frame(X))
        G = forces(model, Frame(X @ Q.T))
        scale = max(np.linalg.norm(F), 1e-12)
        worst = max(worst, float(np.linalg.norm(G - F @ Q.T) / scale) if np.any(F) or np.any(G) else 0.0)
    return VerifyReport.make("force-equivariance", worst, FORCE_TOL, _seed(seed), _model_dims(model, m, n),
                             trials=trials)


# --- suite -----------------------------------------------------------------------

FAMILIES = ("lemma-a14", "rotation-listing", "boost-metric", "boost-gram", "model-invariance-orthogonal",
            "model-invariance-lorentz", "model-invariance-permutation", "force-equivariance")
CONTROLS = ("control-rank-deficient", "control-broken-featurization")


def _random_model(rng, m, n, metric=Metric(), perm=None):
    kind = "kan" if rng.random() < 0.5 else "mlp"
    if perm is None:
        perm = bool(rng.random() < 0.5)
    node_index = False if perm else bool(rng.random() < 0.5)
    cfg = FeatureConfig(node_index=node_index, linear=bool(rng.random() < 0.5))
    return build_model(kind, cfg, m, n, perm=perm, metric=metric, rng=rng)


def run_check(name: str, seed: int, dims: dict | None = None, trials: int = 1) -> VerifyReport:
    """Run one family at ``seed``; dims default to a seeded random draw."""
    if name not in FAMILIES + CONTROLS:
        raise ValueError(f"unknown check {name!r}; choose from {FAMILIES + CONTROLS}")
    rng = np.random.default_rng([seed, FAMILIES.index(name) if name in FAMILIES else 100 + CONTROLS.index(name)])
    d = dict(dims or {})
    n = d.get("n") or int(rng.integers(2, 7))
    m = d.get("m") or int(rng.integers(n, 21))
    if name == "lemma-a14":
        return verify_lemma_a14(m, n, d.get("k") or int(rng.integers(n, n + 4)), seed)
    if name == "rotation-listing":
        return verify_rotation_listing(m, n, seed)
    if name == "boost-metric":
        return verify_boost_metric(n, float(rng.uniform(-MAX_RAPIDITY, MAX_RAPIDITY)), seed)
    if name == "boost-gram":
        return verify_boost_gram(m, n, float(rng.uniform(-MAX_RAPIDITY, MAX_RAPIDITY)), seed)
    if name == "control-rank-deficient":
        return rank_deficient_control(m, n, d.get("k") or int(rng.integers(n, n + 4)), seed)
    # model checks use small frames to stay fast
    n = d.get("n") or int(rng.integers(2, 4))
    m = d.get("m") or int(rng.integers(n + 1, 6))
    if name == "control-broken-featurization":
        return broken_featurization_control(m, n, max(trials, 2), seed)
    if name == "model-invariance-orthogonal":
        return verify_model_invariance(_random_model(rng, m, n), m, n, "orthogonal", trials, seed)
    if name == "model-invariance-lorentz":
        return verify_model_invariance(_random_model(rng, m, n, Metric.minkowski()), m, n, "lorentz", trials, seed)
    if name == "model-invariance-permutation":
        return verify_model_invariance(_random_model(rng, 4, 2, perm=True), 4, 2, "permutation", trials, seed)
    return verify_force_equivariance(_random_model(rng, m, n), m, n, trials, seed)


def run_suite(seeds: int = 10, checks=None, controls: bool = True, trials: int = 1) -> list[VerifyReport]:
    names = list(checks) if checks else list(FAMILIES)
    if controls and not checks:
        names += list(CONTROLS)
    return [run_check(name, s, trials=trials) for name in names for s in range(seeds)]


def summarize(reports) -> dict:
    out = {}
    for r in reports:
        s = out.setdefault(r.check, {"count": 0, "ok": 0, "max_residual": 0.0, "expect_pass": r.expect_pass})
        s["count"] += 1
        s["ok"] += int(r.ok)
        if math.isfinite(r.residual):
            s["max_residual"] = max(s["max_residual"], r.residual)
    return out


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1)


def listing_reference(seed: int = 42) -> dict:
    """Absolute residuals of the two reference validation scripts, rerun with the legacy global-seed stream."""
    rs = np.random.RandomState(seed)
    m, n = 5, 3
    X = rs.randn(m, n)
    C1, Z1 = X @ X.T, X @ X[:n].T
    D1 = Z1 @ Z1.T
    R = np.linalg.svd(rs.randn(n, n))[0]
    X = X @ R
    C2, Z2 = X @ X.T, X @ X[:n].T
    D2 = Z2 @ Z2.T
    rs = np.random.RandomState(seed)
    m, n = 15, 3
    X, Y = rs.randn(m, n), rs.randn(n + 2, n)
    lemma = np.linalg.norm(X @ Y.T @ pinv(Y @ Y.T) @ Y @ X.T - X @ X.T)
    return {"C": float(np.linalg.norm(C1 - C2)), "D": float(np.linalg.norm(D1 - D2)),
            "Z": float(np.linalg.norm(Z1 - Z2)), "lemma": float(lemma)}


def timed_suite(seeds: int = 10, **kw):
    t0 = time.perf_counter()
    reports = run_suite(seeds, **kw)
    return reports, time.perf_counter() - t0
