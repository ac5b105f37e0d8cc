import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gksn.diffengine import KinkCollision, Tape, grad_check
from gksn.invariants import FeatureConfig, Frame, Metric, featurize
from gksn.network import (DenseLayer, FunctionGrid, GksnLayer, Model, PermPool, UnivariateFunction, build_model,
                          default_knots, forces, gksn_forward, load_checkpoint, load_model, model_forward,
                          model_from_dict, model_to_dict, param_count, param_gradient, pooled_features, save_model,
                          trace_model, univariate_eval, zero_model)
from gksn.verify import finite_difference_forces

from .helpers import orthogonal, reference_forward

KNOTS = default_knots()


def test_univariate_examples():
    assert univariate_eval(UnivariateFunction.identity(), 3.7) == 3.7
    relu = UnivariateFunction([0.0], [1.0], 0.0)
    assert (relu(-2.0), relu(2.0)) == (0.0, 2.0)
    assert UnivariateFunction([0.0, 1.0], [1.0, -2.0], 0.0)(2.0) == 0.0
    assert UnivariateFunction(KNOTS, np.zeros(8)).n_params == 9
    with pytest.raises(ValueError):
        UnivariateFunction([1.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        UnivariateFunction([], [])


@given(st.lists(st.floats(-2, 2), min_size=8, max_size=8), st.floats(-2, 2), st.integers(0, 6))
def test_univariate_piecewise_linear(coeffs, slope, seg):
    f = UnivariateFunction(KNOTS, coeffs, slope)
    lo, hi = KNOTS[seg], KNOTS[seg + 1]
    x = np.linspace(lo, hi, 7)[1:-1]
    second = f(x[2:]) - 2 * f(x[1:-1]) + f(x[:-2])
    assert np.all(np.abs(second) <= 1e-12 * (1 + np.abs(f(x)).max()))
    # continuity at the knots
    for t in KNOTS:
        assert abs(f(t + 1e-12) - f(t - 1e-12)) <= 1e-10


def test_gksn_forward_examples():
    z = np.array([1.0, 2.0])
    assert np.array_equal(gksn_forward(GksnLayer.zeros(2, 2), z), [0.0, 0.0])
    ident = lambda r, c: FunctionGrid(np.ones((r, c)), np.zeros((r, c, 8)), KNOTS)
    layer = GksnLayer(ident(2, 2), ident(2, 2), np.zeros((2, 2)), np.zeros((2, 2)))
    # knots at -3..3 would be active for z=(1,2); move them out of the way for the "no knots active" case
    far = np.linspace(10, 17, 8)
    layer = GksnLayer(FunctionGrid(np.ones((2, 2)), np.zeros((2, 2, 8)), far),
                      FunctionGrid(np.ones((2, 2)), np.zeros((2, 2, 8)), far), np.zeros((2, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(gksn_forward(layer, z), [6.0, 6.0])
    res = GksnLayer(FunctionGrid.zeros(2, 2, KNOTS), FunctionGrid.zeros(2, 2, KNOTS), np.eye(2), np.eye(2))
    np.testing.assert_array_equal(gksn_forward(res, [-1.0, 2.0]), [0.0, 2.0])
    with pytest.raises(ValueError):
        gksn_forward(res, [1.0, 2.0, 3.0])


def test_residual_path_is_relu_network(rng):
    m, l = 5, 3
    layer = GksnLayer.init(m, l, rng=rng)
    layer.phi = FunctionGrid.zeros(*layer.phi.shape, KNOTS)
    layer.psi = FunctionGrid.zeros(*layer.psi.shape, KNOTS)
    Z = rng.normal(size=(7, m))
    direct = np.maximum(Z @ layer.w_phi.T, 0) @ layer.w_psi.T
    np.testing.assert_allclose(layer.forward(Z)[0], direct, rtol=1e-14, atol=1e-14)


def test_layer_forward_matches_elementwise_double_sum(rng):
    layer = GksnLayer.init(4, 3, k=5, rng=rng)
    z = rng.normal(size=4)
    out = np.zeros(3)
    for i in range(3):
        for k in range(5):
            inner = sum(layer.phi.function(k, j)(z[j]) for j in range(4))
            out[i] += layer.psi.function(i, k)(inner)
        out[i] += sum(layer.w_psi[i, r] * max(0.0, layer.w_phi[r] @ z) for r in range(layer.w_phi.shape[0]))
    np.testing.assert_allclose(gksn_forward(layer, z), out, rtol=1e-12, atol=1e-12)


def test_model_shapes_and_counts():
    cfg = FeatureConfig()
    kan = build_model("kan", cfg, 4, 3)
    assert [l.out_dim for l in kan.layers] == [16, 16, 1] and kan.layers[0].in_dim == 60
    mlp = build_model("mlp", cfg, 4, 3)
    assert [l.out_dim for l in mlp.layers] == [128, 128, 1]
    assert not mlp.layers[-1].activation
    assert param_count(Model("kan", [])) == 0
    counts = {build_model("kan", cfg, m, 3, perm=True).param_count() for m in (4, 10, 15)}
    assert len(counts) == 1
    with pytest.raises(ValueError):
        build_model("kan", FeatureConfig(node_index=True), 4, 3, perm=True)
    with pytest.raises(ValueError):
        build_model("gnn", cfg, 4, 3)
    assert kan.name == "O(n) KAN(F,T)"
    assert build_model("mlp", FeatureConfig(linear=False), 4, 3, perm=True).name == "π O(n) MLP(F,F)"


def test_model_forward_examples(rng):
    cfg = FeatureConfig()
    z = zero_model("kan", cfg, 4, 3)
    assert model_forward(z, rng.normal(size=60)) == 0.0
    single = Model("kan", [GksnLayer.init(60, 1, k=60, rng=rng)], cfg)
    x = rng.normal(size=60)
    assert model_forward(single, x) == gksn_forward(single.layers[0], x)[0]
    with pytest.raises(ValueError):
        model_forward(single, x[:10])


def test_set_get_flat_roundtrip(rng):
    model = build_model("kan", FeatureConfig(), 4, 2, perm=True, rng=rng)
    v = rng.normal(size=model.param_count())
    model.set_flat(v)
    assert np.array_equal(model.get_flat(), v)
    with pytest.raises(ValueError):
        model.set_flat(v[:-1])


# --- pooling ---------------------------------------------------------------------


def test_pooled_features_examples(rng):
    X = rng.normal(size=(4, 3))
    cfg = FeatureConfig(linear=False, center=False, features=("inner",))
    out = pooled_features(X, [UnivariateFunction.identity(np.linspace(50, 57, 8))] * 2, cfg)
    s = X.sum(axis=0)
    np.testing.assert_allclose(out, [s @ s] * 2, rtol=1e-12)
    assert pooled_features(X, [UnivariateFunction(KNOTS, np.zeros(8), 0.0)], cfg).tolist() == [0.0]
    with pytest.raises(ValueError):
        pooled_features(X, [UnivariateFunction.identity()], FeatureConfig(node_index=True))


def test_pooled_features_exact_over_permutations(rng):
    X = rng.normal(size=(3, 2)) * 1.7
    pool = PermPool.init(6, KNOTS, rng, n_terms=5)
    cfg = FeatureConfig(linear=False)
    ref = pooled_features(X, pool, cfg)
    for p in itertools.permutations(range(3)):
        assert np.array_equal(pooled_features(X[list(p)], pool, cfg), ref)


@pytest.mark.parametrize("kind", ["kan", "mlp"])
@pytest.mark.parametrize("linear", [False, True])
def test_perm_model_bit_exact_over_all_permutations(kind, linear, rng):
    model = build_model(kind, FeatureConfig(linear=linear), 4, 3, perm=True, rng=rng)
    X = rng.normal(size=(4, 3))
    model.fit_input_scaler(model.features(rng.normal(size=(20, 4, 3))))
    ref = model.energy(X)
    for p in itertools.permutations(range(4)):
        assert model.energy(X[list(p)]) == ref


# --- gradients -----------------------------------------------------------------------


def _random_input(model, rng, m=4, n=3):
    return model.features(rng.normal(size=(m, n)))


def test_batch_gradients_match_tape(rng):
    for perm in (False, True):
        for kind in ("kan", "mlp"):
            model = build_model(kind, FeatureConfig(), 4, 3, perm=perm, hidden=(5, 4), rng=rng)
            X = model.features(rng.normal(size=(3, 4, 3)))
            y = rng.normal(size=3)
            loss, grads, pred = model.loss_and_grads(X, y, delta=0.3)
            flat = np.concatenate([g.ravel() for g in grads])
            want = np.zeros_like(flat)
            for f in range(3):
                v, g = param_gradient(model, X[f].tolist())
                assert v == pytest.approx(pred[f], rel=1e-12, abs=1e-12)
                e = v - y[f]
                want += (e if abs(e) <= 0.3 else 0.3 * np.sign(e)) * g / 3
            np.testing.assert_allclose(flat, want, rtol=1e-9, atol=1e-12)


def test_gksn_parameter_gradient_finite_differences(rng):
    """All-parameter reverse-mode gradient of a two-layer GKSN vs central differences."""
    cfg = FeatureConfig(features=("inner",))
    model = build_model("kan", cfg, 3, 2, hidden=(4,), rng=rng)
    for _ in range(10):
        x = _random_input(model, rng, 3, 2)
        try:
            err = grad_check(lambda tape, w: trace_model(tape, model, x.tolist(), _split(tape, model, w)),
                             model.get_flat(), numeric=lambda P: reference_forward(model, P, x), vectorized=True)
        except KinkCollision:
            continue
        assert err <= 1e-4
        return
    pytest.fail("every sampled point straddled a kink")


def _split(tape, model, w):
    out, i = [], 0
    for p in model.parameters():
        out.append(w[i:i + p.size])
        i += p.size
    return out


def test_reference_forward_agrees_with_library(rng):
    for perm in (False, True):
        model = build_model("kan", FeatureConfig(), 4, 3, perm=perm, hidden=(6, 5), rng=rng)
        x = _random_input(model, rng)
        np.testing.assert_allclose(reference_forward(model, model.get_flat()[None], x), model.forward(x[None]),
                                   rtol=1e-12, atol=1e-12)


# --- forces ----------------------------------------------------------------------------


def test_zero_model_forces():
    model = zero_model("kan", FeatureConfig(), 4, 3)
    assert np.array_equal(forces(model, Frame(np.random.default_rng(0).normal(size=(4, 3)))), np.zeros((4, 3)))


@pytest.mark.parametrize("kind,perm", [("kan", False), ("mlp", False), ("kan", True)])
def test_forces_match_finite_differences(kind, perm, rng):
    model = build_model(kind, FeatureConfig(node_index=False, linear=not perm), 4, 3, perm=perm, rng=rng)
    X = rng.normal(size=(4, 3))
    F = forces(model, Frame(X))
    Ffd = finite_difference_forces(model, X, step=1e-5)
    assert np.abs(F - Ffd).max() <= 1e-4 * max(1.0, np.abs(F).max())


def test_forces_equivariant(rng):
    model = build_model("kan", FeatureConfig(), 5, 3, rng=rng)
    for _ in range(5):
        X = rng.normal(size=(5, 3))
        Q = orthogonal(rng, 3)
        F = forces(model, Frame(X))
        G = forces(model, Frame(X @ Q.T + rng.normal(size=3)))
        assert np.linalg.norm(G - F @ Q.T) <= 1e-5 * np.linalg.norm(F)


def test_forces_config_mismatch(rng):
    model = build_model("kan", FeatureConfig(), 4, 3, rng=rng)
    with pytest.raises(ValueError):
        forces(model, Frame(rng.normal(size=(4, 3))), config=FeatureConfig(linear=False))
    with pytest.raises(ValueError):
        forces(model, Frame(rng.normal(size=(4, 3))), metric=Metric.minkowski())


# --- checkpoints --------------------------------------------------------------------------


@pytest.mark.parametrize("kind,perm,metric", [("kan", False, Metric()), ("mlp", True, Metric.minkowski()),
                                              ("kan", True, Metric.bilinear(np.diag([2.0, 1.0, 0.5])))])
def test_checkpoint_roundtrip_bit_exact(kind, perm, metric, rng, tmp_path):
    model = build_model(kind, FeatureConfig(linear=False), 4, 3, perm=perm, metric=metric, rng=rng)
    X = model.features(rng.normal(size=(10, 4, 3)))
    model.fit_input_scaler(X)
    model.output_scaler = (-5.123456789012345, 0.1)
    path = tmp_path / "m.json"
    save_model(model, path, {"note": "x"})
    back, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert back.get_flat().tobytes() == model.get_flat().tobytes()
    assert back.forward(X).tobytes() == model.forward(X).tobytes()
    assert back.output_scaler == model.output_scaler and back.name == model.name
    assert load_model(path).metric.to_dict() == metric.to_dict()


def test_checkpoint_rejects_foreign_files(tmp_path):
    with pytest.raises(ValueError):
        model_from_dict({"format": "other"})
    d = model_to_dict(build_model("kan", FeatureConfig(), 4, 3))
    d["version"] = 99
    with pytest.raises(ValueError):
        model_from_dict(d)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"format": "gksn-checkpoint", "version": 1, "kind": "kan", "layers": [{"type": "x"}],
                             "pool": None, "feature_config": FeatureConfig().to_dict(), "metric": {"kind": "euclidean"},
                             "input_mean": None, "input_std": None, "output_scaler": [0, 1]}))
    with pytest.raises(ValueError):
        load_model(p)


def test_perm_linear_model_uses_ranked_basis():
    model = build_model("kan", FeatureConfig(linear=True), 4, 3, perm=True)
    assert model.feature_config.basis == "ranked"
    assert build_model("kan", FeatureConfig(linear=True), 4, 3).feature_config.basis == "index"
