import json

import numpy as np
import pytest

from pose4d.exceptions import DivergedLoss, NonFinite
from pose4d.geometry import Intrinsics, Pose, look_at
from pose4d.recon import FeatureField, FieldConfig, field_forward, field_train, fuse, grad_check, positional_encode, temporal_embed
from pose4d.recon.field import attention, build_training_set, field_learning_rate, loss_and_grads, encode_inputs
from pose4d.scenesim import make_static_scene, render_sequence
from pose4d.trajectory import TrajectoryParams, generate_trajectory

K = Intrinsics.from_fov(32, 32, 1.0)
POSES = generate_trajectory("orbit", TrajectoryParams(4, look_at([0, -0.3, -2.5], [0, 0, 0])))


def small_field(**kw):
    params = dict(width=8, heads=2, hidden=6, scene_tokens=2, octaves=2, time_dim=4, random_state=3)
    params.update(kw)
    return FeatureField(**params).initialize(POSES)


def batch(rng, n=5):
    X = np.column_stack([rng.uniform(-1, 1, (n, 3)), rng.integers(0, 4, n)])
    return X, rng.random((n, 4))


def test_encoding_origin():
    g = positional_encode(np.zeros(3))
    assert g.shape == (39,)
    np.testing.assert_array_equal(g[:3], 0)
    sines = np.concatenate([g[3 + 6 * k : 6 + 6 * k] for k in range(6)])
    cosines = np.concatenate([g[6 + 6 * k : 9 + 6 * k] for k in range(6)])
    np.testing.assert_array_equal(sines, 0)
    np.testing.assert_array_equal(cosines, 1)


def test_encoding_layout():
    x = np.array([0.1, -0.4, 0.7])
    g = positional_encode(x, octaves=3)
    assert g.shape == (3 + 18,)
    np.testing.assert_allclose(g[3 + 6 * 2 : 6 + 6 * 2], np.sin(4 * np.pi * x))
    np.testing.assert_allclose(g[6 + 6 * 2 : 9 + 6 * 2], np.cos(4 * np.pi * x))


def test_encoding_injective_on_grid():
    ax = np.linspace(-1, 1, 10)
    grid = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    enc = positional_encode(grid)
    keys = {tuple(np.round(r, 9)) for r in enc}
    assert len(keys) == 1000


def test_temporal_embedding():
    h = temporal_embed([0, 3], 12)
    assert h.shape == (2, 16)
    np.testing.assert_array_equal(h[0, 0::2], 0)
    np.testing.assert_array_equal(h[0, 1::2], 1)
    np.testing.assert_allclose(h[1, 0], np.sin(np.pi * 0.25))


def test_parameter_count():
    cfg = FieldConfig()
    assert cfg.in_dim == 39 + 16
    expected = (55 * 32 + 32) + (12 * 32 + 32) + 4 * 32 + 3 * 32 * 32 + (32 * 32 + 32) + (32 * 64 + 64) + (64 * 4 + 4)
    assert cfg.n_params() == expected == 8836


def test_zero_network_outputs_bias():
    f = FeatureField().initialize(POSES, zero=True)
    f.params_["b2"][:] = [0.3, -1.0, 2.0, 0.5]
    out = field_forward(f, [0.2, 0.1, -0.3], 1, POSES[1])
    sig = 1 / (1 + np.exp(-np.array([0.3, -1.0, 2.0])))
    np.testing.assert_allclose(out[:3], sig, atol=1e-15)
    np.testing.assert_allclose(out[3], np.log1p(np.exp(0.5)), atol=1e-15)


def test_attention_single_key_passes_value(rng):
    Q = rng.normal(size=(3, 2, 4))
    Kk = rng.normal(size=(3, 1, 2, 4))
    V = rng.normal(size=(3, 1, 2, 4))
    out, A = attention(Q, Kk, V)
    np.testing.assert_array_equal(A, 1.0)
    np.testing.assert_allclose(out, V[:, 0], atol=0)


def test_scene_token_permutation_invariance(rng):
    f = FeatureField(random_state=1).initialize(POSES)
    X, _ = batch(rng, 6)
    before = f.predict(X)
    f.params_["scene"] = f.params_["scene"][[2, 0, 3, 1]]
    np.testing.assert_allclose(f.predict(X), before, atol=1e-14)


def test_output_ranges(rng):
    f = FeatureField(random_state=2, init_scale=3.0).initialize(POSES)
    X, _ = batch(rng, 200)
    out = f.predict(X)
    assert np.all((out[:, :3] >= 0) & (out[:, :3] <= 1))
    assert np.all(out[:, 3] >= 0)


def test_forward_is_deterministic(rng):
    f = small_field()
    X, _ = batch(rng)
    np.testing.assert_array_equal(f.predict(X), f.predict(X))


def test_nonfinite_parameters_rejected():
    f = small_field()
    f.params_["W1"][0, 0] = np.nan
    with pytest.raises(NonFinite):
        field_forward(f, [0, 0, 0], 0, POSES[0])


def test_grad_check_small_random(rng):
    f = small_field()
    X, y = batch(rng)
    assert grad_check(f, X, y, eps=1e-5) < 1e-4


def test_grad_check_zero_field():
    f = small_field().initialize(POSES, zero=True)
    X = np.array([[0.1, 0.2, 0.3, 1.0], [0.0, -0.5, 0.2, 2.0]])
    # zero network outputs (0.5, 0.5, 0.5, ln 2); those targets give zero loss
    y = np.tile([0.5, 0.5, 0.5, np.log(2.0)], (2, 1))
    E, P = f._inputs(X)
    _, g = loss_and_grads(f.params_, f.config, E, P, y)
    assert all(np.abs(v).max() < 1e-15 for v in g.values())
    assert grad_check(f, X, y) < 1e-9


def test_loss_scale_doubles_gradients(rng):
    f = small_field()
    X, y = batch(rng)
    E, P = f._inputs(X)
    l1, g1 = loss_and_grads(f.params_, f.config, E, P, y, scale=1.0)
    l2, g2 = loss_and_grads(f.params_, f.config, E, P, y, scale=2.0)
    assert l2 == pytest.approx(2 * l1, rel=1e-14)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-300)
    e1 = grad_check(f, X, y, scale=1.0)
    e2 = grad_check(f, X, y, scale=2.0)
    assert e1 < 1e-4 and e2 < 1e-4


def test_grad_check_eps_range(rng):
    f = small_field()
    X, y = batch(rng)
    with pytest.raises(ValueError):
        grad_check(f, X, y, eps=1e-2)


def test_zero_learning_rate_changes_nothing(rng):
    X, y = batch(rng, 20)
    f = small_field(learning_rate=0.0, epochs=3, batch_size=8)
    f.fit(X, y, poses=POSES)
    g = small_field()
    for k in g.params_:
        np.testing.assert_array_equal(f.params_[k], g.params_[k])
    assert f.loss_history_[0] == f.loss_history_[-1] == pytest.approx(g.loss(X, y), rel=0, abs=0)


def test_single_point_overfit():
    X = np.array([[0.2, -0.1, 0.4, 0.0]])
    y = np.array([[0.9, 0.2, 0.6, 1.0]])
    f = FeatureField(epochs=500, batch_size=1, random_state=0)
    f.fit(X, y, poses=POSES)
    out = f.predict(X)[0]
    assert np.all(np.abs(out[:3] - y[0, :3]) < 0.05)


def test_learning_rate_schedule():
    spe, total, lr = 10, 100, 1e-3
    lrs = [field_learning_rate(s, spe, total, lr) for s in range(total)]
    # warm-up over half an epoch
    np.testing.assert_allclose(lrs[:5], [lr * k / 5 for k in range(1, 6)])
    assert all(v == lr for v in lrs[5:50])
    assert all(b < a for a, b in zip(lrs[50:], lrs[51:]))
    assert lrs[-1] == pytest.approx(lr * 0.1, rel=1e-12)


def test_training_reduces_loss_and_is_deterministic():
    frames = render_sequence(make_static_scene(200), POSES, K)
    fused = fuse(frames)
    a, la = field_train(FeatureField(epochs=4, random_state=0), fused, POSES, max_points=200)
    b, lb = field_train(FeatureField(epochs=4, random_state=0), fused, POSES, max_points=200)
    assert la == lb
    assert la[-1] < la[0]
    assert a.to_json() == b.to_json()


def test_training_set_layout():
    frames = render_sequence(make_static_scene(200), POSES, K)
    fused = fuse(frames)
    X, y, w = build_training_set(fused, POSES, free_samples=8, max_points=50, rng=0)
    assert X.shape == (50 * 9, 4)
    np.testing.assert_array_equal(y[:50, 3], 1.0)
    np.testing.assert_array_equal(y[50:], 0.0)
    np.testing.assert_array_equal(w[50:, :3], 0.0)
    # the first surface point's free samples lie on its camera ray, short of the surface
    c = POSES[int(X[0, 3])].center
    np.testing.assert_array_equal(X[50:58, 3], X[0, 3])
    ray = X[0, :3] - c
    frac = (X[50:58, :3] - c) @ ray / (ray @ ray)
    np.testing.assert_allclose(c + frac[:, None] * ray, X[50:58, :3], atol=1e-12)
    assert np.all((frac >= 0) & (frac < 0.9))
    assert np.all(np.diff(frac) > 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_loss(rng):
    X, y = batch(rng, 4)
    y[0, 0] = np.inf
    with pytest.raises(DivergedLoss):
        small_field(epochs=1).fit(X, y, poses=POSES)


def test_checkpoint_round_trip(rng):
    f = small_field()
    X, _ = batch(rng)
    text = f.to_json()
    header = json.loads(text)
    assert header["config"]["width"] == 8 and "params" in header
    g = FeatureField.from_json(text)
    np.testing.assert_array_equal(g.predict(X), f.predict(X))


def test_sklearn_params_round_trip():
    f = FeatureField(width=16, epochs=3)
    assert f.get_params()["width"] == 16
    assert f.set_params(epochs=5).epochs == 5
