import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajpred.labels import PolicyLabel, label_window
from trajpred.policy_net import (Dataset, RecurrentClassifier, ShapeError, TrainConfig, infer,
                                 infer_batch, load_model, loss_and_grads, nll_loss, save_model,
                                 train,
                                 window_features)
from trajpred.scenario import PoseSample
from trajpred.simulator import ManeuverParams, generate_maneuver_track, label_round_trip


def test_probabilities(model):
    rng = np.random.default_rng(0)
    window = rng.normal(size=(model.t_obs, 4))
    p = infer(model, window)
    assert p.shape == (6,)
    assert p.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all((p >= 0) & (p <= 1))
    assert np.array_equal(infer(model, window.copy()), p)
    with pytest.raises(ShapeError):
        infer(model, window[:-1])


def test_straight_driving_is_forward(model):
    track = generate_maneuver_track(PolicyLabel.FORWARD, ManeuverParams(speed=9.0), seed=4242).track
    window = window_features(track[20:20 + model.t_obs])
    assert int(np.argmax(infer(model, window))) == PolicyLabel.FORWARD


@pytest.mark.parametrize("probs, label, expect", [
    (np.eye(6)[2], 2, 0.0),
    (np.full(6, 1 / 6), 4, math.log(6)),
    (np.array([0.5, 0.1, 0.1, 0.1, 0.1, 0.1]), 0, math.log(2)),
])
def test_nll(probs, label, expect):
    assert nll_loss(probs, label) == pytest.approx(expect, abs=1e-12)


def toy_dataset(n=120, t=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    feats = rng.normal(0, 0.3, size=(n, t, 4))
    feats[:, :, 1] += np.where(labels == 1, 2.0, -2.0)[:, None]
    return Dataset(feats, labels.astype(np.int64), np.arange(n, dtype=np.int64))


def test_separable_toy_reaches_full_accuracy():
    ds = toy_dataset()
    _, history = train(ds, TrainConfig(epochs=50, hidden=8, batch_size=16, lr=1e-2), seed=1)
    assert max(h.val_acc for h in history) == 1.0


def test_training_is_deterministic(tmp_path):
    ds = toy_dataset(60)
    cfg = TrainConfig(epochs=2, hidden=6)
    a, _ = train(ds, cfg, seed=5)
    b, _ = train(ds, cfg, seed=5)
    for k in RecurrentClassifier.PARAMS:
        assert np.array_equal(getattr(a, k), getattr(b, k))
    save_model(a, tmp_path / "a.npz")
    c = load_model(tmp_path / "a.npz")
    for k in RecurrentClassifier.PARAMS:
        assert np.array_equal(getattr(a, k), getattr(c, k))


def test_empty_dataset_rejected():
    empty = Dataset(np.zeros((0, 8, 4)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        train(empty)


def test_bad_shapes_rejected():
    m = RecurrentClassifier.init(hidden=4, t_obs=8)
    with pytest.raises(ShapeError):
        RecurrentClassifier(m.Wx, m.Wh, m.bx, m.bh, m.Wo[:, :5], m.bo)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-math.pi, math.pi))
def test_infer_invariant_to_rigid_motion(model, dx, dy, angle):
    track = generate_maneuver_track(PolicyLabel.TURN_LEFT, ManeuverParams(speed=5.0, radius=15.0), seed=3).track[:model.t_obs]
    c, s = math.cos(angle), math.sin(angle)
    moved = [PoseSample(p.t, c * p.x - s * p.y + dx, s * p.x + c * p.y + dy, p.theta + angle, p.v)
             for p in track]
    f0, f1 = window_features(track), window_features(moved)
    assert np.allclose(f0, f1, atol=1e-9)
    assert np.allclose(infer(model, f0), infer(model, f1), atol=1e-9)


def test_batch_matches_single(model):
    rng = np.random.default_rng(2)
    windows = rng.normal(size=(3, model.t_obs, 4))
    batch = infer_batch(model, windows)
    for k in range(3):
        assert np.allclose(batch[k], infer(model, windows[k]), atol=1e-12)


# ---------------------------------------------------------------------------
# labeler

def test_label_examples():
    p = ManeuverParams(steer_noise=0.0, accel_noise=0.0)
    straight = generate_maneuver_track(PolicyLabel.FORWARD, p, seed=0).track
    assert {label_window(straight, i, 40, 40) for i in range(39, len(straight) - 40)} \
        == {PolicyLabel.FORWARD}
    # 10 m/s down to standstill
    track = [PoseSample(0.1 * k, sum(max(0.0, 10 - 2.5 * 0.1 * j) * 0.1 for j in range(k)), 0.0, 0.0,
                        max(0.0, 10 - 2.5 * 0.1 * k)) for k in range(100)]
    assert label_window(track, 40, 40, 40) == PolicyLabel.YIELD
    quiet = ManeuverParams(speed=5.0, radius=10.0, steer_noise=0.0, accel_noise=0.0)
    assert label_round_trip(PolicyLabel.TURN_LEFT, quiet, 0) == PolicyLabel.TURN_LEFT


def test_backprop_matches_differences():
    rng = np.random.default_rng(5)
    P = {k: v.copy() for k, v in RecurrentClassifier.init(hidden=5, t_obs=6, seed=2).params().items()}
    X = rng.normal(size=(3, 6, 4))
    y = np.array([0, 2, 5])
    _, grads = loss_and_grads(P, X, y)
    eps = 1e-6
    for name, W in P.items():
        for idx in rng.choice(W.size, size=min(W.size, 8), replace=False):
            k = np.unravel_index(idx, W.shape)
            old = W[k]
            W[k] = old + eps
            up = loss_and_grads(P, X, y)[0]
            W[k] = old - eps
            down = loss_and_grads(P, X, y)[0]
            W[k] = old
            assert grads[name][k] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-8)
