import math

import numpy as np
import pytest

from gmsr import tensor as T
from gmsr.data import synth_dataset
from gmsr.model import GmsrConfig, GmsrNet
from gmsr.tensor import Tensor
from gmsr.train import (
    LrSchedule,
    OptimState,
    TrainConfig,
    adam_step,
    apply_linear_baseline,
    fit_linear_baseline,
    l1_loss,
    lr_at,
    train,
)


class TestL1:
    def test_identical_is_zero(self):
        z = np.random.default_rng(0).uniform(size=(3, 3, 4))
        assert l1_loss(Tensor(z), z).item() == 0.0

    def test_zeros_vs_ones(self):
        assert l1_loss(Tensor(np.zeros((2, 3, 4))), np.ones((2, 3, 4))).item() == 1.0

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
        direct = math.fsum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(l1_loss(Tensor(a), b).item() - direct) < 1e-12

    def test_zero_iff_equal(self):
        a = np.zeros((2, 2, 2))
        b = a.copy()
        b[1, 0, 1] = 1e-300
        assert l1_loss(Tensor(a), b).item() > 0.0

    def test_subgradient_zero_at_ties(self):
        z = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        T.backward(l1_loss(z, np.array([1.0, 0.0, 5.0])))
        np.testing.assert_allclose(z.grad, [0.0, 1 / 3, -1 / 3])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = {"w": Tensor(np.array([0.3, -1.2]))}
        before = p["w"].data.copy()
        state = OptimState()
        for _ in range(3):
            adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(p["w"].data, before)

    def test_first_step_magnitude(self):
        p = {"w": Tensor(np.array([0.0]))}
        adam_step(p, {"w": np.array([1.0])}, OptimState(), lr=0.1)
        assert p["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_minimizes_abs(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        state = OptimState()
        for _ in range(100):
            x.grad = None
            T.backward(T.tsum(T.tabs(x - 3.0)))
            adam_step({"x": x}, {"x": x.grad}, state, lr=0.1)
        assert abs(x.data[0] - 3.0) < 0.5

    def test_hyperparameters(self):
        s = OptimState()
        assert (s.beta1, s.beta2, s.eps) == (0.9, 0.99, 1e-8)

    def test_moments_and_counter(self):
        p = {"w": Tensor(np.zeros(3))}
        state = OptimState()
        rng = np.random.default_rng(2)
        for k in range(1, 5):
            adam_step(p, {"w": rng.normal(size=3)}, state, lr=1e-3)
            assert state.t == k
            assert np.all(state.v["w"] >= 0)

    def test_nan_gradient_aborts(self):
        p = {"w": Tensor(np.zeros(2))}
        with pytest.raises(FloatingPointError, match="w"):
            adam_step(p, {"w": np.array([0.0, np.nan])}, OptimState(), lr=0.1)


class TestSchedule:
    def test_endpoints(self):
        s = LrSchedule(100)
        assert lr_at(0, s) == 1e-4
        assert lr_at(100, s) == 0.0

    def test_midpoint(self):
        assert lr_at(50, LrSchedule(100)) == pytest.approx(1e-4 * 0.5 ** 1.5, rel=1e-12)
        assert lr_at(50, LrSchedule(100)) == pytest.approx(3.5355e-5, abs=1e-9)

    def test_monotone_and_continuous(self):
        s = LrSchedule(1000)
        vals = [lr_at(t, s) for t in range(1001)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert max(abs(a - b) for a, b in zip(vals, vals[1:])) < 1e-6

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(11, LrSchedule(10))
        with pytest.raises(ValueError):
            lr_at(-1, LrSchedule(10))


def tiny_model(bands, seed=0):
    return GmsrNet(GmsrConfig(feature_width=4, num_blocks=1, state_size=2, out_channels=bands, seed=seed))


def pairs(count=2, size=8, bands=5, seed=0):
    return [(p.rgb, p.cube.array()) for p in synth_dataset(count, size, size, bands, seed)]


class TestTrain:
    def test_single_sample_smoke_convergence(self):
        data = pairs(1, 8, 5, seed=3)
        res = train(tiny_model(5), data, TrainConfig(steps=200, batch=1, patch=8, lr0=1e-2, seed=0))
        assert res.losses[-1] < 0.5 * res.losses[0]

    def test_zero_steps_keeps_init(self):
        m = tiny_model(5, seed=4)
        before = m.flat_params().copy()
        res = train(m, pairs(), TrainConfig(steps=0))
        assert res.trace == []
        assert m.flat_params().tobytes() == before.tobytes()

    def test_deterministic_trace(self):
        cfg = TrainConfig(steps=5, batch=2, patch=6, lr0=1e-3, seed=11)
        a = train(tiny_model(5), pairs(), cfg)
        b = train(tiny_model(5), pairs(), cfg)
        assert a.to_csv() == b.to_csv()

    def test_csv_columns(self):
        res = train(tiny_model(5), pairs(), TrainConfig(steps=3, batch=1, patch=4))
        lines = res.to_csv().splitlines()
        assert lines[0] == "step,lr,loss" and len(lines) == 4
        step, lr, loss = lines[1].split(",")
        assert step == "0" and float(lr) == 1e-4 and float(loss) > 0

    def test_shape_errors(self):
        data = pairs(bands=5)
        with pytest.raises(ValueError):
            train(tiny_model(6), data, TrainConfig(steps=1))
        with pytest.raises(ValueError):
            train(tiny_model(5), [(data[0][0][:4], data[0][1])], TrainConfig(steps=1))
        with pytest.raises(ValueError):
            train(tiny_model(5), [], TrainConfig(steps=1))

    def test_nan_loss_reports_step(self, monkeypatch):
        m = tiny_model(5)
        calls = {"n": 0}
        real = Tensor.item

        def poisoned(self):
            calls["n"] += 1
            return float("nan") if calls["n"] == 3 else real(self)

        monkeypatch.setattr(Tensor, "item", poisoned)
        with pytest.raises(FloatingPointError, match="step 2"):
            train(m, pairs(), TrainConfig(steps=5, batch=1, patch=4))


def test_linear_baseline_recovers_affine_map():
    rng = np.random.default_rng(5)
    M = rng.normal(size=(4, 6))
    rgb = rng.uniform(size=(5, 5, 3))
    cube = apply_linear_baseline(M, rgb)
    coef = fit_linear_baseline([(rgb, cube)])
    np.testing.assert_allclose(coef, M, atol=1e-10)
