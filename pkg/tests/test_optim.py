import math

import numpy as np
import pytest

from histotex.network import build_network
from histotex.optim import (
    LrRangeResult,
    NonFiniteLossError,
    OneCycleSchedule,
    OptimizerError,
    ParamGroup,
    TrainStage,
    adam_step,
    adamw_step,
    default_stages,
    discriminative_lrs,
    lr_range_sweep,
    lr_range_test,
    one_cycle_at,
    train,
)
from histotex.rng import RngStream
from histotex.tensor import Tensor


def make_group(arrs, wd=0.0):
    params = {f"p{i}": Tensor(a, requires_grad=True) for i, a in enumerate(arrs)}
    return ParamGroup(index=1, params=params, base_lr=0.1, weight_decay=wd)


class TestAdamW:
    def test_first_step_is_signed_lr(self, rng):
        g = rng.standard_normal(8).astype(np.float32) * 5.0
        theta = rng.standard_normal(8).astype(np.float32)
        group = make_group([theta.copy()])
        adamw_step(group, {"p0": g}, lr=0.01, weight_decay=0.0)
        update = group.params["p0"].data - theta
        np.testing.assert_allclose(update, -0.01 * np.sign(g), rtol=1e-4)

    def test_zero_grad_pure_decay(self, rng):
        theta = rng.standard_normal(8).astype(np.float32)
        group = make_group([theta.copy()], wd=0.5)
        adamw_step(group, {"p0": np.zeros(8, np.float32)}, lr=0.1)
        np.testing.assert_allclose(group.params["p0"].data, theta * (1 - 0.1 * 0.5),
                                   rtol=1e-6)

    def test_default_betas(self):
        import inspect
        sig = inspect.signature(adamw_step)
        assert sig.parameters["beta1"].default == 0.9
        assert sig.parameters["beta2"].default == 0.99

    def test_wd_zero_matches_adam_bitwise(self, rng):
        theta = rng.standard_normal((4, 4)).astype(np.float32)
        ga = make_group([theta.copy()], wd=0.0)
        gb = make_group([theta.copy()], wd=0.0)
        for i in range(5):
            g = (rng.standard_normal((4, 4)) * (i + 1)).astype(np.float32)
            adamw_step(ga, {"p0": g}, lr=0.03, weight_decay=0.0)
            adam_step(gb, {"p0": g}, lr=0.03)
        assert np.array_equal(ga.params["p0"].data, gb.params["p0"].data)

    def test_nonfinite_grad_names_parameter(self, rng):
        group = make_group([rng.standard_normal(4).astype(np.float32)])
        bad = np.array([1.0, np.nan, 0.0, 0.0], np.float32)
        with pytest.raises(OptimizerError, match="p0"):
            adamw_step(group, {"p0": bad}, lr=0.1)


class TestOneCycle:
    SCHED = OneCycleSchedule(total_steps=1000, lr_max=0.01, warmup_frac=0.3)

    def test_start(self):
        lr, mom = one_cycle_at(self.SCHED, 0)
        assert lr == pytest.approx(0.001, abs=1e-15)
        assert mom == 0.95

    def test_peak(self):
        lr, mom = one_cycle_at(self.SCHED, 300)
        assert lr == pytest.approx(0.01, abs=1e-15)
        assert mom == pytest.approx(0.85, abs=1e-15)

    def test_end(self):
        lr, mom = one_cycle_at(self.SCHED, 1000)
        assert lr == pytest.approx(0.0, abs=1e-15)
        assert mom == pytest.approx(0.95, abs=1e-12)

    def test_anneal_midpoint(self):
        lr, _ = one_cycle_at(self.SCHED, 300 + 350)
        assert lr == pytest.approx(0.005, rel=1e-12)

    def test_continuity_at_phase_boundary(self):
        eps = 1e-9
        lr_lo, mom_lo = one_cycle_at(self.SCHED, 300 - eps)
        lr_hi, mom_hi = one_cycle_at(self.SCHED, 300 + eps)
        assert abs(lr_lo - lr_hi) < 1e-12
        assert abs(mom_lo - mom_hi) < 1e-12

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            one_cycle_at(self.SCHED, 1001)
        with pytest.raises(ValueError):
            one_cycle_at(self.SCHED, -1)

    def test_lr_and_momentum_oppose(self):
        prev_lr, prev_mom = one_cycle_at(self.SCHED, 0)
        for t in range(1, 1001):
            lr, mom = one_cycle_at(self.SCHED, t)
            dlr, dmom = lr - prev_lr, mom - prev_mom
            if dlr != 0.0 and dmom != 0.0:
                assert np.sign(dlr) == -np.sign(dmom), f"at t={t}"
            prev_lr, prev_mom = lr, mom


class TestDiscriminativeRates:
    def test_default_group_rates(self):
        assert discriminative_lrs(0.01) == pytest.approx((0.0001, 0.003, 0.006, 0.01))

    def test_scaling(self):
        rates = discriminative_lrs(0.02)
        assert rates[3] == 0.02
        assert rates[0] == pytest.approx(0.0002)

    def test_all_equal_explicit_allowed(self):
        assert discriminative_lrs(0.01, (0.01,) * 4) == (0.01,) * 4

    def test_decreasing_explicit_rejected(self):
        with pytest.raises(ValueError):
            discriminative_lrs(0.01, (0.01, 0.006, 0.003, 0.0001))

    def test_group_ratio_constant_over_cycle(self):
        sched = OneCycleSchedule(total_steps=100, lr_max=0.01)
        rates = discriminative_lrs(0.01)
        for t in range(0, 101, 7):
            lr, _ = one_cycle_at(sched, t)
            frac = lr / 0.01
            scaled = [r * frac for r in rates]
            if lr > 0:
                assert scaled[0] / scaled[3] == pytest.approx(rates[0] / rates[3])


class TestLrRangeSweep:
    def test_endpoint_rates(self):
        losses = []

        def step(batch, lr):
            losses.append(lr)
            return 1.0

        res = lr_range_sweep(step, range(100), 1e-7, 10.0, iters=100)
        assert res.lrs[0] == pytest.approx(1e-7)
        assert res.lrs[-1] == pytest.approx(10.0)
        assert len(res.lrs) == 100
        assert np.all(np.diff(res.lrs) > 0)

    def test_quadratic_bowl_suggestion_is_stable(self):
        # exact gradient descent on f(x) = 0.5 x'Ax, stable iff lr < 2/L
        eigs = np.array([1.0, 25.0])
        L = eigs.max()
        theta = np.array([1.0, 1.0])

        def step(batch, lr):
            loss = 0.5 * float(eigs @ (theta ** 2))
            theta[:] = theta - lr * eigs * theta
            return loss

        res = lr_range_sweep(step, range(1000), 1e-5, 10.0, iters=100)
        assert 0 < res.suggested_lr < 2.0 / L
        assert res.diverged_at is not None

    def test_divergence_at_first_step_flags_lr_lo(self):
        def step(batch, lr):
            return float("nan")

        res = lr_range_sweep(step, range(10), 1e-3, 1.0, iters=10)
        assert res.lr_lo_too_high
        assert res.diverged_at == 0

    def test_iters_validation(self):
        with pytest.raises(ValueError):
            lr_range_sweep(lambda b, lr: 1.0, range(5), 1e-4, 1.0, iters=1)
        with pytest.raises(ValueError):
            lr_range_sweep(lambda b, lr: 1.0, range(5), 1.0, 1e-4)


class _StubData:
    """Tiny in-memory provider for trainer tests."""

    def __init__(self, seed=0, n_batches=2, batch=4, size=64, classes=8):
        gen = np.random.default_rng(seed)
        self.x = gen.standard_normal((n_batches, batch, 3, size, size)).astype(np.float32) * 0.3
        self.y = gen.integers(0, classes, (n_batches, batch))
        self.batches_per_epoch = n_batches

    def train_batches(self, epoch):
        for xb, yb in zip(self.x, self.y):
            yield xb, yb

    def val_batches(self):
        yield self.x[0], self.y[0]


class TestTrainLoop:
    def test_default_stage_protocol(self):
        stages = default_stages(lr_max=0.01)
        assert stages[0].groups == {4} and stages[0].epochs == 2
        assert stages[1].groups == {1, 2, 3, 4}

    def test_frozen_parameters_bit_identical(self):
        model = build_network(input_size=64, rng=RngStream(0))
        before = {n: p.data.copy() for n, p in model.named_parameters().items()
                  if not (n.startswith("head.") or n.startswith("backbone.fire8."))}
        data = _StubData()
        stages = [TrainStage(groups=frozenset({4}), epochs=1, lr_max=0.01)]
        train(model, data, stages, rng=RngStream(1))
        for name, arr in before.items():
            assert np.array_equal(arr, model.named_parameters()[name].data), name

    def test_zero_epoch_stage_changes_nothing(self):
        model = build_network(input_size=64, rng=RngStream(0))
        before = {n: p.data.copy() for n, p in model.named_parameters().items()}
        stages = [TrainStage(groups=frozenset({1, 2, 3, 4}), epochs=0, lr_max=0.01)]
        res = train(model, _StubData(), stages, rng=RngStream(1))
        assert res.rows == []
        for name, arr in before.items():
            assert np.array_equal(arr, model.named_parameters()[name].data)

    def test_log_columns_and_checkpoints(self, tmp_path):
        model = build_network(input_size=64, rng=RngStream(0))
        stages = [TrainStage(groups=frozenset({4}), epochs=2, lr_max=0.01)]
        res = train(model, _StubData(), stages, rng=RngStream(1),
                    checkpoint_dir=tmp_path, log_path=tmp_path / "log.csv",
                    class_names=["c"] * 8)
        assert len(res.rows) == 2
        header = (tmp_path / "log.csv").read_text().splitlines()[0]
        assert header == ("epoch,step,lr_g1,lr_g2,lr_g3,lr_g4,momentum,"
                          "train_loss,val_loss,val_error_rate,wall_ms")
        assert (tmp_path / "best.htxc").exists()
        assert (tmp_path / "final.htxc").exists()

    @pytest.mark.filterwarnings("ignore:invalid value encountered",
                                "ignore:overflow encountered")
    def test_nonfinite_loss_aborts(self):
        model = build_network(input_size=64, rng=RngStream(0))
        # blow the model up so the first forward overflows float32
        for p in model.named_parameters().values():
            p.data *= 1e30
        stages = [TrainStage(groups=frozenset({1, 2, 3, 4}), epochs=1, lr_max=0.01)]
        with pytest.raises(NonFiniteLossError):
            train(model, _StubData(), stages, rng=RngStream(1))


class TestLrRangeTestOnModel:
    def test_model_never_mutated(self):
        model = build_network(input_size=64, rng=RngStream(0))
        before = {n: p.data.copy() for n, p in model.named_parameters().items()}
        data = _StubData(n_batches=3)
        res = lr_range_test(model, list(zip(data.x, data.y)), lr_lo=1e-6,
                            lr_hi=1.0, iters=8, rng=RngStream(2))
        assert isinstance(res, LrRangeResult)
        for name, arr in before.items():
            assert np.array_equal(arr, model.named_parameters()[name].data)
        assert len(res.lrs) >= 2
