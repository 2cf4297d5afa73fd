import numpy as np
import pytest

from mtdbn.errors import ContractError, DivergenceError
from mtdbn.finetune import (
    FinetuneConfig,
    _as_batch,
    backward,
    finetune,
    objective,
    parameter_groups,
    total_loss,
    trace_to_csv,
)
from mtdbn.gradcheck import gradient_check, mp_total_loss
from mtdbn.heads import TaskHead, head_loss
from mtdbn.stack import DeepNet, ViewSpec, forward

from helpers import random_visible

LABELS = ["a", "b", "c", "d"]
ALL_TARGETS = {"regression": 1.3, "logistic": -1, "poisson": 3, "multiclass": "c",
               "ranking": ["b", "d"], "multilabel": ["a", "c"]}


def all_kinds_net(seed, scale=1.0):
    """Three typed views (dims <= 6) and one head of every kind."""
    rng = np.random.default_rng(seed)
    specs = [ViewSpec("r", "real", 5, 4), ViewSpec("c", "count", 6, 3), ViewSpec("b", "binary", 4, 5)]
    net = DeepNet.random(specs, 6, rng, scale=scale)
    net.heads = [TaskHead.create(k, k, 6, LABELS if k in ("multiclass", "ranking", "multilabel") else (),
                                 rng, scale=scale) for k in ALL_TARGETS]
    inst = {s.name: random_visible(s.unit_type.value, s.dim, rng) for s in specs}
    return net, inst


def toy_fixture():
    """32 instances, a regression and a multiclass head, seed 11."""
    rng = np.random.default_rng(11)
    specs = [ViewSpec("real", "real", 4, 3), ViewSpec("binary", "binary", 5, 3)]
    net = DeepNet.random(specs, 4, rng, scale=0.5)
    net.pretrained = True
    net.heads = [TaskHead.create("y", "regression", 4, rng=rng),
                 TaskHead.create("c", "multiclass", 4, ["a", "b", "c"], rng)]
    x = rng.normal(size=(32, 4))
    b = (rng.random((32, 5)) < 0.5).astype(float)
    targets = {"y": list(x[:, 0] - x[:, 1]),
               "c": [["a", "b", "c"][k] for k in np.argmax(x[:, :3], axis=1)]}
    return net, {"real": x, "binary": b}, targets


class TestTotalLoss:
    def test_no_targets(self):
        net, inst = all_kinds_net(0)
        assert total_loss(net, inst, {}) == 0.0

    def test_exact_regression(self):
        net, inst = all_kinds_net(1)
        net.heads = [net.head("regression")]
        g = float(net.heads[0].bias[0] + net.heads[0].V[0] @ forward(net, inst))
        assert total_loss(net, inst, {"regression": g}) == 0.0

    def test_weighted_sum(self):
        net, inst = all_kinds_net(2)
        f = forward(net, inst)
        net.heads = [net.head("regression"), net.head("poisson")]
        net.heads[1].weight = 2.0
        l1 = head_loss(net.heads[0], f, 0.4)
        l2 = head_loss(net.heads[1], f, 1)
        assert total_loss(net, inst, {"regression": 0.4, "poisson": 1}) == pytest.approx(l1 + 2 * l2,
                                                                                     rel=1e-14)

    def test_matches_high_precision(self):
        net, inst = all_kinds_net(3)
        assert total_loss(net, inst, ALL_TARGETS) == pytest.approx(
            mp_total_loss(net, inst, ALL_TARGETS), rel=1e-12)

    def test_unknown_head(self):
        net, inst = all_kinds_net(0)
        with pytest.raises(ContractError):
            total_loss(net, inst, {"nope": 1.0})


class TestBackward:
    def test_zero_weights_zero_bundle(self):
        net, inst = all_kinds_net(4)
        mats, prepared = _as_batch(net, inst, ALL_TARGETS)
        _, _, g = objective(net, mats, prepared, weights={k: 0.0 for k in ALL_TARGETS})
        assert not g.flat().any()

    def test_exact_fit_zero_bundle(self):
        net, inst = all_kinds_net(5)
        net.heads = [net.head("regression")]
        g = float(net.heads[0].bias[0] + net.heads[0].V[0] @ forward(net, inst))
        assert not backward(net, inst, {"regression": g}).flat().any()

    def test_bundle_shapes(self):
        net, inst = all_kinds_net(6)
        g = backward(net, inst, ALL_TARGETS)
        groups = parameter_groups(net)
        assert list(g) != [] and set(g) == set(groups)
        for k, arr in groups.items():
            assert g[k].shape == arr.shape and np.all(np.isfinite(g[k]))

    def test_batch_is_sum_of_rows(self):
        net, inst = all_kinds_net(7)
        rng = np.random.default_rng(0)
        batch = {s.name: random_visible(s.unit_type.value, s.dim, rng, 3) for s in net.specs}
        tb = {k: [v, None, v] for k, v in ALL_TARGETS.items()}
        g = backward(net, batch, tb)
        g0 = backward(net, {k: v[0] for k, v in batch.items()}, ALL_TARGETS)
        g2 = backward(net, {k: v[2] for k, v in batch.items()}, ALL_TARGETS)
        for k in g:
            np.testing.assert_allclose(g[k], g0[k] + g2[k], rtol=1e-12, atol=1e-14)

    def test_non_finite_names_group(self):
        net, inst = all_kinds_net(8)
        net.heads = [net.head("poisson")]
        net.heads[0].bias[0] = 800.0  # exp overflows
        with pytest.raises(DivergenceError) as info:
            with np.errstate(over="ignore", invalid="ignore"):
                backward(net, inst, {"poisson": 1})
        assert info.value.group is not None


class TestGradientCheck:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_all_head_kinds_high_precision(self, seed):
        net, inst = all_kinds_net(seed)
        report = gradient_check(net, inst, ALL_TARGETS, eps=1e-6, tol=1e-6, precision="mp")
        assert report.passed, report.errors

    def test_linear_parameter_double_precision(self):
        net, inst = all_kinds_net(9)
        net.heads = [net.head("regression")]
        report = gradient_check(net, inst, {"regression": 0.5}, precision="double")
        assert report.errors["head/regression/bias"] < 1e-9

    def test_injected_fault(self):
        net, inst = all_kinds_net(10)
        g = backward(net, inst, ALL_TARGETS)
        g["joint/W"] = g["joint/W"] * 1.01
        report = gradient_check(net, inst, ALL_TARGETS, analytic=g, precision="mp")
        assert report.flagged == ["joint/W"]
        assert report.errors["joint/W"] == pytest.approx(0.01 / 1.01, rel=1e-3)

    def test_unknown_precision(self):
        net, inst = all_kinds_net(0)
        with pytest.raises(ContractError):
            gradient_check(net, inst, ALL_TARGETS, precision="quad")


class TestFinetune:
    def test_zero_epochs_unchanged(self):
        net, data, targets = toy_fixture()
        out, trace = finetune(net, data, targets, FinetuneConfig(epochs=0))
        for k, arr in parameter_groups(net).items():
            np.testing.assert_array_equal(parameter_groups(out)[k], arr)
        np.testing.assert_array_equal(forward(out, data), forward(net, data))
        assert len(trace) == 1

    def test_zero_learning_rate(self):
        net, data, targets = toy_fixture()
        out, trace = finetune(net, data, targets, FinetuneConfig(learning_rate=0.0, epochs=5))
        for k, arr in parameter_groups(net).items():
            np.testing.assert_array_equal(parameter_groups(out)[k], arr)
        assert len({row["total"] for row in trace}) == 1

    def test_does_not_mutate_input(self):
        net, data, targets = toy_fixture()
        before = {k: v.copy() for k, v in parameter_groups(net).items()}
        finetune(net, data, targets, FinetuneConfig(epochs=3, minibatch_size=8))
        for k, arr in parameter_groups(net).items():
            np.testing.assert_array_equal(arr, before[k])

    def test_sgd_fixture(self):
        net, data, targets = toy_fixture()
        cfg = FinetuneConfig(optimizer="sgd", epochs=100, minibatch_size=8, rng_seed=11)
        _, trace = finetune(net, data, targets, cfg)
        totals = [row["total"] for row in trace]
        assert totals[-1] < 0.5 * totals[0]
        assert np.mean(totals[-10:]) < np.mean(totals[1:11])

    def test_cg_non_increasing(self):
        net, data, targets = toy_fixture()
        _, trace = finetune(net, data, targets, FinetuneConfig(optimizer="cg", epochs=60))
        totals = [row["total"] for row in trace]
        assert all(b <= a for a, b in zip(totals, totals[1:]))
        assert totals[-1] < totals[0]

    def test_deterministic(self):
        net, data, targets = toy_fixture()
        cfg = FinetuneConfig(epochs=5, minibatch_size=8, rng_seed=3)
        a, ta = finetune(net, data, targets, cfg)
        b, tb = finetune(net, data, targets, cfg)
        assert ta == tb
        for k, arr in parameter_groups(a).items():
            np.testing.assert_array_equal(parameter_groups(b)[k], arr)

    def test_missing_targets_allowed(self):
        net, data, targets = toy_fixture()
        targets["c"] = [t if i % 2 else None for i, t in enumerate(targets["c"])]
        _, trace = finetune(net, data, targets, FinetuneConfig(epochs=2, minibatch_size=8))
        assert np.isfinite(trace[-1]["total"])

    def test_cold_start_flag(self):
        net, data, targets = toy_fixture()
        net.pretrained = False
        with pytest.raises(ContractError):
            finetune(net, data, targets, FinetuneConfig(epochs=1))
        _, trace = finetune(net, data, targets, FinetuneConfig(epochs=1), cold_start=True)
        assert len(trace) == 2

    def test_task_weights_override(self):
        net, data, targets = toy_fixture()
        out, trace = finetune(net, data, targets, FinetuneConfig(epochs=0, task_weights={"c": 3.0}))
        heads = trace[0]["heads"]
        assert trace[0]["total"] == pytest.approx(heads["y"] + 3.0 * heads["c"], rel=1e-12)
        assert out.head("c").weight == 3.0

    def test_divergence_guard(self):
        net, data, targets = toy_fixture()
        targets["y"] = [1e200] * 32
        with pytest.raises(DivergenceError):
            with np.errstate(all="ignore"):
                finetune(net, data, targets, FinetuneConfig(epochs=5, learning_rate=1.0))

    def test_trace_csv(self):
        net, data, targets = toy_fixture()
        _, trace = finetune(net, data, targets, FinetuneConfig(epochs=2, minibatch_size=8))
        lines = trace_to_csv(trace).splitlines()
        assert lines[0] == "epoch,total,c,y" and len(lines) == 4

    @pytest.mark.parametrize("bad", [dict(optimizer="adam"), dict(momentum=1.0),
                                     dict(minibatch_size=0), dict(task_weights={"y": 0.0})])
    def test_config_validation(self, bad):
        with pytest.raises(ContractError):
            FinetuneConfig(**bad)
