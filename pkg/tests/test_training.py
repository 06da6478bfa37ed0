"""Balanced loss, SGD, and the training loop."""

import io
import json
import math

import numpy as np
import pytest

from agcrf.datagen import generate, random_scene
from agcrf.network import ContourNet, ModelConfig, PredictionSet, build_ablation
from agcrf.oracle import finite_diff_grad, max_rel_err
from agcrf.tensor import Tape, Tensor, param_array
from agcrf.training import (LossConfig, OptimState, TrainConfig,
                            TrainingDiverged, balanced_bce,
                            deep_supervised_loss, load_config_file,
                            parse_config_text, positive_fraction, sgd_step,
                            train_loop)


class TestPositiveFraction:
    def test_quarter(self):
        gt = np.zeros(100)
        gt[:25] = 1.0
        assert positive_fraction(gt) == 0.25

    def test_all_ones(self):
        assert positive_fraction(np.ones((3, 3))) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="zero positives"):
            positive_fraction(np.zeros((0,)))

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            positive_fraction(np.array([0.0, 0.5, 1.0]))


class TestBalancedBce:
    def test_perfect_prediction_loss_below_epsilon_times_n(self):
        rng = np.random.default_rng(0)
        gt = (rng.uniform(size=(16, 16)) < 0.1).astype(float)
        cfg = LossConfig()
        loss, _ = balanced_bce(gt.copy(), gt, cfg)
        assert 0.0 <= loss < cfg.epsilon * gt.size

    def test_hand_computed_uniform_half(self):
        # beta 0.25: w_pos 0.75, w_neg 0.25; four pixels at 0.5 each give
        # loss = (0.75 + 3 * 0.25) * log 2 = 1.5 log 2
        gt = np.array([[1.0, 0.0, 0.0, 0.0]])
        pred = np.full((1, 4), 0.5)
        loss, _ = balanced_bce(pred, gt, LossConfig("hed"))
        assert abs(loss - 1.5 * math.log(2.0)) < 1e-12

    def test_alternate_convention_flips_weights(self):
        gt = np.array([[1.0, 0.0, 0.0, 0.0]])
        pred = np.full((1, 4), 0.5)
        loss, _ = balanced_bce(pred, gt, LossConfig("as_written"))
        assert abs(loss - 2.5 * math.log(2.0)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            gt = (rng.uniform(size=(6, 7)) < 0.3).astype(float)
            if gt.sum() == 0:
                gt[0, 0] = 1.0
            pred = rng.uniform(0.2, 0.8, size=(6, 7))
            _, grad = balanced_bce(pred, gt)
            fd = finite_diff_grad(lambda: balanced_bce(pred, gt)[0], [pred])[0]
            assert max_rel_err(grad, fd) < 1e-4

    def test_gradient_zero_outside_clamp(self):
        gt = np.array([[1.0, 0.0]])
        pred = np.array([[0.0, 1.0]])  # saturated wrong on both pixels
        _, grad = balanced_bce(pred, gt)
        assert (grad == 0.0).all()

    def test_nonnegative_and_zero_only_when_perfect(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            gt = (rng.uniform(size=(5, 5)) < 0.2).astype(float)
            if gt.sum() == 0:
                gt[2, 2] = 1.0
            pred = rng.uniform(0.05, 0.95, size=(5, 5))
            loss, _ = balanced_bce(pred, gt)
            assert loss > 0.0

    def test_channel_axis_promotion(self):
        gt = np.zeros((4, 4))
        gt[1] = 1.0
        l2, _ = balanced_bce(np.full((1, 4, 4), 0.5), gt)
        l1, _ = balanced_bce(np.full((4, 4), 0.5), gt)
        assert l1 == l2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="match"):
            balanced_bce(np.full((2, 4, 4), 0.5), np.zeros((4, 4)))

    def test_tensor_input_accepted(self):
        gt = np.array([[1.0, 0.0]])
        base, _ = balanced_bce(np.full((1, 2), 0.5), gt)
        wrapped, _ = balanced_bce(Tensor(np.full((1, 1, 2), 0.5)), gt)
        assert base == wrapped

    def test_config_validation(self):
        with pytest.raises(ValueError, match="epsilon"):
            LossConfig(epsilon=0.0)
        with pytest.raises(ValueError, match="epsilon"):
            LossConfig(epsilon=0.01)
        with pytest.raises(ValueError, match="beta_convention"):
            LossConfig(beta_convention="other")


class TestDeepSupervisedLoss:
    def _gt(self, rng, shape=(8, 8)):
        gt = (rng.uniform(size=shape) < 0.2).astype(float)
        gt[0, 0] = 1.0
        return gt

    def test_single_head_equals_balanced_bce(self):
        rng = np.random.default_rng(3)
        gt = self._gt(rng)
        head = Tensor(rng.uniform(0.1, 0.9, (1, 8, 8)))
        total, seeds, per_head = deep_supervised_loss(
            PredictionSet(heads=[head], fused=head), gt)
        ref_loss, ref_grad = balanced_bce(head, gt)
        assert total == ref_loss and per_head == [ref_loss]
        assert (seeds[head] == ref_grad).all()

    def test_total_is_sum_of_heads(self):
        rng = np.random.default_rng(4)
        gt = self._gt(rng)
        heads = [Tensor(rng.uniform(0.1, 0.9, (1, 8, 8))) for _ in range(4)]
        total, seeds, per_head = deep_supervised_loss(
            PredictionSet(heads=heads, fused=heads[-1]), gt)
        assert abs(total - sum(per_head)) < 1e-12
        assert len(seeds) == 4

    def test_duplicated_head_doubles_contribution(self):
        rng = np.random.default_rng(5)
        gt = self._gt(rng)
        head = Tensor(rng.uniform(0.1, 0.9, (1, 8, 8)))
        single, single_seeds, _ = deep_supervised_loss(
            PredictionSet(heads=[head], fused=head), gt)
        double, double_seeds, _ = deep_supervised_loss(
            PredictionSet(heads=[head, head], fused=head), gt)
        assert abs(double - 2.0 * single) < 1e-12
        assert np.allclose(double_seeds[head], 2.0 * single_seeds[head])

    def test_final_head_only_without_deep_supervision(self):
        rng = np.random.default_rng(6)
        gt = self._gt(rng)
        heads = [Tensor(rng.uniform(0.1, 0.9, (1, 8, 8))) for _ in range(3)]
        total, seeds, per_head = deep_supervised_loss(
            PredictionSet(heads=heads, fused=heads[-1]), gt,
            deep_supervision=False)
        ref, _ = balanced_bce(heads[-1], gt)
        assert total == ref and len(per_head) == 1
        assert list(seeds) == [heads[-1]]

    def test_head_weights(self):
        rng = np.random.default_rng(7)
        gt = self._gt(rng)
        heads = [Tensor(rng.uniform(0.1, 0.9, (1, 8, 8))) for _ in range(2)]
        plain, _, per_head = deep_supervised_loss(
            PredictionSet(heads=heads, fused=heads[-1]), gt)
        weighted, _, _ = deep_supervised_loss(
            PredictionSet(heads=heads, fused=heads[-1]), gt,
            LossConfig(head_weights=(2.0, 1.0)))
        assert abs(weighted - (plain + per_head[0])) < 1e-12
        with pytest.raises(ValueError, match="head weights"):
            deep_supervised_loss(PredictionSet(heads=heads, fused=heads[-1]),
                                 gt, LossConfig(head_weights=(1.0,)))

    def test_no_heads_rejected(self):
        with pytest.raises(ValueError, match="no heads"):
            deep_supervised_loss(PredictionSet(heads=[], fused=None),
                                 np.ones((2, 2)))


class TestSgdStep:
    def _param(self, values):
        arr = np.asarray(values, dtype=np.float64)[np.newaxis]
        return {"w": Tensor(arr)}

    def test_zero_gradients_zero_decay_unchanged(self):
        params = self._param([[1.0, -2.0], [3.0, 4.0]])
        before = param_array(params["w"]).copy()
        state = OptimState(weight_decay=0.0)
        sgd_step(params, {"w": np.zeros((1, 2, 2))}, state)
        assert (param_array(params["w"]) == before).all()

    def test_plain_descent(self):
        # momentum 0, wd 0, lr 1: theta decreases by exactly g
        params = self._param([[1.0, 2.0]])
        g = np.array([[[0.5, -0.25]]])
        state = OptimState(learning_rate=1.0, momentum=0.0, weight_decay=0.0)
        sgd_step(params, {"w": g}, state)
        assert (param_array(params["w"]) == np.array([[[0.5, 2.25]]])).all()

    def test_weight_decay_shrinks(self):
        params = self._param([[10.0]])
        state = OptimState(learning_rate=0.1, momentum=0.0, weight_decay=0.01)
        sgd_step(params, {"w": np.zeros((1, 1, 1))}, state)
        assert abs(param_array(params["w"])[0, 0, 0] - 10.0 * (1 - 0.1 * 0.01)) < 1e-15

    def test_momentum_two_steps(self):
        params = self._param([[0.0]])
        g = np.array([[[1.0]]])
        state = OptimState(learning_rate=0.1, momentum=0.5, weight_decay=0.0)
        sgd_step(params, {"w": g}, state)   # v = -0.1,  theta = -0.1
        sgd_step(params, {"w": g}, state)   # v = -0.15, theta = -0.25
        assert abs(param_array(params["w"])[0, 0, 0] + 0.25) < 1e-15
        assert state.velocity["w"].shape == (1, 1, 1)

    def test_missing_gradient_treated_as_zero(self):
        params = self._param([[4.0]])
        state = OptimState(learning_rate=0.5, momentum=0.0, weight_decay=0.1)
        sgd_step(params, {}, state)
        assert abs(param_array(params["w"])[0, 0, 0] - 4.0 * (1 - 0.05)) < 1e-15

    def test_shape_mismatch_rejected(self):
        params = self._param([[1.0, 2.0]])
        with pytest.raises(ValueError, match="shape"):
            sgd_step(params, {"w": np.zeros((3,))}, OptimState())

    def test_lr_schedule(self):
        state = OptimState(learning_rate=1e-3, lr_decay=10.0, lr_step=10000)
        assert state.lr_at(0) == 1e-3
        assert state.lr_at(9999) == 1e-3
        assert state.lr_at(10000) == 1e-4
        assert state.lr_at(25000) == 1e-5
        assert OptimState(learning_rate=0.5, lr_step=0).lr_at(10 ** 9) == 0.5


class TestConfigParsing:
    def test_comments_and_blanks(self):
        raw = parse_config_text("# top\n\nlearning_rate = 0.01  # inline\n"
                                "iterations=5\n")
        assert raw == {"learning_rate": "0.01", "iterations": "5"}

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="line 2.*duplicate"):
            parse_config_text("a = 1\na = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError, match="key=value"):
            parse_config_text("just words\n")

    def test_load_config_file_typed(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("ablation = plag\ntaps = 2,3\ngate_sign = minus\n"
                        "learning_rate = 0.01\niterations = 50\n")
        model_cfg, train_cfg = load_config_file(str(path))
        assert model_cfg.ablation == "plag"
        assert model_cfg.taps == (2, 3)
        assert model_cfg.gate_sign == -1.0
        assert train_cfg.learning_rate == 0.01
        assert train_cfg.iterations == 50

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("warmup = 5\n")
        with pytest.raises(ValueError, match="warmup"):
            load_config_file(str(path))


def _tiny_dataset(n=3, seed=0, size=32):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        sample = generate(random_scene(rng, height=size, width=size))
        out.append((sample.image, sample.edges))
    return out


def _snapshot(net):
    return {n: param_array(p).copy() for n, p in net.parameters().items()}


class TestTrainLoop:
    def test_deterministic_given_seed(self):
        data = _tiny_dataset()
        nets = [build_ablation("baseline", rng=np.random.default_rng(7))
                for _ in range(2)]
        cfg = TrainConfig(iterations=12, accumulation=5, seed=3)
        logs = [train_loop(data, net, cfg) for net in nets]
        assert logs[0] == logs[1]
        a, b = _snapshot(nets[0]), _snapshot(nets[1])
        assert all((a[n] == b[n]).all() for n in a)

    def test_zero_iterations_leaves_parameters(self):
        data = _tiny_dataset(1)
        net = build_ablation("baseline", rng=np.random.default_rng(0))
        before = _snapshot(net)
        metrics = train_loop(data, net, TrainConfig(iterations=0))
        assert metrics == []
        after = _snapshot(net)
        assert all((before[n] == after[n]).all() for n in before)

    def test_empty_dataset_rejected(self):
        net = build_ablation("baseline", rng=np.random.default_rng(0))
        with pytest.raises(ValueError, match="empty"):
            train_loop([], net, TrainConfig(iterations=1))

    def test_partial_window_discarded(self):
        data = _tiny_dataset(2)
        net = build_ablation("baseline", rng=np.random.default_rng(1))
        before = _snapshot(net)
        train_loop(data, net, TrainConfig(iterations=9, accumulation=10))
        mid = _snapshot(net)
        assert all((before[n] == mid[n]).all() for n in before)
        train_loop(data, net, TrainConfig(iterations=10, accumulation=10))
        after = _snapshot(net)
        assert any((mid[n] != after[n]).any() for n in mid)

    def test_metrics_schema_and_log_lines(self):
        data = _tiny_dataset(2)
        net = build_ablation("baseline", rng=np.random.default_rng(2))
        sink = io.StringIO()
        metrics = train_loop(data, net, TrainConfig(iterations=4, accumulation=2),
                             log_fh=sink)
        assert [m["iteration"] for m in metrics] == [1, 2, 3, 4]
        for m in metrics:
            assert set(m) == {"iteration", "loss", "lr", "per_head"}
            assert m["loss"] > 0.0
        replayed = [json.loads(line) for line in sink.getvalue().splitlines()]
        assert replayed == metrics

    def test_nan_loss_aborts(self):
        data = _tiny_dataset(1)
        net = build_ablation("baseline", rng=np.random.default_rng(3))
        param_array(net.parameters()["head1.conv.weight"])[:] = np.nan
        with pytest.raises(TrainingDiverged, match="iteration 1"):
            train_loop(data, net, TrainConfig(iterations=3))

    def test_loss_non_increasing_on_repeated_sample(self):
        # one repeated sample: the accumulation-window mean equals the single
        # gradient, so stepping once per window reproduces the schedule
        for seed in (0, 1):
            rng = np.random.default_rng(seed)
            sample = generate(random_scene(rng, height=32, width=32))
            net = build_ablation("flag", rng=np.random.default_rng(seed))
            params = net.parameters()
            optim = OptimState(learning_rate=1e-4, momentum=0.9,
                               weight_decay=2e-4, lr_step=0)
            losses = []
            for step in range(51):
                tape = Tape()
                preds = net.forward(sample.image, tape)
                loss, seeds, _ = deep_supervised_loss(preds, sample.edges,
                                                      LossConfig(), True)
                losses.append(loss)
                grads = net.gradients(tape.backward(seeds))
                sgd_step(params, grads, optim, optim.lr_at(step))
            assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_overfits_single_sample(self):
        # full-resolution first tap; coarse heads keep an irreducible floor
        # on one-pixel contours, so the final head carries the target
        rng = np.random.default_rng(0)
        sample = generate(random_scene(rng, height=32, width=32))
        cfg_m = ModelConfig(ablation="flag", frontend_strides=(1, 2, 2, 2))
        net = ContourNet(cfg_m, np.random.default_rng(0))
        params = net.parameters()
        optim = OptimState(learning_rate=2e-3, momentum=0.0, weight_decay=0.0,
                           lr_step=0)
        reached = False
        for step in range(2000):
            tape = Tape()
            preds = net.forward(sample.image, tape)
            loss, seeds, per_head = deep_supervised_loss(preds, sample.edges,
                                                         LossConfig(), True)
            if per_head[-1] < 0.05:
                reached = True
                break
            grads = net.gradients(tape.backward(seeds))
            sgd_step(params, grads, optim, optim.lr_at(step))
        assert reached
