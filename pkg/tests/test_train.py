"""Joint loss, the optimiser, buffer prefetch and the training loop."""

import numpy as np
import pandas as pd
import pytest

from tempo import pipeline
from tempo.config import SynthConfig
from tempo.dataset import build_buffers, load_manifest, synth_generate
from tempo.errors import DataError, DimensionError, NonFiniteGradientError
from tempo.proposal import IGNORE, POSITIVE, assign_anchor_labels
from tempo.storage import save_checkpoint
from tempo.tensor import Tape, Tensor, parameter
from tempo.train import (
    LOG_COLUMNS,
    OptimState,
    compute_losses,
    joint_loss,
    load_model,
    prefetch_buffers,
    sgd_step,
    smooth_l1,
    train,
)
from tests.conftest import gradcheck, make_sample

PINNED = np.array([[1.3, 9.7], [2.0, 10.0], [5.1, 15.2]])


def randomised_params(net, rng):
    params = pipeline.init_params(net, rng)
    for name, t in params.items():
        if name.startswith(("tpn.score", "tpn.offset", "cls.score", "cls.offset")) or name.endswith("bias"):
            params[name] = parameter(rng.standard_normal(t.shape) * 0.3, name)
    return params


def scalar_reference(logits, labels, reg, targets, fg, lam):
    ce = 0.0
    for row, label in zip(logits, labels):
        m = max(row)
        ce += -(row[label] - m - np.log(sum(np.exp(v - m) for v in row)))
    ce /= len(labels)
    reg_sum, count = 0.0, 0
    for p, t, is_fg in zip(reg, targets, fg):
        if not is_fg:
            continue
        count += 1
        for a, b in zip(p, t):
            d = abs(a - b)
            reg_sum += 0.5 * d * d if d < 1 else d - 0.5
    return ce + lam * (reg_sum / count if count else 0.0)


class TestJointLoss:
    def test_matches_scalar_reference(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 9))
            logits = rng.standard_normal((n, 4)) * 2
            labels = rng.integers(0, 4, size=n)
            reg = rng.standard_normal((n, 2)) * 2
            targets = rng.standard_normal((n, 2))
            fg = labels > 0
            lam = float(rng.uniform(0, 2))
            terms = joint_loss(Tensor(logits), labels, Tensor(reg), targets, fg, lam)
            expected = scalar_reference(logits.tolist(), labels.tolist(), reg.tolist(), targets.tolist(), fg, lam)
            assert terms.total.item() == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_perfect_predictions(self):
        logits = np.array([[30.0, 0.0], [0.0, 30.0]])
        targets = np.array([[0.1, -0.2], [0.3, 0.4]])
        terms = joint_loss(Tensor(logits), np.array([0, 1]), Tensor(targets), targets, np.array([False, True]))
        assert terms.reg.item() == 0.0
        assert terms.total.item() == pytest.approx(terms.cls.item())
        assert terms.cls.item() < 1e-12

    def test_lambda_zero(self, rng):
        logits = rng.standard_normal((4, 3))
        terms = joint_loss(Tensor(logits), [0, 1, 2, 1], Tensor(rng.standard_normal((4, 2))),
                           rng.standard_normal((4, 2)), [False, True, True, True], lam=0.0)
        assert terms.total.item() == terms.cls.item()

    def test_no_foreground(self, rng):
        reg = parameter(rng.standard_normal((3, 2)), "reg")
        with Tape() as tape:
            terms = joint_loss(Tensor(rng.standard_normal((3, 2))), [0, 0, 0], reg, np.zeros((3, 2)), [False] * 3)
            grads = tape.backward(terms.total, {"reg": reg})
        assert terms.reg.item() == 0.0
        np.testing.assert_array_equal(grads["reg"].data, 0.0)

    def test_background_rows_get_no_regression_gradient(self, rng):
        reg = parameter(rng.standard_normal((4, 2)), "reg")
        fg = np.array([True, False, True, False])
        with Tape() as tape:
            terms = joint_loss(Tensor(rng.standard_normal((4, 3))), [1, 0, 2, 0], reg, rng.standard_normal((4, 2)), fg)
            grads = tape.backward(terms.total, {"reg": reg})
        np.testing.assert_array_equal(grads["reg"].data[~fg], 0.0)
        assert np.abs(grads["reg"].data[fg]).sum() > 0

    def test_permutation_invariant(self, rng):
        logits = rng.standard_normal((6, 3))
        labels = rng.integers(0, 3, size=6)
        reg, targets = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
        perm = rng.permutation(6)
        a = joint_loss(Tensor(logits), labels, Tensor(reg), targets, labels > 0).total.item()
        b = joint_loss(Tensor(logits[perm]), labels[perm], Tensor(reg[perm]), targets[perm], labels[perm] > 0).total.item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_row_mismatch(self, rng):
        with pytest.raises(DimensionError):
            joint_loss(Tensor(np.zeros((3, 2))), [0, 0, 0], Tensor(np.zeros((2, 2))), np.zeros((2, 2)), [False] * 3)

    def test_smooth_l1_empty(self):
        assert smooth_l1(Tensor(np.zeros((0, 2))), np.zeros((0, 2))).item() == 0.0


class TestSgd:
    def test_decay_only(self):
        params = {"w": parameter(np.array([2.0, -4.0]), "w")}
        sgd_step(params, {"w": Tensor(np.zeros(2))}, OptimState(), lr=0.1)
        np.testing.assert_allclose(params["w"].data, [2.0 - 0.1 * 0.0005 * 2.0, -4.0 + 0.1 * 0.0005 * 4.0])

    def test_scalar_quadratic(self):
        params = {"w": parameter(np.array(2.0), "w")}
        sgd_step(params, {"w": Tensor(np.array(4.0))}, OptimState(weight_decay=0.0), lr=0.1)
        assert params["w"].item() == pytest.approx(1.6)

    def test_momentum_accumulates(self):
        params = {"w": parameter(np.zeros(3), "w")}
        state = OptimState(weight_decay=0.0)
        g = np.array([1.0, -2.0, 0.5])
        sgd_step(params, {"w": Tensor(g)}, state, lr=0.0)
        sgd_step(params, {"w": Tensor(g)}, state, lr=0.0)
        np.testing.assert_allclose(state.velocity["w"], 1.9 * g)

    def test_zero_rate_is_bit_stable(self, rng):
        w = rng.standard_normal(5)
        params = {"w": parameter(w.copy(), "w")}
        state = OptimState(weight_decay=0.0)
        for _ in range(3):
            sgd_step(params, {"w": Tensor(rng.standard_normal(5))}, state, lr=0.0)
        assert params["w"].data.tobytes() == w.tobytes()

    def test_frozen_untouched(self):
        params = {"a": parameter(np.ones(2), "a"), "b": parameter(np.ones(2), "b")}
        sgd_step(params, {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}, OptimState(), lr=1.0, frozen={"a"})
        np.testing.assert_array_equal(params["a"].data, 1.0)
        assert (params["b"].data < 1.0).all()

    def test_non_finite_gradient(self):
        params = {"a": parameter(np.ones(2), "a"), "b": parameter(np.ones(2), "b")}
        grads = {"a": Tensor(np.ones(2)), "b": Tensor(np.array([1.0, np.nan]))}
        with pytest.raises(NonFiniteGradientError) as err:
            sgd_step(params, grads, OptimState(), lr=1.0)
        assert err.value.param == "b"
        np.testing.assert_array_equal(params["a"].data, 1.0)


class TestMicroGraph:
    def test_end_to_end_gradient(self, rng, micro_net, micro_train_cfg, micro_buffer):
        params = randomised_params(micro_net, rng)

        def total(p):
            return compute_losses(p, micro_net, micro_train_cfg, micro_buffer, np.random.default_rng(0), PINNED).total

        assert gradcheck(total, params, rng, per_tensor=3) < 1e-6

    @pytest.mark.parametrize("mode", ["two_sum", "two_concat"])
    def test_two_stream_gradient_reaches_both_streams(self, rng, micro_net, micro_train_cfg, micro_buffer, mode):
        net = micro_net.model_copy(update={"mode": mode})
        params = randomised_params(net, rng)
        with Tape() as tape:
            tape.watch(params)
            losses = compute_losses(params, net, micro_train_cfg, micro_buffer, np.random.default_rng(0), PINNED)
            grads = tape.backward(losses.total, params)
        assert np.abs(grads["rgb.conv1a.weight"].data).sum() > 0
        assert np.abs(grads["flow.conv1a.weight"].data).sum() > 0

    def test_ohem_with_all_proposals_equals_full_batch(self, rng, micro_net, micro_train_cfg, micro_buffer):
        params = randomised_params(micro_net, rng)
        ohem_cfg = micro_train_cfg.model_copy(update={"ohem": True, "ohem_top_n": 10_000})
        full_cfg = micro_train_cfg.model_copy(update={"cls_batch": 10_000, "cls_pos_frac": 0.5})

        def step(cfg):
            local = dict(params)
            with Tape() as tape:
                tape.watch(local)
                loss = compute_losses(local, micro_net, cfg, micro_buffer, np.random.default_rng(0), PINNED).total
                grads = tape.backward(loss, local)
            sgd_step(local, grads, OptimState(), lr=0.01)
            return loss.item(), local

        loss_ohem, after_ohem = step(ohem_cfg)
        loss_full, after_full = step(full_cfg)
        assert loss_ohem == pytest.approx(loss_full, abs=1e-10)
        for name in params:
            np.testing.assert_allclose(after_ohem[name].data, after_full[name].data, rtol=0, atol=1e-10)

    def test_ignored_anchors_get_no_gradient(self, rng, micro_net, micro_train_cfg, micro_buffer, monkeypatch):
        params = randomised_params(micro_net, rng)
        real_propose = pipeline.propose
        seen = {}

        def leaf_propose(*args, **kwargs):
            out = real_propose(*args, **kwargs)
            seen["out"] = pipeline.ProposalOutput(
                parameter(out.scores.data, "scores"), parameter(out.offsets.data, "offsets"), out.anchors, out.valid
            )
            return seen["out"]

        monkeypatch.setattr(pipeline, "propose", leaf_propose)
        with Tape() as tape:
            losses = compute_losses(params, micro_net, micro_train_cfg, micro_buffer, np.random.default_rng(0), PINNED)
            out = seen["out"]
            grads = tape.backward(losses.proposal.total, {"scores": out.scores, "offsets": out.offsets})
        labels = assign_anchor_labels(out.anchors, micro_buffer.gt_bounds, out.valid).labels
        assert (labels == IGNORE).any()
        score_grad = grads["scores"].data.reshape(-1, 2)
        offset_grad = grads["offsets"].data.reshape(-1, 2)
        np.testing.assert_array_equal(score_grad[labels == IGNORE], 0.0)
        np.testing.assert_array_equal(offset_grad[labels != POSITIVE], 0.0)
        assert np.abs(score_grad).sum() > 0

    def test_no_ground_truth_buffer(self, rng, micro_net, micro_train_cfg):
        (buf,) = build_buffers(make_sample(rng, annotations=[]), 16)
        params = randomised_params(micro_net, rng)
        losses = compute_losses(params, micro_net, micro_train_cfg, buf, rng)
        assert losses.proposal.reg.item() == 0.0
        assert losses.classification.reg.item() == 0.0
        assert np.isfinite(losses.total.item())


def single_clip_dataset(tmp_path):
    cfg = SynthConfig(num_videos=1, num_test_videos=0, num_classes=2, num_frames=16, frame_size=16,
                      min_duration=8, max_duration=8, min_activities=1, max_activities=1, block_size=4)
    synth_generate(cfg, tmp_path / "one")
    return load_manifest(tmp_path / "one" / "train.json")


class TestTraining:
    def test_overfits_one_clip(self, tmp_path, micro_train_cfg):
        cfg = micro_train_cfg.model_copy(update={"epochs": 50, "lr_drop_epoch": 50, "checkpoint_every": 50})
        summary = train(single_clip_dataset(tmp_path), cfg)
        assert summary.iterations == 50
        assert summary.final_total_loss < summary.first_total_loss

    def test_log_and_artifacts(self, tiny_dataset, micro_train_cfg):
        cfg = micro_train_cfg.model_copy(update={"epochs": 2, "freeze_convs": 2})
        summary = train(tiny_dataset, cfg)
        out = cfg.output_dir
        log = pd.read_csv(out / "train_log.csv")
        assert list(log.columns) == LOG_COLUMNS
        assert len(log) == summary.iterations == 2 * 2 * len(tiny_dataset)
        assert (out / "epoch_001.ckpt").is_file() and (out / "epoch_002.ckpt").is_file()
        assert (out / "summary.json").is_file()

        params, net, classes = load_model(summary.checkpoint)
        assert net == cfg.network(2)
        assert classes == tiny_dataset.classes
        initial = pipeline.init_params(net, np.random.default_rng(cfg.seed))
        np.testing.assert_array_equal(params["rgb.conv1a.weight"].data, initial["rgb.conv1a.weight"].data)
        assert not np.array_equal(params["rgb.conv3a.weight"].data, initial["rgb.conv3a.weight"].data)

    def test_reproducible(self, tmp_path, tiny_dataset, micro_train_cfg):
        logs = []
        for name in ("a", "b"):
            cfg = micro_train_cfg.model_copy(update={"output_dir": tmp_path / name, "ohem": True, "two_way": True})
            train(tiny_dataset, cfg)
            logs.append((tmp_path / name / "train_log.csv").read_text())
        assert logs[0] == logs[1]

    def test_prefetch_forwards_errors(self, tiny_corpus, tiny_dataset, micro_train_cfg):
        (tiny_corpus / "tensors" / "train_0002.rgb.tnsr").unlink()
        with pytest.raises(DataError, match="train_0002"):
            list(prefetch_buffers(tiny_dataset, np.arange(len(tiny_dataset)), micro_train_cfg))

    def test_bad_checkpoint(self, tmp_path):
        save_checkpoint(tmp_path / "x.ckpt", {}, {"format": 1})
        with pytest.raises(DataError) as err:
            load_model(tmp_path / "x.ckpt")
        assert err.value.field == "network"
