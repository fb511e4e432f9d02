"""Relational gates, the masked band loss and the stage-two trainer."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from freqdistill import diffcore as dc
from freqdistill.diffcore import DimensionError, Tensor, gradcheck
from freqdistill.distill import (
    ConfigError, DistillConfig, FreqDistiller, GateMLP, Projection, combined_gate, distill_train,
    freekd_loss, gate, normalize_gate, relational_attention, teacher_features, total_loss,
)
from freqdistill.freqxform import BandSet, PadRecord, StructureError, dwt2d, get_transform
from freqdistill.prompt import FrequencyPrompt, PromptTrainConfig, band_masks, train_prompt
from freqdistill.toybench import SegNet, make_split, train_segnet


def one_band(values):
    arr = np.asarray(values, dtype=float).reshape(1, 1, 1, -1)
    return BandSet(1, [("LL1", Tensor(arr))], PadRecord(1, arr.shape[-1], 0, 0))


def flat_l1_oracle(a_bands, b_bands):
    """Mean over bands of each band's mean absolute difference."""
    per_band = [np.abs(a.data - b.data).mean() for a, b in zip(a_bands.tensors, b_bands.tensors)]
    return float(np.mean(per_band))


class TestRelationalAttention:
    def test_against_dense_gram(self):
        rng = np.random.default_rng(0)
        f, g = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 2, 2))
        up = g.repeat(2, axis=2).repeat(2, axis=3).reshape(2, 3, 16)
        logits = np.einsum("nik,njk->nij", up, f.reshape(2, 3, 16))
        e = np.exp(logits - logits.max(-1, keepdims=True))
        oracle = e / e.sum(-1, keepdims=True)
        assert_allclose(relational_attention(f, g).data, oracle, atol=1e-12)

    def test_rows_sum_to_one(self):
        a = relational_attention(np.random.default_rng(1).normal(size=(1, 5, 4, 4)),
                                 np.random.default_rng(2).normal(size=(1, 5, 2, 2)))
        assert a.shape == (1, 5, 5)
        assert_allclose(a.data.sum(-1), 1.0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            relational_attention(np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 2, 2)))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        f, g = rng.normal(size=(1, 3, 4, 4)) * 0.5, rng.normal(size=(1, 3, 2, 2)) * 0.5
        w = rng.normal(size=(1, 3, 3))
        assert gradcheck(lambda a, b: dc.sum(dc.mul(relational_attention(a, b), w)), [f, g]) <= 1e-5


class TestGate:
    def test_zero_final_layer_is_half(self):
        mlp = GateMLP(np.random.default_rng(0), 6, zero_final=True)
        omega = gate(Tensor(np.random.default_rng(1).normal(size=(2, 6, 6))), mlp)
        assert omega.shape == (2, 6)
        assert_array_equal(omega.data, 0.5)

    def test_row_permutation(self):
        mlp = GateMLP(np.random.default_rng(2), 4)
        a = np.random.default_rng(3).normal(size=(1, 4, 4))
        perm = np.array([2, 0, 3, 1])
        assert_allclose(gate(Tensor(a[:, perm]), mlp).data, gate(Tensor(a), mlp).data[:, perm], atol=1e-15)

    def test_range(self):
        mlp = GateMLP(np.random.default_rng(4), 8, reduction=2)
        omega = gate(Tensor(np.random.default_rng(5).normal(size=(3, 8, 8)) * 4), mlp).data
        assert np.all((omega > 0) & (omega < 1))

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            gate(Tensor(np.zeros((1, 4, 5))), GateMLP(np.random.default_rng(0), 4))

    def test_gradient_wrt_mlp_weights(self):
        mlp = GateMLP(np.random.default_rng(6), 4, reduction=2)
        a = Tensor(np.random.default_rng(7).normal(size=(2, 4, 4)))
        w = np.random.default_rng(8).normal(size=(2, 4))

        def fn(w1, b1, w2, b2):
            mlp.fc1.weight, mlp.fc1.bias, mlp.fc2.weight, mlp.fc2.bias = w1, b1, w2, b2
            return dc.sum(dc.mul(gate(a, mlp), w))
        params = [mlp.fc1.weight.data.copy(), mlp.fc1.bias.data + 0.3, mlp.fc2.weight.data.copy(),
                  mlp.fc2.bias.data.copy()]
        assert gradcheck(fn, params) <= 1e-5

    def test_combined_gate_is_product(self):
        a, b = np.array([[0.2, 0.9]]), np.array([[0.5, 0.4]])
        assert_allclose(combined_gate(Tensor(a), Tensor(b)).data, a * b, atol=1e-16)

    def test_normalized_gate_has_unit_mean(self):
        omega = normalize_gate(Tensor(np.array([[0.1, 0.3], [0.5, 0.5]]))).data
        assert_allclose(omega, [[0.5, 1.5], [1.0, 1.0]], atol=1e-15)


class TestFreekdLoss:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.ft = rng.normal(size=(2, 3, 8, 8))
        self.fs = rng.normal(size=(2, 3, 8, 8))
        self.bt = dwt2d(self.ft, "haar", 2)
        self.bs = dwt2d(self.fs, "haar", 2)
        self.ones = np.ones((2, 3))

    def test_identical_operands(self):
        prompt = FrequencyPrompt(Tensor(np.random.default_rng(0).normal(size=(7, 2, 3))), self.bt.labels)
        masks = band_masks(self.bt, prompt)
        omega = np.random.default_rng(1).uniform(0.1, 0.9, size=(2, 3))
        assert freekd_loss(self.bt, dwt2d(self.ft, "haar", 2), masks, omega).item() == 0.0

    def test_single_element_hand_value(self):
        assert freekd_loss(one_band([1.0]), one_band([0.0]), None, np.ones((1, 1))).item() == 1.0

    def test_doubling_gates_doubles_loss(self):
        omega = np.random.default_rng(2).uniform(0.1, 0.9, size=(2, 3))
        one = freekd_loss(self.bt, self.bs, None, omega).item()
        two = freekd_loss(self.bt, self.bs, None, 2 * omega).item()
        assert two == pytest.approx(2 * one, rel=1e-14)

    def test_ungated_unmasked_is_flat_l1(self):
        got = freekd_loss(self.bt, self.bs, None, self.ones).item()
        assert abs(got - flat_l1_oracle(self.bt, self.bs)) <= 1e-10

    def test_band_subset(self):
        low = freekd_loss(self.bt, self.bs, None, self.ones, "low").item()
        assert low == pytest.approx(np.abs(self.bt["LL2"].data - self.bs["LL2"].data).mean(), abs=1e-14)

    def test_prompt_receives_no_gradient(self):
        prompt = FrequencyPrompt(Tensor(np.random.default_rng(3).normal(size=(7, 2, 3)), requires_grad=True),
                                 self.bt.labels)
        masks = band_masks(self.bt, prompt)
        student = Tensor(self.fs, requires_grad=True)
        loss = freekd_loss(self.bt, dwt2d(student, "haar", 2), masks, self.ones)
        loss.backward()
        assert prompt.params.grad is None or not np.any(prompt.params.grad)
        assert np.any(student.grad)

    def test_gradient_masked_and_gated(self):
        fs = self.fs[:1, :2, :4, :4]
        bt = dwt2d(self.ft[:1, :2, :4, :4], "haar", 1)
        prompt = FrequencyPrompt(Tensor(np.random.default_rng(5).normal(size=(4, 2, 2))), bt.labels)
        masks = band_masks(bt, prompt)
        omega = np.random.default_rng(6).uniform(0.2, 0.8, size=(1, 2))
        fn = lambda x, w: freekd_loss(bt, dwt2d(x, "haar", 1), masks, w)  # noqa: E731
        assert gradcheck(fn, [fs, omega]) <= 1e-4

    def test_dft_gates_cover_both_halves(self):
        tr = get_transform("dft")
        bt, bs = tr.forward(Tensor(self.ft), 2), tr.forward(Tensor(self.fs), 2)
        assert bt["HH1"].shape[1] == 6
        got = freekd_loss(bt, bs, None, self.ones).item()
        assert abs(got - flat_l1_oracle(bt, bs)) <= 1e-10

    def test_layout_mismatch(self):
        with pytest.raises(DimensionError):
            freekd_loss(self.bt, dwt2d(self.fs, "haar", 1), None, self.ones)

    def test_missing_mask(self):
        prompt = FrequencyPrompt(Tensor(np.zeros((7, 2, 3))), self.bt.labels)
        masks = band_masks(self.bt, prompt, "low")
        with pytest.raises(StructureError):
            freekd_loss(self.bt, self.bs, masks, self.ones, "all")

    def test_total_loss(self):
        assert total_loss(Tensor(np.array(0.5)), Tensor(np.array(0.25)), 4.0).item() == 1.5


class TestDistillConfig:
    def test_names(self):
        assert DistillConfig(mu=0).name == "baseline"
        assert DistillConfig(transform="dct", mask_mode="off", band_subset="high").name == "dct-nomask-high"
        assert DistillConfig(variant="custom").name == "custom"

    @pytest.mark.parametrize("kwargs", [
        {"mu": -1.0}, {"band_subset": "mid"}, {"transform": "wht"}, {"mask_mode": "maybe"},
        {"level": 0}, {"clip_norm": 0.0}, {"schedule": "step"}, {"gate_norm": "max"},
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            DistillConfig(**kwargs)


@pytest.fixture(scope="module")
def small():
    train = make_split(21, 48, 16, 16, 3, level=2)
    val = make_split(22, 16, 16, 16, 3, level=2)
    teacher = SegNet(np.random.default_rng(0), 6, 3)
    train_segnet(teacher, train, 2, 0.05, seed=1, clip_norm=1.0)
    prompt = train_prompt(teacher, train, PromptTrainConfig(epochs=1, level=2))
    return train, val, teacher, prompt


class TestDistillTrain:
    def test_zero_mu_equals_plain_training(self, small):
        train, val, teacher, prompt = small
        cfg = DistillConfig(mu=0.0, level=2, epochs=2, seed=4)
        a = SegNet(np.random.default_rng(9), 3, 3)
        b = SegNet(np.random.default_rng(9), 3, 3)
        res = distill_train(teacher, a, prompt, train, cfg, val=val)
        hist = train_segnet(b, train, 2, cfg.lr, 4, cfg.batch_size, cfg.momentum, cfg.weight_decay,
                            val=val, clip_norm=cfg.clip_norm, schedule=cfg.schedule)
        for k, v in a.state_dict().items():
            assert v.tobytes() == b.state_dict()[k].tobytes()
        assert [r["mIoU"] for r in res.history] == [r["mIoU"] for r in hist]
        assert res.projection is None

    def test_untrained_prompt_rejected(self, small):
        train, _, teacher, _ = small
        fresh = FrequencyPrompt.init(dwt2d(np.zeros((1, 6, 8, 8)), "haar", 2).labels, 2, 6)
        with pytest.raises(ConfigError):
            distill_train(teacher, SegNet(np.random.default_rng(0), 3, 3), fresh, train,
                          DistillConfig(mu=1.0, level=2, epochs=1))

    def test_transform_mismatch_rejected(self, small):
        train, _, teacher, prompt = small
        with pytest.raises(ConfigError):
            distill_train(teacher, SegNet(np.random.default_rng(0), 3, 3), prompt, train,
                          DistillConfig(mu=1.0, level=2, epochs=1, transform="dct"))
        with pytest.raises(ConfigError):
            distill_train(teacher, SegNet(np.random.default_rng(0), 3, 3), prompt, train,
                          DistillConfig(mu=1.0, level=3, epochs=1))

    def test_rows_and_extras(self, small):
        train, val, teacher, prompt = small
        res = distill_train(teacher, SegNet(np.random.default_rng(1), 3, 3), prompt, train,
                            DistillConfig(mu=1.0, level=2, epochs=2, seed=5), val=val)
        assert [r["epoch"] for r in res.history] == [1, 2]
        assert all(r["variant"] == "dwt-mask-all" and r["seed"] == 5 for r in res.history)
        assert all(r["distill_loss"] > 0 for r in res.history)
        assert res.projection is not None and res.teacher_gate is not None

    def test_rerun_bit_exact(self, small):
        train, val, teacher, prompt = small
        runs = []
        for _ in range(2):
            student = SegNet(np.random.default_rng(2), 3, 3)
            res = distill_train(teacher, student, prompt, train,
                                DistillConfig(mu=1.0, level=2, epochs=1, seed=6), val=val)
            runs.append((student.state_dict(), res.history))
        assert runs[0][1] == runs[1][1]
        for k in runs[0][0]:
            assert runs[0][0][k].tobytes() == runs[1][0][k].tobytes()

    def test_stage_two_leaves_prompt_and_teacher_alone(self, small):
        train, _, teacher, prompt = small
        before_p = prompt.params.data.copy()
        before_t = {k: v.copy() for k, v in teacher.state_dict().items()}
        distill_train(teacher, SegNet(np.random.default_rng(3), 3, 3), prompt, train,
                      DistillConfig(mu=1.0, level=2, epochs=1))
        assert_array_equal(prompt.params.data, before_p)
        for k, v in teacher.state_dict().items():
            assert_array_equal(v, before_t[k])

    def test_self_distillation_fixpoint(self, small):
        train, _, teacher, prompt = small
        cfg = DistillConfig(mu=1.0, level=2, identity_projection=True)
        cache = teacher_features(teacher, train.images)
        distiller = FreqDistiller(cache, teacher, prompt, cfg, np.random.default_rng(0))
        idx = np.arange(8)
        _, taps = teacher(Tensor(train.images[idx]))
        assert distiller(idx, taps).item() == 0.0

    def test_projection_identity_requires_equal_widths(self):
        with pytest.raises(DimensionError):
            Projection(np.random.default_rng(0), 3, 4, identity=True)
