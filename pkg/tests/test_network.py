import numpy as np
import pytest

from anatoseg import diffops as F
from anatoseg.masklosses import anatomy_pair_loss, supervised_loss
from anatoseg.network import (
    HEAD_PARAMS, BackboneConfig, OneHotEmbedding, SegNet, apply_head, count_parameters, split_omega,
)
from anatoseg.tokenbank import TokenBank

TINY = BackboneConfig((4, 8), 8)


def tiny_model(n_classes=8, seed=0, dtype=np.float32):
    net = SegNet(TINY, seed)
    bank = TokenBank(n_classes, TINY.widths, seed + 1)
    return net.astype(dtype), bank.astype(dtype)


def images(n=2, size=16, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).uniform(size=(n, 3, size, size)).astype(dtype)


class TestHeadLayout:
    def test_total(self):
        assert HEAD_PARAMS == 162

    def test_split_sizes(self):
        p = split_omega(np.arange(162.0))
        sizes = [p.w1.size + p.b1.size, p.w2.size + p.b2.size, p.w3.size + p.b3.size]
        assert sizes == [72, 72, 18]
        assert p.w1.shape[-2:] == (8, 8) and p.w3.shape[-2:] == (2, 8)

    def test_split_order_weights_then_bias(self):
        p = split_omega(np.arange(162.0))
        assert p.w1.reshape(-1)[0] == 0 and p.b1[0] == 64
        assert p.w2.reshape(-1)[0] == 72 and p.b3[-1] == 161

    @pytest.mark.parametrize("n", [161, 163, 0])
    def test_wrong_length(self, n):
        with pytest.raises(ValueError):
            split_omega(np.zeros(n))

    def test_identity_layers_reduce_to_last(self):
        rng = np.random.default_rng(0)
        w3, b3 = rng.normal(size=(2, 8)), rng.normal(size=2)
        omega = np.concatenate([np.eye(8).ravel(), np.zeros(8), np.eye(8).ravel(), np.zeros(8), w3.ravel(), b3])
        feat = np.abs(rng.normal(size=(1, 8, 4, 4)))  # nonnegative so the relus are inert
        out = apply_head(F.Tensor(feat, dtype=np.float64), split_omega(omega[None])).data
        ref = np.einsum("oc,nchw->nohw", w3, feat) + b3[None, :, None, None]
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestFusionController:
    def test_zero_in_zero_out(self):
        net = SegNet(TINY, 0)
        z = np.zeros(8, np.float32)
        omega = net.fusion_controller(z, z, z)
        assert omega.shape == (162,) and not np.any(omega.data)

    def test_linear_without_bias(self):
        net = SegNet(TINY, 0)
        x = np.random.default_rng(1).normal(size=8).astype(np.float32)
        z = np.zeros(8, np.float32)
        np.testing.assert_allclose(net.fusion_controller(2 * x, z, z).data, 2 * net.fusion_controller(x, z, z).data,
                                   rtol=1e-5, atol=1e-6)

    def test_length_mismatch(self):
        net = SegNet(TINY, 0)
        with pytest.raises(ValueError):
            net.fusion_controller(np.zeros(8), np.zeros(7), np.zeros(8))


class TestForward:
    def test_shapes_and_range(self):
        net, bank = tiny_model()
        prob, logits = net(images(), [0, 3], [0, 1], bank)
        assert prob.shape == (2, 16, 16) and logits.shape == (2, 2, 16, 16)
        assert prob.data.min() >= 0 and prob.data.max() <= 1

    def test_deterministic(self):
        net, bank = tiny_model()
        a = net(images(), [1, 1], [2, 2], bank)[0].data
        b = net(images(), [1, 1], [2, 2], bank)[0].data
        assert a.tobytes() == b.tobytes()

    def test_class_id_changes_output(self):
        net, bank = tiny_model()
        a = net(images(), [0, 0], [0, 0], bank)[0].data
        b = net(images(), [5, 5], [0, 0], bank)[0].data
        assert np.abs(a - b).mean() > 0

    @pytest.mark.parametrize("cls,scale", [(8, 0), (0, 4), (-1, 0)])
    def test_invalid_ids(self, cls, scale):
        net, bank = tiny_model()
        with pytest.raises(IndexError):
            net(images(1), [cls], [scale], bank)

    def test_size_not_divisible(self):
        net, bank = tiny_model()
        with pytest.raises(ValueError):
            net(images(1, size=18), [0], [0], bank)

    def test_onehot_conditioner(self):
        net = SegNet(TINY, 0)
        emb = OneHotEmbedding(8, TINY.widths, 1)
        prob, _ = net(images(), [0, 1], [0, 0], emb)
        assert prob.shape == (2, 16, 16)
        assert emb.parameters()[0].shape[1] == TINY.widths.d


class TestParameterCounts:
    def test_phi_count_default_width(self):
        counts = count_parameters(SegNet(BackboneConfig((16, 32, 64, 128), 128), 0))
        assert counts["phi"] == 128 * 162 + 162 == 20898
        assert counts["head (generated per image)"] == 162

    def test_backbone_independent_of_classes(self):
        net = SegNet(TINY, 0)
        a = count_parameters(net, TokenBank(8, TINY.widths))
        b = count_parameters(net, TokenBank(9, TINY.widths))
        assert a["backbone"] == b["backbone"] and a["phi"] == b["phi"]
        assert b["tokens.class"] - a["tokens.class"] == TINY.widths.d

    def test_needs_two_blocks(self):
        with pytest.raises(ValueError):
            BackboneConfig((8,), 8)


def test_add_class_keeps_existing_outputs():
    net, bank = tiny_model()
    bigger = bank.add_class(seed=99)
    x = images(8, seed=4)
    ids = list(range(8))
    before = net(x, ids, [0, 1, 2, 3, 0, 1, 2, 3], bank)[1].data
    after = net(x, ids, [0, 1, 2, 3, 0, 1, 2, 3], bigger)[1].data
    assert before.tobytes() == after.tobytes()
    assert net(x[:1], [8], [0], bigger)[0].shape == (1, 16, 16)


def tiny_end_to_end_errors(seed=0, max_entries=6):
    """Max relative finite-difference error per parameter for supervised + anatomy loss."""
    net, bank = tiny_model(seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(2, 3, 16, 16))
    y = (rng.uniform(size=(2, 16, 16)) < 0.3).astype(np.float64)

    def loss():
        p, _ = net(x, [2, 2], [1, 1], bank)
        q, _ = net(x, [3, 3], [1, 1], bank)
        return supervised_loss(y, p) + anatomy_pair_loss(y, q, 2) * 0.1

    return F.grad_check_params(loss, net.parameters() + bank.parameters(), h=1e-5, max_entries=max_entries,
                               seed=seed)


def test_end_to_end_gradient():
    errors = tiny_end_to_end_errors()
    assert "tokens.class" in errors and "phi.w" in errors
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-3, (worst, errors[worst])
