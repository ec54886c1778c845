import math

import numpy as np
import pytest

from anatoseg.diffops import Tensor
from anatoseg.masklosses import (
    AnatomyCoefficients, anatomy_pair_loss, bce, coefficients, dice_loss, soft_dice, soft_union,
    supervised_loss, total_loss,
)

Y = np.array([[1.0, 0.0], [0.0, 0.0]])
P = np.array([[0.5, 0.5], [0.0, 0.0]])


def block(r0, c0, size=2, shape=(6, 6)):
    m = np.zeros(shape)
    m[r0:r0 + size, c0:c0 + size] = 1.0
    return m


class TestSoftDice:
    def test_disjoint_blocks(self):
        # (0 + 1) / (4 + 4 + 1)
        assert float(soft_dice(block(0, 0), block(3, 3)).data) == pytest.approx(1 / 9)

    def test_identical(self):
        assert float(soft_dice(block(1, 1), block(1, 1)).data) == pytest.approx(1.0)

    def test_both_empty_is_one(self):
        z = np.zeros((4, 4))
        assert float(soft_dice(z, z).data) == pytest.approx(1.0)

    def test_batch_mean(self):
        a = np.stack([block(0, 0), block(0, 0)])
        b = np.stack([block(0, 0), block(3, 3)])
        assert float(soft_dice(a, b).data) == pytest.approx((1 + 1 / 9) / 2)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            soft_dice(Y, P, eps=0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_dice(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_union(self):
        np.testing.assert_allclose(soft_union(Y, P).data, [[1.0, 0.5], [0.0, 0.0]])


class TestCoefficients:
    @pytest.mark.parametrize("m,expected", [(1, (1, 0, 0)), (-1, (0, -1, 0)), (2, (0, 0, 1))])
    def test_truth_table(self, m, expected):
        assert coefficients(m).as_tuple() == expected

    def test_unknown_has_no_loss(self):
        with pytest.raises(ValueError):
            coefficients(0)

    def test_type(self):
        assert isinstance(coefficients(2), AnatomyCoefficients)


class TestAnatomyPairLoss:
    # frozen values computed by hand on the 2x2 masks above, eps = 1
    def test_subset_code(self):
        # dice(1 - Y, P) = (2*0.5 + 1) / (3 + 1 + 1)
        assert float(anatomy_pair_loss(Y, P, 1).data) == pytest.approx(0.4)

    def test_superset_code(self):
        # -dice(Y, Y + P - YP) = -(2 + 1) / (1 + 1.5 + 1)
        assert float(anatomy_pair_loss(Y, P, -1).data) == pytest.approx(-3 / 3.5)

    def test_exclusive_code(self):
        # dice(Y, P) = (2*0.5 + 1) / (1 + 1 + 1)
        assert float(anatomy_pair_loss(Y, P, 2).data) == pytest.approx(2 / 3)

    @pytest.mark.parametrize("m", [1, -1, 2])
    def test_loss_mode_is_one_minus(self, m):
        sim = float(anatomy_pair_loss(Y, P, m, mode="similarity").data)
        loss = float(anatomy_pair_loss(Y, P, m, mode="loss").data)
        c = sum(coefficients(m).as_tuple())
        assert loss == pytest.approx(c - sim)

    def test_exclusive_prefers_disjoint_prediction(self):
        y = block(0, 0)
        assert float(anatomy_pair_loss(y, block(3, 3), 2).data) < float(anatomy_pair_loss(y, block(0, 0), 2).data)

    def test_superset_prefers_prediction_inside_label(self):
        # code -1: class j lies inside labeled class i; leaking outside raises the loss
        y = block(0, 0, size=4)
        inside, leaking = block(1, 1), block(3, 3, size=3)
        assert float(anatomy_pair_loss(y, inside, -1).data) == pytest.approx(-1.0)
        assert float(anatomy_pair_loss(y, leaking, -1).data) > -1.0

    def test_unknown_code_rejected(self):
        with pytest.raises(ValueError):
            anatomy_pair_loss(Y, P, 0)

    def test_label_is_constant(self):
        y = Tensor(Y, requires_grad=True)
        p = Tensor(P, requires_grad=True)
        anatomy_pair_loss(y, p, 2).backward()
        assert y.grad is None and p.grad is not None


class TestSupervised:
    def test_bce_value(self):
        y, p = np.array([1.0, 0.0]), np.array([0.8, 0.3])
        assert float(bce(y, p).data) == pytest.approx(-(math.log(0.8) + math.log(0.7)) / 2, rel=1e-6)

    def test_bce_clamped(self):
        assert float(bce(np.array([1.0]), np.array([0.0])).data) == pytest.approx(-math.log(1e-7), rel=1e-5)

    def test_dice_loss_perfect(self):
        assert float(dice_loss(block(1, 1), block(1, 1)).data) == pytest.approx(0.0, abs=1e-7)

    def test_supervised_is_sum(self):
        y, p = block(0, 0), np.clip(block(0, 1), 0.1, 0.9)
        total = float(supervised_loss(y, p).data)
        assert total == pytest.approx(float(dice_loss(y, p).data) + float(bce(y, p).data), rel=1e-6)


class TestTotalLoss:
    def test_adds_weighted_terms(self):
        row = [1, 2, -1]
        preds = {1: P, 2: P}
        got = float(total_loss(Y, P, preds, row, 0.1, i=0).data)
        want = (float(supervised_loss(Y, P).data)
                + 0.1 * float(anatomy_pair_loss(Y, P, 2).data) + 0.1 * float(anatomy_pair_loss(Y, P, -1).data))
        assert got == pytest.approx(want, rel=1e-6)

    def test_zero_lambda_is_supervised(self):
        got = float(total_loss(Y, P, {1: P}, [1, 2], 0.0, i=0).data)
        assert got == pytest.approx(float(supervised_loss(Y, P).data))

    def test_rejects_unknown_relation(self):
        with pytest.raises(ValueError):
            total_loss(Y, P, {1: P}, [1, 0], 0.1, i=0)

    def test_rejects_self_pair(self):
        with pytest.raises(ValueError):
            total_loss(Y, P, {0: P}, [1, 2], 0.1, i=0)
