import numpy as np
import pytest

from anatoseg import diffops as F
from anatoseg.diffops import Parameter, ShapeError, Tensor

from gradcases import ALL_CASES, run_case

SEEDS = range(20)


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_finite_difference(name):
    worst = max(run_case(name, s) for s in SEEDS)
    assert worst < 1e-4, f"{name}: {worst:.2e}"


class TestEngine:
    def test_reused_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x + x
        y.sum().backward()
        assert x.grad[0] == pytest.approx(7.0)

    def test_broadcast_grad_is_reduced(self):
        x = Tensor(np.ones((1, 3)), requires_grad=True)
        (x + np.ones((4, 3))).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 3), 4.0))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with F.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y._parents == ()

    def test_tape_freed_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        mid = x * 2.0
        out = (mid * mid).sum()
        out.backward()
        assert mid._parents == () and mid._backward is None
        np.testing.assert_allclose(x.grad, np.full(3, 8.0))

    def test_dtype_preserved(self):
        x = Tensor(np.ones((1, 1, 4, 4)), dtype=np.float64)
        w = Tensor(np.ones((2, 1, 3, 3)), dtype=np.float64)
        assert F.conv2d(x, w, padding=1).dtype == np.float64
        assert Tensor(np.ones(2, dtype=int)).dtype == np.float32

    def test_parameter_defaults(self):
        p = Parameter(np.zeros(3), "w")
        assert p.requires_grad and p.dtype == np.float32 and p.name == "w"

    def test_conv_shape_mismatch(self):
        with pytest.raises(ShapeError):
            F.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))

    def test_log_domain(self):
        with pytest.raises(FloatingPointError):
            F.log(Tensor(np.array([1.0, 0.0])))

    def test_group_norm_bad_groups(self):
        g = Tensor(np.ones(3))
        with pytest.raises(ShapeError):
            F.group_norm(Tensor(np.ones((1, 3, 2, 2))), g, g, groups=2)


class TestOperatorValues:
    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       Tensor(b, dtype=np.float64), padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 4, 6, 6))
        for i in range(6):
            for j in range(6):
                ref[:, :, i, j] = np.einsum("nchw,ochw->no", xp[:, :, i:i + 3, j:j + 3], w) + b
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_strided_conv_shape(self):
        out = F.conv2d(Tensor(np.ones((1, 2, 8, 8))), Tensor(np.ones((3, 2, 3, 3))), stride=2)
        assert out.shape == (1, 3, 3, 3)

    def test_max_pool_first_index_on_ties(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        F.max_pool2(x).sum().backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_softmax_sums_to_one(self):
        s = F.softmax_channels(Tensor(np.random.default_rng(1).normal(size=(2, 2, 3, 3)) * 50)).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=1e-6)

    def test_group_norm_statistics(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, size=(2, 4, 5, 5))
        one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
        y = F.group_norm(Tensor(x, dtype=np.float64), one, zero).data
        np.testing.assert_allclose(y.reshape(2, -1).mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(y.reshape(2, -1).std(axis=1), 1.0, atol=1e-4)

    def test_upsample_then_gap_preserves_mean(self):
        x = np.random.default_rng(3).normal(size=(1, 2, 4, 4))
        up = F.upsample_nearest2(Tensor(x, dtype=np.float64))
        np.testing.assert_allclose(F.global_avg_pool(up).data, x.mean(axis=(2, 3)))


class TestGradCheckHelpers:
    def test_detects_wrong_gradient(self):
        def bad(x):
            out = F.relu(x)
            out._backward = lambda g: (g * 2.0,)
            return out.sum()
        assert F.grad_check(bad, np.ones(4)) > 0.4

    def test_params_report_names(self):
        rng = np.random.default_rng(0)
        w = Parameter(rng.normal(size=(3, 2)), "w", np.float64)
        x = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)

        def loss():
            y = F.linear(x, w)
            return (y * y).sum()

        report = F.grad_check_params(loss, [w])
        assert set(report) == {"w"} and report["w"] < 1e-6
