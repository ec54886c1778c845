import numpy as np
import pytest
from hypothesis import given, strategies as st

from anatoseg.tokenbank import N_SCALES, TOKEN_STD, BlockWidths, TokenBank, slice_bounds


class TestSliceBounds:
    W = BlockWidths((8, 16, 32), 64)

    @pytest.mark.parametrize("b,expected", [(1, (0, 8)), (2, (8, 24)), (3, (24, 56))])
    def test_prefix_sums(self, b, expected):
        assert slice_bounds(self.W, b) == expected

    @pytest.mark.parametrize("b", [0, 4, -1])
    def test_out_of_range(self, b):
        with pytest.raises(IndexError):
            slice_bounds(self.W, b)

    @given(st.lists(st.integers(1, 64), min_size=1, max_size=6), st.integers(1, 64))
    def test_slices_tile_the_token(self, blocks, d_gap):
        w = BlockWidths(tuple(blocks), d_gap)
        bounds = [slice_bounds(w, b) for b in range(1, w.n_blocks + 1)]
        assert bounds[0][0] == 0
        assert all(prev[1] == cur[0] for prev, cur in zip(bounds, bounds[1:]))
        assert sum(e - s for s, e in bounds) + d_gap == w.d

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            BlockWidths((8, 0), 4)


class TestTokenBank:
    def test_shapes(self):
        bank = TokenBank(8, BlockWidths((16, 32, 64, 128), 128), seed=0)
        assert bank.class_tokens.shape == (8, 368)
        assert bank.scale_tokens.shape == (N_SCALES, 368)

    def test_init_distribution(self):
        bank = TokenBank(64, BlockWidths((16, 32, 64, 128), 128), seed=1)
        vals = bank.class_tokens.data
        assert np.all(np.isfinite(vals))
        assert abs(vals.mean()) < 0.002
        assert vals.std() == pytest.approx(TOKEN_STD, rel=0.05)

    def test_gap_slice_is_trailing(self):
        bank = TokenBank(8, BlockWidths((16, 32, 64, 128), 128), seed=0)
        c, s = bank.gap_slice(3, 2)
        np.testing.assert_array_equal(c, bank.class_tokens.data[3, 240:368])
        np.testing.assert_array_equal(s, bank.scale_tokens.data[2, 240:368])

    @pytest.mark.parametrize("i,m", [(8, 0), (-1, 0), (0, 4)])
    def test_gap_slice_bounds(self, i, m):
        bank = TokenBank(8, BlockWidths((4, 8), 8))
        with pytest.raises(IndexError):
            bank.gap_slice(i, m)

    def test_add_class_keeps_rows(self):
        bank = TokenBank(8, BlockWidths((4, 8), 8), seed=0)
        bigger = bank.add_class(seed=5)
        assert bigger.n_classes == 9 and bigger.d == bank.d
        assert bigger.class_tokens.data[:8].tobytes() == bank.class_tokens.data.tobytes()
        assert bigger.scale_tokens.data.tobytes() == bank.scale_tokens.data.tobytes()
        assert bank.n_classes == 8

    def test_add_class_deterministic(self):
        bank = TokenBank(8, BlockWidths((4, 8), 8), seed=0)
        a, b = bank.add_class(seed=5), bank.add_class(seed=5)
        np.testing.assert_array_equal(a.class_tokens.data, b.class_tokens.data)

    def test_same_seed_same_bank(self):
        w = BlockWidths((4, 8), 8)
        np.testing.assert_array_equal(TokenBank(3, w, 7).class_tokens.data, TokenBank(3, w, 7).class_tokens.data)
