import numpy as np
import pytest

from autolink.masking import ConfigError, apply_mask, make_mask
from autolink.numcore import Tensor, tsum


class TestMakeMask:
    def test_random_combinations_mask_floor_ratio_cells(self):
        rng = np.random.default_rng(99)
        for _ in range(20):
            patch = int(rng.choice([1, 2, 4, 8, 16]))
            side = int(rng.integers(1, 17))
            ratio = float(rng.uniform(0, 1))
            m = make_mask(patch * side, patch, ratio, int(rng.integers(2**31)))
            g = side * side
            assert m.n_masked == int(np.floor(ratio * g))
            pix = m.pixel_mask()
            assert pix.shape == (patch * side, patch * side)
            assert (pix == 0).sum() == m.n_masked * patch * patch

    def test_defaults_hide_51_of_64_cells(self):
        assert make_mask(64, 8, 0.8, seed=0).n_masked == 51

    def test_same_seed_same_mask(self):
        a = make_mask(64, 8, 0.8, seed=42)
        b = make_mask(64, 8, 0.8, seed=42)
        np.testing.assert_array_equal(a.keep, b.keep)

    def test_different_seeds_usually_differ(self):
        masks = {make_mask(64, 8, 0.5, seed=s).keep.tobytes() for s in range(20)}
        assert len(masks) == 20

    def test_cells_are_whole_patches(self):
        pix = make_mask(32, 4, 0.5, seed=3).pixel_mask()
        blocks = pix.reshape(8, 4, 8, 4)
        assert np.all(blocks.min(axis=(1, 3)) == blocks.max(axis=(1, 3)))

    @pytest.mark.parametrize("size,patch,ratio", [(64, 7, 0.5), (64, 8, 1.5), (64, 8, -0.1), (64, 0, 0.5)])
    def test_invalid(self, size, patch, ratio):
        with pytest.raises(ConfigError):
            make_mask(size, patch, ratio, 0)


class TestApplyMask:
    def test_ratio_zero_is_identity(self, rng):
        img = rng.uniform(size=(3, 16, 16))
        np.testing.assert_array_equal(apply_mask(img, make_mask(16, 4, 0.0, 1)), img)

    def test_ratio_one_zeroes_everything(self, rng):
        img = rng.uniform(size=(3, 16, 16))
        assert not apply_mask(img, make_mask(16, 4, 1.0, 1)).any()

    def test_masked_pixels_get_no_gradient(self, rng):
        m = make_mask(16, 4, 0.5, 5)
        x = Tensor(rng.uniform(size=(3, 16, 16)), requires_grad=True)
        tsum(apply_mask(x, m)).backward()
        np.testing.assert_array_equal(x.grad, np.broadcast_to(m.pixel_mask(), (3, 16, 16)))

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError, match="16x16"):
            apply_mask(rng.uniform(size=(3, 16, 16)), make_mask(32, 4, 0.5, 0))
