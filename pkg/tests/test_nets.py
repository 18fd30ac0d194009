import numpy as np
import pytest

from autolink.diffgeom import EdgeGraph, render_edge_map, soft_argmax
from autolink.nets import Decoder, Encoder, FeatureExtractor, decode, encode, extract_features, reconstruction_loss
from autolink.numcore import Tensor
from kinks import checked_gradient_error


@pytest.fixture(scope="module")
def images():
    return Tensor(np.random.default_rng(0).uniform(size=(2, 3, 64, 64)).astype(np.float32))


class TestEncoder:
    def test_heatmap_shape(self, images):
        assert encode(Encoder(8), images).shape == (2, 8, 16, 16)

    def test_deterministic(self, images):
        a = Encoder(5, rng=np.random.default_rng(3))
        b = Encoder(5, rng=np.random.default_rng(3))
        np.testing.assert_array_equal(a(images).data, b(images).data)

    def test_wrong_shape(self):
        with pytest.raises(ValueError, match="64"):
            Encoder(4)(Tensor(np.zeros((1, 3, 32, 32), np.float32)))

    def test_finite_on_random_batches(self):
        enc = Encoder(4, image_size=16)
        rng = np.random.default_rng(1)
        for _ in range(100):
            out = enc(Tensor(rng.uniform(size=(1, 3, 16, 16)).astype(np.float32)))
            assert np.isfinite(out.data).all()

    def test_parameter_count_depends_only_on_config(self):
        n = lambda e: sum(p.size for p in e.params().values())  # noqa: E731
        assert n(Encoder(8, rng=np.random.default_rng(0))) == n(Encoder(8, rng=np.random.default_rng(9)))
        assert n(Encoder(8)) - n(Encoder(4)) == 4 * 33  # 1x1 head: 32 weights + bias per keypoint


class TestDecoder:
    def test_output_shape(self, images):
        e = Tensor(np.zeros((2, 1, 64, 64), np.float32))
        assert decode(Decoder(1), images, e, Tensor(np.float32(1.0))).shape == (2, 3, 64, 64)

    def test_alpha_irrelevant_for_blank_masked_image(self):
        dec = Decoder(1)
        blank = Tensor(np.zeros((1, 3, 16, 16), np.float32))
        e = Tensor(np.random.default_rng(2).uniform(size=(1, 1, 16, 16)).astype(np.float32))
        a = dec(blank, e, Tensor(np.float32(1.0))).data
        b = dec(blank, e, Tensor(np.float32(2.0))).data
        np.testing.assert_array_equal(a, b)

    def test_channel_mismatch(self, images):
        with pytest.raises(ValueError, match="edge channel"):
            Decoder(1)(images, Tensor(np.zeros((2, 6, 64, 64), np.float32)), Tensor(np.float32(1.0)))

    def test_alpha_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        dec = Decoder(1, rng=rng, dtype=np.float64)
        masked = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        edge = Tensor(rng.uniform(size=(1, 1, 8, 8)))
        worst, done = 0.0, 0
        while done < 100:
            alpha = Tensor(np.array(rng.uniform(0.5, 2.0)), requires_grad=True)
            err = checked_gradient_error(lambda: dec(masked, edge, alpha), [alpha])
            if err is None:
                continue
            worst, done = max(worst, err), done + 1
        assert worst < 1e-3


class TestFeatureExtractor:
    def test_shapes(self, images):
        feats = extract_features(FeatureExtractor(0), images)
        assert [f.shape[1:] for f in feats] == [(16, 32, 32), (32, 16, 16), (64, 8, 8)]

    def test_reproducible_from_seed(self, images):
        a = FeatureExtractor(5)(images)
        b = FeatureExtractor(5)(images)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_weights_are_frozen(self):
        assert not any(t.requires_grad for t in FeatureExtractor(0).tensors().values())

    def test_sensitive_to_single_pixel(self):
        rng = np.random.default_rng(6)
        fx = FeatureExtractor(1)
        for _ in range(20):
            img = rng.uniform(size=(1, 3, 32, 32))
            other = img.copy()
            other[0, rng.integers(3), rng.integers(32), rng.integers(32)] += 0.5
            fa = fx(Tensor(img.astype(np.float32)))[0].data
            fb = fx(Tensor(other.astype(np.float32)))[0].data
            assert not np.array_equal(fa, fb)


class TestLoss:
    def test_zero_for_identical_images(self, images):
        assert reconstruction_loss(images, images, FeatureExtractor(0)).item() == 0.0

    def test_pixel_term_weight(self):
        fx = FeatureExtractor(0)
        a = Tensor(np.zeros((1, 3, 16, 16), np.float32))
        b = Tensor(np.full((1, 3, 16, 16), 0.5, np.float32))
        with_px = reconstruction_loss(a, b, fx, pixel_weight=0.1).item()
        without = reconstruction_loss(a, b, fx, pixel_weight=0.0).item()
        assert with_px - without == pytest.approx(0.1 * 0.25, rel=1e-5)

    def test_batch_duplication_invariant(self, images):
        fx = FeatureExtractor(0)
        recon = Tensor(images.data[::-1].copy())
        one = reconstruction_loss(images, recon, fx).item()
        dup = reconstruction_loss(
            Tensor(np.concatenate([images.data] * 2)), Tensor(np.concatenate([recon.data] * 2)), fx
        ).item()
        assert dup == pytest.approx(one, rel=1e-6)


class TestEndToEnd:
    def test_miniature_gradient_reaches_encoder(self):
        """8x8 images, K=2: loss -> decoder -> edge map -> soft-argmax -> encoder."""
        rng = np.random.default_rng(11)
        enc = Encoder(2, image_size=8, rng=rng, dtype=np.float64)
        dec = Decoder(1, rng=rng, dtype=np.float64)
        fx = FeatureExtractor(3, dtype=np.float64)
        graph = EdgeGraph(2, sigma2=0.05, dtype=np.float64)
        img = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        masked = Tensor(img.data * (rng.uniform(size=(1, 1, 8, 8)) > 0.5))
        head_w = enc.head.w

        def build():
            kps = soft_argmax(enc(img))
            edge = render_edge_map(kps, graph, 8, 8)
            return reconstruction_loss(img, dec(masked, edge, graph.alpha), fx)

        err = checked_gradient_error(build, [head_w, graph.raw_weights, graph.alpha])
        assert err is not None, "seeded configuration straddles a relu kink"
        assert err < 1e-2
        build().backward()
        assert np.abs(head_w.grad).max() > 0
