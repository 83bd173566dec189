"""Encoder tests: token-count law, patchify inverse, forward passes,
initialization variants, dual path."""

import numpy as np
import pytest

from vtla import encoders as enc
from vtla import numerics as nm
from vtla.errors import ConfigError, ShapeError
from vtla.numerics import SeededRng, Tensor

TINY = enc.ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=1, heads=2)
SMALL = enc.ViTConfig(image_size=24, patch_size=8, embed_dim=32, depth=2, heads=4)


def rand_img(seed, size=24):
    rng = SeededRng(seed, "img")
    return rng.integers(0, 256, (3, size, size)).astype(np.uint8)


class TestTokenCountLaw:
    def test_default_config_yields_256_tokens(self):
        cfg = enc.ViTConfig()
        assert cfg.image_size == 224 and cfg.patch_size == 14
        assert cfg.n_tokens == 256

    def test_patchify_224_14(self):
        img = rand_img(0, 224)
        seq = enc.patchify(img.astype(np.float32), 14)
        assert tuple(seq.tokens.shape) == (256, 588)

    def test_patchify_28_14(self):
        img = rand_img(1, 28)
        seq = enc.patchify(img.astype(np.float32), 14)
        assert tuple(seq.tokens.shape) == (4, 588)

    def test_dual_path_512_tokens(self):
        cfg = enc.ViTConfig(image_size=224, patch_size=14, embed_dim=32, depth=1, heads=2)
        pre = enc.EncoderWeights.init_scratch(cfg, 0, scope="pre").copy("vision-pretrained")
        sa = enc.EncoderWeights.init_scratch(cfg, 1, scope="sa").copy("semantically-aligned")
        out = enc.dual_encode(rand_img(2, 224), pre, sa)
        assert len(out) == 512

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError):
            enc.ViTConfig(image_size=224, patch_size=13)


class TestPatchify:
    def test_reassembly_bit_exact(self):
        img = rand_img(3, 24).astype(np.float32)
        seq = enc.patchify(img, 8)
        back = enc.unpatchify(seq.tokens.data, 8, 24, 24)
        assert np.array_equal(back, img)

    def test_row_major_order(self):
        img = np.zeros((3, 8, 8), dtype=np.float32)
        img[:, 0:4, 4:8] = 7.0  # second patch in row-major order
        seq = enc.patchify(img, 4)
        assert (seq.tokens.data[1] == 7.0).all()
        assert (seq.tokens.data[0] == 0.0).all()

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            enc.patchify(np.zeros((3, 10, 10), dtype=np.float32), 4)


class TestVitForward:
    def test_depth_zero_is_projection_plus_positions(self):
        cfg = enc.ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=0, heads=2)
        w = enc.EncoderWeights.init_scratch(cfg, 0)
        img = rand_img(4, 8).astype(np.float32)
        seq = enc.patchify(img, 4)
        out = enc.vit_forward(seq, w)
        expected = seq.tokens.data @ w.params["patch.w"].data + w.params["patch.b"].data \
            + w.params["pos"].data
        assert np.allclose(out.tokens.data, expected, atol=1e-6)
        assert len(out) == len(seq)

    def test_position_sensitivity(self):
        w = enc.EncoderWeights.init_scratch(SMALL, 0)
        img = rand_img(5, 24).astype(np.float32)
        base = enc.vit_forward(enc.patchify(img, 8), w).tokens.data
        perm = SeededRng(1, "perm").permutation(SMALL.n_tokens)
        while np.array_equal(perm, np.arange(SMALL.n_tokens)):
            perm = SeededRng(2, "perm").permutation(SMALL.n_tokens)
        w.params["pos"].data = w.params["pos"].data[perm]
        permuted = enc.vit_forward(enc.patchify(img, 8), w).tokens.data
        assert not np.allclose(base, permuted, atol=1e-5)

    def test_gradient_through_one_block(self):
        cfg = enc.ViTConfig(image_size=4, patch_size=2, embed_dim=8, depth=1, heads=2)
        w = enc.EncoderWeights.init_scratch(cfg, 0, dtype=np.float64)
        rng = SeededRng(6, "vit-grad")
        patches = Tensor(rng.uniform((1, cfg.n_tokens, cfg.patch_dim), -1, 1,
                                     dtype=np.float64), requires_grad=True)

        def forward():
            out = enc.vit_forward_batch(patches, w)
            return nm.tsum(nm.mul(out, out))

        with nm.Tape() as tape:
            root = forward()
        nm.backward(tape, root)
        from tests.test_numerics import finite_difference
        for name in ("patch.w", "pos", "b0.qkv.w", "b0.ln1.g", "b0.mlp2.w"):
            p = w.params[name]
            fd = finite_difference(lambda: float(forward().data), p.data)
            scale = np.maximum(np.abs(fd), 1.0)
            err = np.max(np.abs(p.grad - fd) / scale)
            assert err < 1e-5, f"{name}: rel err {err:.2e}"
            p.grad = None


class TestInitVariants:
    def test_fs_deterministic_and_seed_sensitive(self):
        a = enc.init_tactile_encoder("fs", SMALL, seed=3)
        b = enc.init_tactile_encoder("fs", SMALL, seed=3)
        c = enc.init_tactile_encoder("fs", SMALL, seed=4)
        assert a.provenance == "scratch"
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)
        assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)

    def test_pre_is_byte_equal_copy(self, tmp_path):
        vision = enc.EncoderWeights.init_scratch(SMALL, 7, scope="vision")
        vision.provenance = "vision-pretrained"
        pre = enc.init_tactile_encoder("pre", vision=vision)
        assert pre.provenance == "vision-pretrained"
        p1, p2 = tmp_path / "a.vtlf", tmp_path / "b.vtlf"
        vision.save(p1)
        pre.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_sa_copy_and_missing_sources(self):
        sa_src = enc.EncoderWeights.init_scratch(SMALL, 8, scope="aligned")
        sa = enc.init_tactile_encoder("sa", aligned=sa_src)
        assert sa.provenance == "semantically-aligned"
        for k in sa_src.params:
            assert np.array_equal(sa.params[k].data, sa_src.params[k].data)
        with pytest.raises(ConfigError):
            enc.init_tactile_encoder("pre")
        with pytest.raises(ConfigError):
            enc.init_tactile_encoder("sa")

    def test_checkpoint_round_trip_with_provenance(self, tmp_path):
        w = enc.EncoderWeights.init_scratch(SMALL, 9).copy("semantically-aligned")
        w.save(tmp_path / "enc.vtlf")
        loaded = enc.EncoderWeights.load(tmp_path / "enc.vtlf")
        assert loaded.provenance == "semantically-aligned"
        assert loaded.cfg == SMALL
        for k in w.params:
            assert np.array_equal(loaded.params[k].data, w.params[k].data)


class TestDualEncode:
    def test_halves_equal_single_paths(self):
        pre = enc.EncoderWeights.init_scratch(SMALL, 0, scope="p").copy("vision-pretrained")
        sa = enc.EncoderWeights.init_scratch(SMALL, 1, scope="s").copy("semantically-aligned")
        img = rand_img(7, 24)
        dual = enc.dual_encode(img, pre, sa)
        n = SMALL.n_tokens
        single_pre = enc.encode_image(img, pre, "tactile")
        single_sa = enc.encode_image(img, sa, "tactile")
        assert np.array_equal(dual.tokens.data[:n], single_pre.tokens.data)
        assert np.array_equal(dual.tokens.data[n:], single_sa.tokens.data)

    def test_zero_image_bias_responses_differ(self):
        pre = enc.EncoderWeights.init_scratch(SMALL, 0, scope="p")
        sa = enc.EncoderWeights.init_scratch(SMALL, 1, scope="s")
        img = np.zeros((3, 24, 24), dtype=np.uint8)
        dual = enc.dual_encode(img, pre, sa)
        n = SMALL.n_tokens
        assert not np.allclose(dual.tokens.data[:n], dual.tokens.data[n:])

    def test_dim_mismatch_rejected(self):
        other = enc.ViTConfig(image_size=24, patch_size=8, embed_dim=16, depth=1, heads=2)
        pre = enc.EncoderWeights.init_scratch(SMALL, 0)
        sa = enc.EncoderWeights.init_scratch(other, 1)
        with pytest.raises(ShapeError):
            enc.dual_encode(rand_img(8, 24), pre, sa)
