import math

import numpy as np
import pytest
from scipy import special

from dpmae import autodiff as ad
from dpmae import mae
from oracles import directional_difference


TINY = mae.MaeConfig(image_size=8, patch_size=4, encoder_depth=2, encoder_width=16,
                     encoder_heads=2, decoder_depth=1, decoder_width=8,
                     decoder_heads=2, mask_ratio=0.5)


class TestPatchify:
    def test_patch_count_and_dim(self):
        img = np.zeros((3, 32, 32))
        patches = mae.patchify(img, 4)
        assert patches.shape == (64, 48)

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(0)
        imgs = rng.random((2, 3, 16, 16))
        assert np.array_equal(mae.unpatchify(mae.patchify(imgs, 4), 4, 3), imgs)

    def test_constant_image_gives_identical_rows(self):
        img = np.full((3, 16, 16), 0.7)
        patches = mae.patchify(img, 8)
        assert np.allclose(patches, patches[0])

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError):
            mae.patchify(np.zeros((3, 10, 10)), 4)


class TestRandomMask:
    def test_published_ratio_arithmetic(self):
        spec = mae.random_mask(196, 0.75, seed=1)
        assert spec.masked_indices.size == 147
        assert spec.kept_indices.size == 49

    def test_zero_ratio_masks_nothing(self):
        spec = mae.random_mask(4, 0.0, seed=1)
        assert spec.masked_indices.size == 0
        assert np.array_equal(spec.kept_indices, np.arange(4))

    def test_deterministic_per_seed(self):
        a = mae.random_mask(64, 0.75, seed=9)
        b = mae.random_mask(64, 0.75, seed=9)
        assert np.array_equal(a.kept_indices, b.kept_indices)
        assert np.array_equal(a.masked_indices, b.masked_indices)
        c = mae.random_mask(64, 0.75, seed=10)
        assert not np.array_equal(a.masked_indices, c.masked_indices)

    def test_nothing_visible_rejected(self):
        with pytest.raises(ValueError):
            mae.random_mask(4, 0.99, seed=0)

    def test_uniformity_over_seeds(self):
        hits = np.zeros(16)
        for seed in range(400):
            hits[mae.random_mask(16, 0.75, seed).masked_indices] += 1
        # each patch masked ~300 times; loose binomial band
        assert np.all(hits > 240) and np.all(hits < 360)


class TestConfig:
    def test_published_preset_dimensions(self):
        base = mae.PRESETS["base"]
        assert (base.encoder_depth, base.encoder_width) == (12, 768)
        assert (base.decoder_depth, base.decoder_width) == (4, 512)
        nano = mae.PRESETS["nano"]
        assert (nano.encoder_depth, nano.encoder_width) == (12, 192)
        large = mae.PRESETS["large"]
        assert (large.encoder_depth, large.encoder_width) == (24, 1024)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            mae.MaeConfig(image_size=30, patch_size=4)
        with pytest.raises(ValueError):
            mae.MaeConfig(encoder_width=130, encoder_heads=4)
        with pytest.raises(ValueError):
            mae.MaeConfig(mask_ratio=1.0)


class TestInit:
    def test_deterministic(self):
        a = mae.init_params(TINY, seed=3)
        b = mae.init_params(TINY, seed=3)
        for name in a.names():
            assert np.array_equal(a[name].data, b[name].data)

    def test_truncation_and_scale(self):
        params = mae.init_params(TINY, seed=0)
        w = params["patch_proj/w"].data
        assert np.abs(w).max() <= 2 * 0.02 + 1e-12
        assert params["patch_proj/b"].data.sum() == 0.0
        assert np.all(params["enc0/ln1/g"].data == 1.0)

    def test_position_embeddings_are_constant(self):
        params = mae.init_params(TINY, seed=0)
        assert "pos" not in " ".join(params.names())
        assert params.pos_enc.shape == (TINY.num_patches, TINY.encoder_width)


def batch_masks(config, n, base_seed=0):
    return [mae.random_mask(config.num_patches, config.mask_ratio, base_seed + i)
            for i in range(n)]


class TestForward:
    def test_zero_loss_when_prediction_equals_target(self):
        rng = np.random.default_rng(1)
        targets = rng.random((2, 16, 48))
        masked = np.stack([np.array([0, 3, 7]), np.array([1, 2, 9])])
        pred = ad.tensor(targets.copy(), batched=True)
        losses = mae.reconstruction_losses(pred, targets, masked, masked_only=True)
        assert np.allclose(losses.data, 0.0)

    def test_constant_error_half_gives_quarter(self):
        targets = np.zeros((1, 4, 12))
        pred = ad.tensor(np.full((1, 4, 12), 0.5), batched=True)
        masked = np.array([[2]])
        losses = mae.reconstruction_losses(pred, targets, masked, masked_only=True)
        assert losses.data[0] == pytest.approx(0.25)

    def test_shapes_and_finiteness(self):
        params = mae.init_params(TINY, seed=0)
        rng = np.random.default_rng(2)
        imgs = rng.random((3, 3, 8, 8))
        recon, losses = mae.mae_forward(params, imgs, batch_masks(TINY, 3))
        assert recon.shape == imgs.shape
        assert losses.shape == (3,)
        assert np.all(np.isfinite(recon)) and np.all(np.isfinite(losses.data))
        assert np.all(losses.data >= 0)

    def test_batch_permutation_permutes_losses(self):
        params = mae.init_params(TINY, seed=0)
        rng = np.random.default_rng(3)
        imgs = rng.random((4, 3, 8, 8))
        masks = batch_masks(TINY, 4)
        _, losses = mae.mae_forward(params, imgs, masks)
        perm = [2, 0, 3, 1]
        _, permuted = mae.mae_forward(params, imgs[perm], [masks[i] for i in perm])
        assert np.allclose(permuted.data, losses.data[perm], rtol=1e-12)

    def test_masked_coverage_is_exact(self):
        spec_list = batch_masks(TINY, 5)
        expected = round(TINY.mask_ratio * TINY.num_patches)
        for m in spec_list:
            assert m.masked_indices.size == expected

    def test_full_image_loss_flag(self):
        config = mae.MaeConfig(image_size=8, patch_size=4, encoder_depth=1,
                               encoder_width=16, encoder_heads=2, decoder_depth=1,
                               decoder_width=8, decoder_heads=2, mask_ratio=0.5,
                               loss_on_masked_only=False)
        params = mae.init_params(config, seed=0)
        rng = np.random.default_rng(4)
        imgs = rng.random((2, 3, 8, 8))
        masks = batch_masks(config, 2)
        recon, losses = mae.mae_forward(params, imgs, masks)
        # loss equals mean squared error over the whole image
        patches = mae.patchify(imgs, 4)
        pred = mae.patchify(recon, 4)
        ref = ((pred - patches) ** 2).mean(axis=(1, 2))
        assert np.allclose(losses.data, ref, rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        params = mae.init_params(TINY, seed=0)
        with pytest.raises(ad.ShapeError):
            mae.mae_forward(params, np.zeros((2, 3, 16, 16)), batch_masks(TINY, 2))


def naive_forward_loss(params, config, images, masks):
    """Straight-line reimplementation of the forward pass (test oracle)."""
    p = {name: params[name].data for name in params.names()}

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(-1, keepdims=True)
        return (xc / np.sqrt(var + 1e-6)) * g + b

    def gelu(x):
        return x * 0.5 * (1 + special.erf(x / math.sqrt(2)))

    def attn(x, name, heads):
        n, width = x.shape
        dh = width // heads
        outs = np.zeros_like(x)
        q = x @ p[f"{name}/attn/wq"] + p[f"{name}/attn/bq"]
        k = x @ p[f"{name}/attn/wk"] + p[f"{name}/attn/bk"]
        v = x @ p[f"{name}/attn/wv"] + p[f"{name}/attn/bv"]
        ctx = np.zeros_like(x)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            scores = scores - scores.max(axis=1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=1, keepdims=True)
            ctx[:, sl] = w @ v[:, sl]
        return ctx @ p[f"{name}/attn/wo"] + p[f"{name}/attn/bo"]

    def blocks(x, prefix, depth, heads):
        for i in range(depth):
            name = f"{prefix}{i}"
            x = x + attn(ln(x, p[f"{name}/ln1/g"], p[f"{name}/ln1/b"]), name, heads)
            h = ln(x, p[f"{name}/ln2/g"], p[f"{name}/ln2/b"])
            h = gelu(h @ p[f"{name}/mlp/w1"] + p[f"{name}/mlp/b1"]) @ p[f"{name}/mlp/w2"] + p[f"{name}/mlp/b2"]
            x = x + h
        return x

    losses = []
    for img, m in zip(images, masks):
        patches = mae.patchify(img, config.patch_size)
        x = patches[m.kept_indices] @ p["patch_proj/w"] + p["patch_proj/b"]
        x = x + params.pos_enc[m.kept_indices]
        x = blocks(x, "enc", config.encoder_depth, config.encoder_heads)
        x = ln(x, p["enc_norm/g"], p["enc_norm/b"])

        dec_vis = x @ p["dec_embed/w"] + p["dec_embed/b"]
        full = np.zeros((config.num_patches, config.decoder_width))
        full[m.kept_indices] = dec_vis
        full[m.masked_indices] = p["mask_token"]
        full = full + params.pos_dec
        full = blocks(full, "dec", config.decoder_depth, config.decoder_heads)
        full = ln(full, p["dec_norm/g"], p["dec_norm/b"])
        pred = full @ p["out_proj/w"] + p["out_proj/b"]

        if config.loss_on_masked_only:
            d = pred[m.masked_indices] - patches[m.masked_indices]
        else:
            d = pred - patches
        losses.append((d * d).mean())
    return np.array(losses)


def test_forward_matches_naive_reimplementation():
    config = mae.MaeConfig(image_size=8, patch_size=4, encoder_depth=2,
                           encoder_width=64, encoder_heads=4, decoder_depth=2,
                           decoder_width=32, decoder_heads=2, mask_ratio=0.5)
    params = mae.init_params(config, seed=0)
    rng = np.random.default_rng(0)
    imgs = rng.random((3, 3, 8, 8))
    masks = batch_masks(config, 3)
    _, losses = mae.mae_forward(params, imgs, masks)
    ref = naive_forward_loss(params, config, imgs, masks)
    assert np.allclose(losses.data, ref, rtol=1e-10)


def test_per_sample_grads_match_single_sample_runs():
    params = mae.init_params(TINY, seed=1)
    rng = np.random.default_rng(5)
    imgs = rng.random((3, 3, 8, 8))
    masks = batch_masks(TINY, 3)
    _, losses = mae.mae_forward(params, imgs, masks)
    psg = ad.per_sample_backward(losses, params.values())

    for i in range(3):
        _, single = mae.mae_forward(params, imgs[i : i + 1], [masks[i]])
        grads = ad.backward(ad.reduce_sum(single), params.values())
        for name in params.names():
            got = psg.unflatten(name)[i]
            ref = grads[name]
            denom = max(np.linalg.norm(ref), 1e-12)
            assert np.linalg.norm(got - ref) / denom < 1e-9


def test_gradient_matches_directional_finite_difference():
    params = mae.init_params(TINY, seed=2)
    rng = np.random.default_rng(6)
    imgs = rng.random((2, 3, 8, 8))
    masks = batch_masks(TINY, 2)

    _, losses = mae.mae_forward(params, imgs, masks)
    grads = ad.backward(ad.mean(losses, axes=(0,)), params.values())

    for name in ("patch_proj/w", "enc0/attn/wq", "enc1/mlp/w1", "mask_token",
                 "dec0/ln2/g", "out_proj/b"):
        base = params[name].data.copy()
        v = rng.standard_normal(base.shape)
        v /= np.linalg.norm(v)

        def f(x, name=name):
            params[name].data = x
            _, l = mae.mae_forward(params, imgs, masks)
            return float(l.data.mean())

        fd = directional_difference(f, base, v)
        params[name].data = base
        got = float((grads[name] * v).sum())
        assert got == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestFeatures:
    def test_deterministic_and_dimension(self):
        params = mae.init_params(TINY, seed=0)
        rng = np.random.default_rng(7)
        img = rng.random((3, 8, 8))
        f1 = mae.encode_features(params, img)
        f2 = mae.encode_features(params, img)
        assert np.array_equal(f1, f2)
        assert f1.shape == (TINY.encoder_width,)

    def test_distinct_images_give_distinct_features(self):
        params = mae.init_params(TINY, seed=0)
        rng = np.random.default_rng(8)
        feats = mae.encode_features(params, rng.random((2, 3, 8, 8)))
        assert not np.allclose(feats[0], feats[1])


def test_save_load_roundtrip(tmp_path):
    params = mae.init_params(TINY, seed=4)
    path = tmp_path / "model.tensors"
    mae.save_model(path, params)
    loaded = mae.load_model(path)
    assert loaded.config == TINY
    for name in params.names():
        assert np.array_equal(loaded[name].data, params[name].data)
