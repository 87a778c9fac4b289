"""Vision-transformer masked autoencoder with per-sample reconstruction losses.

Images are cut into non-overlapping patches; a random subset is hidden and
only the visible patches run through the transformer encoder. The decoder
sees encoded visible tokens plus a learned mask token at every hidden
position and reconstructs pixels for all patches. Each sample's loss is the
mean squared pixel error over the evaluated patches of that sample alone, so
the batch loss vector is sample-separable by construction and per-sample
gradients are exact.

Position embeddings are fixed 2-D sinusoids (constants, not trained), and
features for downstream probes are the mean over final encoder token states.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import checkpoint


@dataclass(frozen=True)
class MaeConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    encoder_depth: int = 4
    encoder_width: int = 128
    encoder_heads: int = 4
    decoder_depth: int = 2
    decoder_width: int = 64
    decoder_heads: int = 2
    mask_ratio: float = 0.75
    loss_on_masked_only: bool = True
    normalize_patch_targets: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        for width, heads, side in (
            (self.encoder_width, self.encoder_heads, "encoder"),
            (self.decoder_width, self.decoder_heads, "decoder"),
        ):
            if width % heads != 0:
                raise ValueError(f"{side} width {width} not divisible by {heads} heads")
            if width % 4 != 0:
                raise ValueError(f"{side} width {width} must be a multiple of 4 "
                                 "for 2-D sinusoidal position embeddings")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.mask_ratio}")
        if round(self.mask_ratio * self.num_patches) > self.num_patches - 1:
            raise ValueError("mask ratio leaves no patch visible")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def latent_dim(self) -> int:
        return self.encoder_width


# Desk-scale default plus the published backbone sizes (224px, patch 16,
# decoder depth 4 width 512).
PRESETS = {
    "micro": MaeConfig(),
    "nano": MaeConfig(image_size=224, patch_size=16, encoder_depth=12,
                      encoder_width=192, encoder_heads=3, decoder_depth=4,
                      decoder_width=512, decoder_heads=8),
    "tiny": MaeConfig(image_size=224, patch_size=16, encoder_depth=12,
                      encoder_width=384, encoder_heads=6, decoder_depth=4,
                      decoder_width=512, decoder_heads=8),
    "small": MaeConfig(image_size=224, patch_size=16, encoder_depth=12,
                       encoder_width=576, encoder_heads=9, decoder_depth=4,
                       decoder_width=512, decoder_heads=8),
    "base": MaeConfig(image_size=224, patch_size=16, encoder_depth=12,
                      encoder_width=768, encoder_heads=12, decoder_depth=4,
                      decoder_width=512, decoder_heads=8),
    "large": MaeConfig(image_size=224, patch_size=16, encoder_depth=24,
                       encoder_width=1024, encoder_heads=16, decoder_depth=4,
                       decoder_width=512, decoder_heads=8),
}


@dataclass(frozen=True)
class MaskSpec:
    """Disjoint kept/masked patch index sets covering 0..L-1 exactly once."""

    kept_indices: np.ndarray
    masked_indices: np.ndarray
    seed: int

    def __post_init__(self):
        union = np.concatenate([self.kept_indices, self.masked_indices])
        L = union.size
        if not np.array_equal(np.sort(union), np.arange(L)):
            raise ValueError("kept and masked indices must partition 0..L-1")
        if self.kept_indices.size < 1:
            raise ValueError("at least one patch must stay visible")


def random_mask(num_patches: int, mask_ratio: float, seed: int) -> MaskSpec:
    """Uniformly random patch subset without replacement, fixed by `seed`."""
    if not 0.0 <= mask_ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {mask_ratio}")
    n_masked = round(mask_ratio * num_patches)
    if n_masked > num_patches - 1:
        raise ValueError(
            f"mask ratio {mask_ratio} leaves no visible patch out of {num_patches}"
        )
    perm = np.random.default_rng(seed).permutation(num_patches)
    return MaskSpec(
        kept_indices=np.sort(perm[n_masked:]),
        masked_indices=np.sort(perm[:n_masked]),
        seed=seed,
    )


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B,C,H,W) or (C,H,W) -> (B,L,p*p*C) or (L,p*p*C), patches row-major."""
    single = images.ndim == 3
    x = images[None] if single else images
    b, c, h, w = x.shape
    if h != w or h % patch_size != 0:
        raise ValueError(f"image {h}x{w} not square-divisible by patch {patch_size}")
    g = h // patch_size
    x = x.reshape(b, c, g, patch_size, g, patch_size)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # (B, gh, gw, p, p, C)
    x = x.reshape(b, g * g, patch_size * patch_size * c)
    return x[0] if single else x


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of patchify."""
    single = patches.ndim == 2
    x = patches[None] if single else patches
    b, L, d = x.shape
    g = int(round(L**0.5))
    if g * g != L or d != patch_size * patch_size * channels:
        raise ValueError(f"cannot unpatchify shape {patches.shape}")
    x = x.reshape(b, g, g, patch_size, patch_size, channels)
    x = x.transpose(0, 5, 1, 3, 2, 4)
    x = x.reshape(b, channels, g * patch_size, g * patch_size)
    return x[0] if single else x


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2) / (dim / 2.0))
    angles = positions[:, None] * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _sincos_2d(dim: int, grid: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(grid, dtype=np.float64),
                         np.arange(grid, dtype=np.float64), indexing="ij")
    emb_y = _sincos_1d(dim // 2, ys.reshape(-1))
    emb_x = _sincos_1d(dim // 2, xs.reshape(-1))
    return np.concatenate([emb_y, emb_x], axis=1)


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class MaeParams:
    """Named trainable tensors of the encoder and decoder, plus constants."""

    def __init__(self, config: MaeConfig, tensors: dict):
        self.config = config
        self.tensors = tensors
        self.pos_enc = _sincos_2d(config.encoder_width, config.grid_size)
        self.pos_dec = _sincos_2d(config.decoder_width, config.grid_size)

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    @property
    def total_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def to_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_arrays(self, arrays: dict) -> None:
        """Replace parameter values in place (shapes must match)."""
        for name, t in self.tensors.items():
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ValueError(
                    f"checkpoint tensor {name!r} has shape {src.shape}, "
                    f"expected {t.data.shape}"
                )
            t.data = np.asarray(src, dtype=np.float64)

    def replaced(self, new_values: dict) -> "MaeParams":
        """New MaeParams with tensor data taken from `new_values` arrays."""
        tensors = {
            name: ad.parameter(np.asarray(new_values[name], dtype=np.float64), name)
            for name in self.tensors
        }
        return MaeParams(self.config, tensors)


def _block_names(prefix: str, depth: int):
    for i in range(depth):
        yield f"{prefix}{i}"


def init_params(config: MaeConfig, seed: int) -> MaeParams:
    """Truncated-normal weights (std 0.02), zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    t = {}

    def weight(name, shape):
        t[name] = ad.parameter(_trunc_normal(rng, shape), name)

    def zeros(name, shape):
        t[name] = ad.parameter(np.zeros(shape), name)

    def ones(name, shape):
        t[name] = ad.parameter(np.ones(shape), name)

    def block(name, width):
        ones(f"{name}/ln1/g", (width,))
        zeros(f"{name}/ln1/b", (width,))
        for proj in ("q", "k", "v", "o"):
            weight(f"{name}/attn/w{proj}", (width, width))
            zeros(f"{name}/attn/b{proj}", (width,))
        ones(f"{name}/ln2/g", (width,))
        zeros(f"{name}/ln2/b", (width,))
        weight(f"{name}/mlp/w1", (width, 4 * width))
        zeros(f"{name}/mlp/b1", (4 * width,))
        weight(f"{name}/mlp/w2", (4 * width, width))
        zeros(f"{name}/mlp/b2", (width,))

    weight("patch_proj/w", (config.patch_dim, config.encoder_width))
    zeros("patch_proj/b", (config.encoder_width,))
    for name in _block_names("enc", config.encoder_depth):
        block(name, config.encoder_width)
    ones("enc_norm/g", (config.encoder_width,))
    zeros("enc_norm/b", (config.encoder_width,))

    weight("dec_embed/w", (config.encoder_width, config.decoder_width))
    zeros("dec_embed/b", (config.decoder_width,))
    weight("mask_token", (config.decoder_width,))
    for name in _block_names("dec", config.decoder_depth):
        block(name, config.decoder_width)
    ones("dec_norm/g", (config.decoder_width,))
    zeros("dec_norm/b", (config.decoder_width,))
    weight("out_proj/w", (config.decoder_width, config.patch_dim))
    zeros("out_proj/b", (config.patch_dim,))

    return MaeParams(config, t)


def _affine_ln(x, gain, bias):
    return ad.add(ad.mul(ad.layer_norm(x), gain), bias)


def _attention(x, p, name, heads):
    b, n, width = x.shape
    dh = width // heads

    def proj(suffix):
        h = ad.add(ad.matmul(x, p[f"{name}/attn/w{suffix}"]), p[f"{name}/attn/b{suffix}"])
        h = ad.reshape(h, (b, n, heads, dh))
        return ad.transpose(h, (0, 2, 1, 3))  # (B, heads, n, dh)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), dh**-0.5)
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, width))
    return ad.add(ad.matmul(ctx, p[f"{name}/attn/wo"]), p[f"{name}/attn/bo"])


def _transformer(x, p, prefix, depth, heads):
    for name in _block_names(prefix, depth):
        h = _affine_ln(x, p[f"{name}/ln1/g"], p[f"{name}/ln1/b"])
        x = ad.add(x, _attention(h, p, name, heads))
        h = _affine_ln(x, p[f"{name}/ln2/g"], p[f"{name}/ln2/b"])
        h = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h, p[f"{name}/mlp/w1"]),
                                            p[f"{name}/mlp/b1"])),
                             p[f"{name}/mlp/w2"]),
                   p[f"{name}/mlp/b2"])
        x = ad.add(x, h)
    return x


def _encode_tokens(params: MaeParams, patch_tokens: ad.Tensor, pos: np.ndarray):
    x = ad.add(ad.matmul(patch_tokens, params["patch_proj/w"]), params["patch_proj/b"])
    x = ad.add(x, ad.tensor(pos))
    x = _transformer(x, params, "enc", params.config.encoder_depth,
                     params.config.encoder_heads)
    return _affine_ln(x, params["enc_norm/g"], params["enc_norm/b"])


def mae_forward(params: MaeParams, images: np.ndarray, masks) -> tuple:
    """Reconstructions and per-sample losses for a batch.

    `masks` is one MaskSpec per image, all with the same visible count.
    Returns (reconstructed images (B,C,H,W) ndarray, per-sample loss Tensor of
    shape (B,)). Loss covers masked patches only unless the config asks for
    the full image.
    """
    cfg = params.config
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ad.ShapeError(
            f"images shape {images.shape} does not match config "
            f"(B,{cfg.channels},{cfg.image_size},{cfg.image_size})"
        )
    b = images.shape[0]
    if len(masks) != b:
        raise ad.ShapeError(f"{len(masks)} masks for {b} images")
    kept = np.stack([m.kept_indices for m in masks])
    masked = np.stack([m.masked_indices for m in masks])

    patches = patchify(images, cfg.patch_size)  # (B, L, P)
    targets = patches
    if cfg.normalize_patch_targets:
        mu = targets.mean(axis=2, keepdims=True)
        var = targets.var(axis=2, keepdims=True)
        targets = (targets - mu) / np.sqrt(var + 1e-6)

    visible = np.take_along_axis(patches, kept[:, :, None], axis=1)
    enc = _encode_tokens(params, ad.tensor(visible, batched=True),
                         params.pos_enc[kept])

    # decoder input: projected visible tokens then mask tokens, unshuffled
    # back to original patch order
    dec_vis = ad.add(ad.matmul(enc, params["dec_embed/w"]), params["dec_embed/b"])
    n_masked = masked.shape[1]
    mask_tok = ad.add(ad.tensor(np.zeros((b, n_masked, cfg.decoder_width)), batched=True),
                      params["mask_token"])
    seq = ad.concat([dec_vis, mask_tok], axis=1)  # (B, L, Dd) in shuffled order
    order = np.concatenate([kept, masked], axis=1)
    inverse = np.argsort(order, axis=1)
    full = ad.gather_rows(seq, inverse)
    full = ad.add(full, ad.tensor(params.pos_dec))

    full = _transformer(full, params, "dec", cfg.decoder_depth, cfg.decoder_heads)
    full = _affine_ln(full, params["dec_norm/g"], params["dec_norm/b"])
    pred = ad.add(ad.matmul(full, params["out_proj/w"]), params["out_proj/b"])

    losses = reconstruction_losses(pred, targets, masked, cfg.loss_on_masked_only)
    recon = unpatchify(pred.data, cfg.patch_size, cfg.channels)
    return recon, losses


def reconstruction_losses(pred: ad.Tensor, targets: np.ndarray,
                          masked: np.ndarray, masked_only: bool) -> ad.Tensor:
    """Per-sample mean squared pixel error over the evaluated patches.

    Mean over pixels within a patch, then over evaluated patches, keeps the
    magnitude independent of resolution so one clip norm transfers across
    configurations; it rescales the squared Frobenius error by a constant.
    """
    if masked_only and masked.shape[1] > 0:
        eval_pred = ad.gather_rows(pred, masked)
        eval_tgt = np.take_along_axis(targets, masked[:, :, None], axis=1)
    else:
        # full-image squared error (also the fallback when nothing is masked)
        eval_pred = pred
        eval_tgt = targets
    diff = ad.add(eval_pred, ad.tensor(-eval_tgt, batched=True))
    return ad.mean(ad.mul(diff, diff), axes=(1, 2))


def encode_all_tokens(params: MaeParams, images: np.ndarray) -> ad.Tensor:
    """Final encoder token states with no masking, (B, L, d), on the tape."""
    cfg = params.config
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ad.ShapeError(
            f"images shape {images.shape} does not match config "
            f"(B,{cfg.channels},{cfg.image_size},{cfg.image_size})"
        )
    patches = patchify(images, cfg.patch_size)
    return _encode_tokens(params, ad.tensor(patches, batched=True), params.pos_enc)


def encode_features(params: MaeParams, images: np.ndarray) -> np.ndarray:
    """Mean-pooled final encoder states with no masking; (B,d) or (d,)."""
    single = images.ndim == 3
    x = images[None] if single else images
    feats = encode_all_tokens(params, x).data.mean(axis=1)
    return feats[0] if single else feats


def save_model(path, params: MaeParams) -> None:
    """Container file with the weights plus a `.config` text sidecar."""
    checkpoint.save_tensors(path, params.to_arrays())
    lines = [f"{k} = {v}" for k, v in asdict(params.config).items()]
    with open(f"{path}.config", "w") as f:
        f.write("\n".join(lines) + "\n")


def load_model(path) -> MaeParams:
    arrays = checkpoint.load_tensors(path)
    fields = {}
    with open(f"{path}.config") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    kwargs = {}
    for name, field_type in (
        ("image_size", int), ("channels", int), ("patch_size", int),
        ("encoder_depth", int), ("encoder_width", int), ("encoder_heads", int),
        ("decoder_depth", int), ("decoder_width", int), ("decoder_heads", int),
        ("mask_ratio", float),
    ):
        kwargs[name] = field_type(fields[name])
    for name in ("loss_on_masked_only", "normalize_patch_targets"):
        kwargs[name] = fields[name] == "True"
    config = MaeConfig(**kwargs)
    params = init_params(config, seed=0)
    params.load_arrays(arrays)
    return params
