"""Patch-based transformer encoders and the tactile initialization variants.

One ViT implementation serves vision, tactile, and the policy backbone.
Parameter init is keyed by (seed, scope, parameter name), so the presence of
one tower never perturbs another tower's initial weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .errors import CompatibilityError, ConfigError, ShapeError
from .numerics import SeededRng, Tensor

PROVENANCE_TAGS = ("scratch", "vision-pretrained", "semantically-aligned")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 14
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def n_tokens(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    def to_array(self) -> np.ndarray:
        return np.array([self.image_size, self.patch_size, self.embed_dim,
                         self.depth, self.heads], dtype=np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ViTConfig":
        vals = [int(x) for x in np.asarray(arr).reshape(-1)]
        return cls(*vals)


@dataclass
class TokenSequence:
    """Latent tokens plus their modality tag and source id."""

    tokens: Tensor
    modality: str
    source: str = ""

    def __post_init__(self):
        if self.tokens.shape[-2] == 0:
            raise ShapeError("token sequence must be nonempty")
        if self.modality not in ("vision", "tactile", "language", "state", "patches"):
            raise ShapeError(f"unknown modality tag {self.modality!r}")

    def __len__(self) -> int:
        return self.tokens.shape[-2]


def init_block(params: dict, prefix: str, dim: int, rng: SeededRng, dtype=np.float32) -> None:
    """Parameters for one pre-LN transformer block."""
    def tn(name, shape):
        params[f"{prefix}.{name}"] = Tensor(
            rng.child(f"{prefix}.{name}").truncated_normal(shape, std=0.02, dtype=dtype),
            requires_grad=True)

    def const(name, shape, value):
        params[f"{prefix}.{name}"] = Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)

    const("ln1.g", (dim,), 1.0)
    const("ln1.b", (dim,), 0.0)
    tn("qkv.w", (dim, 3 * dim))
    const("qkv.b", (3 * dim,), 0.0)
    tn("out.w", (dim, dim))
    const("out.b", (dim,), 0.0)
    const("ln2.g", (dim,), 1.0)
    const("ln2.b", (dim,), 0.0)
    tn("mlp1.w", (dim, 4 * dim))
    const("mlp1.b", (4 * dim,), 0.0)
    tn("mlp2.w", (4 * dim, dim))
    const("mlp2.b", (dim,), 0.0)


def transformer_block(x: Tensor, params: dict, prefix: str, heads: int) -> Tensor:
    """Pre-LN block: x + attn(LN(x)), then x + mlp(LN(x))."""
    b, n, d = x.shape
    hd = d // heads
    h = nm.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    qkv = nm.linear(h, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    q = nm.narrow(qkv, 2, 0, d)
    k = nm.narrow(qkv, 2, d, d)
    v = nm.narrow(qkv, 2, 2 * d, d)

    def split_heads(t):
        return nm.transpose(nm.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scale = Tensor(np.asarray(1.0 / math.sqrt(hd), dtype=x.dtype))
    scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), scale)
    attn = nm.softmax(scores, axis=-1)
    ctx = nm.matmul(attn, v)
    ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    x = nm.add(x, nm.linear(ctx, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"]))

    h2 = nm.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    m = nm.gelu(nm.linear(h2, params[f"{prefix}.mlp1.w"], params[f"{prefix}.mlp1.b"]))
    m = nm.linear(m, params[f"{prefix}.mlp2.w"], params[f"{prefix}.mlp2.b"])
    return nm.add(x, m)


@dataclass
class EncoderWeights:
    """A ViT's parameters plus where they came from."""

    cfg: ViTConfig
    params: dict = field(default_factory=dict)
    provenance: str = "scratch"

    @classmethod
    def init_scratch(cls, cfg: ViTConfig, seed: int, scope: str = "encoder",
                     dtype=np.float32) -> "EncoderWeights":
        rng = SeededRng(seed, f"{scope}/init")
        params: dict[str, Tensor] = {}
        params["patch.w"] = Tensor(rng.child("patch.w").truncated_normal(
            (cfg.patch_dim, cfg.embed_dim), std=0.02, dtype=dtype), requires_grad=True)
        params["patch.b"] = Tensor(np.zeros(cfg.embed_dim, dtype=dtype), requires_grad=True)
        params["pos"] = Tensor(rng.child("pos").truncated_normal(
            (cfg.n_tokens, cfg.embed_dim), std=0.02, dtype=dtype), requires_grad=True)
        for i in range(cfg.depth):
            init_block(params, f"b{i}", cfg.embed_dim, rng, dtype=dtype)
        return cls(cfg, params, "scratch")

    def copy(self, provenance: Optional[str] = None) -> "EncoderWeights":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return EncoderWeights(self.cfg, params, provenance or self.provenance)

    def to_records(self) -> dict[str, np.ndarray]:
        records = {"__cfg__": self.cfg.to_array()}
        records.update({k: v.data for k, v in self.params.items()})
        return records

    @classmethod
    def from_records(cls, records: dict[str, np.ndarray], provenance: str) -> "EncoderWeights":
        cfg = ViTConfig.from_array(records["__cfg__"])
        params = {k: Tensor(v.copy(), requires_grad=True)
                  for k, v in records.items() if k != "__cfg__"}
        return cls(cfg, params, provenance)

    def save(self, path) -> None:
        nm.save_checkpoint(path, self.to_records(), meta={"provenance": self.provenance})

    @classmethod
    def load(cls, path) -> "EncoderWeights":
        records, meta = nm.load_checkpoint(path)
        tag = meta.get("provenance", "scratch")
        if tag not in PROVENANCE_TAGS:
            raise CompatibilityError(f"unknown provenance tag {tag!r} in {path}")
        return cls.from_records(records, tag)


def patchify(img: np.ndarray, patch_size: int) -> TokenSequence:
    """Split a (3, H, W) image into row-major flattened patches."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"patchify expects (3, H, W), got {img.shape}")
    patches = patchify_batch(img[None], patch_size)[0]
    return TokenSequence(Tensor(patches.astype(np.float32)), "patches")


def patchify_batch(imgs: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, n_patches, 3 * p * p), row-major patch order."""
    b, c, h, w = imgs.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch_size}")
    nh, nw = h // patch_size, w // patch_size
    x = imgs.reshape(b, c, nh, patch_size, nw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, nh * nw, c * patch_size * patch_size)


def unpatchify(patches: np.ndarray, patch_size: int, height: int, width: int) -> np.ndarray:
    """Inverse of patchify for a single image; bit-exact."""
    nh, nw = height // patch_size, width // patch_size
    x = np.asarray(patches).reshape(nh, nw, 3, patch_size, patch_size)
    x = x.transpose(2, 0, 3, 1, 4)
    return x.reshape(3, height, width)


def vit_forward_batch(patches: Tensor, weights: EncoderWeights) -> Tensor:
    """(B, n, patch_dim) patches -> (B, n, embed_dim) tokens."""
    cfg = weights.cfg
    if patches.shape[-1] != cfg.patch_dim:
        raise ShapeError(f"patch dim {patches.shape[-1]} != expected {cfg.patch_dim}")
    if patches.shape[-2] != cfg.n_tokens:
        raise ShapeError(f"token count {patches.shape[-2]} != expected {cfg.n_tokens}")
    x = nm.linear(patches, weights.params["patch.w"], weights.params["patch.b"])
    x = nm.add(x, weights.params["pos"])
    for i in range(cfg.depth):
        x = transformer_block(x, weights.params, f"b{i}", cfg.heads)
    return x


def vit_forward(patches: TokenSequence, weights: EncoderWeights,
                modality: str = "vision", source: str = "") -> TokenSequence:
    """Single-image forward; token count in == token count out."""
    t = patches.tokens
    out = vit_forward_batch(nm.reshape(t, (1,) + tuple(t.shape)), weights)
    return TokenSequence(nm.reshape(out, tuple(out.shape[1:])), modality, source)


def encode_image(img: np.ndarray, weights: EncoderWeights, modality: str = "vision",
                 source: str = "") -> TokenSequence:
    """u8/float (3, H, W) image -> tokens, with [0, 255] -> [-1, 1] scaling."""
    x = np.asarray(img, dtype=np.float32)
    x = x / 127.5 - 1.0
    return vit_forward(patchify(x, weights.cfg.patch_size), weights, modality, source)


def init_tactile_encoder(mode: str, cfg: Optional[ViTConfig] = None, seed: int = 0,
                         vision: Optional[EncoderWeights] = None,
                         aligned: Optional[EncoderWeights] = None) -> EncoderWeights:
    """The three single-path tactile initializations.

    fs: seeded random init. pre: copy of a vision encoder. sa: copy of the
    alignment-trained tactile tower.
    """
    mode = mode.lower()
    if mode == "fs":
        if cfg is None:
            raise ConfigError("fs init requires a ViTConfig")
        return EncoderWeights.init_scratch(cfg, seed, scope="tactile")
    if mode == "pre":
        if vision is None:
            raise ConfigError("pre init requires a vision encoder checkpoint")
        return vision.copy(provenance="vision-pretrained")
    if mode == "sa":
        if aligned is None:
            raise ConfigError("sa init requires an alignment checkpoint")
        return aligned.copy(provenance="semantically-aligned")
    raise ConfigError(f"unknown tactile encoder mode {mode!r}, expected fs/pre/sa")


def dual_encode(tactile_img: np.ndarray, pre_weights: EncoderWeights,
                sa_weights: EncoderWeights) -> TokenSequence:
    """Concatenate the two tactile paths along the token axis."""
    if pre_weights.cfg.embed_dim != sa_weights.cfg.embed_dim:
        raise ShapeError(f"embed_dim mismatch between paths: "
                         f"{pre_weights.cfg.embed_dim} vs {sa_weights.cfg.embed_dim}")
    a = encode_image(tactile_img, pre_weights, "tactile", "pre")
    b = encode_image(tactile_img, sa_weights, "tactile", "sa")
    return TokenSequence(nm.concat([a.tokens, b.tokens], axis=0), "tactile", "dual")
