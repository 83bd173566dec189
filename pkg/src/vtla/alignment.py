"""Tri-modal contrastive alignment and representation probes.

Trains the semantically-aligned tactile tower against vision and language
anchors with symmetric directional InfoNCE terms plus a cross-sensor
matching head, then measures representation quality with linear probes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nm
from .encoders import EncoderWeights, TokenSequence, ViTConfig, init_block, patchify_batch, transformer_block, vit_forward_batch
from .errors import NumericError, ShapeError, ValidationError
from .numerics import SeededRng, Tensor
from .objtac import SynthDataset
from .tactile import force_window_to_image

TAU_MIN, TAU_MAX = 0.01, 1.0


def tokenize(text: str, vocab: int = 512, length: int = 8) -> np.ndarray:
    """Hash words into a fixed toy vocabulary; 0 is the pad id."""
    ids = []
    for word in text.lower().split():
        word = "".join(ch for ch in word if ch.isalnum())
        if not word:
            continue
        digest = hashlib.blake2s(word.encode(), digest_size=4).digest()
        ids.append(1 + int.from_bytes(digest, "little") % (vocab - 1))
    ids = ids[:length]
    ids += [0] * (length - len(ids))
    return np.asarray(ids, dtype=np.int64)


@dataclass
class EmbeddingBatch:
    """Unit-norm projection vectors with sample ids for positive pairing."""

    vectors: Tensor          # (B, D)
    modality: str
    ids: np.ndarray          # (B,)

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ShapeError(f"embedding batch must be 2-d, got {tuple(self.vectors.shape)}")
        if len(self.ids) != self.vectors.shape[0]:
            raise ShapeError("ids must align with vectors")

    @property
    def batch_size(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True)
class AlignCoefficients:
    vl: float = 1.0
    vt: float = 1.0
    tl: float = 1.0

    def __post_init__(self):
        if min(self.vl, self.vt, self.tl) < 0:
            raise ValidationError("alignment coefficients must be nonnegative")


@dataclass(frozen=True)
class AlignConfig:
    vit: ViTConfig = ViTConfig(image_size=24, patch_size=8, embed_dim=64, depth=2, heads=4)
    text_vocab: int = 512
    text_len: int = 8
    proj_dim: int = 32
    match_hidden: int = 32
    tau_init: float = 0.07
    coefficients: AlignCoefficients = AlignCoefficients()
    lambda_match: float = 0.5
    view_noise: float = 0.02
    steps: int = 1500
    batch_size: int = 16
    peak_lr: float = 2e-3
    floor_lr: float = 1e-4
    warmup_steps: int = 50
    weight_decay: float = 1e-4
    seed: int = 0


def _vec(t: Tensor) -> Tensor:
    return t if isinstance(t, Tensor) else t.vectors


def info_nce(a, b, tau) -> Tensor:
    """Directional contrastive loss A -> B over one batch.

    mean_i of -log softmax(a_i . b_j / tau)[j == i].
    """
    av = _vec(a)
    bv = _vec(b)
    if av.shape[0] == 0:
        raise ShapeError("info_nce: empty batch")
    if av.shape != bv.shape:
        raise ShapeError(f"info_nce: batch shapes differ {tuple(av.shape)} vs {tuple(bv.shape)}")
    if not isinstance(tau, Tensor):
        tau = Tensor(np.asarray(tau, dtype=av.dtype))
    logits = nm.div(nm.matmul(av, nm.transpose(bv, (1, 0))), tau)
    targets = np.arange(av.shape[0])
    return nm.softmax_cross_entropy(logits, targets)


def total_alignment_loss(v, l, t, coeffs: AlignCoefficients, tau) -> tuple[Tensor, dict]:
    """Weighted symmetric sum of the three modality-pair directional losses.

    Returns the scalar loss and a per-direction breakdown of float values.
    """
    for x, y in ((v, l), (v, t)):
        if isinstance(x, EmbeddingBatch) and isinstance(y, EmbeddingBatch):
            if not np.array_equal(x.ids, y.ids):
                raise ShapeError("alignment batches are misaligned (sample ids differ)")
    terms = {
        "v_to_l": info_nce(v, l, tau), "l_to_v": info_nce(l, v, tau),
        "v_to_t": info_nce(v, t, tau), "t_to_v": info_nce(t, v, tau),
        "t_to_l": info_nce(t, l, tau), "l_to_t": info_nce(l, t, tau),
    }
    half = Tensor(np.asarray(0.5, dtype=_vec(v).dtype))
    pair_vl = nm.mul(nm.add(terms["v_to_l"], terms["l_to_v"]), half)
    pair_vt = nm.mul(nm.add(terms["v_to_t"], terms["t_to_v"]), half)
    pair_tl = nm.mul(nm.add(terms["t_to_l"], terms["l_to_t"]), half)
    dtype = _vec(v).dtype
    loss = nm.add(
        nm.add(nm.mul(pair_vl, Tensor(np.asarray(coeffs.vl, dtype=dtype))),
               nm.mul(pair_vt, Tensor(np.asarray(coeffs.vt, dtype=dtype)))),
        nm.mul(pair_tl, Tensor(np.asarray(coeffs.tl, dtype=dtype))))
    breakdown = {k: float(x.data) for k, x in terms.items()}
    return loss, breakdown


def cross_sensor_matching_loss(pair_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy over same-contact pair logits, clamped to +-30."""
    return nm.bce_with_logits(nm.clip(pair_logits, -30.0, 30.0), labels)


@dataclass
class AlignmentWeights:
    """All alignment towers plus projection heads and the temperature."""

    cfg: AlignConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: AlignConfig, seed: int, dtype=np.float32) -> "AlignmentWeights":
        params: dict[str, Tensor] = {}
        for scope in ("tactile", "vision"):
            tower = EncoderWeights.init_scratch(cfg.vit, seed, scope=f"align/{scope}", dtype=dtype)
            for k, v in tower.params.items():
                params[f"{scope}/{k}"] = v
        rng = SeededRng(seed, "align/text/init")
        d = cfg.vit.embed_dim
        params["text/emb"] = Tensor(rng.child("emb").truncated_normal(
            (cfg.text_vocab, d), std=0.02, dtype=dtype), requires_grad=True)
        init_block(params, "text/b0", d, rng, dtype=dtype)
        prng = SeededRng(seed, "align/proj/init")
        for name in ("tac", "vis", "txt"):
            params[f"proj/{name}.w"] = Tensor(prng.child(f"{name}.w").truncated_normal(
                (d, cfg.proj_dim), std=0.02, dtype=dtype), requires_grad=True)
            params[f"proj/{name}.b"] = Tensor(np.zeros(cfg.proj_dim, dtype=dtype), requires_grad=True)
        params["log_tau"] = Tensor(np.asarray(np.log(cfg.tau_init), dtype=dtype), requires_grad=True)
        mrng = SeededRng(seed, "align/match/init")
        params["match/m1.w"] = Tensor(mrng.child("m1.w").truncated_normal(
            (2 * cfg.proj_dim, cfg.match_hidden), std=0.02, dtype=dtype), requires_grad=True)
        params["match/m1.b"] = Tensor(np.zeros(cfg.match_hidden, dtype=dtype), requires_grad=True)
        params["match/m2.w"] = Tensor(mrng.child("m2.w").truncated_normal(
            (cfg.match_hidden, 1), std=0.02, dtype=dtype), requires_grad=True)
        params["match/m2.b"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
        return cls(cfg, params)

    def tower(self, scope: str, provenance: str = "scratch") -> EncoderWeights:
        prefix = f"{scope}/"
        params = {k[len(prefix):]: v for k, v in self.params.items()
                  if k.startswith(prefix) and not k.startswith("proj/")}
        return EncoderWeights(self.cfg.vit, params, provenance)

    def tau(self) -> Tensor:
        return nm.exp(nm.clip(self.params["log_tau"],
                              float(np.log(TAU_MIN)), float(np.log(TAU_MAX))))

    @property
    def dtype(self):
        return self.params["log_tau"].dtype

    def encode_images(self, imgs: np.ndarray, scope: str) -> Tensor:
        """(B, H, W, 3) u8 -> pooled (B, embed_dim) tower features."""
        x = imgs.astype(self.dtype).transpose(0, 3, 1, 2) / 127.5 - 1.0
        patches = Tensor(patchify_batch(x, self.cfg.vit.patch_size))
        tower = self.tower(scope)
        tokens = vit_forward_batch(patches, tower)
        return nm.tmean(tokens, axis=1)

    def encode_text_ids(self, ids: np.ndarray) -> Tensor:
        emb = nm.gather_rows(self.params["text/emb"], ids)
        out = transformer_block(emb, self.params, "text/b0", self.cfg.vit.heads)
        return nm.tmean(out, axis=1)

    def project(self, pooled: Tensor, name: str) -> Tensor:
        z = nm.linear(pooled, self.params[f"proj/{name}.w"], self.params[f"proj/{name}.b"])
        return nm.l2_normalize(z, axis=-1)

    def match_logits(self, e1: Tensor, e2: Tensor) -> Tensor:
        h = nm.gelu(nm.linear(nm.concat([e1, e2], axis=1),
                              self.params["match/m1.w"], self.params["match/m1.b"]))
        out = nm.linear(h, self.params["match/m2.w"], self.params["match/m2.b"])
        return nm.reshape(out, (out.shape[0],))


def dataset_tactile_images(dataset: SynthDataset, target: int) -> np.ndarray:
    """Materialize tactile images for every sample via the standard pipeline."""
    imgs = []
    for s in dataset.samples:
        img = force_window_to_image(s.force, dataset.config.layout, target=target,
                                    stats_scope="per-episode", frame_index=-1)
        imgs.append(img.pixels)
    return np.stack(imgs)


@dataclass
class AlignTrainResult:
    weights: AlignmentWeights
    log: list
    tactile_images: np.ndarray
    dataset_hash: str
    opt_state: object = None


def train_sa_encoder(dataset: SynthDataset, cfg: AlignConfig,
                     hooks: Optional[Callable[[int, float], None]] = None,
                     weights: Optional[AlignmentWeights] = None,
                     opt_state=None, start_step: int = 0) -> AlignTrainResult:
    """Seeded mini-batch alignment training.

    Total loss is the tri-modal alignment loss plus lambda_match times the
    cross-sensor matching loss over two noise-augmented tactile views.
    Raises NumericError naming the step if the loss diverges.
    """
    if weights is None:
        weights = AlignmentWeights.init(cfg, cfg.seed)
    tac_imgs = dataset_tactile_images(dataset, cfg.vit.image_size)
    vis_imgs = np.stack([s.image for s in dataset.samples])
    text_ids = np.stack([tokenize(s.record.text, cfg.text_vocab, cfg.text_len)
                         for s in dataset.samples])
    n = len(dataset.samples)
    opt = nm.AdamW(weights.params, weight_decay=cfg.weight_decay, state=opt_state)
    data_rng = SeededRng(cfg.seed, "align/data")
    log = []
    for step in range(start_step, cfg.steps):
        idx = data_rng.child(f"batch/{step}").choice(n, cfg.batch_size, replace=False)
        noise_rng = SeededRng(cfg.seed, f"align/viewnoise/{step}")
        try:
            with nm.Tape() as tape:
                v = weights.project(weights.encode_images(vis_imgs[idx], "vision"), "vis")
                t = weights.project(weights.encode_images(tac_imgs[idx], "tactile"), "tac")
                l = weights.project(weights.encode_text_ids(text_ids[idx]), "txt")
                tau = weights.tau()
                align_loss, breakdown = total_alignment_loss(
                    EmbeddingBatch(v, "vision", idx), EmbeddingBatch(l, "language", idx),
                    EmbeddingBatch(t, "tactile", idx), cfg.coefficients, tau)
                base = tac_imgs[idx].astype(np.float32)
                v1 = _noisy_view(base, noise_rng.child("a"), cfg.view_noise)
                v2 = _noisy_view(base, noise_rng.child("b"), cfg.view_noise)
                e1 = weights.project(weights.encode_images(v1, "tactile"), "tac")
                e2 = weights.project(weights.encode_images(v2, "tactile"), "tac")
                logits, labels = _matching_pairs(weights, e1, e2)
                match_loss = cross_sensor_matching_loss(logits, labels)
                lam = Tensor(np.asarray(cfg.lambda_match, dtype=np.float32))
                loss = nm.add(align_loss, nm.mul(match_loss, lam))
            if not np.isfinite(loss.data):
                raise NumericError(f"alignment training diverged at step {step}")
            nm.backward(tape, loss)
        except NumericError as e:
            raise NumericError(f"alignment training aborted at step {step}: {e}") from e
        lr = nm.lr_schedule(step + 1, cfg.peak_lr, min(cfg.warmup_steps, cfg.steps),
                            cfg.steps, cfg.floor_lr)
        opt.step(lr)
        opt.zero_grad()
        entry = {"step": step, "loss": float(loss.data), "align": float(align_loss.data),
                 "match": float(match_loss.data), "lr": lr}
        log.append(entry)
        if hooks:
            hooks(step, float(loss.data))
    ds_hash = hashlib.sha256(tac_imgs.tobytes() + vis_imgs.tobytes()).hexdigest()[:16]
    return AlignTrainResult(weights, log, tac_imgs, ds_hash, opt.state)


def _noisy_view(imgs_u8_float: np.ndarray, rng: SeededRng, noise: float) -> np.ndarray:
    jitter = rng.normal(imgs_u8_float.shape, std=noise * 255.0, dtype=np.float32)
    return np.clip(imgs_u8_float + jitter, 0, 255).astype(np.uint8)


def _matching_pairs(weights: AlignmentWeights, e1: Tensor, e2: Tensor):
    """Positives: two views of the same contact. Negatives: shifted pairing."""
    b = e1.shape[0]
    pos = weights.match_logits(e1, e2)
    if b > 1:
        rolled = nm.concat([nm.narrow(e2, 0, 1, b - 1), nm.narrow(e2, 0, 0, 1)], axis=0)
        neg = weights.match_logits(e1, rolled)
        logits = nm.concat([pos, neg], axis=0)
        labels = np.concatenate([np.ones(b), np.zeros(b)]).astype(np.float32)
    else:
        logits = pos
        labels = np.ones(1, dtype=np.float32)
    return logits, labels


# ---------------------------------------------------------------------------
# vision pretraining and probes
# ---------------------------------------------------------------------------

def pretrain_vision_encoder(images: np.ndarray, labels: np.ndarray, cfg: ViTConfig,
                            classes: int, seed: int = 0, steps: int = 300,
                            batch_size: int = 16, peak_lr: float = 2e-3) -> EncoderWeights:
    """Train a vision tower briefly on image classification; the result seeds
    the vision-pretrained tactile path."""
    tower = EncoderWeights.init_scratch(cfg, seed, scope="vision-pretrain")
    rng = SeededRng(seed, "vision-pretrain/head")
    head_w = Tensor(rng.child("w").truncated_normal((cfg.embed_dim, classes), std=0.02), requires_grad=True)
    head_b = Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True)
    params = dict(tower.params)
    params["head.w"] = head_w
    params["head.b"] = head_b
    opt = nm.AdamW(params)
    x_all = images.astype(np.float32).transpose(0, 3, 1, 2) / 127.5 - 1.0
    n = len(labels)
    data_rng = SeededRng(seed, "vision-pretrain/data")
    for step in range(steps):
        idx = data_rng.child(f"batch/{step}").choice(n, min(batch_size, n), replace=False)
        with nm.Tape() as tape:
            patches = Tensor(patchify_batch(x_all[idx], cfg.patch_size))
            tokens = vit_forward_batch(patches, tower)
            pooled = nm.tmean(tokens, axis=1)
            logits = nm.linear(pooled, head_w, head_b)
            loss = nm.softmax_cross_entropy(logits, labels[idx])
        nm.backward(tape, loss)
        opt.step(nm.lr_schedule(step + 1, peak_lr, min(20, steps), steps, peak_lr * 0.05))
        opt.zero_grad()
    return EncoderWeights(cfg, tower.params, "vision-pretrained")


def embed_images(tower: EncoderWeights, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen pooled tower features for probing; no gradients recorded."""
    feats = []
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size].astype(np.float32).transpose(0, 3, 1, 2) / 127.5 - 1.0
        patches = Tensor(patchify_batch(x, tower.cfg.patch_size))
        tokens = vit_forward_batch(patches, tower)
        feats.append(nm.tmean(tokens, axis=1).data)
    return np.concatenate(feats, axis=0)


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 300
    lr: float = 0.05
    train_frac: float = 0.75
    seed: int = 0


def linear_probe(embeddings: np.ndarray, labels: np.ndarray, classes: int,
                 cfg: ProbeConfig = ProbeConfig()) -> float:
    """Accuracy (percent) of a single affine layer on a held-out split."""
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise ValidationError("linear_probe needs at least 2 classes present")
    n = len(labels)
    order = SeededRng(cfg.seed, "probe/split").permutation(n)
    cut = max(1, int(n * cfg.train_frac))
    tr, te = order[:cut], order[cut:]
    mu = embeddings[tr].mean(axis=0)
    sd = embeddings[tr].std(axis=0) + 1e-6
    x = ((embeddings - mu) / sd).astype(np.float32)
    w = Tensor(np.zeros((x.shape[1], classes), dtype=np.float32), requires_grad=True)
    b = Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True)
    opt = nm.AdamW({"w": w, "b": b}, weight_decay=0.0)
    xt = Tensor(x[tr])
    for step in range(cfg.steps):
        with nm.Tape() as tape:
            loss = nm.softmax_cross_entropy(nm.linear(xt, w, b), labels[tr])
        nm.backward(tape, loss)
        opt.step(cfg.lr)
        opt.zero_grad()
    logits = x[te] @ w.data + b.data
    return float((logits.argmax(axis=1) == labels[te]).mean() * 100.0)
