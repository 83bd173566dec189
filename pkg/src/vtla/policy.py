"""Action model: token assembly across modalities, a small transformer
backbone, and a flow-matching action head.

Variants differ only in the tactile pathway: vla consumes no tactile tokens,
vtla-fs/pre/sa use one tactile tower with different initial weights, and
omnivtla concatenates a vision-pretrained path with a semantically-aligned
path. Parameter init streams are keyed by name, so all non-tactile weights
are identical across variants at the same seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nm
from .alignment import tokenize
from .encoders import (EncoderWeights, TokenSequence, ViTConfig, init_block,
                       patchify_batch, transformer_block, vit_forward_batch)
from .errors import CompatibilityError, ConfigError, NumericError, ShapeError, ValidationError
from .numerics import SeededRng, Tensor
from .objtac import Episode
from .rotation import rot_to_6d, sixd_to_rot

VARIANTS = ("vla", "vtla-fs", "vtla-pre", "vtla-sa", "omnivtla")


@dataclass
class ActionChunk:
    """H x D action matrix. D=10: [dpos(3), rot6d(6), gripper(1)];
    D=25: [dpos(3), rot6d(6), joints(16)]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] not in (10, 25):
            raise ShapeError(f"action chunk must be (H, 10) or (H, 25), got {self.values.shape}")
        if self.values.shape[0] < 1:
            raise ShapeError("action chunk must have H >= 1")

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    def validate(self) -> None:
        if self.values.shape[1] == 10:
            grip = self.values[:, 9]
            if grip.min() < -1e-6 or grip.max() > 1.0 + 1e-6:
                raise ValidationError("gripper column must lie in [0, 1]")
        for row in self.values:
            sixd_to_rot(row[3:9].astype(np.float64))


@dataclass
class StateVector:
    """Absolute-pose counterpart of one action row."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape not in ((10,), (25,)):
            raise ShapeError(f"state vector must be (10,) or (25,), got {self.values.shape}")

    def rotation(self) -> np.ndarray:
        return sixd_to_rot(self.values[3:9].astype(np.float64))


def encode_action_row(dpos: np.ndarray, rot: np.ndarray, gripper: float) -> np.ndarray:
    return np.concatenate([np.asarray(dpos, dtype=np.float64),
                           rot_to_6d(rot), [gripper]]).astype(np.float32)


def decode_action_row(row: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    row = np.asarray(row, dtype=np.float64)
    return row[:3], sixd_to_rot(row[3:9]), float(row[9])


@dataclass(frozen=True)
class PolicyConfig:
    variant: str = "vla"
    chunk: int = 50
    action_dim: int = 10
    state_dim: int = 10
    cameras: int = 2
    vision: ViTConfig = ViTConfig()
    tactile: ViTConfig = ViTConfig()
    vocab: int = 512
    lang_len: int = 8
    backbone_depth: int = 2
    heads: int = 4
    flow_hidden: int = 128
    flow_steps: int = 10
    time_feats: int = 8
    gain_floor: float = 0.4
    replan: int = 10

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.vision.embed_dim != self.tactile.embed_dim:
            raise ConfigError("vision and tactile embed dims must match the shared backbone width")
        if self.action_dim not in (10, 25):
            raise ConfigError(f"action_dim must be 10 or 25, got {self.action_dim}")

    @property
    def uses_tactile(self) -> bool:
        return self.variant != "vla"

    @property
    def dual_tactile(self) -> bool:
        return self.variant == "omnivtla"

    @property
    def embed_dim(self) -> int:
        return self.vision.embed_dim

    @property
    def tactile_token_count(self) -> int:
        if not self.uses_tactile:
            return 0
        return self.tactile.n_tokens * (2 if self.dual_tactile else 1)

    def token_count(self, lang_tokens: Optional[int] = None) -> int:
        lang = self.lang_len if lang_tokens is None else lang_tokens
        return self.cameras * self.vision.n_tokens + self.tactile_token_count + lang + 1


def assemble_tokens(images: Sequence[TokenSequence], tactile: Optional[TokenSequence],
                    language: TokenSequence, state_token: TokenSequence,
                    cfg: PolicyConfig) -> TokenSequence:
    """Fixed-order concatenation: [cameras ; tactile (if any) ; language ; state].

    Sequence length is cameras * vision tokens + {0, n, 2n} tactile + language
    tokens + 1 state token. A vla sequence is exactly the vtla sequence with
    its tactile block removed.
    """
    if len(images) != cfg.cameras:
        raise ShapeError(f"expected {cfg.cameras} camera token sequences, got {len(images)}")
    for seq in images:
        if seq.modality != "vision":
            raise ShapeError(f"camera sequence has modality {seq.modality!r}")
    if cfg.uses_tactile and tactile is None:
        raise ShapeError(f"variant {cfg.variant} requires tactile tokens")
    if not cfg.uses_tactile and tactile is not None:
        raise ShapeError("vla consumes no tactile tokens")
    if language.modality != "language" or len(language) == 0:
        raise ShapeError("language tokens missing or empty (instruction must be nonempty)")
    if state_token.modality != "state" or len(state_token) != 1:
        raise ShapeError("state must project to exactly one token")
    if cfg.uses_tactile and tactile is not None:
        expected = cfg.tactile_token_count
        if len(tactile) != expected:
            raise ShapeError(f"tactile block has {len(tactile)} tokens, expected {expected}")
    parts = [seq.tokens for seq in images]
    if tactile is not None:
        parts.append(tactile.tokens)
    parts.append(language.tokens)
    parts.append(state_token.tokens)
    return TokenSequence(nm.concat(parts, axis=0), "vision", "assembled")


def time_features(tau: np.ndarray, n_feats: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal features of the flow timestep."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1, 1)
    freqs = 2.0 ** np.arange(n_feats)
    ang = np.pi * tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class PolicyModel:
    """Parameters plus forward passes for one policy variant."""

    def __init__(self, cfg: PolicyConfig, params: dict, provenance: dict):
        self.cfg = cfg
        self.params = params
        self.provenance = provenance
        # per-dimension action normalization; flow runs in normalized space
        self.action_mean = np.zeros(cfg.action_dim, dtype=np.float32)
        self.action_std = np.ones(cfg.action_dim, dtype=np.float32)

    def set_action_stats(self, actions: np.ndarray) -> None:
        """Fit normalization from the training action rows (N, D)."""
        self.action_mean = actions.mean(axis=0).astype(np.float32)
        self.action_std = np.maximum(actions.std(axis=0), 1e-3).astype(np.float32)

    def normalize_actions(self, a: np.ndarray) -> np.ndarray:
        return ((a - self.action_mean) / self.action_std).astype(np.float32)

    def denormalize_actions(self, a: np.ndarray) -> np.ndarray:
        return (a * self.action_std + self.action_mean).astype(np.float32)

    # ------------------------------------------------------------------
    @classmethod
    def init(cls, cfg: PolicyConfig, seed: int,
             sa_tower: Optional[EncoderWeights] = None,
             vision_pretrained: Optional[EncoderWeights] = None,
             dtype=np.float32) -> "PolicyModel":
        params: dict[str, Tensor] = {}
        provenance: dict[str, str] = {}

        vision = EncoderWeights.init_scratch(cfg.vision, seed, scope="policy/vision", dtype=dtype)
        for k, v in vision.params.items():
            params[f"vision/{k}"] = v

        if cfg.uses_tactile:
            towers = {}
            if cfg.dual_tactile:
                if sa_tower is None:
                    raise ConfigError("omnivtla requires a semantically-aligned tactile checkpoint")
                if vision_pretrained is None:
                    raise ConfigError("omnivtla requires a vision-pretrained encoder")
                towers["tactile_pre"] = vision_pretrained.copy("vision-pretrained")
                towers["tactile_sa"] = sa_tower.copy("semantically-aligned")
            elif cfg.variant == "vtla-fs":
                towers["tactile"] = EncoderWeights.init_scratch(cfg.tactile, seed, scope="policy/tactile", dtype=dtype)
            elif cfg.variant == "vtla-pre":
                if vision_pretrained is None:
                    raise ConfigError("vtla-pre requires a vision-pretrained encoder")
                towers["tactile"] = vision_pretrained.copy("vision-pretrained")
            else:  # vtla-sa
                if sa_tower is None:
                    raise ConfigError("vtla-sa requires a semantically-aligned tactile checkpoint")
                towers["tactile"] = sa_tower.copy("semantically-aligned")
            for scope, tower in towers.items():
                if tower.cfg != cfg.tactile:
                    raise CompatibilityError(
                        f"tactile tower config {tower.cfg} does not match policy config {cfg.tactile}")
                provenance[scope] = tower.provenance
                for k, v in tower.params.items():
                    params[f"{scope}/{k}"] = v

        d = cfg.embed_dim
        rng = SeededRng(seed, "policy/init")
        params["lang/emb"] = Tensor(rng.child("lang.emb").truncated_normal(
            (cfg.vocab, d), std=0.02, dtype=dtype), requires_grad=True)
        params["state/w"] = Tensor(rng.child("state.w").truncated_normal(
            (cfg.state_dim, d), std=0.02, dtype=dtype), requires_grad=True)
        params["state/b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        for tag in ("vision", "tactile", "language", "state"):
            params[f"mod/{tag}"] = Tensor(rng.child(f"mod.{tag}").truncated_normal(
                (d,), std=0.02, dtype=dtype), requires_grad=True)
            # per-modality entry norm: pretrained towers arrive at very
            # different token scales, which otherwise drown the quiet ones
            params[f"adapt/{tag}.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
            params[f"adapt/{tag}.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        for i in range(cfg.backbone_depth):
            init_block(params, f"bb{i}", d, rng.child("backbone"), dtype=dtype)

        # the context MLP deliberately excludes the noisy chunk: with x as an
        # input the head can denoise the target from x alone and starve the
        # observation pathway of gradient; context-only keeps it load-bearing
        in_dim = 2 * cfg.time_feats + 2 * d
        frng = SeededRng(seed, "policy/flow/init")
        params["flow/w1"] = Tensor(frng.child("w1").truncated_normal(
            (in_dim, cfg.flow_hidden), std=0.02, dtype=dtype), requires_grad=True)
        params["flow/b1"] = Tensor(np.zeros(cfg.flow_hidden, dtype=dtype), requires_grad=True)
        params["flow/w2"] = Tensor(frng.child("w2").truncated_normal(
            (cfg.flow_hidden, cfg.flow_hidden), std=0.02, dtype=dtype), requires_grad=True)
        params["flow/b2"] = Tensor(np.zeros(cfg.flow_hidden, dtype=dtype), requires_grad=True)
        params["flow/w3"] = Tensor(frng.child("w3").truncated_normal(
            (cfg.flow_hidden, cfg.chunk * cfg.action_dim), std=0.02, dtype=dtype), requires_grad=True)
        params["flow/b3"] = Tensor(np.zeros(cfg.chunk * cfg.action_dim, dtype=dtype), requires_grad=True)
        return cls(cfg, params, provenance)

    # ------------------------------------------------------------------
    def _tower(self, scope: str) -> EncoderWeights:
        prefix = f"{scope}/"
        sub = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        cfg = self.cfg.vision if scope == "vision" else self.cfg.tactile
        return EncoderWeights(cfg, sub, self.provenance.get(scope, "scratch"))

    @property
    def dtype(self):
        return self.params["lang/emb"].dtype

    def _encode_camera_batch(self, imgs: np.ndarray) -> Tensor:
        x = imgs.astype(self.dtype).transpose(0, 3, 1, 2) / 127.5 - 1.0
        patches = Tensor(patchify_batch(x, self.cfg.vision.patch_size))
        tokens = vit_forward_batch(patches, self._tower("vision"))
        tokens = nm.layer_norm(tokens, self.params["adapt/vision.g"], self.params["adapt/vision.b"])
        return nm.add(tokens, self.params["mod/vision"])

    def _encode_tactile_batch(self, imgs: np.ndarray) -> Tensor:
        x = imgs.astype(self.dtype).transpose(0, 3, 1, 2) / 127.5 - 1.0
        patches = Tensor(patchify_batch(x, self.cfg.tactile.patch_size))
        if self.cfg.dual_tactile:
            a = vit_forward_batch(patches, self._tower("tactile_pre"))
            b = vit_forward_batch(patches, self._tower("tactile_sa"))
            tokens = nm.concat([a, b], axis=1)
        else:
            tokens = vit_forward_batch(patches, self._tower("tactile"))
        tokens = nm.layer_norm(tokens, self.params["adapt/tactile.g"], self.params["adapt/tactile.b"])
        return nm.add(tokens, self.params["mod/tactile"])

    def encode_context(self, batch: dict) -> Tensor:
        """Observation batch -> pooled context (B, embed_dim).

        batch keys: third, wrist (B, h, w, 3) u8; tactile (B, th, tw, 3) u8
        (required iff the variant consumes tactile); state (B, state_dim);
        lang_ids (B, lang_len) int.
        """
        cfg = self.cfg
        parts = [self._encode_camera_batch(batch["third"])]
        if cfg.cameras >= 2:
            parts.append(self._encode_camera_batch(batch["wrist"]))
        if cfg.uses_tactile:
            if "tactile" not in batch:
                raise ShapeError(f"variant {cfg.variant} requires a tactile observation")
            parts.append(self._encode_tactile_batch(batch["tactile"]))
        lang = nm.gather_rows(self.params["lang/emb"], np.asarray(batch["lang_ids"]))
        lang = nm.layer_norm(lang, self.params["adapt/language.g"], self.params["adapt/language.b"])
        parts.append(nm.add(lang, self.params["mod/language"]))
        state = Tensor(np.asarray(batch["state"], dtype=self.dtype))
        st = nm.linear(state, self.params["state/w"], self.params["state/b"])
        st = nm.layer_norm(st, self.params["adapt/state.g"], self.params["adapt/state.b"])
        st = nm.add(nm.reshape(st, (st.shape[0], 1, st.shape[1])), self.params["mod/state"])
        parts.append(st)
        x = nm.concat(parts, axis=1)
        for i in range(cfg.backbone_depth):
            x = transformer_block(x, self.params, f"bb{i}", cfg.heads)
        # readout: global mean plus the state token's output (the state token
        # sits last in the assembled order and attends over all modalities)
        pooled = nm.tmean(x, axis=1)
        state_out = nm.reshape(nm.narrow(x, 1, x.shape[1] - 1, 1),
                               (x.shape[0], x.shape[2]))
        return nm.concat([pooled, state_out], axis=1)

    def flow_head(self, x: Tensor, tau: np.ndarray, context: Tensor) -> Tensor:
        """Velocity prediction for noisy chunks x (B, H, D) at timesteps tau.

        Denoiser parameterization of the linear-interpolant field: the MLP
        regresses the clean chunk from the context alone, and the velocity is
        (x - denoised) / max(tau, floor). The analytic gain keeps Euler
        sampling contractive; the context-only MLP keeps the observation
        pathway load-bearing (a head fed x can shortcut-denoise and starve
        the encoders of gradient).
        """
        b = x.shape[0]
        flat = nm.reshape(x, (b, self.cfg.chunk * self.cfg.action_dim))
        tf = Tensor(time_features(tau, self.cfg.time_feats, dtype=x.dtype))
        h = nm.concat([tf, context], axis=1)
        h = nm.gelu(nm.linear(h, self.params["flow/w1"], self.params["flow/b1"]))
        h = nm.gelu(nm.linear(h, self.params["flow/w2"], self.params["flow/b2"]))
        g = nm.linear(h, self.params["flow/w3"], self.params["flow/b3"])
        floor = self.cfg.gain_floor
        inv = Tensor((1.0 / np.maximum(tau, floor))[:, None].astype(x.dtype))
        out = nm.mul(nm.sub(flat, g), inv)
        return nm.reshape(out, (b, self.cfg.chunk, self.cfg.action_dim))

    # ------------------------------------------------------------------
    def to_records(self) -> tuple[dict, dict]:
        records = {k: v.data for k, v in self.params.items()}
        records["__action_mean__"] = self.action_mean
        records["__action_std__"] = self.action_std
        meta = {
            "variant": self.cfg.variant,
            "policy_config": json.dumps({
                "variant": self.cfg.variant, "chunk": self.cfg.chunk,
                "action_dim": self.cfg.action_dim, "state_dim": self.cfg.state_dim,
                "cameras": self.cfg.cameras, "vocab": self.cfg.vocab,
                "lang_len": self.cfg.lang_len, "backbone_depth": self.cfg.backbone_depth,
                "heads": self.cfg.heads, "flow_hidden": self.cfg.flow_hidden,
                "flow_steps": self.cfg.flow_steps, "time_feats": self.cfg.time_feats,
                "gain_floor": self.cfg.gain_floor, "replan": self.cfg.replan,
                "vision": list(map(int, self.cfg.vision.to_array())),
                "tactile": list(map(int, self.cfg.tactile.to_array())),
            }, sort_keys=True),
        }
        for scope, tag in sorted(self.provenance.items()):
            meta[f"provenance.{scope}"] = tag
        return records, meta

    @classmethod
    def from_records(cls, records: dict, meta: dict) -> "PolicyModel":
        try:
            raw = json.loads(meta["policy_config"])
        except (KeyError, json.JSONDecodeError) as e:
            raise CompatibilityError(f"checkpoint lacks a valid policy config: {e}") from e
        cfg = PolicyConfig(
            variant=raw["variant"], chunk=raw["chunk"], action_dim=raw["action_dim"],
            state_dim=raw["state_dim"], cameras=raw["cameras"], vocab=raw["vocab"],
            lang_len=raw["lang_len"], backbone_depth=raw["backbone_depth"], heads=raw["heads"],
            flow_hidden=raw["flow_hidden"], flow_steps=raw["flow_steps"],
            time_feats=raw["time_feats"], replan=raw["replan"],
            vision=ViTConfig.from_array(np.array(raw["vision"])),
            tactile=ViTConfig.from_array(np.array(raw["tactile"])),
        )
        records = dict(records)
        mean = records.pop("__action_mean__", None)
        std = records.pop("__action_std__", None)
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in records.items()}
        provenance = {k[len("provenance."):]: v for k, v in meta.items()
                      if k.startswith("provenance.")}
        model = cls(cfg, params, provenance)
        if mean is not None:
            model.action_mean = mean.copy()
        if std is not None:
            model.action_std = std.copy()
        return model

    def save(self, path) -> None:
        records, meta = self.to_records()
        nm.save_checkpoint(path, records, meta)

    @classmethod
    def load(cls, path) -> "PolicyModel":
        records, meta = nm.load_checkpoint(path)
        return cls.from_records(records, meta)


def flow_matching_loss(head: Callable, context, chunk: Tensor, rng: SeededRng,
                       tau: Optional[np.ndarray] = None,
                       eps: Optional[np.ndarray] = None) -> Tensor:
    """Linear-interpolant flow matching objective.

    tau ~ U(0,1) per sample, eps ~ N(0,I); x = (1-tau) A + tau eps; the head
    regresses u = eps - A. Loss is the mean squared error over all elements.
    """
    a = chunk.data if isinstance(chunk, Tensor) else np.asarray(chunk, dtype=np.float32)
    b = a.shape[0]
    if tau is None:
        # stratified draw: each sample is marginally Uniform(0,1), while the
        # batch covers the interval evenly, which stabilizes the gradient
        u = rng.child("tau").uniform((b,), dtype=np.float64)
        strata = rng.child("tau-perm").permutation(b)
        tau = (strata + u) / b
    if eps is None:
        eps = rng.child("eps").normal(a.shape, dtype=a.dtype)
    x = (1.0 - tau)[:, None, None] * a + tau[:, None, None] * eps
    target = Tensor((eps - a).astype(a.dtype))
    pred = head(Tensor(x.astype(a.dtype)), tau, context)
    diff = nm.sub(pred, target)
    return nm.tmean(nm.mul(diff, diff))


def sample_actions(head: Callable, context, n_steps: int, rng: SeededRng,
                   horizon: int, action_dim: int, batch: int = 1) -> np.ndarray:
    """Euler-integrate dx = -head(x, tau, context) dtau from tau=1 to 0."""
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    x = rng.child("init").normal((batch, horizon, action_dim), dtype=np.float32)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        tau = np.full(batch, 1.0 - k * dt)
        v = head(Tensor(x), tau, context)
        x = x - v.data * dt
    return x


@dataclass
class PolicyTrainResult:
    model: "PolicyModel"
    log: list
    opt_state: object


@dataclass(frozen=True)
class PolicyTrainConfig:
    steps: int = 4000
    batch_size: int = 16
    peak_lr: float = 2e-3
    floor_lr: float = 5e-5
    warmup_steps: int = 30
    weight_decay: float = 1e-4
    # extra flow-matching samples pinned at tau=1, where the target equals
    # eps - A: a dense imitation signal and the Euler integration start
    boundary_weight: float = 1.0
    seed: int = 0


def extract_chunk(actions: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """actions[t : t+H], padding terminal chunks by repeating the last action."""
    n = len(actions)
    if t >= n:
        raise ShapeError(f"timestep {t} outside episode of length {n}")
    chunk = actions[t:t + horizon]
    if len(chunk) < horizon:
        pad = np.repeat(actions[-1:], horizon - len(chunk), axis=0)
        chunk = np.concatenate([chunk, pad], axis=0)
    return chunk


@dataclass
class EpisodeBatchSource:
    """Flat (episode, timestep) index over a list of episodes."""

    episodes: list
    horizon: int
    lang_len: int = 8
    vocab: int = 512

    def __post_init__(self):
        if not self.episodes:
            raise ValidationError("no episodes to train on")
        for ep in self.episodes:
            if len(ep) < 1:
                raise ValidationError("empty episode")
            if self.horizon > len(ep):
                raise ShapeError(f"chunk length {self.horizon} exceeds episode length {len(ep)}")
        self.index = [(i, t) for i, ep in enumerate(self.episodes) for t in range(len(ep))]
        self.lang_ids = [tokenize(ep.instruction, self.vocab, self.lang_len)
                         for ep in self.episodes]

    def __len__(self) -> int:
        return len(self.index)

    def gather(self, picks: np.ndarray) -> dict:
        eps = self.episodes
        sel = [self.index[j] for j in picks]
        batch = {
            "third": np.stack([eps[i].third[t] for i, t in sel]),
            "wrist": np.stack([eps[i].wrist[t] for i, t in sel]),
            "tactile": np.stack([eps[i].tactile[t] for i, t in sel]),
            "state": np.stack([eps[i].states[t] for i, t in sel]),
            "lang_ids": np.stack([self.lang_ids[i] for i, t in sel]),
            "chunk": np.stack([extract_chunk(eps[i].actions, t, self.horizon) for i, t in sel]),
        }
        return batch


def train_policy(episodes: Sequence[Episode], cfg: PolicyConfig,
                 tcfg: PolicyTrainConfig = PolicyTrainConfig(),
                 sa_tower: Optional[EncoderWeights] = None,
                 vision_pretrained: Optional[EncoderWeights] = None,
                 hooks: Optional[Callable[[int, float], None]] = None,
                 model: Optional[PolicyModel] = None,
                 opt_state=None,
                 start_step: int = 0,
                 stop_step: Optional[int] = None) -> PolicyTrainResult:
    """Flow-matching imitation training over expert episodes.

    Batch composition and flow noise are keyed by (seed, step), so resuming
    from a checkpoint at step k reproduces the uninterrupted run exactly.
    """
    if model is None:
        model = PolicyModel.init(cfg, tcfg.seed, sa_tower=sa_tower,
                                 vision_pretrained=vision_pretrained)
        model.set_action_stats(np.concatenate([ep.actions for ep in episodes], axis=0))
    source = EpisodeBatchSource(list(episodes), cfg.chunk, cfg.lang_len, cfg.vocab)
    opt = nm.AdamW(model.params, weight_decay=tcfg.weight_decay, state=opt_state)
    data_rng = SeededRng(tcfg.seed, "policy/data")
    flow_rng = SeededRng(tcfg.seed, "policy/flow")
    log = []
    for step in range(start_step, tcfg.steps if stop_step is None else stop_step):
        picks = data_rng.child(f"batch/{step}").choice(len(source), tcfg.batch_size, replace=True)
        batch = source.gather(picks)
        try:
            with nm.Tape() as tape:
                context = model.encode_context(batch)
                chunk = Tensor(model.normalize_actions(batch["chunk"]))
                srng = flow_rng.child(f"step/{step}")
                loss = flow_matching_loss(model.flow_head, context, chunk, srng)
                if tcfg.boundary_weight > 0:
                    edge = flow_matching_loss(model.flow_head, context, chunk,
                                              srng.child("edge"),
                                              tau=np.ones(tcfg.batch_size))
                    loss = nm.add(loss, nm.mul(edge, Tensor(
                        np.asarray(tcfg.boundary_weight, dtype=np.float32))))
            if not np.isfinite(loss.data):
                raise NumericError(f"policy training diverged at step {step}")
            nm.backward(tape, loss)
        except NumericError as e:
            raise NumericError(f"policy training aborted at step {step}: {e}") from e
        lr = nm.lr_schedule(step + 1, tcfg.peak_lr, min(tcfg.warmup_steps, tcfg.steps),
                            tcfg.steps, tcfg.floor_lr)
        opt.step(lr)
        opt.zero_grad()
        log.append({"step": step, "loss": float(loss.data), "lr": lr})
        if hooks:
            hooks(step, float(loss.data))
    return PolicyTrainResult(model, log, opt.state)


def make_sampler(model: PolicyModel) -> Callable:
    """Closed-loop sampler: (observation dict, rng) -> (H, D) action matrix."""
    cfg = model.cfg

    def sample(obs: dict, rng: SeededRng) -> np.ndarray:
        batch = {
            "third": obs["third"][None], "wrist": obs["wrist"][None],
            "state": obs["state"][None], "lang_ids": obs["lang_ids"][None],
        }
        if cfg.uses_tactile:
            batch["tactile"] = obs["tactile"][None]
        context = model.encode_context(batch)
        raw = sample_actions(model.flow_head, context, cfg.flow_steps, rng,
                             cfg.chunk, cfg.action_dim)[0]
        chunk = model.denormalize_actions(raw)
        if cfg.action_dim == 10:
            chunk[:, 9] = np.clip(chunk[:, 9], 0.0, 1.0)
        return chunk

    return sample
