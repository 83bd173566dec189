"""Metrics and experiment harnesses: offline MSE, trajectory smoothness,
the rollout benchmark on the mini environment, and the chunk-size sweep."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .alignment import tokenize
from .errors import ShapeError, ValidationError
from .miniworld import DEFAULT_GRID, EnvConfig, MiniEnv, SceneObject, integrate_states
from .numerics import SeededRng
from .objtac import Episode
from .policy import PolicyModel, extract_chunk, make_sampler


@dataclass
class Trajectory:
    """Per-step state vectors with 30 Hz timestamps."""

    states: np.ndarray            # (T, D)
    timestamps_us: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2:
            raise ShapeError(f"trajectory states must be 2-d, got {self.states.shape}")
        if self.timestamps_us is not None and np.any(np.diff(self.timestamps_us) <= 0):
            raise ValidationError("trajectory timestamps must be monotone")

    @property
    def ee_positions(self) -> np.ndarray:
        return self.states[:, :3]

    def __len__(self) -> int:
        return len(self.states)


def _as_states(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.states
    return np.asarray(traj, dtype=np.float64)


def offline_mse(pred, gt) -> float:
    """(1/T) sum_t ||x_t - x_hat_t||^2, squared L2 over the full state vector."""
    p = _as_states(pred)
    g = _as_states(gt)
    if p.shape != g.shape:
        raise ShapeError(f"trajectory shapes differ: {p.shape} vs {g.shape}")
    if len(p) < 1:
        raise ShapeError("offline_mse needs at least one step")
    diff = p - g
    return float((diff * diff).sum(axis=1).mean())


def smoothness(traj) -> float:
    """Per-axis population variance of step displacements, averaged over the
    3 position axes."""
    s = _as_states(traj)
    if len(s) < 2:
        raise ShapeError("smoothness needs at least 2 steps")
    pos = s[:, :3]
    deltas = np.diff(pos, axis=0)
    return float(deltas.var(axis=0, ddof=0).mean())


# ---------------------------------------------------------------------------
# offline validation protocol
# ---------------------------------------------------------------------------

def validation_mse(model: PolicyModel, episodes: Sequence[Episode], n_points: int = 40,
                   seed: int = 0, env_cfg: EnvConfig = EnvConfig()) -> float:
    """Mean offline MSE between flow-sampled action chunks, integrated into
    states, and the ground-truth future states at sampled timesteps."""
    if not episodes:
        raise ValidationError("validation_mse needs at least one episode")
    sampler = make_sampler(model)
    rng = SeededRng(seed, "validation")
    cfg = model.cfg
    index = [(i, t) for i, ep in enumerate(episodes) for t in range(len(ep))]
    picks = rng.child("points").choice(len(index), min(n_points, len(index)), replace=False)
    total = 0.0
    for j, pick in enumerate(picks):
        i, t = index[int(pick)]
        ep = episodes[i]
        obs = {
            "third": ep.third[t], "wrist": ep.wrist[t], "tactile": ep.tactile[t],
            "state": ep.states[t],
            "lang_ids": tokenize(ep.instruction, cfg.vocab, cfg.lang_len),
        }
        chunk = sampler(obs, rng.child(f"sample/{j}"))
        pred_states = integrate_states(ep.states[t], chunk, env_cfg)
        gt = _future_states(ep.states, t, cfg.chunk)
        total += offline_mse(pred_states, gt)
    return total / len(picks)


def _future_states(states: np.ndarray, t: int, horizon: int) -> np.ndarray:
    fut = states[t + 1:t + 1 + horizon]
    if len(fut) < horizon:
        pad = np.repeat(states[-1:], horizon - len(fut), axis=0)
        fut = np.concatenate([fut, pad], axis=0)
    return fut


# ---------------------------------------------------------------------------
# rollout benchmark
# ---------------------------------------------------------------------------

@dataclass
class TrialResult:
    object_name: str
    cell: tuple
    trial: int
    success: bool
    completion_steps: Optional[int]
    smoothness: float


@dataclass
class RolloutReport:
    trials: list = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        if not self.trials:
            return 0.0
        return 100.0 * sum(t.success for t in self.trials) / len(self.trials)

    @property
    def mean_completion(self) -> Optional[float]:
        steps = [t.completion_steps for t in self.trials if t.success]
        return float(np.mean(steps)) if steps else None

    @property
    def mean_smoothness(self) -> float:
        return float(np.mean([t.smoothness for t in self.trials])) if self.trials else 0.0

    def per_object(self) -> dict:
        objs: dict[str, list[TrialResult]] = {}
        for t in self.trials:
            objs.setdefault(t.object_name, []).append(t)
        out = {}
        for name in sorted(objs):
            rows = objs[name]
            cts = [r.completion_steps for r in rows if r.success]
            out[name] = {
                "trials": len(rows),
                "sr": 100.0 * sum(r.success for r in rows) / len(rows),
                "ct": float(np.mean(cts)) if cts else None,
                "smoothness": float(np.mean([r.smoothness for r in rows])),
            }
        return out

    def to_json_dict(self) -> dict:
        return {
            "trials": [
                {"object": t.object_name, "cell": list(t.cell), "trial": t.trial,
                 "success": t.success, "completion_steps": t.completion_steps,
                 "smoothness": t.smoothness}
                for t in sorted(self.trials, key=lambda r: (r.object_name, r.cell, r.trial))
            ],
            "aggregates": {
                "success_rate": self.success_rate,
                "mean_completion_steps": self.mean_completion,
                "mean_smoothness": self.mean_smoothness,
                "per_object": self.per_object(),
            },
        }

    def to_markdown(self) -> str:
        per = self.per_object()
        names = list(per)
        lines = ["| Metric | " + " | ".join(names) + " | Avg |",
                 "|---" * (len(names) + 2) + "|"]
        sr_cells = [f"{per[n]['sr']:.1f}" for n in names]
        lines.append("| SR (%) | " + " | ".join(sr_cells) + f" | {self.success_rate:.1f} |")
        ct_cells = [f"{per[n]['ct']:.0f}" if per[n]["ct"] is not None else "-" for n in names]
        mean_ct = self.mean_completion
        lines.append("| CT (steps) | " + " | ".join(ct_cells)
                     + (f" | {mean_ct:.0f} |" if mean_ct is not None else " | - |"))
        sm_cells = [f"{per[n]['smoothness']:.3e}" for n in names]
        lines.append("| Smoothness | " + " | ".join(sm_cells) + f" | {self.mean_smoothness:.3e} |")
        return "\n".join(lines) + "\n"


def rollout_benchmark(sample_fn: Callable, objects: Sequence[SceneObject],
                      grid: Sequence[tuple] = DEFAULT_GRID, trials_per_cell: int = 2,
                      max_steps: int = 1500, replan: int = 10, seed: int = 0,
                      env_cfg: EnvConfig = EnvConfig(),
                      lang_len: int = 8, vocab: int = 512) -> RolloutReport:
    """Closed-loop evaluation: reset one env per (object, cell, trial), execute
    the first `replan` actions of each sampled chunk, stop at success or
    max_steps. Completion time is the first success step."""
    if not grid:
        raise ValidationError("rollout grid must be nonempty")
    report = RolloutReport()
    for obj in objects:
        instruction = f"pick up the {obj.name.replace('_', ' ')} and move it to the target"
        lang_ids = tokenize(instruction, vocab, lang_len)
        for ci, cell in enumerate(grid):
            for trial in range(trials_per_cell):
                episode_id = ci * trials_per_cell + trial
                env = MiniEnv(obj, env_cfg, cell=cell, seed=seed, episode=episode_id)
                rng = SeededRng(seed, f"rollout/{obj.name}/{ci}/{trial}")
                positions = [env.state.ee_pos.copy()]
                success_step = None
                chunk = None
                offset = 0
                for step in range(max_steps):
                    if step % replan == 0:
                        obs = env.observe()
                        obs["lang_ids"] = lang_ids
                        chunk = sample_fn(obs, rng.child(f"plan/{step}"))
                        offset = 0
                    env.step(chunk[min(offset, len(chunk) - 1)])
                    offset += 1
                    positions.append(env.state.ee_pos.copy())
                    if env.success():
                        success_step = step + 1
                        break
                pos = np.asarray(positions)
                smooth = float(np.diff(pos, axis=0).var(axis=0, ddof=0).mean()) if len(pos) > 1 else 0.0
                report.trials.append(TrialResult(
                    object_name=obj.name, cell=tuple(cell), trial=trial,
                    success=success_step is not None,
                    completion_steps=success_step, smoothness=smooth))
    return report


def chunk_ablation(train_fn: Callable[[int], object], eval_fn: Callable[[object, int], float],
                   sizes: Sequence[int] = (10, 20, 30, 40, 50)) -> list[tuple[int, float]]:
    """Train and evaluate one policy per chunk length; returns the MSE curve."""
    if not sizes:
        raise ValidationError("chunk ablation needs at least one size")
    curve = []
    for h in sizes:
        model = train_fn(h)
        curve.append((int(h), float(eval_fn(model, h))))
    return curve


def ablation_csv(curve: Sequence[tuple[int, float]]) -> str:
    lines = ["chunk_size,validation_mse"]
    for h, mse in curve:
        lines.append(f"{h},{mse!r}")
    return "\n".join(lines) + "\n"
