"""Scripted pick-and-place environment.

The environment is a deterministic state machine: the arm moves by relative
position deltas, the gripper tracks an absolute aperture target, and contact
force rises linearly with squeeze overlap times a per-episode stiffness.
Grip timing is observable only through that force: the rendered images carry
geometry (object and arm positions) but not stiffness, so a policy without
the tactile stream cannot tell when a grasp is firm.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .numerics import SeededRng
from .objtac import Episode, HARDNESS, MATERIAL_COLORS, ROUGHNESS, texture_field
from .rotation import IDENTITY_6D, rot_to_6d, sixd_to_rot_safe
from .tactile import ForceFrame, SensorLayout, force_window_to_image


@dataclass(frozen=True)
class SceneObject:
    """An object preset; stiffness drives how deep a firm grasp must squeeze."""

    name: str
    material: str
    roughness: str = "smooth"
    hardness: str = "rigid"
    width_norm: float = 0.55
    stiffness: float = 1.0


DEFAULT_OBJECTS = (
    SceneObject("metal_can", "metal", "smooth", "rigid", stiffness=1.9),
    SceneObject("glass_bottle", "glass", "smooth", "rigid", stiffness=1.45),
    SceneObject("plastic_carton", "plastic", "smooth", "soft", stiffness=1.0),
    SceneObject("fabric_bundle", "fabric", "rough", "soft", stiffness=0.62),
)

DEFAULT_GRID = ((-0.2, -0.2), (-0.2, 0.2), (0.2, -0.2), (0.2, 0.2))


@dataclass(frozen=True)
class EnvConfig:
    image_size: int = 24
    tactile_size: int = 24
    grid_h: int = 4
    grid_w: int = 3
    sensor_count: int = 2
    force_slope: float = 20.0          # N per unit squeeze overlap, at stiffness 1
    hold_threshold: float = 2.0        # N needed to hold the object
    grip_force: float = 2.6            # expert's target grip force
    max_pos_step: float = 0.04
    max_aperture_step: float = 0.2
    home: tuple = (0.0, 0.0, 0.20)
    hover_z: float = 0.12
    grasp_z: float = 0.03
    transport_z: float = 0.16
    place_z: float = 0.03
    reach_xy: float = 0.045
    reach_z: float = 0.03
    lift_eps: float = 0.005
    table_z: float = 0.02
    target_xy: tuple = (0.30, 0.30)
    success_radius: float = 0.05
    stiffness_jitter: tuple = (0.6, 1.75)
    force_pixel_range: tuple = (0.0, 12.0)
    step_period_us: int = 33333        # 30 Hz

    @property
    def layout(self) -> SensorLayout:
        return SensorLayout(sensor_count=self.sensor_count, grid_h=self.grid_h,
                            grid_w=self.grid_w, stitch_order=tuple(range(self.sensor_count)))


@dataclass
class MiniEnvState:
    ee_pos: np.ndarray                 # (3,)
    ee_rot: np.ndarray                 # (3, 3)
    aperture: float
    object_pos: np.ndarray             # (3,)
    object_width: float
    contact_force: float = 0.0
    holding: bool = False
    slip_flag: bool = False

    def copy(self) -> "MiniEnvState":
        return MiniEnvState(self.ee_pos.copy(), self.ee_rot.copy(), self.aperture,
                            self.object_pos.copy(), self.object_width,
                            self.contact_force, self.holding, self.slip_flag)

    def state_vector(self) -> np.ndarray:
        return np.concatenate([self.ee_pos, rot_to_6d(self.ee_rot),
                               [self.aperture]]).astype(np.float32)


def env_step(state: MiniEnvState, action: np.ndarray, scene: SceneObject,
             cfg: EnvConfig, stiffness_scale: float = 1.0) -> MiniEnvState:
    """Advance one tick. Total: any finite action produces a valid state."""
    action = np.asarray(action, dtype=np.float64)
    new = state.copy()
    new.slip_flag = False

    dpos = np.clip(action[:3], -cfg.max_pos_step, cfg.max_pos_step)
    new.ee_pos = new.ee_pos + dpos
    new.ee_pos[0] = np.clip(new.ee_pos[0], -0.45, 0.45)
    new.ee_pos[1] = np.clip(new.ee_pos[1], -0.45, 0.45)
    new.ee_pos[2] = np.clip(new.ee_pos[2], 0.0, 0.40)
    new.ee_rot = sixd_to_rot_safe(action[3:9]) @ new.ee_rot

    target = float(np.clip(action[9], 0.0, 1.0))
    delta = target - new.aperture
    if abs(delta) <= cfg.max_aperture_step:
        new.aperture = target  # land exactly on the commanded target
    else:
        step = cfg.max_aperture_step if delta > 0 else -cfg.max_aperture_step
        new.aperture = float(np.clip(new.aperture + step, 0.0, 1.0))

    if state.holding:
        new.object_pos = new.ee_pos + np.array([0.0, 0.0, -0.01])

    dx = new.ee_pos[:2] - new.object_pos[:2]
    enclosing = (np.hypot(dx[0], dx[1]) < cfg.reach_xy
                 and abs(new.ee_pos[2] - new.object_pos[2]) < cfg.reach_z + 0.011)
    onset = 1.0 - new.object_width
    overlap = max(0.0, new.aperture - onset)
    force = cfg.force_slope * scene.stiffness * stiffness_scale * overlap if enclosing else 0.0
    new.contact_force = force
    new.holding = bool(enclosing and force >= cfg.hold_threshold)

    rising = new.ee_pos[2] - state.ee_pos[2] > cfg.lift_eps
    if not new.holding:
        if state.holding or (rising and enclosing and 0.0 < force < cfg.hold_threshold):
            # weak grip cannot carry the object: it settles back on the table
            new.slip_flag = bool(rising or state.holding)
            new.object_pos = np.array([new.object_pos[0], new.object_pos[1], cfg.table_z])
        if new.object_pos[2] > cfg.table_z and not enclosing:
            new.object_pos[2] = cfg.table_z
    return new


class MiniEnv:
    """Owns scene parameters, per-episode randomness, and rendering."""

    def __init__(self, scene: SceneObject, cfg: EnvConfig = EnvConfig(),
                 cell: tuple = DEFAULT_GRID[0], seed: int = 0, episode: int = 0,
                 start_pos: Optional[tuple] = None):
        self.scene = scene
        self.cfg = cfg
        rng = SeededRng(seed, f"env/{scene.name}/{episode}")
        lo, hi = cfg.stiffness_jitter
        self.stiffness_scale = float(rng.uniform((), lo, hi))
        self.texture_phase = float(rng.uniform((), 0, 2 * np.pi))
        self._patterns = [
            texture_field(scene.material, scene.roughness, scene.hardness,
                          cfg.grid_h, cfg.grid_w, self.texture_phase, (0.0, 0.0),
                          sensor_phase=s * np.pi / 4)
            for s in range(cfg.sensor_count)
        ]
        self.state = MiniEnvState(
            ee_pos=np.array(start_pos if start_pos is not None else cfg.home, dtype=np.float64),
            ee_rot=np.eye(3),
            aperture=0.0,
            object_pos=np.array([cell[0], cell[1], cfg.table_z], dtype=np.float64),
            object_width=scene.width_norm,
        )
        self.steps = 0

    @property
    def required_grip_aperture(self) -> float:
        """Aperture where force reaches the expert grip target (privileged)."""
        onset = 1.0 - self.scene.width_norm
        return onset + self.cfg.grip_force / (self.cfg.force_slope * self.scene.stiffness * self.stiffness_scale)

    def step(self, action: np.ndarray) -> MiniEnvState:
        self.state = env_step(self.state, action, self.scene, self.cfg, self.stiffness_scale)
        self.steps += 1
        return self.state

    def force_frames(self, timestamp_us: int = 0) -> list[ForceFrame]:
        """Per-sensor taxel forces for the current contact force."""
        f = self.state.contact_force
        frames = []
        for sensor, pattern in enumerate(self._patterns):
            grid = f * (0.6 + 0.25 * pattern)
            frames.append(ForceFrame(sensor, timestamp_us, np.maximum(grid, 0.0)))
        return frames

    def tactile_image(self) -> np.ndarray:
        frames = self.force_frames()
        img = force_window_to_image([[fr] for fr in frames], self.cfg.layout,
                                    target=self.cfg.tactile_size,
                                    stats_scope="fixed-range",
                                    fixed_range=self.cfg.force_pixel_range)
        return img.pixels

    def _world_to_px(self, x: float, y: float, size: int) -> tuple[int, int]:
        col = int(np.clip((x + 0.45) / 0.9 * (size - 1), 0, size - 1))
        row = int(np.clip((y + 0.45) / 0.9 * (size - 1), 0, size - 1))
        return row, col

    def render_third(self) -> np.ndarray:
        size = self.cfg.image_size
        img = np.zeros((size, size, 3), dtype=np.float64)
        img[..., 2] = 25
        tr, tc = self._world_to_px(*self.cfg.target_xy, size)
        img[max(tr - 2, 0):tr + 3, max(tc - 2, 0):tc + 3] = (70, 70, 70)
        orow, ocol = self._world_to_px(self.state.object_pos[0], self.state.object_pos[1], size)
        color = np.array(MATERIAL_COLORS[self.scene.material], dtype=np.float64)
        img[max(orow - 2, 0):orow + 3, max(ocol - 2, 0):ocol + 3] = color
        er, ec = self._world_to_px(self.state.ee_pos[0], self.state.ee_pos[1], size)
        bright = 80 + 175 * self.state.ee_pos[2] / 0.40
        img[er, max(ec - 3, 0):ec + 4] = bright
        img[max(er - 3, 0):er + 4, ec] = bright
        return np.clip(img, 0, 255).astype(np.uint8)

    def render_wrist(self) -> np.ndarray:
        size = self.cfg.image_size
        img = np.zeros((size, size, 3), dtype=np.float64)
        img[..., 0] = 20
        rel = self.state.object_pos - self.state.ee_pos
        row = int(np.clip(size / 2 + rel[1] / 0.5 * (size / 2), 0, size - 1))
        col = int(np.clip(size / 2 + rel[0] / 0.5 * (size / 2), 0, size - 1))
        proximity = np.clip(1.0 - abs(rel[2]) / 0.3, 0.0, 1.0)
        color = np.array(MATERIAL_COLORS[self.scene.material], dtype=np.float64) * (0.3 + 0.7 * proximity)
        img[max(row - 2, 0):row + 3, max(col - 2, 0):col + 3] = color
        img[size // 2, size // 2] = (255, 255, 255)
        gr = int(np.clip(self.state.aperture * (size - 1), 0, size - 1))
        img[size - 1, : gr + 1] = (90, 90, 90)
        return np.clip(img, 0, 255).astype(np.uint8)

    def observe(self) -> dict:
        return {
            "third": self.render_third(),
            "wrist": self.render_wrist(),
            "tactile": self.tactile_image(),
            "state": self.state.state_vector(),
        }

    def success(self) -> bool:
        d = self.state.object_pos[:2] - np.asarray(self.cfg.target_xy)
        return bool(np.hypot(d[0], d[1]) < self.cfg.success_radius
                    and not self.state.holding
                    and abs(self.state.object_pos[2] - self.cfg.table_z) < 1e-6)


def collect_demonstrations(objects: Sequence[SceneObject], episodes_per_object: int,
                           cfg: EnvConfig = EnvConfig(), seed: int = 0,
                           motion_jitter: float = 0.008,
                           randomize_poses: bool = True) -> list[Episode]:
    """Teleoperation-style dataset: one scripted-expert episode per draw.

    Randomized start poses and object placements give the learner dense
    coverage of relative geometry; the evaluation grid stays fixed elsewhere.
    """
    rng = SeededRng(seed, "demos")
    episodes = []
    for obj in objects:
        for k in range(episodes_per_object):
            erng = rng.child(f"{obj.name}/{k}")
            cell = DEFAULT_GRID[k % len(DEFAULT_GRID)]
            if randomize_poses:
                # objects stay on the standardized grid; the arm starts near
                # home with enough spread to cover recovery neighborhoods
                start = (float(erng.uniform((), -0.12, 0.12)),
                         float(erng.uniform((), -0.12, 0.12)),
                         float(erng.uniform((), 0.14, 0.24)))
            else:
                start = None
            env = MiniEnv(obj, cfg, cell=cell, seed=seed, episode=k, start_pos=start)
            ep = scripted_expert(env, motion_jitter=motion_jitter,
                                 jitter_seed=seed * 7919 + k)
            episodes.append(ep)
    return episodes


def integrate_states(state_vec: np.ndarray, chunk: np.ndarray,
                     cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Roll a predicted action chunk into absolute states from a start state.

    Mirrors the arm kinematics of env_step (position clamp, aperture rate
    limit with snap) without any contact simulation. Returns (H, D) states.
    """
    chunk = np.asarray(chunk, dtype=np.float64)
    pos = np.asarray(state_vec[:3], dtype=np.float64).copy()
    rot = sixd_to_rot_safe(np.asarray(state_vec[3:9], dtype=np.float64))
    aperture = float(state_vec[9])
    out = np.zeros((len(chunk), 10), dtype=np.float32)
    for k, row in enumerate(chunk):
        pos = pos + np.clip(row[:3], -cfg.max_pos_step, cfg.max_pos_step)
        pos[0] = np.clip(pos[0], -0.45, 0.45)
        pos[1] = np.clip(pos[1], -0.45, 0.45)
        pos[2] = np.clip(pos[2], 0.0, 0.40)
        rot = sixd_to_rot_safe(row[3:9]) @ rot
        target = float(np.clip(row[9], 0.0, 1.0))
        delta = target - aperture
        if abs(delta) <= cfg.max_aperture_step:
            aperture = target
        else:
            aperture = float(np.clip(aperture + (cfg.max_aperture_step if delta > 0 else -cfg.max_aperture_step), 0.0, 1.0))
        out[k, :3] = pos
        out[k, 3:9] = rot_to_6d(rot)
        out[k, 9] = aperture
    return out


def _toward(current, target, cap) -> np.ndarray:
    return np.clip(np.asarray(target) - np.asarray(current), -cap, cap)


def scripted_expert(env: MiniEnv, max_steps: int = 400,
                    motion_jitter: float = 0.0, jitter_seed: int = 0) -> Episode:
    """Demonstration policy: approach, three squeeze stages gated on force,
    lift, transport, release. Records one episode at the env step period.

    motion_jitter adds teleoperation-style noise to position deltas; the
    expert recomputes its targets from the observed state every step, so the
    recorded data includes the corrective actions a learner needs for
    closed-loop stability.
    """
    cfg = env.cfg
    scene = env.scene
    onset = 1.0 - scene.width_norm
    a_grip = env.required_grip_aperture
    stage_targets = [onset + frac * (a_grip - onset) for frac in (0.4, 0.7, 1.0)]
    target_xy = np.asarray(cfg.target_xy)
    jitter_rng = SeededRng(jitter_seed, f"expert-jitter/{scene.name}") if motion_jitter > 0 else None

    obs_third, obs_wrist, obs_tac, obs_state, actions = [], [], [], [], []
    phase = "approach"
    stage = 0
    dwell = 0
    unreachable = bool(np.any(np.abs([*target_xy, env.state.object_pos[0],
                                      env.state.object_pos[1]]) > 0.45))
    already_done = env.success()

    for _ in range(max_steps):
        s = env.state
        obs = env.observe()
        dpos = np.zeros(3)
        grip = s.aperture

        if unreachable or already_done:
            phase = "done"
        if phase == "approach":
            goal = np.array([s.object_pos[0], s.object_pos[1], cfg.hover_z])
            dpos = _toward(s.ee_pos, goal, cfg.max_pos_step)
            grip = 0.0
            if np.linalg.norm(s.ee_pos - goal) < 0.005:
                phase = "descend"
        elif phase == "descend":
            goal = np.array([s.object_pos[0], s.object_pos[1], cfg.grasp_z])
            dpos = _toward(s.ee_pos, goal, cfg.max_pos_step * 0.5)
            grip = 0.0
            if abs(s.ee_pos[2] - cfg.grasp_z) < 0.004:
                phase = "squeeze"
        elif phase == "squeeze":
            grip = stage_targets[stage]
            # actions are stored float32; compare at that resolution
            if abs(s.aperture - stage_targets[stage]) < 1e-6:
                dwell += 1
                if dwell >= 4:
                    dwell = 0
                    if stage < 2:
                        stage += 1
                    elif s.contact_force >= cfg.hold_threshold * 1.1:
                        phase = "lift"
                    else:
                        stage_targets[2] = min(1.0, stage_targets[2] + 0.02)
        elif phase == "lift":
            grip = stage_targets[2]
            dpos = _toward(s.ee_pos, [s.ee_pos[0], s.ee_pos[1], cfg.transport_z], cfg.max_pos_step * 0.75)
            if abs(s.ee_pos[2] - cfg.transport_z) < 0.004:
                phase = "transport"
        elif phase == "transport":
            grip = stage_targets[2]
            goal = np.array([target_xy[0], target_xy[1], cfg.transport_z])
            dpos = _toward(s.ee_pos, goal, cfg.max_pos_step)
            if np.linalg.norm(s.ee_pos[:2] - target_xy) < 0.004:
                phase = "place"
        elif phase == "place":
            grip = stage_targets[2]
            dpos = _toward(s.ee_pos, [target_xy[0], target_xy[1], cfg.place_z], cfg.max_pos_step * 0.5)
            if abs(s.ee_pos[2] - cfg.place_z) < 0.004:
                phase = "release"
        elif phase == "release":
            grip = 0.0
            if s.aperture < 1e-9:
                phase = "retreat"
        elif phase == "retreat":
            grip = 0.0
            dpos = _toward(s.ee_pos, [s.ee_pos[0], s.ee_pos[1], cfg.hover_z], cfg.max_pos_step)
            if abs(s.ee_pos[2] - cfg.hover_z) < 0.004:
                phase = "done"

        if jitter_rng is not None and phase not in ("squeeze", "done"):
            dpos = dpos + jitter_rng.normal((3,), std=motion_jitter, dtype=np.float64)
        action = np.concatenate([dpos, IDENTITY_6D, [grip]]).astype(np.float32)
        obs_third.append(obs["third"])
        obs_wrist.append(obs["wrist"])
        obs_tac.append(obs["tactile"])
        obs_state.append(obs["state"])
        actions.append(action)
        env.step(action)
        if phase == "done":
            break

    n = len(actions)
    ep = Episode(
        instruction=f"pick up the {scene.name.replace('_', ' ')} and move it to the target",
        success=bool(env.success() or (already_done and not unreachable)),
        period_us=cfg.step_period_us,
        timestamps_us=np.arange(n, dtype=np.int64) * cfg.step_period_us,
        third=np.stack(obs_third),
        wrist=np.stack(obs_wrist),
        tactile=np.stack(obs_tac),
        states=np.stack(obs_state),
        actions=np.stack(actions),
        object_name=scene.name,
        material=scene.material,
        meta={"stiffness_scale": round(env.stiffness_scale, 6), "grip_aperture": round(a_grip, 6)},
    )
    return ep
