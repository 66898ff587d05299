"""Toy 2-D manipulation environments with position-target actions and sparse rewards.

Two tasks of graded difficulty stand in for tabletop lift / pick-and-place:

* ``point_lift``: grasp the object and raise it above a height threshold.
* ``point_pickplace``: grasp the object and release it inside the bin region.

Dynamics are first-order with a hard per-step end-effector speed limit, so
action sequences compressed beyond the speed limit physically under-track
their targets; that is the mechanism by which aggressive synthetic
acceleration degrades success. The gripper binds the object only while closed
within ``grasp_radius``; a released object drops straight to the table.

State layout (all environments): ``[ee_x, ee_z, grip, obj_x, obj_z]`` where
``grip`` is the opening in [0, 1] (closed below 0.5). Actions are
``[target_x, target_z, grip_target]``. Internally states are float64; the
storage format (core.Demonstration) is float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .core import Demonstration, RngStream

PROPRIO_DIM = 3
OBS_DIM = 5
ACTION_DIM = 3

X_RANGE = (-1.0, 1.0)
Z_RANGE = (0.0, 1.0)
HOME_EE = (0.0, 0.5)
GRIP_CLOSED_BELOW = 0.5

# Per-environment geometry. success_threshold means: lift -> minimum object
# height; pickplace -> bin half-width around BIN_CENTER_X.
OBJ_NOMINAL_X = {"point_lift": 0.3, "point_pickplace": -0.55}
BIN_CENTER_X = 0.6
ENV_IDS = ("point_lift", "point_pickplace")


@dataclass(frozen=True)
class EnvConfig:
    env_id: str
    max_episode_steps: int
    max_ee_speed: float = 0.08
    grasp_radius: float = 0.06
    success_threshold: float = 0.5
    reset_noise: float = 0.08

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ValueError(f"unknown env_id: {self.env_id!r}")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        if self.max_ee_speed <= 0 or self.grasp_radius <= 0:
            raise ValueError("max_ee_speed and grasp_radius must be positive")


def make_env_config(env_id: str, **overrides) -> EnvConfig:
    defaults = {
        "point_lift": dict(max_episode_steps=120, success_threshold=0.5),
        "point_pickplace": dict(max_episode_steps=240, success_threshold=0.15),
    }
    if env_id not in defaults:
        raise ValueError(f"unknown env_id: {env_id!r}")
    kwargs = {"env_id": env_id, **defaults[env_id], **overrides}
    return EnvConfig(**kwargs)


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    success: bool


# ---------------------------------------------------------------------------
# Batched dynamics
# ---------------------------------------------------------------------------


def reset_batch(cfg: EnvConfig, rng: RngStream | np.random.Generator, n: int) -> np.ndarray:
    """Initial states: end-effector at home, object x jittered by reset_noise."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    states = np.zeros((n, OBS_DIM), dtype=np.float64)
    states[:, 0] = HOME_EE[0]
    states[:, 1] = HOME_EE[1]
    states[:, 2] = 1.0  # gripper open
    nominal = OBJ_NOMINAL_X[cfg.env_id]
    if cfg.reset_noise > 0:
        states[:, 3] = nominal + gen.uniform(-cfg.reset_noise, cfg.reset_noise, size=n)
    else:
        states[:, 3] = nominal
    states[:, 4] = 0.0  # on the table
    return states


def grasped_mask(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Whether the gripper currently binds the object (closed and within reach)."""
    d = np.linalg.norm(states[:, 3:5] - states[:, 0:2], axis=-1)
    return (states[:, 2] < GRIP_CLOSED_BELOW) & (d <= cfg.grasp_radius)


def _success_mask(states: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    if cfg.env_id == "point_lift":
        return states[:, 4] >= cfg.success_threshold
    in_bin = np.abs(states[:, 3] - BIN_CENTER_X) <= cfg.success_threshold
    return in_bin & ~grasped_mask(states, cfg)


def step_batch(
    states: np.ndarray, actions: np.ndarray, cfg: EnvConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Advance a batch of states one step. Returns (next_states, rewards, successes).

    The end-effector moves toward the position target with displacement
    clipped to ``max_ee_speed``; the commanded gripper opening applies
    immediately. Binding is evaluated against the pre-move geometry, so a
    newly closed gripper picks the object up on the step after arrival.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (len(states), ACTION_DIM):
        raise ValueError(f"action batch shape {actions.shape} does not match states")
    if not np.all(np.isfinite(actions)):
        raise ValueError("non-finite action")

    ee = states[:, 0:2]
    obj = states[:, 3:5]
    grip_new = np.clip(actions[:, 2], 0.0, 1.0)
    closed_new = grip_new < GRIP_CLOSED_BELOW
    dist = np.linalg.norm(obj - ee, axis=-1)
    grasped = closed_new & (dist <= cfg.grasp_radius)

    delta = actions[:, 0:2] - ee
    norm = np.linalg.norm(delta, axis=-1)
    scale = np.ones_like(norm)
    over = norm > cfg.max_ee_speed
    scale[over] = cfg.max_ee_speed / norm[over]
    ee_new = ee + delta * scale[:, None]
    ee_new[:, 0] = np.clip(ee_new[:, 0], *X_RANGE)
    ee_new[:, 1] = np.clip(ee_new[:, 1], *Z_RANGE)

    obj_new = obj.copy()
    obj_new[grasped] += ee_new[grasped] - ee[grasped]
    obj_new[~grasped, 1] = 0.0  # released objects drop straight to the table

    next_states = np.empty_like(states)
    next_states[:, 0:2] = ee_new
    next_states[:, 2] = grip_new
    next_states[:, 3:5] = obj_new

    success = _success_mask(next_states, cfg)
    rewards = success.astype(np.float64)
    return next_states, rewards, success


def step(state: np.ndarray, action: np.ndarray, cfg: EnvConfig) -> StepResult:
    """Single-state wrapper around :func:`step_batch`. ``done`` means success;
    the episode-step cap is enforced by the rollout loop."""
    nxt, rew, suc = step_batch(
        np.asarray(state, dtype=np.float64)[None], np.asarray(action, dtype=np.float64)[None], cfg
    )
    return StepResult(nxt[0], float(rew[0]), bool(suc[0]), bool(suc[0]))


def reset(cfg: EnvConfig, rng: RngStream | np.random.Generator) -> np.ndarray:
    return reset_batch(cfg, rng, 1)[0]


# ---------------------------------------------------------------------------
# Scripted expert
# ---------------------------------------------------------------------------

_CLOSE_TOL_FACTOR = 0.5  # close the gripper once within this fraction of grasp_radius
_LIFT_OVERSHOOT = 0.1
_CARRY_Z = 0.35
_RELEASE_TOL_FACTOR = 0.4  # of the bin half-width


def expert_action_batch(
    states: np.ndarray, cfg: EnvConfig, speed_fraction: float
) -> np.ndarray:
    """Waypoint controller (approach -> grasp -> transport) stepping its
    commanded position at ``speed_fraction * max_ee_speed`` per step."""
    states = np.asarray(states, dtype=np.float64)
    ee = states[:, 0:2]
    obj = states[:, 3:5]
    sp = speed_fraction * cfg.max_ee_speed
    dist = np.linalg.norm(obj - ee, axis=-1)
    grasped = grasped_mask(states, cfg)
    close_ready = dist <= _CLOSE_TOL_FACTOR * cfg.grasp_radius

    def toward(target: np.ndarray) -> np.ndarray:
        d = target - ee
        n = np.linalg.norm(d, axis=-1)
        step_len = np.minimum(n, sp)
        safe = np.where(n > 0, n, 1.0)
        return ee + d * (step_len / safe)[:, None]

    if cfg.env_id == "point_lift":
        z_goal = min(cfg.success_threshold + _LIFT_OVERSHOOT, Z_RANGE[1])
        ascend_tgt = np.column_stack([ee[:, 0], np.full(len(ee), z_goal)])
        cmd = toward(obj)
        cmd = np.where(close_ready[:, None], obj, cmd)
        cmd = np.where(grasped[:, None], toward(ascend_tgt), cmd)
        grip_cmd = np.where(grasped | close_ready, 0.0, 1.0)
    else:
        release_tol = _RELEASE_TOL_FACTOR * cfg.success_threshold
        over_bin = np.abs(obj[:, 0] - BIN_CENTER_X) <= release_tol
        carry_tgt = np.tile([BIN_CENTER_X, _CARRY_Z], (len(ee), 1))
        cmd = toward(obj)
        cmd = np.where(close_ready[:, None], obj, cmd)
        cmd = np.where(grasped[:, None], toward(carry_tgt), cmd)
        cmd = np.where((grasped & over_bin)[:, None], ee, cmd)
        grip_cmd = np.where(grasped | close_ready, 0.0, 1.0)
        grip_cmd = np.where(grasped & over_bin, 1.0, grip_cmd)
    return np.column_stack([cmd, grip_cmd])


def scripted_expert(
    cfg: EnvConfig, speed_fraction: float, rng: RngStream | np.random.Generator
) -> Demonstration:
    """Run the waypoint controller to completion and record the demonstration.

    Raises if the expert fails to finish within the episode cap (it must be
    reliable; only implausibly small speed fractions can exhaust the cap).
    """
    if not (0.0 < speed_fraction <= 1.0):
        raise ValueError(f"speed_fraction must be in (0, 1], got {speed_fraction}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    state = reset(cfg, gen)
    obs_list, act_list = [], []
    for _ in range(cfg.max_episode_steps):
        action = expert_action_batch(state[None], cfg, speed_fraction)[0]
        obs_list.append(state.copy())
        act_list.append(action)
        res = step(state, action, cfg)
        state = res.next_state
        if res.success:
            return Demonstration(np.array(obs_list), np.array(act_list), success=True)
    raise RuntimeError(
        f"scripted expert failed to complete {cfg.env_id} within "
        f"{cfg.max_episode_steps} steps (speed_fraction={speed_fraction})"
    )


# ---------------------------------------------------------------------------
# Policy protocol and rollout execution
# ---------------------------------------------------------------------------


@dataclass
class ChunkSample:
    """One batched policy decision.

    ``exec_actions`` are environment-space actions ready to execute (at least
    ``exec_horizon`` of them); ``chunks`` are the raw policy chunks before any
    on-the-fly acceleration; ``record`` carries policy-specific extras such as
    cached denoising chains.
    """

    exec_actions: np.ndarray  # (B, m, A)
    chunks: np.ndarray | None = None  # (B, H, A)
    record: dict | None = None


class PolicySampler(Protocol):
    horizon: int
    action_dim: int

    def sample_chunks(
        self, obs: np.ndarray, gen: np.random.Generator, record: bool = False
    ) -> ChunkSample: ...


class ExpertPolicy:
    """The scripted expert wrapped as a chunk-emitting policy.

    Plans H future actions by simulating the controller under perfect
    tracking, which is exact because the commanded speed never exceeds the
    environment speed limit.
    """

    def __init__(self, cfg: EnvConfig, speed_fraction: float, horizon: int = 16):
        self.cfg = cfg
        self.speed_fraction = speed_fraction
        self.horizon = horizon
        self.action_dim = ACTION_DIM

    def sample_chunks(
        self, obs: np.ndarray, gen: np.random.Generator, record: bool = False
    ) -> ChunkSample:
        sim = np.asarray(obs, dtype=np.float64).copy()
        actions = np.empty((len(sim), self.horizon, ACTION_DIM))
        for h in range(self.horizon):
            a = expert_action_batch(sim, self.cfg, self.speed_fraction)
            actions[:, h] = a
            sim, _, _ = step_batch(sim, a, self.cfg)
        return ChunkSample(exec_actions=actions, chunks=actions)


@dataclass
class EpisodeRecord:
    """One episode: ``obs[t]`` is the state at which ``actions[t]`` executed."""

    obs: np.ndarray  # (T, OBS_DIM) float64
    actions: np.ndarray  # (T, A)
    rewards: np.ndarray  # (T,)
    success: bool
    n_samplings: int
    chains: list | None = None  # per-sampling denoising transition counts/records

    @property
    def length(self) -> int:
        return len(self.actions)

    def to_demonstration(self) -> Demonstration:
        return Demonstration(self.obs, self.actions, success=self.success)


def run_episodes(
    policy: PolicySampler,
    cfg: EnvConfig,
    exec_horizon: int,
    n_episodes: int,
    rng: RngStream,
    record_denoising: bool = False,
) -> list[EpisodeRecord]:
    """Execute ``n_episodes`` in lockstep with chunked control.

    Every episode gets its own reset draw; policy sampling uses a single
    shared stream over the active sub-batch, so results are deterministic for
    a fixed (policy, seeds) pair. Episodes end on success or at the step cap.
    """
    if policy.horizon < exec_horizon:
        raise ValueError(
            f"policy horizon {policy.horizon} shorter than exec_horizon {exec_horizon}"
        )
    states = reset_batch(cfg, rng.child(0), n_episodes)
    sample_gen = rng.child(1).generator()
    active = np.ones(n_episodes, dtype=bool)
    steps_taken = np.zeros(n_episodes, dtype=int)
    succeeded = np.zeros(n_episodes, dtype=bool)
    buf_obs = [[] for _ in range(n_episodes)]
    buf_act = [[] for _ in range(n_episodes)]
    buf_rew = [[] for _ in range(n_episodes)]
    buf_chains = [[] for _ in range(n_episodes)]
    n_samplings = np.zeros(n_episodes, dtype=int)

    while active.any():
        idx = np.flatnonzero(active)
        sample = policy.sample_chunks(states[idx], sample_gen, record=record_denoising)
        n_samplings[idx] += 1
        if record_denoising and sample.record is not None:
            chain = sample.record.get("chain")
            if chain is not None:
                for j, i in enumerate(idx):
                    buf_chains[i].append(chain[j])
        sub_active = np.ones(len(idx), dtype=bool)
        for h in range(exec_horizon):
            if not sub_active.any():
                break
            rows = idx[sub_active]
            acts = sample.exec_actions[sub_active, h]
            nxt, rew, suc = step_batch(states[rows], acts, cfg)
            for r, a, rw in zip(rows, acts, rew):
                buf_obs[r].append(states[r].copy())
                buf_act[r].append(a)
                buf_rew[r].append(rw)
            states[rows] = nxt
            steps_taken[rows] += 1
            done = suc | (steps_taken[rows] >= cfg.max_episode_steps)
            succeeded[rows] |= suc
            active[rows[done]] = False
            sub_active[np.flatnonzero(sub_active)[done]] = False

    return [
        EpisodeRecord(
            obs=np.array(buf_obs[i]),
            actions=np.array(buf_act[i]),
            rewards=np.array(buf_rew[i]),
            success=bool(succeeded[i]),
            n_samplings=int(n_samplings[i]),
            chains=buf_chains[i] if record_denoising else None,
        )
        for i in range(n_episodes)
    ]


def rollout(
    policy: PolicySampler,
    cfg: EnvConfig,
    exec_horizon: int,
    rng: RngStream,
    record_denoising: bool = False,
) -> EpisodeRecord:
    """Single-episode convenience wrapper around :func:`run_episodes`."""
    return run_episodes(policy, cfg, exec_horizon, 1, rng, record_denoising)[0]
