"""DDPM action-chunking policy: noise schedule, denoiser, pre-training, sampling.

The denoiser is a compact stack of residual 1-D convolution blocks over the
chunk's time axis, each block conditioned on the observation embedding and a
sinusoidal diffusion-step embedding. Desk-scale parameter counts (1e4-1e5)
keep CPU training in minutes while preserving the conditioning structure of
the full-size architecture.

Forward corruption uses the standard DDPM scaling sqrt(abar_k) * x +
sqrt(1 - abar_k) * eps; the reverse sampler assumes that process, so the
training target is the drawn noise. Actions are mapped per-dimension to
[-1, 1] before noising and mapped back at execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .augment import AugmentConfig, accel
from .core import Dataset, RngStream, load_arrays, save_arrays
from .envs import ChunkSample
from .nets import init_params, state_dict_arrays


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha arrays for k = 1..K (stored at index k-1).

    ``alpha_bar_prev[k-1]`` is abar_{k-1} with the boundary convention
    abar_0 = 1, which makes beta_tilde_1 = 0.
    """

    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    beta_tilde: np.ndarray

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (np.all(self.beta > 0) and np.all(self.beta < 1)):
            raise ValueError("beta out of (0, 1)")
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(self.beta_tilde < 0):
            raise ValueError("beta_tilde must be nonnegative")

    def std(self, k: int, floor: float = 0.0) -> float:
        """Reverse-step standard deviation at step k, with an optional floor."""
        return max(math.sqrt(self.beta_tilde[k - 1]), floor)


def make_cosine_schedule(K: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine abar profile; beta_k = 1 - abar_k/abar_{k-1}, clipped."""
    if K < 1:
        raise ValueError("K must be >= 1")
    k = np.arange(K + 1, dtype=np.float64)
    f = np.cos(((k / K + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    profile = f / f[0]
    beta = np.minimum(1.0 - profile[1:] / profile[:-1], max_beta)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(K, beta, alpha, alpha_bar, alpha_bar_prev, beta_tilde)


def forward_noise(
    chunk: np.ndarray, k: int | np.ndarray, eps: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Corrupt a chunk (or batch of chunks) to diffusion step k."""
    k_arr = np.atleast_1d(np.asarray(k))
    if np.any(k_arr < 1) or np.any(k_arr > schedule.K):
        raise ValueError(f"diffusion step out of range 1..{schedule.K}")
    abar = schedule.alpha_bar[k_arr - 1]
    if np.isscalar(k) or np.ndim(k) == 0:
        abar = abar[0]
    else:
        abar = abar.reshape((-1,) + (1,) * (np.ndim(chunk) - 1))
    return np.sqrt(abar) * chunk + np.sqrt(1.0 - abar) * eps


def gaussian_log_prob(x: np.ndarray, mean: np.ndarray, std: float) -> np.ndarray:
    """log N(x | mean, std^2 I) summed over all non-batch dimensions."""
    diff = (np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64))
    flat = diff.reshape(len(diff), -1)
    d = flat.shape[1]
    return -0.5 * np.sum(flat**2, axis=1) / std**2 - d * (
        0.5 * math.log(2.0 * math.pi) + math.log(std)
    )


# ---------------------------------------------------------------------------
# Denoiser network
# ---------------------------------------------------------------------------


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=k.dtype, device=k.device)
            / max(half - 1, 1)
        )
        ang = k[:, None] * freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ResBlock1D(nn.Module):
    """Two temporal convolutions with a residual skip and FiLM conditioning."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(c_in, c_out, kernel, padding=pad)
        self.conv2 = nn.Conv1d(c_out, c_out, kernel, padding=pad)
        self.cond = nn.Linear(cond_dim, 2 * c_out)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.Mish()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h = self.act(self.conv1(x))
        scale, bias = self.cond(cond).chunk(2, dim=-1)
        h = h * (1.0 + scale[..., None]) + bias[..., None]
        h = self.act(self.conv2(h))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """Conditional noise predictor eps(noisy chunk, observation, step k)."""

    def __init__(
        self,
        obs_dim: int,
        action_dim: int,
        horizon: int,
        widths: tuple[int, ...] = (32, 64),
        time_dim: int = 16,
        obs_embed_dim: int = 32,
    ):
        super().__init__()
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.horizon = horizon
        self.widths = tuple(widths)
        self.time_dim = time_dim
        self.obs_embed_dim = obs_embed_dim

        self.time_embed = nn.Sequential(
            SinusoidalEmbedding(time_dim),
            nn.Linear(time_dim, 4 * time_dim),
            nn.Mish(),
            nn.Linear(4 * time_dim, time_dim),
        )
        self.obs_embed = nn.Sequential(
            nn.Linear(obs_dim, obs_embed_dim),
            nn.Mish(),
            nn.Linear(obs_embed_dim, obs_embed_dim),
        )
        cond_dim = time_dim + obs_embed_dim
        channels = [action_dim, *widths, widths[0]]
        self.blocks = nn.ModuleList(
            ResBlock1D(channels[i], channels[i + 1], cond_dim)
            for i in range(len(channels) - 1)
        )
        self.head = nn.Conv1d(channels[-1], action_dim, 1)

    def forward(self, chunk: torch.Tensor, obs: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        if k.dim() == 0:
            k = k.expand(len(chunk))
        cond = torch.cat(
            [self.time_embed(k.to(chunk.dtype)), self.obs_embed(obs)], dim=-1
        )
        h = chunk.transpose(1, 2)  # (B, A, H)
        for block in self.blocks:
            h = block(h, cond)
        return self.head(h).transpose(1, 2)


# ---------------------------------------------------------------------------
# Action normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine map of dataset actions onto [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    @staticmethod
    def fit(dataset: Dataset) -> "Normalizer":
        stacked = np.concatenate([d.actions for d in dataset.demos], axis=0)
        lo = stacked.min(axis=0).astype(np.float64)
        hi = stacked.max(axis=0).astype(np.float64)
        degenerate = hi - lo < 1e-8
        hi = np.where(degenerate, lo + 1.0, hi)
        return Normalizer(lo, hi)

    def encode(self, actions: np.ndarray) -> np.ndarray:
        return 2.0 * (actions - self.lo) / (self.hi - self.lo) - 1.0

    def decode(self, normalized: np.ndarray) -> np.ndarray:
        return (np.asarray(normalized, dtype=np.float64) + 1.0) / 2.0 * (
            self.hi - self.lo
        ) + self.lo


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyConfig:
    horizon: int = 16
    exec_horizon: int = 8
    widths: tuple[int, ...] = (32, 64)
    time_dim: int = 16
    obs_embed_dim: int = 32
    denoise_steps: int = 20
    train_steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-4
    lr_end: float = 1e-5
    weight_decay: float = 1e-6

    def __post_init__(self):
        if self.exec_horizon > self.horizon:
            raise ValueError("exec_horizon must be <= horizon")


def reverse_step_mean(
    net: nn.Module,
    x_k: torch.Tensor,
    obs: torch.Tensor,
    k: int,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Posterior mean mu(s, a^(k)) of the reverse Gaussian at step k."""
    k_t = torch.full((len(x_k),), float(k), dtype=x_k.dtype, device=x_k.device)
    eps_hat = net(x_k, obs, k_t)
    c1 = 1.0 / math.sqrt(schedule.alpha[k - 1])
    c2 = (1.0 - schedule.alpha[k - 1]) / math.sqrt(1.0 - schedule.alpha_bar[k - 1])
    return c1 * (x_k - c2 * eps_hat)


class DiffusionPolicy:
    """Pre-trained chunk policy: reverse-process sampling plus normalization."""

    def __init__(
        self,
        net: DenoiserNet,
        schedule: NoiseSchedule,
        normalizer: Normalizer,
        config: PolicyConfig,
        min_std: float = 0.0,
    ):
        self.net = net
        self.schedule = schedule
        self.normalizer = normalizer
        self.config = config
        self.min_std = min_std
        self.horizon = config.horizon
        self.action_dim = net.action_dim
        self.train_losses: list[float] = []

    def sample_normalized(
        self, obs: np.ndarray, gen: np.random.Generator, record: bool = False
    ) -> dict:
        """Run the full reverse chain in normalized action space.

        Returns {"chunks": a^(0), "chain": stacked a^(K..0), "steps": [K..1]}.
        """
        B = len(obs)
        H, A, K = self.horizon, self.action_dim, self.schedule.K
        obs_t = torch.from_numpy(np.asarray(obs, dtype=np.float32))
        x = torch.from_numpy(gen.standard_normal((B, H, A)).astype(np.float32))
        chain = [x.numpy().copy()] if record else None
        with torch.no_grad():
            for k in range(K, 0, -1):
                mean = reverse_step_mean(self.net, x, obs_t, k, self.schedule)
                std = self.schedule.std(k, self.min_std)
                if std > 0:
                    noise = torch.from_numpy(
                        gen.standard_normal((B, H, A)).astype(np.float32)
                    )
                    x = mean + std * noise
                else:
                    x = mean
                if record:
                    chain.append(x.numpy().copy())
        out = {"chunks": x.numpy()}
        if record:
            out["chain"] = np.stack(chain, axis=1)  # (B, K+1, H, A)
            out["steps"] = np.arange(K, 0, -1)
        return out

    def sample_chunks(
        self, obs: np.ndarray, gen: np.random.Generator, record: bool = False
    ) -> ChunkSample:
        res = self.sample_normalized(obs, gen, record=record)
        actions = self.normalizer.decode(res["chunks"])
        rec = {k: v for k, v in res.items() if k != "chunks"} if record else None
        return ChunkSample(exec_actions=actions, chunks=actions, record=rec)

    def parameter_arrays(self, prefix: str = "net") -> dict[str, np.ndarray]:
        return state_dict_arrays(self.net, prefix)


def sample_chunk(
    policy: DiffusionPolicy,
    state: np.ndarray,
    rng: RngStream | np.random.Generator,
    min_std: float | None = None,
    record: bool = False,
):
    """Sample one action chunk (env units) for a single state.

    Returns the chunk, or (chunk, chain, steps) when ``record`` is set; the
    chain is in normalized space, ordered a^(K) .. a^(0).
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    saved = policy.min_std
    if min_std is not None:
        policy.min_std = min_std
    try:
        res = policy.sample_normalized(np.asarray(state)[None], gen, record=record)
    finally:
        policy.min_std = saved
    chunk = policy.normalizer.decode(res["chunks"][0])
    if record:
        return chunk, res["chain"][0], res["steps"]
    return chunk


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------


def _chunk_targets(
    dataset: Dataset,
    demo_idx: np.ndarray,
    starts: np.ndarray,
    factors: np.ndarray,
    horizon: int,
    aug: AugmentConfig,
) -> np.ndarray:
    out = np.empty((len(demo_idx), horizon, dataset.action_dim))
    for j, (i, t, v) in enumerate(zip(demo_idx, starts, factors)):
        out[j] = accel(dataset.demos[i].actions, int(t), float(v), horizon,
                       interp=aug.interp, pad=aug.pad)
    return out


def pretrain(
    dataset: Dataset,
    augment_config: AugmentConfig,
    policy_config: PolicyConfig,
    rng: RngStream,
    log_every: int = 200,
) -> DiffusionPolicy:
    """Train the denoiser on (possibly speed-augmented) chunk targets.

    Each sampled chunk draws a fresh acceleration factor, matching an
    expectation over factors rather than a materialized augmented dataset.
    """
    cfg = policy_config
    schedule = make_cosine_schedule(cfg.denoise_steps)
    normalizer = Normalizer.fit(dataset)
    net = DenoiserNet(
        obs_dim=dataset.obs_dim,
        action_dim=dataset.action_dim,
        horizon=cfg.horizon,
        widths=cfg.widths,
        time_dim=cfg.time_dim,
        obs_embed_dim=cfg.obs_embed_dim,
    )
    init_params(net, rng.child(0))
    policy = DiffusionPolicy(net, schedule, normalizer, cfg)
    if cfg.train_steps == 0:
        return policy

    pairs = np.array(
        [(i, t) for i, d in enumerate(dataset.demos) for t in range(len(d))],
        dtype=np.int64,
    )
    obs_all = np.concatenate([d.states for d in dataset.demos], axis=0)
    gen = rng.child(1).generator()
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    losses = []
    for step_i in range(cfg.train_steps):
        frac = step_i / max(cfg.train_steps - 1, 1)
        lr = cfg.lr_end + 0.5 * (cfg.lr - cfg.lr_end) * (1.0 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = lr

        sel = gen.integers(0, len(pairs), size=cfg.batch_size)
        demo_idx, starts = pairs[sel, 0], pairs[sel, 1]
        if augment_config.mode == "uniform":
            factors = gen.uniform(1.0, augment_config.v_max, size=cfg.batch_size)
        elif augment_config.mode == "constant":
            factors = np.full(cfg.batch_size, augment_config.v)
        else:
            factors = np.ones(cfg.batch_size)
        targets = _chunk_targets(dataset, demo_idx, starts, factors, cfg.horizon,
                                 augment_config)
        x0 = torch.from_numpy(normalizer.encode(targets).astype(np.float32))
        obs = torch.from_numpy(obs_all[sel].astype(np.float32))
        k = gen.integers(1, schedule.K + 1, size=cfg.batch_size)
        eps = gen.standard_normal(x0.shape)
        noisy = forward_noise(x0.numpy(), k, eps, schedule)

        eps_hat = net(
            torch.from_numpy(noisy.astype(np.float32)),
            obs,
            torch.from_numpy(k.astype(np.float32)),
        )
        loss = torch.mean((eps_hat - torch.from_numpy(eps.astype(np.float32))) ** 2)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"pre-training diverged at step {step_i}: loss={loss.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if log_every and (step_i + 1) % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            losses_head = float(np.mean(losses[:log_every]))
            print(f"  pretrain step {step_i + 1}/{cfg.train_steps} "
                  f"loss {recent:.4f} (first {losses_head:.4f})", flush=True)

    policy.train_losses = losses
    return policy


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_policy(policy: DiffusionPolicy, path: Path | str) -> None:
    cfg = policy.config
    meta = {
        "kind": "diffusion_policy",
        "obs_dim": policy.net.obs_dim,
        "action_dim": policy.net.action_dim,
        "horizon": cfg.horizon,
        "exec_horizon": cfg.exec_horizon,
        "widths": list(cfg.widths),
        "time_dim": cfg.time_dim,
        "obs_embed_dim": cfg.obs_embed_dim,
        "denoise_steps": cfg.denoise_steps,
        "min_std": policy.min_std,
        "norm_lo": [float(v) for v in policy.normalizer.lo],
        "norm_hi": [float(v) for v in policy.normalizer.hi],
    }
    save_arrays(path, meta, policy.parameter_arrays())


def _net_from_meta(meta: dict) -> DenoiserNet:
    return DenoiserNet(
        obs_dim=meta["obs_dim"],
        action_dim=meta["action_dim"],
        horizon=meta["horizon"],
        widths=tuple(meta["widths"]),
        time_dim=meta["time_dim"],
        obs_embed_dim=meta["obs_embed_dim"],
    )


def load_policy(path: Path | str) -> DiffusionPolicy:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "diffusion_policy":
        raise ValueError(f"not a diffusion policy checkpoint: {meta.get('kind')!r}")
    net = _net_from_meta(meta)
    state = {
        name[len("net."):]: torch.from_numpy(arr)
        for name, arr in arrays.items()
        if name.startswith("net.")
    }
    net.load_state_dict(state)
    cfg = PolicyConfig(
        horizon=meta["horizon"],
        exec_horizon=meta["exec_horizon"],
        widths=tuple(meta["widths"]),
        time_dim=meta["time_dim"],
        obs_embed_dim=meta["obs_embed_dim"],
        denoise_steps=meta["denoise_steps"],
    )
    normalizer = Normalizer(np.array(meta["norm_lo"]), np.array(meta["norm_hi"]))
    return DiffusionPolicy(net, make_cosine_schedule(meta["denoise_steps"]),
                           normalizer, cfg, min_std=meta.get("min_std", 0.0))
