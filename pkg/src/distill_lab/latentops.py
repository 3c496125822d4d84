"""Forward-process sampling, posterior means, stochastic latents and editing.

The stochastic latent of a clean point x0 at a grid step is the noise that,
injected into the generative step from tau[i] to tau[i-1], lands exactly on
the forward-drawn state at tau[i-1]:

    z = (x_prev - mu(x_cur)) / sigma,   mu(x) = gamma * x0_estimate(x) + delta * x

with gamma, delta, sigma read from the fine schedule at t = tau[i]. Because
the definition is a rearrangement of the generative step, replaying the
recorded latents reproduces the source trajectory exactly, for any noise
predictor; swapping in a new condition during the replay edits the point
while keeping the trajectory anchored to the source.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .denoiser import POINT_DIM, Denoiser, cfg_predict, cfg_predict_batch
from .errors import DegenerateTimestepError, DivergenceError, MismatchError
from .flatfile import read_flat_file, write_flat_file
from .schedule import (
    NoiseSchedule,
    TimestepSubsequence,
    posterior_coeffs,
    posterior_coeffs_pair,
)

__all__ = [
    "SharedNoiseDraw",
    "StochasticLatentSequence",
    "sample_shared_noise",
    "forward_sample",
    "tweedie_estimate",
    "posterior_mean_pred",
    "stochastic_latent",
    "invert",
    "generate_with_latents",
    "sdedit",
    "sdedit_batch",
    "save_latent_sequence",
    "load_latent_sequence",
]


@dataclass(frozen=True)
class SharedNoiseDraw:
    """One Monte-Carlo draw: a grid index and the two noises for its levels.

    The same draw object must be handed to both the source and the target
    side of any two-sided computation; the sharing contract is structural,
    not conventional.
    """

    i: int
    eps_prev: np.ndarray
    eps_cur: np.ndarray


@dataclass
class StochasticLatentSequence:
    """Latents of one point along the generative traversal of a grid.

    Arrays are ordered top-down (grid index S first, 1 last). ``x_top`` is
    the recorded state at the highest level so a replay starts from the
    identical point. ``T`` and ``tau`` identify the schedule and grid the
    sequence was computed on.
    """

    latents: np.ndarray
    condition: int
    draws: list[SharedNoiseDraw]
    x_top: np.ndarray
    omega: float
    T: int
    tau: np.ndarray


def sample_shared_noise(sub: TimestepSubsequence, rng: np.random.Generator) -> SharedNoiseDraw:
    """Draw i uniformly from the grid's sampling range plus the two noises."""
    i = int(rng.integers(sub.lo_index, sub.hi_index + 1))
    return SharedNoiseDraw(
        i=i,
        eps_prev=rng.standard_normal(POINT_DIM),
        eps_cur=rng.standard_normal(POINT_DIM),
    )


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Noising map sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    t = s.check_t(t)
    ab = s.alpha_bar[t]
    return math.sqrt(ab) * np.asarray(x0, dtype=float) + math.sqrt(1.0 - ab) * np.asarray(
        eps, dtype=float
    )


def tweedie_estimate(
    x_t: np.ndarray, y: int, t: int, d: Denoiser, omega: float, s: NoiseSchedule
) -> np.ndarray:
    """One-step denoised estimate (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)."""
    t = s.check_t(t)
    eps_hat = cfg_predict(d, x_t, y, t, omega)
    ab = s.alpha_bar[t]
    return (np.asarray(x_t, dtype=float) - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def posterior_mean_pred(
    x_t: np.ndarray, y: int, t: int, d: Denoiser, omega: float, s: NoiseSchedule
) -> np.ndarray:
    """Model posterior mean gamma_t * x0_estimate + delta_t * x_t."""
    pc = posterior_coeffs(s, t)
    return pc.gamma * tweedie_estimate(x_t, y, t, d, omega, s) + pc.delta * np.asarray(
        x_t, dtype=float
    )


def _level_state(x0: np.ndarray, level: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    # Level 0 is the clean point itself (alpha_bar[0] = 1 kills the noise term).
    if level == 0:
        return np.asarray(x0, dtype=float)
    return forward_sample(x0, level, eps, s)


def stochastic_latent(
    x0: np.ndarray,
    y: int,
    draw: SharedNoiseDraw,
    d: Denoiser,
    omega: float,
    s: NoiseSchedule,
    sub: TimestepSubsequence,
) -> np.ndarray:
    """Latent z = (x_prev - mu(x_cur)) / sigma for one draw; deterministic."""
    i = int(draw.i)
    if not 1 <= i <= sub.S:
        raise ValueError(f"draw index {i} outside the grid [1, {sub.S}]")
    t_cur = int(sub.tau[i])
    t_prev = int(sub.tau[i - 1])
    pc = posterior_coeffs(s, t_cur)
    if pc.sigma == 0.0:
        raise DegenerateTimestepError(
            f"sigma is zero at timestep {t_cur}; the stochastic latent is undefined"
        )
    x_prev = _level_state(x0, t_prev, draw.eps_prev, s)
    x_cur = _level_state(x0, t_cur, draw.eps_cur, s)
    return (x_prev - posterior_mean_pred(x_cur, y, t_cur, d, omega, s)) / pc.sigma


def invert(
    x0: np.ndarray,
    y: int,
    d: Denoiser,
    omega: float,
    s: NoiseSchedule,
    sub: TimestepSubsequence,
    rng: np.random.Generator,
) -> StochasticLatentSequence:
    """Compute the latents of x0 at every grid step, top-down.

    One fresh noise is drawn per grid level; step i pairs the level-(i-1)
    and level-i noises, so consecutive steps share the level state they
    have in common. That sharing is what makes the recorded trajectory
    replayable: feeding the latents back reconstructs x0 exactly.
    """
    x0 = np.asarray(x0, dtype=float)
    n = sub.S
    eps_levels = np.zeros((n + 1, POINT_DIM))
    eps_levels[1:] = rng.standard_normal((n, POINT_DIM))
    x_top = forward_sample(x0, int(sub.tau[n]), eps_levels[n], s)
    latents = np.empty((n, POINT_DIM))
    draws: list[SharedNoiseDraw] = []
    for k, i in enumerate(range(n, 0, -1)):
        draw = SharedNoiseDraw(i=i, eps_prev=eps_levels[i - 1], eps_cur=eps_levels[i])
        latents[k] = stochastic_latent(x0, y, draw, d, omega, s, sub)
        draws.append(draw)
    return StochasticLatentSequence(
        latents=latents,
        condition=int(y),
        draws=draws,
        x_top=x_top,
        omega=float(omega),
        T=s.T,
        tau=np.array(sub.tau),
    )


def generate_with_latents(
    seq: StochasticLatentSequence,
    y_new: int,
    d: Denoiser,
    omega: float,
    s: NoiseSchedule,
    sub: TimestepSubsequence,
) -> np.ndarray:
    """Replay the generative traversal from seq.x_top, substituting the
    recorded latents for fresh noise, under a possibly new condition."""
    if s.T != seq.T or not np.array_equal(np.asarray(sub.tau), np.asarray(seq.tau)):
        raise MismatchError("latent sequence was computed on a different schedule or grid")
    if seq.latents.shape != (sub.S, POINT_DIM):
        raise MismatchError(
            f"latent sequence has shape {seq.latents.shape}, grid expects {(sub.S, POINT_DIM)}"
        )
    x = np.array(seq.x_top, dtype=float)
    for k, i in enumerate(range(sub.S, 0, -1)):
        t = int(sub.tau[i])
        pc = posterior_coeffs(s, t)
        x = posterior_mean_pred(x, y_new, t, d, omega, s) + pc.sigma * seq.latents[k]
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state while replaying latents at t={t}")
    return x


def _denoise_grid(T: int, n_steps: int) -> np.ndarray:
    levels = np.round(np.arange(n_steps + 1) * (T / n_steps)).astype(np.int64)
    if np.any(np.diff(levels) < 1):
        raise ValueError(f"n_steps={n_steps} is too fine for T={T}")
    return levels


def sdedit_batch(
    x0: np.ndarray,
    y: int,
    t0_ratio: float,
    d: Denoiser,
    omega: float,
    s: NoiseSchedule,
    rng: np.random.Generator,
    n_steps: int = 20,
) -> np.ndarray:
    """Partially noise a batch of points to level t0 and denoise back down.

    The denoising runs over an ``n_steps``-point coarse grid spanning the
    whole schedule; ``t0_ratio`` selects the starting position on that grid,
    so 0 is an exact identity and 1 is a full resampling that forgets the
    input almost entirely.
    """
    if not 0.0 <= t0_ratio <= 1.0:
        raise ValueError(f"t0_ratio must be in [0, 1], got {t0_ratio}")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    levels = _denoise_grid(s.T, int(n_steps))
    k0 = int(round(t0_ratio * n_steps))
    if k0 == 0:
        return x0.copy()
    t0 = int(levels[k0])
    x = forward_sample(x0, t0, rng.standard_normal(x0.shape), s)
    for k in range(k0, 0, -1):
        t = int(levels[k])
        pc = posterior_coeffs_pair(s, int(levels[k - 1]), t)
        eps_hat = cfg_predict_batch(d, x, y, t, omega)
        ab = s.alpha_bar[t]
        x_tilde = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
        x = pc.gamma * x_tilde + pc.delta * x + pc.sigma * rng.standard_normal(x.shape)
    return x


def sdedit(
    x0: np.ndarray,
    y: int,
    t0_ratio: float,
    d: Denoiser,
    omega: float,
    s: NoiseSchedule,
    rng: np.random.Generator,
    n_steps: int = 20,
) -> np.ndarray:
    """Single-point partial noising / denoising; see :func:`sdedit_batch`."""
    return sdedit_batch(np.asarray(x0, dtype=float)[None, :], y, t0_ratio, d, omega, s, rng, n_steps)[0]


def save_latent_sequence(seq: StochasticLatentSequence, path) -> None:
    """Serialize a latent sequence with the shared header + float64 layout.

    Payload order: tau[1..S], x_top, latents (top-down, row-major), then the
    per-level noises (level 0 first; level 0 is all zeros by convention).
    """
    n = seq.latents.shape[0]
    eps_levels = np.zeros((n + 1, POINT_DIM))
    for draw in seq.draws:
        eps_levels[draw.i] = draw.eps_cur
    payload = np.concatenate(
        [
            np.asarray(seq.tau[1:], dtype=float),
            np.asarray(seq.x_top, dtype=float),
            seq.latents.ravel(),
            eps_levels.ravel(),
        ]
    )
    header = {
        "T": str(seq.T),
        "S": str(n),
        "condition": str(seq.condition),
        "omega": repr(float(seq.omega)),
    }
    write_flat_file(path, "latents", header, payload)


def load_latent_sequence(path) -> StochasticLatentSequence:
    kind, header, payload = read_flat_file(path)
    if kind != "latents":
        raise MismatchError(f"{path}: expected a latent-sequence file, found kind {kind!r}")
    n = int(header["S"])
    expected = n + POINT_DIM + n * POINT_DIM + (n + 1) * POINT_DIM
    if payload.size != expected:
        raise MismatchError(f"{path}: payload size {payload.size} != expected {expected}")
    tau = np.zeros(n + 1, dtype=np.int64)
    tau[1:] = payload[:n].astype(np.int64)
    off = n
    x_top = payload[off : off + POINT_DIM].copy()
    off += POINT_DIM
    latents = payload[off : off + n * POINT_DIM].reshape(n, POINT_DIM).copy()
    off += n * POINT_DIM
    eps_levels = payload[off:].reshape(n + 1, POINT_DIM).copy()
    draws = [
        SharedNoiseDraw(i=i, eps_prev=eps_levels[i - 1], eps_cur=eps_levels[i])
        for i in range(n, 0, -1)
    ]
    return StochasticLatentSequence(
        latents=latents,
        condition=int(header["condition"]),
        draws=draws,
        x_top=x_top,
        omega=float(header["omega"]),
        T=int(header["T"]),
        tau=tau,
    )
