"""Variance schedules, posterior coefficients and timestep subsequences.

Timesteps are 1-based. All schedule arrays have length T+1 with index 0
reserved for the clean-data convention slot (beta[0] = 0, alpha[0] = 1,
alpha_bar[0] = 1) so that ``alpha_bar[t - 1]`` is defined for every valid t.

The forward-process posterior q(x_{t-1} | x_t, x_0) is the Gaussian with
mean gamma_t * x_0 + delta_t * x_t and noise scale sigma_t, where

    gamma_t = sqrt(alpha_bar[t-1]) * (1 - alpha[t]) / (1 - alpha_bar[t])
    delta_t = sqrt(alpha[t]) * (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])
    sigma_t = (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t]

These satisfy the consecutive-step identity

    gamma_t + delta_t * sqrt(alpha_bar[t]) = sqrt(alpha_bar[t-1]),

which is why the latent-matching coefficients (psi, chi) vanish on
consecutive timesteps and are only non-trivial on strided subsequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTimestepError

__all__ = [
    "NoiseSchedule",
    "PosteriorCoeffs",
    "TimestepSubsequence",
    "PdsCoeffs",
    "build_linear_schedule",
    "posterior_coeffs",
    "posterior_coeffs_pair",
    "build_subsequence",
    "pds_coeffs",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable discrete variance schedule over timesteps 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return t


@dataclass(frozen=True)
class PosteriorCoeffs:
    """Posterior mean weights (gamma, delta) and noise scale sigma for one step."""

    gamma: float
    delta: float
    sigma: float


@dataclass(frozen=True)
class TimestepSubsequence:
    """Strided timestep grid tau_1 < ... < tau_S with a sampling index range.

    ``tau`` has length S+1 with the sentinel tau[0] = 0 (the clean-data
    level), mirroring the schedule's convention slot. Monte-Carlo index
    sampling is restricted to [lo_index, hi_index]; lo_index >= 2 so the
    in-grid predecessor tau[i-1] always has sigma > 0.
    """

    tau: np.ndarray
    lo_index: int
    hi_index: int

    @property
    def S(self) -> int:
        return len(self.tau) - 1


@dataclass(frozen=True)
class PdsCoeffs:
    """Latent-matching gradient coefficients for one subsequence index."""

    psi: float
    chi: float


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def build_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build a linear beta schedule from beta_start to beta_end inclusive."""
    T = int(T)
    if T < 2:
        raise ValueError(f"need T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        T=T,
        beta=_readonly(beta),
        alpha=_readonly(alpha),
        alpha_bar=_readonly(alpha_bar),
    )


def posterior_coeffs(s: NoiseSchedule, t: int) -> PosteriorCoeffs:
    """Posterior coefficients (gamma_t, delta_t, sigma_t) on the fine schedule."""
    t = s.check_t(t)
    if t == 1:
        # alpha_bar[0] = 1 forces these exactly; evaluating the formulas
        # would only add rounding noise to the degenerate step.
        return PosteriorCoeffs(gamma=1.0, delta=0.0, sigma=0.0)
    ab_prev = float(s.alpha_bar[t - 1])
    ab_cur = float(s.alpha_bar[t])
    den = 1.0 - ab_cur
    gamma = math.sqrt(ab_prev) * (1.0 - float(s.alpha[t])) / den
    delta = math.sqrt(float(s.alpha[t])) * (1.0 - ab_prev) / den
    sigma = (1.0 - ab_prev) / den * float(s.beta[t])
    return PosteriorCoeffs(gamma=gamma, delta=delta, sigma=sigma)


def posterior_coeffs_pair(s: NoiseSchedule, t_prev: int, t_cur: int) -> PosteriorCoeffs:
    """Posterior coefficients for a single jump t_cur -> t_prev.

    Generalizes :func:`posterior_coeffs` to non-consecutive levels by
    replacing alpha[t] with the effective step factor
    alpha_bar[t_cur] / alpha_bar[t_prev]. ``t_prev`` may be 0 (the clean
    level), in which case the jump is deterministic (gamma=1, sigma=0).

    Used by the plain coarse-grid sampler (partial noising / denoising);
    the latent-matching coefficients deliberately do NOT use this
    re-derived chain, since on a re-derived chain the consecutive-step
    identity would zero them out again.
    """
    t_cur = s.check_t(t_cur)
    t_prev = int(t_prev)
    if not 0 <= t_prev < t_cur:
        raise ValueError(f"need 0 <= t_prev < t_cur, got ({t_prev}, {t_cur})")
    ab_prev = float(s.alpha_bar[t_prev])
    ab_cur = float(s.alpha_bar[t_cur])
    eff_alpha = ab_cur / ab_prev
    den = 1.0 - ab_cur
    gamma = math.sqrt(ab_prev) * (1.0 - eff_alpha) / den
    delta = math.sqrt(eff_alpha) * (1.0 - ab_prev) / den
    sigma = (1.0 - ab_prev) / den * (1.0 - eff_alpha)
    return PosteriorCoeffs(gamma=gamma, delta=delta, sigma=sigma)


def _grid_index(x: float, rounder) -> int:
    # Ratio * length products like 0.02 * 500 land a hair off the integer
    # they mean; snap before applying ceil/floor.
    nearest = round(x)
    if abs(x - nearest) < 1e-9:
        return int(nearest)
    return int(rounder(x))


def build_subsequence(
    s: NoiseSchedule, stride: int, lo_ratio: float, hi_ratio: float
) -> TimestepSubsequence:
    """Build the strided grid tau_i = floor(stride * i) and its sampling range.

    The sampling range is [max(2, ceil(lo_ratio * S)), floor(hi_ratio * S)].
    """
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"need stride >= 1, got {stride}")
    if not (0.0 <= lo_ratio < hi_ratio <= 1.0):
        raise ValueError(f"need 0 <= lo_ratio < hi_ratio <= 1, got ({lo_ratio}, {hi_ratio})")
    n = s.T // stride
    if n < 1:
        raise ValueError(f"stride {stride} leaves an empty subsequence for T={s.T}")
    tau = np.zeros(n + 1, dtype=np.int64)
    tau[1:] = np.minimum(stride * np.arange(1, n + 1, dtype=np.int64), s.T)
    lo_index = max(2, _grid_index(lo_ratio * n, math.ceil))
    hi_index = _grid_index(hi_ratio * n, math.floor)
    if lo_index >= hi_index:
        raise ValueError(
            f"sampling range [{lo_index}, {hi_index}] is empty for S={n}; "
            f"widen the ratio range or reduce the stride"
        )
    return TimestepSubsequence(tau=_readonly(tau), lo_index=lo_index, hi_index=hi_index)


def pds_coeffs(s: NoiseSchedule, sub: TimestepSubsequence, i: int) -> PdsCoeffs:
    """Latent-matching coefficients (psi, chi) at subsequence index i.

    With t = tau[i] and the common factor

        f = sqrt(alpha_bar[tau[i-1]]) - gamma_t - delta_t * sqrt(alpha_bar[t]),

    the coefficients are psi = 2 f^2 / sigma_t^2 and
    chi = 2 f * gamma_t * sqrt(1/alpha_bar[t] - 1) / sigma_t^2, where gamma,
    delta, sigma are the fine-schedule coefficients at t and only the
    leading alpha_bar term reads the strided predecessor.

    The common factor is computed through the consecutive-step identity as
    sqrt(alpha_bar[tau[i-1]]) - sqrt(alpha_bar[t - 1]); this is equal to the
    literal expression but cancellation-free, and makes the stride-1
    degeneracy (psi = chi = 0) exact.
    """
    i = int(i)
    if not sub.lo_index <= i <= sub.hi_index:
        raise ValueError(
            f"index {i} outside the sampling range [{sub.lo_index}, {sub.hi_index}]"
        )
    t_cur = int(sub.tau[i])
    t_prev = int(sub.tau[i - 1])
    pc = posterior_coeffs(s, t_cur)
    if pc.sigma == 0.0:
        raise DegenerateTimestepError(
            f"sigma is zero at timestep {t_cur}; latent-matching coefficients undefined"
        )
    f = math.sqrt(s.alpha_bar[t_prev]) - math.sqrt(s.alpha_bar[t_cur - 1])
    sigma_sq = pc.sigma * pc.sigma
    psi = 2.0 * f * f / sigma_sq
    chi = 2.0 * f * pc.gamma * math.sqrt(1.0 / s.alpha_bar[t_cur] - 1.0) / sigma_sq
    return PdsCoeffs(psi=float(psi), chi=float(chi))
