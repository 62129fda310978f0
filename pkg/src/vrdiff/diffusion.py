"""Variance-preserving noise schedule and the ancestral sampling loop.

The forward process is q(z_t | z0) = N(alpha_t z0, (1 - alpha_t^2) I).
alpha follows a quadratic polynomial from exactly 1 at t=0 down to a small
floor at t=T, so the very last reverse step is the deterministic posterior
mean and a perfect noise oracle reproduces the data to float precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError

ALPHA_FLOOR = 1e-6  # recover_data guard


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.shape != (self.T + 1,):
            raise ShapeError(f"alpha must have length T+1={self.T + 1}, got {a.shape}")
        if a[0] < 1.0 - 1e-4:
            raise ConfigError(f"alpha[0]={a[0]} must be >= 1 - 1e-4")
        if a[-1] > 1e-2:
            raise ConfigError(f"alpha[T]={a[-1]} must be <= 1e-2")
        if np.any(np.diff(a) >= 0):
            raise ConfigError("alpha must be strictly decreasing")
        if np.any(a <= 0) or np.any(a > 1):
            raise ConfigError("alpha entries must lie in (0, 1]")
        object.__setattr__(self, "alpha", a)

    def sigma(self, t: int) -> float:
        a = self.alpha[t]
        return float(np.sqrt(max(1.0 - a * a, 0.0)))

    def snr(self, t: int) -> float:
        a = self.alpha[t]
        s2 = 1.0 - a * a
        return np.inf if s2 == 0.0 else float(a * a / s2)


def build_schedule(T: int, s: float = 1e-3) -> NoiseSchedule:
    """alpha_t = (1 - (t/T)^2) * (1 - s) + s.

    alpha_0 is exactly 1 (the t=0 marginal is the data itself) and
    alpha_T = s, far above the recover_data floor.
    """
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0.0 < s <= 1e-2:
        raise ConfigError(f"schedule floor s={s} outside (0, 1e-2]")
    t = np.arange(T + 1, dtype=float)
    alpha = (1.0 - (t / T) ** 2) * (1.0 - s) + s
    return NoiseSchedule(T=T, alpha=alpha)


@dataclass(frozen=True)
class DiffusionState:
    """Ligand positions and diffused feature channels at one time step."""

    positions: np.ndarray
    features: np.ndarray
    t: int

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        feat = np.asarray(self.features, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ShapeError(f"positions must be (n, 3), got {pos.shape}")
        if feat.ndim != 2 or feat.shape[0] != pos.shape[0]:
            raise ShapeError(f"features must be (n, c), got {feat.shape}")
        if not (np.isfinite(pos).all() and np.isfinite(feat).all()):
            raise NumericsError(f"non-finite diffusion state at t={self.t}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)


def forward_sample(
    z0: DiffusionState, t: int, schedule: NoiseSchedule, rng: np.random.Generator
):
    """Draw z_t = alpha_t z0 + sqrt(1 - alpha_t^2) eps; returns (z_t, eps)."""
    if not 0 <= t <= schedule.T:
        raise ConfigError(f"t={t} outside [0, {schedule.T}]")
    a = schedule.alpha[t]
    sig = schedule.sigma(t)
    eps_pos = rng.standard_normal(z0.positions.shape)
    eps_feat = rng.standard_normal(z0.features.shape)
    zt = DiffusionState(
        positions=a * z0.positions + sig * eps_pos,
        features=a * z0.features + sig * eps_feat,
        t=t,
    )
    eps = DiffusionState(positions=eps_pos, features=eps_feat, t=t)
    return zt, eps


def vp_posterior_coefficients(alpha_t: float, alpha_prev: float):
    """(u, v, w) of q(z_{t-1} | z0, z_t) = N(u z_t + v z0, w I)."""
    s2_t = 1.0 - alpha_t * alpha_t
    s2_prev = 1.0 - alpha_prev * alpha_prev
    a_step = alpha_t / alpha_prev
    s2_step = s2_t - a_step * a_step * s2_prev
    u = a_step * s2_prev / s2_t
    v = alpha_prev * s2_step / s2_t
    w = s2_step * s2_prev / s2_t
    return u, v, max(w, 0.0)


def posterior_coefficients(schedule: NoiseSchedule, t: int):
    if not 1 <= t <= schedule.T:
        raise ConfigError(f"posterior needs 1 <= t <= T, got t={t}")
    return vp_posterior_coefficients(schedule.alpha[t], schedule.alpha[t - 1])


def recover_data(z_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule):
    """Invert the forward marginal: z0 = z_t / alpha_t - (sigma_t / alpha_t) eps."""
    if not 1 <= t <= schedule.T:
        raise ConfigError(f"recover_data needs 1 <= t <= T, got t={t}")
    a = schedule.alpha[t]
    if a < ALPHA_FLOOR:
        raise NumericsError(f"alpha_{t}={a} below {ALPHA_FLOOR}; recovery is ill-conditioned")
    return np.asarray(z_t) / a - (schedule.sigma(t) / a) * np.asarray(eps_hat)


@dataclass(frozen=True)
class SampleResult:
    positions: np.ndarray
    type_indices: np.ndarray
    raw_features: np.ndarray
    denoiser_calls: int


def sample(
    denoiser,
    n_atoms: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    feat_dim: int = 4,
) -> SampleResult:
    """Ancestral sampling from pure noise down to t=0.

    ``denoiser(positions, features, t) -> (eps_pos, eps_feat)`` estimates the
    forward noise; any receptor conditioning is closed over by the caller
    (see egnn.build_denoiser). Categorical channels are decoded by argmax
    at the end. Exactly T denoiser calls are made and all randomness comes
    from ``rng``.
    """
    z_pos = rng.standard_normal((n_atoms, 3))
    z_feat = rng.standard_normal((n_atoms, feat_dim))
    calls = 0
    for t in range(schedule.T, 0, -1):
        eps_pos, eps_feat = denoiser(z_pos, z_feat, t)
        calls += 1
        eps_pos = np.asarray(eps_pos, dtype=float)
        eps_feat = np.asarray(eps_feat, dtype=float)
        if not (np.isfinite(eps_pos).all() and np.isfinite(eps_feat).all()):
            raise NumericsError(f"denoiser produced non-finite output at t={t}")
        z0_pos = recover_data(z_pos, eps_pos, t, schedule)
        z0_feat = recover_data(z_feat, eps_feat, t, schedule)
        u, v, w = posterior_coefficients(schedule, t)
        z_pos = u * z_pos + v * z0_pos
        z_feat = u * z_feat + v * z0_feat
        if w > 0.0:
            std = np.sqrt(w)
            z_pos = z_pos + std * rng.standard_normal(z_pos.shape)
            z_feat = z_feat + std * rng.standard_normal(z_feat.shape)
        if not (np.isfinite(z_pos).all() and np.isfinite(z_feat).all()):
            raise NumericsError(f"non-finite sampler state after step t={t}")
    return SampleResult(
        positions=z_pos,
        type_indices=np.argmax(z_feat, axis=1),
        raw_features=z_feat,
        denoiser_calls=calls,
    )
