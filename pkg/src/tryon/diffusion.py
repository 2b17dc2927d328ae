"""Deterministic DDIM machinery: noise schedule, forward noising, the eta=0
reverse step, and the three-way guidance combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, StepUnderflowError


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar[0..T], alpha_bar[0] = 1,
    strictly decreasing and in (0, 1]."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.ndim != 1 or len(ab) < 2:
            raise ArgumentError("alpha_bar must be 1-D with at least 2 entries")
        if abs(ab[0] - 1.0) > 0:
            raise ArgumentError("alpha_bar[0] must be exactly 1")
        if not ((ab > 0).all() and (ab <= 1).all()):
            raise ArgumentError("alpha_bar must lie in (0, 1]")
        if not (np.diff(ab) < 0).all():
            raise ArgumentError("alpha_bar must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar) - 1

    @classmethod
    def linear(cls, num_steps: int = 50, final: float = 0.01) -> "NoiseSchedule":
        """Linearly interpolated alpha_bar from 1 down to `final`."""
        if num_steps < 1:
            raise ArgumentError("num_steps must be >= 1")
        t = np.arange(num_steps + 1, dtype=np.float64) / num_steps
        return cls(1.0 + (final - 1.0) * t)


@dataclass(frozen=True)
class LatentState:
    """Diffusion state: latent tensor plus its timestep on a schedule."""

    z: np.ndarray  # (h, w, c)
    t: int
    schedule: NoiseSchedule

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        object.__setattr__(self, "z", z)
        if not np.isfinite(z).all():
            raise ArgumentError("latent contains non-finite values")
        if not 0 <= self.t <= self.schedule.num_steps:
            raise ArgumentError(f"timestep {self.t} outside schedule [0, {self.schedule.num_steps}]")


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scales and stage parameters for consistent inpainting."""

    alpha_mea: float = 15.0
    alpha_text: float = 7.5
    stroke_fraction: float = 0.35
    beta: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.stroke_fraction <= 1.0:
            raise ArgumentError("stroke_fraction must be in (0, 1]")
        if self.beta < 0.0:
            raise ArgumentError("beta must be >= 0")


def gaussian_field(shape, seed: int) -> np.ndarray:
    """Seeded standard-normal field; identical bytes for identical seeds."""
    return np.random.default_rng(seed).standard_normal(shape)


def forward_noise(z0: np.ndarray, t: int, noise: np.ndarray,
                  schedule: NoiseSchedule) -> LatentState:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, with caller-supplied eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    if not 0 <= t <= schedule.num_steps:
        raise ArgumentError(f"timestep {t} outside schedule [0, {schedule.num_steps}]")
    if np.shape(noise) != z0.shape:
        raise ArgumentError("noise shape must match z0")
    ab = schedule.alpha_bar[t]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64)
    return LatentState(z_t, t, schedule)


def ddim_step(state: LatentState, eps_hat: np.ndarray) -> LatentState:
    """One deterministic reverse step t -> t-1."""
    if state.t == 0:
        raise StepUnderflowError("cannot step below t=0")
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != state.z.shape:
        raise ArgumentError("eps_hat shape must match the latent")
    ab_t = state.schedule.alpha_bar[state.t]
    ab_prev = state.schedule.alpha_bar[state.t - 1]
    x0 = (state.z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    z_prev = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
    return LatentState(z_prev, state.t - 1, state.schedule)


def cfg_combine(eps_base: np.ndarray, eps_mea: np.ndarray, eps_text: np.ndarray,
                g: GuidanceConfig) -> np.ndarray:
    """base + a_mea (mea - base) + a_text (text - base)."""
    eps_base = np.asarray(eps_base, dtype=np.float64)
    eps_mea = np.asarray(eps_mea, dtype=np.float64)
    eps_text = np.asarray(eps_text, dtype=np.float64)
    if eps_base.shape != eps_mea.shape or eps_base.shape != eps_text.shape:
        raise ArgumentError("guidance tensors must share a shape")
    return (eps_base
            + g.alpha_mea * (eps_mea - eps_base)
            + g.alpha_text * (eps_text - eps_base))
