"""Noise schedules, the forward noising process, the reverse denoising step,
the sampling ladder that maps a small step budget onto training timesteps,
and the re-noising operator used when extending the second denoising phase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MODES = ("posterior", "beta", "zero")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    betas: np.ndarray        # float64, length t_train
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        """alpha-bar at training timestep t; t == -1 means clean (1.0)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.t_train:
            raise ScheduleError(f"timestep {t} outside [0, {self.t_train})")
        return float(self.alpha_bars[t])


def build_linear_schedule(t_train=200, beta_min=1e-4, beta_max=0.03):
    if t_train < 2:
        raise ScheduleError(f"t_train must be >= 2, got {t_train}")
    if not (0 <= beta_min <= beta_max < 1):
        raise ScheduleError(f"need 0 <= beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(t_train=t_train, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class SamplingLadder:
    """Descending training-timestep indices for a fixed sampling budget."""
    step_count: int
    indices: np.ndarray  # int, indices[0] == t_train - 1, strictly decreasing

    def timestep_after(self, steps_taken):
        """Training timestep the latent sits at after `steps_taken` ladder
        steps from pure noise; -1 once the ladder is exhausted (clean)."""
        if not 0 <= steps_taken <= self.step_count:
            raise ScheduleError(f"steps_taken {steps_taken} outside [0, {self.step_count}]")
        if steps_taken == self.step_count:
            return -1
        return int(self.indices[steps_taken])

    def step_pair(self, k):
        """(t, t_prev) for ladder step k; t_prev == -1 on the final step."""
        t = int(self.indices[k])
        t_prev = int(self.indices[k + 1]) if k + 1 < self.step_count else -1
        return t, t_prev


def build_ladder(schedule, step_count=30):
    if not 1 <= step_count <= schedule.t_train:
        raise ScheduleError(f"step_count {step_count} outside [1, {schedule.t_train}]")
    indices = np.rint(np.linspace(schedule.t_train - 1, 0, step_count)).astype(np.int64)
    if indices[0] != schedule.t_train - 1 or np.any(np.diff(indices) >= 0):
        raise ScheduleError("ladder indices are not strictly decreasing from t_train - 1")
    return SamplingLadder(step_count=step_count, indices=indices)


def forward_noise(z0, t, eps, schedule):
    """sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ScheduleError(f"forward_noise: z0 shape {z0.shape} != eps shape {eps.shape}")
    abar = schedule.alpha_bar(t)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def sigma_for(schedule, t, t_prev, mode):
    """Reverse-step noise scale between training timesteps t -> t_prev."""
    if mode not in SIGMA_MODES:
        raise ScheduleError(f"unknown sigma mode {mode!r}")
    if mode == "zero" or t_prev == -1:
        return 0.0
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    beta_eff = 1.0 - abar_t / abar_prev
    if mode == "beta":
        return float(np.sqrt(beta_eff))
    return float(np.sqrt((1.0 - abar_prev) / (1.0 - abar_t) * beta_eff))


def ddpm_step(z_t, eps_pred, t, noise, schedule, t_prev=None, sigma_mode="posterior"):
    """One reverse denoising step from timestep t to t_prev.

    With t_prev = t - 1 this is the plain single-step posterior-mean update;
    on a coarse ladder, t_prev is the next (smaller) ladder timestep and the
    per-step alpha is the effective abar_t / abar_prev.
    """
    z_t = np.asarray(z_t)
    eps_pred = np.asarray(eps_pred)
    if z_t.shape != eps_pred.shape:
        raise ScheduleError(f"ddpm_step: z shape {z_t.shape} != eps shape {eps_pred.shape}")
    if t_prev is None:
        t_prev = t - 1
    abar_t = schedule.alpha_bar(t)
    abar_prev = schedule.alpha_bar(t_prev)
    if abar_t >= 1.0:
        raise ScheduleError(f"ddpm_step: alpha_bar({t}) = 1 leaves the noise scale undefined")
    if abar_prev <= abar_t:
        raise ScheduleError(f"ddpm_step: t_prev={t_prev} is not less noisy than t={t}")
    alpha_eff = abar_t / abar_prev
    mean = (z_t - (1.0 - alpha_eff) / np.sqrt(1.0 - abar_t) * eps_pred) / np.sqrt(alpha_eff)
    sigma = sigma_for(schedule, t, t_prev, sigma_mode)
    if sigma == 0.0:
        return mean.astype(z_t.dtype)
    noise = np.asarray(noise)
    if noise.shape != z_t.shape:
        raise ScheduleError(f"ddpm_step: noise shape {noise.shape} != z shape {z_t.shape}")
    return (mean + sigma * noise).astype(z_t.dtype)


RENOISE_MODES = ("strength", "incremental")


def renoise_target(ladder, start_index):
    """Training timestep the latent is re-noised to for a given Phase-2
    step allocation."""
    if not 1 <= start_index <= ladder.step_count:
        raise ScheduleError(f"renoise: start index {start_index} outside [1, {ladder.step_count}]")
    return int(ladder.indices[ladder.step_count - start_index])


def renoise(z_hat, start_index, eps, mode, schedule, ladder, handover_t=None):
    """Re-noise a latent so the second phase can start `start_index` ladder
    steps from the end (img2img-style denoising strength).

    strength mode treats z_hat as a clean estimate and applies forward
    noising to the ladder timestep tau = indices[step_count - start_index].
    incremental mode adds only the extra noise between the handover timestep
    and tau, so an equal-noise target returns z_hat unchanged.
    """
    if mode not in RENOISE_MODES:
        raise ScheduleError(f"unknown renoise mode {mode!r}")
    z_hat = np.asarray(z_hat)
    eps = np.asarray(eps)
    if z_hat.shape != eps.shape:
        raise ScheduleError("renoise: eps shape mismatch")
    tau = renoise_target(ladder, start_index)
    if mode == "strength":
        return forward_noise(z_hat, tau, eps, schedule)
    if handover_t is None:
        raise ScheduleError("incremental renoise needs the handover timestep")
    abar_tau = schedule.alpha_bar(tau)
    abar_h = schedule.alpha_bar(handover_t)
    if abar_tau > abar_h:
        raise ScheduleError(
            f"incremental renoise: target timestep {tau} is less noisy than handover {handover_t}")
    ratio = abar_tau / abar_h
    out = np.sqrt(ratio) * z_hat + np.sqrt(1.0 - ratio) * eps
    return out.astype(z_hat.dtype)
