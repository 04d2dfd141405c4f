"""Orchestration of a full generation: Phase 1 scaffolding with the
structure denoiser, the handover (adapter + re-noising trajectory
extension), Phase 2 refinement with the texture denoiser, decoding, and
the single-model baselines and ablation arms."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import adapter as A
from . import backbones as B
from .schedule import renoise, renoise_target, ddpm_step
from .toyworld import LATENT_CHANNELS, LATENT_SIZE, LatentState

LATENT_SHAPE = (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE)


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class HandoverConfig:
    t_total: int = 30
    t_s: int = 18
    t_t: int = 18
    renoise_mode: str = "strength"
    sigma_mode: str = "posterior"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.t_s <= self.t_total:
            raise PipelineError(f"t_s={self.t_s} outside [0, {self.t_total}]")
        if self.t_t > self.t_total:
            raise PipelineError(f"t_t={self.t_t} exceeds t_total={self.t_total}")
        if self.t_t < self.t_total - self.t_s:
            raise PipelineError(
                f"t_t={self.t_t} violates t_t >= t_total - t_s = {self.t_total - self.t_s}")

    def key(self):
        return (f"ts{self.t_s}_tt{self.t_t}_{self.renoise_mode}_{self.sigma_mode}"
                f"_T{self.t_total}")


def paper_grid(t_total=30, floor=18):
    """The ablation grid: k_texture = max(floor, t_total - k_struct)."""
    configs = [(0, t_total), (t_total, 0)]
    for k_struct in (6, 12, 18, 24):
        configs.append((k_struct, max(floor, t_total - k_struct)))
    return configs


@dataclass
class Bundle:
    """Everything a run needs; all members are read-only during runs."""
    spaces: dict
    models: dict
    adapter_net: object
    schedule: object
    ladder: object

    def require(self, *names):
        missing = [n for n in names if getattr(self, _BUNDLE_FIELDS[n], None) is None
                   or (n in ("S", "T") and n not in self.spaces)
                   or (n in ("structure", "texture") and n not in self.models)]
        if missing:
            raise PipelineError(f"bundle is missing trained components: {missing}")


_BUNDLE_FIELDS = {"S": "spaces", "T": "spaces", "structure": "models",
                  "texture": "models", "adapter": "adapter_net"}


def _run_rng(seed, instance, tag):
    return np.random.default_rng(
        np.random.PCG64(np.random.SeedSequence([int(seed), int(instance.seed), tag])))


def composite(image, instance):
    """Inpainting convention: untouched person pixels outside the mask."""
    mask = instance.garment_mask_gt[..., None].astype(np.float32)
    return (instance.masked_person + np.asarray(image, dtype=np.float32) * mask
            ).astype(np.float32)


# ---------------------------------------------------------------------------
# phases

def run_phase1(instance, t_s, config, bundle, rng=None, trace=None):
    """T_s ladder steps with the structure denoiser from a seeded draw."""
    if t_s > config.t_total:
        raise PipelineError(f"t_s={t_s} exceeds the budget {config.t_total}")
    bundle.require("S", "structure")
    if rng is None:
        rng = _run_rng(config.seed, instance, 1)
    ladder = bundle.ladder
    cond = B.build_conditioning("structure", instance, bundle.spaces)
    z = rng.standard_normal(LATENT_SHAPE).astype(np.float32)
    for k in range(t_s):
        t, t_prev = ladder.step_pair(k)
        eps_hat = B.predict_noise(bundle.models["structure"], z, t, cond)
        noise = rng.standard_normal(LATENT_SHAPE).astype(np.float32)
        z = ddpm_step(z, eps_hat, t, noise, bundle.schedule, t_prev=t_prev,
                      sigma_mode=config.sigma_mode)
        if trace is not None:
            trace["latent_norms"].append((int(t_prev), float(np.linalg.norm(z))))
    return LatentState(data=z, t=ladder.timestep_after(t_s), space="S")


def run_handover(z_truncated, config, bundle, rng=None, instance=None,
                 bypass_adapter=False, trace=None):
    """Adapt the truncated latent into space T and re-noise it to the
    Phase-2 starting noise level."""
    if rng is None:
        rng = _run_rng(config.seed, instance, 2)
    if bypass_adapter:
        z_hat = LatentState(data=z_truncated.data.copy(), t=z_truncated.t, space="T")
    else:
        bundle.require("adapter")
        z_hat = A.adapt(bundle.adapter_net, z_truncated)
    if config.t_t == 0:
        return z_hat
    eps = rng.standard_normal(LATENT_SHAPE).astype(np.float32)
    z2 = renoise(z_hat.data, config.t_t, eps, config.renoise_mode, bundle.schedule,
                 bundle.ladder, handover_t=z_hat.t)
    t_start = renoise_target(bundle.ladder, config.t_t)
    if trace is not None:
        trace["adapter_applied"] = not bypass_adapter
        trace["phase2_start_t"] = t_start
        trace["phase2_start_abar"] = bundle.schedule.alpha_bar(t_start)
    return LatentState(data=z2, t=t_start, space="T")


def run_phase2(z_start, instance, t_t, config, bundle, rng=None, trace=None):
    """T_t ladder steps with the texture denoiser, then decode + composite."""
    bundle.require("T", "texture")
    if rng is None:
        rng = _run_rng(config.seed, instance, 3)
    ladder = bundle.ladder
    if z_start.space != "T":
        raise PipelineError(f"Phase 2 needs a latent in space T, got {z_start.space!r}")
    cond = B.build_conditioning("texture", instance, bundle.spaces)
    z = np.asarray(z_start.data, dtype=np.float32)
    k0 = ladder.step_count - t_t
    if t_t > 0 and z_start.t != int(ladder.indices[k0]):
        raise PipelineError(
            f"Phase-2 start latent is at timestep {z_start.t}, ladder expects "
            f"{int(ladder.indices[k0])}")
    for k in range(k0, ladder.step_count):
        t, t_prev = ladder.step_pair(k)
        eps_hat = B.predict_noise(bundle.models["texture"], z, t, cond)
        noise = rng.standard_normal(LATENT_SHAPE).astype(np.float32)
        z = ddpm_step(z, eps_hat, t, noise, bundle.schedule, t_prev=t_prev,
                      sigma_mode=config.sigma_mode)
        if trace is not None:
            trace["latent_norms"].append((int(t_prev), float(np.linalg.norm(z))))
    image = bundle.spaces["T"].decode(z)
    return composite(image, instance)


# ---------------------------------------------------------------------------
# full runs

def new_trace(config):
    return {"t_s": config.t_s, "t_t": config.t_t, "renoise_mode": config.renoise_mode,
            "sigma_mode": config.sigma_mode, "seed": config.seed,
            "latent_norms": [], "phase1_steps": 0, "phase2_steps": 0,
            "adapter_applied": False, "phase1_seconds": 0.0, "phase2_seconds": 0.0,
            "handover": "none"}


def run_lph(instance, config, bundle, bypass_adapter=False, handover_space="latent"):
    """Full composed generation; returns (image, trace)."""
    trace = new_trace(config)
    if config.t_s == config.t_total and config.t_t == 0:
        img = run_single("structure", instance, bundle, seed=config.seed,
                         steps=config.t_total, sigma_mode=config.sigma_mode, trace=trace)
        return img, trace
    if config.t_s == 0 and config.t_t == config.t_total:
        img = run_single("texture", instance, bundle, seed=config.seed,
                         steps=config.t_total, sigma_mode=config.sigma_mode, trace=trace)
        return img, trace

    rng = _run_rng(config.seed, instance, 10)
    t0 = time.perf_counter()
    z_trunc = run_phase1(instance, config.t_s, config, bundle, rng=rng, trace=trace)
    trace["phase1_steps"] = config.t_s
    trace["phase1_seconds"] = time.perf_counter() - t0

    if handover_space == "pixel":
        # latent -> pixel -> latent conversion arm (no adapter by design)
        img_mid = bundle.spaces["S"].decode(z_trunc.data)
        z_re = bundle.spaces["T"].encode(img_mid)
        z_hat = LatentState(data=z_re, t=z_trunc.t, space="T")
        eps = rng.standard_normal(LATENT_SHAPE).astype(np.float32)
        z2 = renoise(z_hat.data, config.t_t, eps, config.renoise_mode,
                     bundle.schedule, bundle.ladder, handover_t=z_hat.t)
        z_start = LatentState(data=z2, t=renoise_target(bundle.ladder, config.t_t),
                              space="T")
        trace["handover"] = "pixel"
        trace["phase2_start_t"] = z_start.t
        trace["phase2_start_abar"] = bundle.schedule.alpha_bar(z_start.t)
    else:
        z_start = run_handover(z_trunc, config, bundle, rng=rng, instance=instance,
                               bypass_adapter=bypass_adapter, trace=trace)
        trace["handover"] = "bypass" if bypass_adapter else "adapter"

    t0 = time.perf_counter()
    img = run_phase2(z_start, instance, config.t_t, config, bundle, rng=rng, trace=trace)
    trace["phase2_steps"] = config.t_t
    trace["phase2_seconds"] = time.perf_counter() - t0
    return img, trace


def run_single(kind, instance, bundle, seed, steps=None, sigma_mode="posterior",
               trace=None):
    """Full-ladder sampling with one backbone in its own latent space."""
    space = "S" if kind == "structure" else "T"
    bundle.require(space, kind)
    ladder = bundle.ladder
    if steps is None:
        steps = ladder.step_count
    if steps != ladder.step_count:
        raise PipelineError(f"single-model runs use the full ladder ({ladder.step_count} steps)")
    rng = _run_rng(seed, instance, 100 if kind == "structure" else 101)
    cond = B.build_conditioning(kind, instance, bundle.spaces)
    z = rng.standard_normal(LATENT_SHAPE).astype(np.float32)
    t0 = time.perf_counter()
    for k in range(ladder.step_count):
        t, t_prev = ladder.step_pair(k)
        eps_hat = B.predict_noise(bundle.models[kind], z, t, cond)
        noise = rng.standard_normal(LATENT_SHAPE).astype(np.float32)
        z = ddpm_step(z, eps_hat, t, noise, bundle.schedule, t_prev=t_prev,
                      sigma_mode=sigma_mode)
        if trace is not None:
            trace["latent_norms"].append((int(t_prev), float(np.linalg.norm(z))))
    image = bundle.spaces[space].decode(z)
    if trace is not None:
        key = "phase1" if kind == "structure" else "phase2"
        trace[f"{key}_steps"] = ladder.step_count
        trace[f"{key}_seconds"] = time.perf_counter() - t0
    return composite(image, instance)


def run_rgb_refine(instance, config, bundle):
    """Two-stage RGB refinement arm: fully converged structure-only RGB
    output re-encoded into space T and refined for t_t steps."""
    trace = new_trace(config)
    trace["handover"] = "rgb_refine"
    rgb = run_single("structure", instance, bundle, seed=config.seed,
                     sigma_mode=config.sigma_mode, trace=trace)
    t_t = max(1, config.t_t)
    rng = _run_rng(config.seed, instance, 11)
    z_re = bundle.spaces["T"].encode(rgb)
    eps = rng.standard_normal(LATENT_SHAPE).astype(np.float32)
    z2 = renoise(z_re, t_t, eps, "strength", bundle.schedule, bundle.ladder)
    z_start = LatentState(data=z2, t=renoise_target(bundle.ladder, t_t), space="T")
    trace["phase2_start_t"] = z_start.t
    trace["phase2_start_abar"] = bundle.schedule.alpha_bar(z_start.t)
    img = run_phase2(z_start, instance, t_t, config, bundle, rng=rng, trace=trace)
    trace["phase2_steps"] = t_t
    return img, trace
