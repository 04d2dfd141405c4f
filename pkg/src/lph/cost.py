"""Inference cost accounting.

MAC counts are derived analytically from layer descriptors, not measured,
so they are exact and deterministic. Wall time and peak memory come from
an instrumented run and are best-effort. Only denoiser and adapter
forward passes are counted; the fixed encode/decode bookends are the
same for every configuration and excluded throughout.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field

from .storage import write_csv


def layer_macs(desc):
    """Multiply-accumulate count for one layer descriptor."""
    kind = desc["kind"]
    if kind in ("conv", "conv_t"):
        return (desc["cout"] * desc["cin"] * desc["k"] * desc["k"]
                * desc["out_h"] * desc["out_w"])
    if kind == "linear":
        return desc["fan_in"] * desc["fan_out"]
    if kind == "attention":
        # QK^T and attn@V are tokens^2 * dim; Q/K-V projections 2 * tokens * dim^2
        t, d = desc["tokens"], desc["dim"]
        return t * t * d + 2 * t * d * d
    raise ValueError(f"unknown layer kind {kind!r}")


def count_macs(descriptors, steps=1):
    """Total MACs for `steps` forward passes over the described layers."""
    per_step = sum(layer_macs(d) for d in descriptors)
    return int(per_step) * int(steps)


@dataclass
class CostReport:
    t_s: int
    t_t: int
    macs_phase1: int
    macs_adapter: int
    macs_phase2: int
    wall_seconds: float = 0.0
    peak_bytes: int = -1  # -1 means measurement unavailable

    @property
    def macs_total(self):
        return self.macs_phase1 + self.macs_adapter + self.macs_phase2

    @property
    def flops_total(self):
        # reporting convention: one MAC = two floating point operations
        return 2 * self.macs_total

    CSV_HEADER = ("t_s", "t_t", "macs_phase1", "macs_adapter", "macs_phase2",
                  "macs_total", "flops_total", "wall_seconds", "peak_bytes")

    def row(self):
        return [self.t_s, self.t_t, self.macs_phase1, self.macs_adapter,
                self.macs_phase2, self.macs_total, self.flops_total,
                self.wall_seconds, self.peak_bytes]


def analytic_cost(config, bundle, bypass_adapter=False):
    """Exact MAC breakdown for one handover configuration."""
    pure_struct = config.t_s == config.t_total and config.t_t == 0
    pure_tex = config.t_s == 0 and config.t_t == config.t_total
    m1 = count_macs(bundle.models["structure"].describe(), steps=config.t_s)
    m2 = count_macs(bundle.models["texture"].describe(), steps=config.t_t)
    if pure_struct or pure_tex or bypass_adapter:
        ma = 0
    else:
        ma = count_macs(bundle.adapter_net.describe(), steps=1)
    return CostReport(t_s=config.t_s, t_t=config.t_t, macs_phase1=m1,
                      macs_adapter=ma, macs_phase2=m2)


def profile_run(instance, config, bundle, bypass_adapter=False):
    """analytic_cost plus measured wall time and peak memory for one run."""
    from .pipeline import run_lph
    report = analytic_cost(config, bundle, bypass_adapter=bypass_adapter)
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    image, trace = run_lph(instance, config, bundle, bypass_adapter=bypass_adapter)
    report.wall_seconds = time.perf_counter() - t0
    try:
        _, peak = tracemalloc.get_traced_memory()
        report.peak_bytes = int(peak)
    except Exception:
        report.peak_bytes = -1
    if started:
        tracemalloc.stop()
    return report, image, trace


def write_cost_csv(path, reports):
    write_csv(path, CostReport.CSV_HEADER, [r.row() for r in reports])
