"""Command-line surface.

Subcommands cover the full experiment lifecycle: dataset generation,
staged training (spaces -> backbones -> adapter), sampling, metric
evaluation, the ablation grid, cost accounting, and plot export.

Exit codes: 0 success, 2 config error, 3 missing prerequisite,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import adapter as A
from . import backbones as B
from . import cost as C
from . import metrics as M
from . import pipeline as P
from . import storage
from . import toyworld as W
from .config import ConfigError, RunConfig
from .schedule import build_ladder, build_linear_schedule
from .tensor import NumericsError


class MissingArtifact(RuntimeError):
    """Maps to exit code 3; message names the missing file."""


# ---------------------------------------------------------------------------
# artifact paths

def _paths(cfg):
    out = cfg.get("run", "out_dir")
    hd = cfg.stage_hash("data")
    ha = cfg.stage_hash("ae")
    hb = cfg.stage_hash("backbone")
    hp = cfg.stage_hash("adapter")
    hr = cfg.stage_hash("run")
    return {
        "out": out,
        "dataset": os.path.join(out, f"dataset_{hd}"),
        "ae_S": os.path.join(out, f"ae_S_{ha}.ckpt"),
        "ae_T": os.path.join(out, f"ae_T_{ha}.ckpt"),
        "backbone_structure": os.path.join(out, f"backbone_structure_{hb}.ckpt"),
        "backbone_texture": os.path.join(out, f"backbone_texture_{hb}.ckpt"),
        "adapter": os.path.join(out, f"adapter_{hp}.ckpt"),
        "samples": os.path.join(out, f"samples_{hr}"),
        "eval_csv": os.path.join(out, f"eval_{hr}.csv"),
        "cost_csv": os.path.join(out, f"cost_{hr}.csv"),
        "ablate_csv": os.path.join(out, f"ablate_{hr}.csv"),
        "summary_csv": os.path.join(out, f"ablate_summary_{hr}.csv"),
        "run_hash": hr,
    }


def _require(path, hint):
    if not os.path.exists(path):
        raise MissingArtifact(f"missing {hint}: {path} (run `lph {_STAGE_CMD[hint]}` first)")


_STAGE_CMD = {
    "dataset": "gen-data",
    "space-S checkpoint": "train-ae",
    "space-T checkpoint": "train-ae",
    "structure backbone checkpoint": "train-backbone structure",
    "texture backbone checkpoint": "train-backbone texture",
    "adapter checkpoint": "train-adapter",
    "samples directory": "sample",
    "eval CSV": "eval",
    "ablation CSV": "ablate",
}


def _schedule(cfg):
    return build_linear_schedule(t_train=cfg.get("schedule", "t_train"),
                                 beta_min=cfg.get("schedule", "beta_min"),
                                 beta_max=cfg.get("schedule", "beta_max"))


def _load_dataset(cfg, paths):
    _require(paths["dataset"], "dataset")
    return W.load_dataset(paths["dataset"])


def _split(cfg, instances):
    n_train = cfg.get("data", "train_size")
    return instances[:n_train], instances[n_train:]


def load_bundle(cfg, paths=None, need_adapter=True):
    """Assemble a pipeline Bundle from on-disk artifacts."""
    paths = paths or _paths(cfg)
    _require(paths["ae_S"], "space-S checkpoint")
    _require(paths["ae_T"], "space-T checkpoint")
    _require(paths["backbone_structure"], "structure backbone checkpoint")
    _require(paths["backbone_texture"], "texture backbone checkpoint")
    spaces = {"S": W.Autoencoder.load(paths["ae_S"]),
              "T": W.Autoencoder.load(paths["ae_T"])}
    models = {"structure": B.Denoiser.load(paths["backbone_structure"]),
              "texture": B.Denoiser.load(paths["backbone_texture"])}
    net = None
    if need_adapter:
        _require(paths["adapter"], "adapter checkpoint")
        net = A.AdapterNet.load(paths["adapter"])
    schedule = _schedule(cfg)
    ladder = build_ladder(schedule, cfg.get("schedule", "step_count"))
    return P.Bundle(spaces=spaces, models=models, adapter_net=net,
                    schedule=schedule, ladder=ladder)


def _handover_config(cfg, t_s=None, t_t=None, seed=None):
    return P.HandoverConfig(
        t_total=cfg.get("handover", "t_total"),
        t_s=cfg.get("handover", "t_s") if t_s is None else t_s,
        t_t=cfg.get("handover", "t_t") if t_t is None else t_t,
        renoise_mode=cfg.get("handover", "renoise_mode"),
        sigma_mode=cfg.get("handover", "sigma_mode"),
        seed=cfg.get("run", "seed") if seed is None else seed)


# ---------------------------------------------------------------------------
# preparation commands

def cmd_gen_data(cfg, args):
    paths = _paths(cfg)
    n = cfg.get("data", "train_size") + cfg.get("data", "eval_size")
    if n <= 0:
        raise ConfigError("dataset size is zero (data.train_size + data.eval_size)")
    instances = W.generate_dataset(n, base_seed=cfg.get("data", "base_seed"),
                                   difficulty=cfg.difficulty())
    os.makedirs(paths["out"], exist_ok=True)
    W.save_dataset(paths["dataset"], instances, difficulty=cfg.difficulty())
    print(f"wrote {n} instances to {paths['dataset']}")
    return 0


def cmd_train_ae(cfg, args):
    paths = _paths(cfg)
    train, _ = _split(cfg, _load_dataset(cfg, paths))
    for space_id, out_path in (("S", paths["ae_S"]), ("T", paths["ae_T"])):
        ae = W.train_autoencoder(space_id, train,
                                 steps=cfg.get("autoencoder", "steps"),
                                 batch=cfg.get("autoencoder", "batch"),
                                 lr=cfg.get("autoencoder", "lr"),
                                 lr_final=cfg.get("autoencoder", "lr_final"),
                                 weight_decay=cfg.get("autoencoder", "weight_decay"))
        ae.save(out_path)
        print(f"space {space_id}: saved {out_path}")
    return 0


def cmd_train_backbone(cfg, args):
    paths = _paths(cfg)
    kind = args.kind
    train, _ = _split(cfg, _load_dataset(cfg, paths))
    _require(paths["ae_S"], "space-S checkpoint")
    _require(paths["ae_T"], "space-T checkpoint")
    spaces = {"S": W.Autoencoder.load(paths["ae_S"]),
              "T": W.Autoencoder.load(paths["ae_T"])}
    schedule = _schedule(cfg)
    ckpt = paths[f"backbone_{kind}"]
    log_path = ckpt.replace(".ckpt", "_loss.csv")
    model = B.train_denoiser(kind, train, spaces, schedule,
                             steps=cfg.get("backbone", "steps"),
                             batch=cfg.get("backbone", "batch"),
                             lr=cfg.get("backbone", "lr"),
                             weight_decay=cfg.get("backbone", "weight_decay"),
                             seed=cfg.get("run", "seed"),
                             lowpass=cfg.get("backbone", "lowpass"),
                             log_path=log_path, ckpt_path=ckpt)
    model.save(ckpt)
    print(f"{kind}: saved {ckpt}")
    return 0


def cmd_train_adapter(cfg, args):
    paths = _paths(cfg)
    instances = _load_dataset(cfg, paths)
    train, _ = _split(cfg, instances)
    _require(paths["ae_S"], "space-S checkpoint")
    _require(paths["ae_T"], "space-T checkpoint")
    spaces = {"S": W.Autoencoder.load(paths["ae_S"]),
              "T": W.Autoencoder.load(paths["ae_T"])}
    schedule = _schedule(cfg)
    ladder = build_ladder(schedule, cfg.get("schedule", "step_count"))
    mode = cfg.get("adapter", "pair_mode")
    models = None
    if mode == "trajectory":
        _require(paths["backbone_structure"], "structure backbone checkpoint")
        _require(paths["backbone_texture"], "texture backbone checkpoint")
        models = {"structure": B.Denoiser.load(paths["backbone_structure"]),
                  "texture": B.Denoiser.load(paths["backbone_texture"])}
    paired = A.build_paired_dataset(mode, train, spaces, schedule, ladder,
                                    models=models, seed=cfg.get("run", "seed"))
    net = A.AdapterNet(preset=cfg.get("adapter", "preset"),
                       seed=cfg.get("run", "seed"))
    A.train_adapter(net, paired, steps=cfg.get("adapter", "steps"),
                    batch=cfg.get("adapter", "batch"),
                    lr=cfg.get("adapter", "lr"),
                    weight_decay=cfg.get("adapter", "weight_decay"),
                    seed=cfg.get("run", "seed"))
    do_finetune = cfg.get("adapter", "finetune") or getattr(args, "finetune", False)
    if do_finetune:
        # brief extra pass on trajectory pairs; only adapter params move,
        # backbones stay frozen
        _require(paths["backbone_structure"], "structure backbone checkpoint")
        _require(paths["backbone_texture"], "texture backbone checkpoint")
        models = {"structure": B.Denoiser.load(paths["backbone_structure"]),
                  "texture": B.Denoiser.load(paths["backbone_texture"])}
        traj = A.build_paired_dataset("trajectory", train, spaces, schedule,
                                      ladder, models=models,
                                      seed=cfg.get("run", "seed") + 1)
        A.train_adapter(net, traj, steps=cfg.get("adapter", "finetune_steps"),
                        batch=cfg.get("adapter", "batch"),
                        lr=cfg.get("adapter", "lr") * 0.5,
                        weight_decay=cfg.get("adapter", "weight_decay"),
                        seed=cfg.get("run", "seed") + 1)
    net.save(paths["adapter"])
    print(f"adapter: saved {paths['adapter']}")
    return 0


# ---------------------------------------------------------------------------
# run commands

def _eval_instances(cfg, paths):
    _, hold = _split(cfg, _load_dataset(cfg, paths))
    n = min(cfg.get("run", "sample_count"), len(hold))
    if n == 0:
        raise ConfigError("run.sample_count or data.eval_size is zero")
    return hold[:n]


def cmd_sample(cfg, args):
    paths = _paths(cfg)
    bundle = load_bundle(cfg, paths)
    hcfg = _handover_config(cfg)
    os.makedirs(paths["samples"], exist_ok=True)
    traces = []
    for inst in _eval_instances(cfg, paths):
        img, trace = P.run_lph(inst, hcfg, bundle)
        name = f"inst{inst.seed}_{hcfg.key()}"
        storage.save_ppm(os.path.join(paths["samples"], name + ".ppm"), img,
                         comment=f"run {paths['run_hash']} {name}")
        trace["instance"] = inst.seed
        traces.append(trace)
    # wall timings vary run to run; the persisted trace must be bit-stable
    clean = [{k: v for k, v in t.items() if not k.endswith("_seconds")}
             for t in traces]
    storage.write_jsonl(os.path.join(paths["samples"], "traces.jsonl"), clean)
    print(f"wrote {len(traces)} samples to {paths['samples']}")
    return 0


def _metric_row(run_id, hcfg, img, inst, reference, features=None):
    rep = M.MetricReport(run_id=run_id, t_s=hcfg.t_s, t_t=hcfg.t_t)
    rep.ssim = M.ssim(img, reference)
    rep.garment_iou = M.garment_iou(img, inst)
    rep.spectrum_dist = M.spectrum_distance(img, reference, inst.garment_mask_gt)
    return rep


def evaluate_config(cfg, bundle, instances, hcfg, seeds, arm="full"):
    """MetricReports for one (arm, config) cell across seeds."""
    reports = []
    for seed in seeds:
        run_cfg = P.HandoverConfig(t_total=hcfg.t_total, t_s=hcfg.t_s, t_t=hcfg.t_t,
                                   renoise_mode=hcfg.renoise_mode,
                                   sigma_mode=hcfg.sigma_mode, seed=seed)
        for inst in instances:
            if arm == "rgb_refine":
                img, _ = P.run_rgb_refine(inst, run_cfg, bundle)
            elif arm == "pixel_handover":
                img, _ = P.run_lph(inst, run_cfg, bundle, handover_space="pixel")
            elif arm == "adapter_bypass":
                img, _ = P.run_lph(inst, run_cfg, bundle, bypass_adapter=True)
            else:
                img, _ = P.run_lph(inst, run_cfg, bundle)
            ref = P.composite(inst.person_canvas, inst)
            rep = _metric_row(f"{arm}_s{seed}_i{inst.seed}", run_cfg, img, inst, ref)
            rep.seed_count = 1
            reports.append(rep)
    return reports


def _frechet_fill(cfg, bundle, reports_by_key, images_by_key, references):
    if not cfg.get("metrics", "frechet"):
        return
    enc = M.random_projection(64 * 64 * 3, 16)
    ref_stats = M.feature_stats(np.stack([r.reshape(-1) for r in references]) @ enc)
    for key, imgs in images_by_key.items():
        if len(imgs) < 32:
            continue
        stats = M.feature_stats(np.stack([i.reshape(-1) for i in imgs]) @ enc)
        d = M.frechet_gaussian(*stats, *ref_stats)
        for rep in reports_by_key[key]:
            rep.frechet_toy = d


def cmd_eval(cfg, args):
    paths = _paths(cfg)
    bundle = load_bundle(cfg, paths)
    instances = _eval_instances(cfg, paths)
    hcfg = _handover_config(cfg)
    seeds = range(cfg.get("run", "seed"), cfg.get("run", "seed")
                  + max(1, cfg.get("run", "ablate_seeds")))
    reports = evaluate_config(cfg, bundle, instances, hcfg, seeds)
    rows = [r.row() for r in reports]
    cols = list(zip(*[(r.ssim, r.garment_iou, r.spectrum_dist) for r in reports]))
    mean = [float(np.mean(c)) for c in cols]
    std = [float(np.std(c)) for c in cols]
    rows.append(["mean", hcfg.t_s, hcfg.t_t, mean[0], mean[1], mean[2],
                 float("nan"), float("nan"), float("nan"), float("nan"),
                 len(reports)])
    rows.append(["stddev", hcfg.t_s, hcfg.t_t, std[0], std[1], std[2],
                 float("nan"), float("nan"), float("nan"), float("nan"),
                 len(reports)])
    storage.write_csv(paths["eval_csv"], M.MetricReport.CSV_HEADER, rows)
    print(f"wrote {paths['eval_csv']} "
          f"(ssim {mean[0]:.4f}±{std[0]:.4f}, iou {mean[1]:.4f}±{std[1]:.4f}, "
          f"spectrum {mean[2]:.4f}±{std[2]:.4f})")
    return 0


ARMS = ("full", "adapter_bypass", "no_extension", "pixel_handover", "rgb_refine")


def ablation_cells(cfg, paper_grid, arm=None):
    t_total = cfg.get("handover", "t_total")
    if paper_grid:
        grid = P.paper_grid(t_total)
    else:
        grid = [(cfg.get("handover", "t_s"), cfg.get("handover", "t_t"))]
    arms = ARMS if arm is None else (arm,)
    cells = []
    for name in arms:
        for t_s, t_t in grid:
            if name != "full" and (t_s == 0 or t_t == 0):
                continue  # arms modify the handover; pure baselines have none
            if name == "no_extension":
                t_t = t_total - t_s
                if t_t == 0:
                    continue
            cells.append((name, t_s, t_t))
    return cells


def cmd_ablate(cfg, args):
    paths = _paths(cfg)
    bundle = load_bundle(cfg, paths)
    instances = _eval_instances(cfg, paths)
    seeds = range(cfg.get("run", "seed"), cfg.get("run", "seed")
                  + max(1, cfg.get("run", "ablate_seeds")))
    cells = ablation_cells(cfg, args.paper_grid, arm=args.arm)
    header = ("arm",) + M.MetricReport.CSV_HEADER
    rows = []
    summary = {}
    for name, t_s, t_t in cells:
        hcfg = _handover_config(cfg, t_s=t_s, t_t=t_t)
        reports = evaluate_config(cfg, bundle, instances, hcfg, seeds, arm=name)
        for r in reports:
            rows.append([name] + r.row())
        ious = [r.garment_iou for r in reports]
        specs = [r.spectrum_dist for r in reports]
        summary[(name, t_s, t_t)] = (float(np.mean(ious)), float(np.std(ious)),
                                     float(np.mean(specs)), float(np.std(specs)))
        print(f"{name} ({t_s},{t_t}): iou {summary[(name, t_s, t_t)][0]:.4f} "
              f"spectrum {summary[(name, t_s, t_t)][2]:.4f}")
    storage.write_csv(paths["ablate_csv"], header, rows)
    srows = [[n, ts, tt, *vals] for (n, ts, tt), vals in sorted(summary.items())]
    storage.write_csv(paths["summary_csv"],
                      ("arm", "t_s", "t_t", "iou_mean", "iou_std",
                       "spectrum_mean", "spectrum_std"), srows)
    print(f"wrote {paths['ablate_csv']} and {paths['summary_csv']}")
    return 0


def cmd_cost(cfg, args):
    paths = _paths(cfg)
    bundle = load_bundle(cfg, paths)
    instances = _eval_instances(cfg, paths)
    grid = (P.paper_grid(cfg.get("handover", "t_total")) if args.paper_grid
            else [(cfg.get("handover", "t_s"), cfg.get("handover", "t_t"))])
    reports = []
    for t_s, t_t in grid:
        hcfg = _handover_config(cfg, t_s=t_s, t_t=t_t)
        rep, _, _ = C.profile_run(instances[0], hcfg, bundle)
        reports.append(rep)
        print(f"({t_s},{t_t}): {rep.macs_total} MACs, {rep.wall_seconds:.2f}s")
    C.write_cost_csv(paths["cost_csv"], reports)
    print(f"wrote {paths['cost_csv']}")
    return 0


def cmd_export_plots(cfg, args):
    from . import plots
    paths = _paths(cfg)
    made = []
    if os.path.exists(paths["summary_csv"]):
        made += plots.plot_ablation_summary(paths["summary_csv"], paths["out"])
    if os.path.exists(paths["cost_csv"]):
        made += plots.plot_cost(paths["cost_csv"], paths["out"])
    if not made:
        print("warning: no CSVs with plottable rows found, nothing to do")
        return 0
    for p in made:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="lph",
                                     description="latent process handover toolkit")
    parser.add_argument("--config", help="path to a run config file")
    parser.add_argument("--seed", type=int, help="override run.seed")
    parser.add_argument("--out", help="override run.out_dir")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data")
    sub.add_parser("train-ae")
    pb = sub.add_parser("train-backbone")
    pb.add_argument("kind", choices=("structure", "texture"))
    pa = sub.add_parser("train-adapter")
    pa.add_argument("--finetune", action="store_true",
                    help="brief extra adapter-only pass on trajectory pairs")
    sub.add_parser("sample")
    sub.add_parser("eval")
    pab = sub.add_parser("ablate")
    pab.add_argument("--arm", choices=ARMS, default=None)
    pab.add_argument("--paper-grid", action="store_true")
    pc = sub.add_parser("cost")
    pc.add_argument("--paper-grid", action="store_true")
    sub.add_parser("export-plots")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-backbone": cmd_train_backbone,
    "train-adapter": cmd_train_adapter,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cost": cmd_cost,
    "export-plots": cmd_export_plots,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.set("run", "seed", args.seed)
        if args.out is not None:
            cfg.set("run", "out_dir", args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return 3
    except (NumericsError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
