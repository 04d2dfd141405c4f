"""Walkthrough: train a tiny world, then compare pure baselines with a
composite handover run on one instance.

This uses a reduced budget so it finishes in a few minutes on CPU; the
numbers are illustrative, not the evaluation protocol (see tests/).

Run from the repo root:
    python3 demos/handover_walkthrough.py
"""
import numpy as np

from lph import adapter as A
from lph import backbones as B
from lph import cost as C
from lph import metrics as M
from lph import pipeline as P
from lph import schedule as S
from lph import toyworld as W


def main():
    print("generating data ...")
    diff = {"min_period": 8}
    train = W.generate_dataset(32, 0, diff)
    inst = W.generate_instance(99999, diff)

    print("training latent spaces (reduced budget) ...")
    spaces = {sid: W.train_autoencoder(sid, train, steps=600)
              for sid in ("S", "T")}
    schedule = S.build_linear_schedule()
    ladder = S.build_ladder(schedule)

    print("training backbones ...")
    models = {kind: B.train_denoiser(kind, train, spaces, schedule, steps=300)
              for kind in B.KINDS}

    print("training adapter ...")
    paired = A.build_paired_dataset("forward", train, spaces, schedule, ladder)
    net = A.train_adapter(A.AdapterNet("toy", seed=0), paired, steps=600)

    bundle = P.Bundle(spaces=spaces, models=models, adapter_net=net,
                      schedule=schedule, ladder=ladder)

    rows = []
    for (t_s, t_t), label in (((30, 0), "structure only"),
                              ((0, 30), "texture only"),
                              ((18, 18), "handover 18+18")):
        cfg = P.HandoverConfig(t_s=t_s, t_t=t_t, seed=7)
        img, _ = P.run_lph(inst, cfg, bundle)
        rows.append((label,
                     M.garment_iou(img, inst),
                     M.spectrum_distance(img, inst.person_canvas,
                                         inst.garment_mask_gt),
                     C.analytic_cost(cfg, bundle).macs_total))

    print(f"\n{'config':<16} {'garment IoU':>12} {'spectrum dist':>14} {'MACs':>14}")
    for label, iou, spec, macs in rows:
        print(f"{label:<16} {iou:>12.3f} {spec:>14.4f} {macs:>14,}")
    print("\nstructure should lead on IoU, texture on spectrum distance,")
    print("and the composite should sit between the two at similar cost.")


if __name__ == "__main__":
    main()
