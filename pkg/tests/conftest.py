"""Shared fixtures.  The trained fixtures are expensive, so they are cached
on disk under .testcache/ keyed by a recipe tag; bump the tag whenever a
default training budget or architecture changes."""
import json
import os

import numpy as np
import pytest

from lph import adapter as A
from lph import backbones as B
from lph import pipeline as P
from lph import schedule as S
from lph import toyworld as W

RECIPE = "v1"
DIFFICULTY = {"min_period": 8}
CACHE = os.path.join(os.path.dirname(__file__), "..", ".testcache", RECIPE)


def _path(name):
    return os.path.join(CACHE, name)


@pytest.fixture(scope="session")
def trained_world():
    """Trained latent spaces plus the data and bias-probe summary."""
    os.makedirs(CACHE, exist_ok=True)
    train = W.generate_dataset(512, 0, DIFFICULTY)
    heldout = W.generate_dataset(64, 100000, DIFFICULTY)
    schedule = S.build_linear_schedule()
    ladder = S.build_ladder(schedule)

    spaces = {}
    for sid in ("S", "T"):
        ckpt = _path(f"ae_{sid}.ckpt")
        if os.path.exists(ckpt):
            spaces[sid] = W.Autoencoder.load(ckpt)
        else:
            spaces[sid] = W.train_autoencoder(sid, train)
            spaces[sid].save(ckpt)

    return {"train": train, "heldout64": heldout, "spaces": spaces,
            "schedule": schedule, "ladder": ladder, "difficulty": DIFFICULTY}


@pytest.fixture(scope="session")
def trained_bundle(trained_world):
    """Bundle with trained backbones and adapter, cached like the spaces."""
    train = trained_world["train"]
    spaces = trained_world["spaces"]
    schedule = trained_world["schedule"]
    ladder = trained_world["ladder"]

    models = {}
    for kind in B.KINDS:
        ckpt = _path(f"backbone_{kind}.ckpt")
        if os.path.exists(ckpt):
            models[kind] = B.Denoiser.load(ckpt)
        else:
            models[kind] = B.train_denoiser(kind, train, spaces, schedule)
            models[kind].save(ckpt)

    ckpt = _path("adapter.ckpt")
    if os.path.exists(ckpt):
        net = A.AdapterNet.load(ckpt)
    else:
        paired = A.build_paired_dataset("forward", train, spaces, schedule, ladder)
        net = A.AdapterNet("toy", seed=0)
        A.train_adapter(net, paired)
        net.save(ckpt)

    return P.Bundle(spaces=spaces, models=models, adapter_net=net,
                    schedule=schedule, ladder=ladder)


@pytest.fixture(scope="session")
def bias_probe_summary(trained_world, trained_bundle):
    """Per-backbone IoU / spectrum means over 8 seeds, cached as json."""
    path = _path("bias_probe.json")
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    insts = trained_world["heldout64"][:8]
    probe = B.bias_probe(trained_bundle.models, insts, trained_bundle,
                         seeds=range(8))
    with open(path, "w") as fh:
        json.dump(probe, fh, indent=1)
    return probe
