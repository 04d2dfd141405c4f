"""Plain-text run configuration.

Sectioned key=value files, fail-closed: any section or key outside the
schema below is an error, so typos cannot silently fall back to
defaults. Configs round-trip exactly (load -> save -> load gives the
same values) and every output filename embeds a short hash of the
sections that produced it, so artifacts from different configs never
collide.
"""

from __future__ import annotations

import configparser
import hashlib
import io


class ConfigError(ValueError):
    """Maps to CLI exit code 2."""


# (section, key) -> (python type, default). bool values are "true"/"false".
SCHEMA = {
    ("schedule", "t_train"): (int, 200),
    ("schedule", "beta_min"): (float, 1e-4),
    ("schedule", "beta_max"): (float, 0.03),
    ("schedule", "step_count"): (int, 30),
    ("data", "train_size"): (int, 512),
    ("data", "eval_size"): (int, 16),
    ("data", "base_seed"): (int, 0),
    ("data", "min_period"): (int, 8),
    ("autoencoder", "steps"): (int, 9000),
    ("autoencoder", "batch"): (int, 8),
    ("autoencoder", "lr"): (float, 3e-3),
    ("autoencoder", "lr_final"): (float, 1e-4),
    ("autoencoder", "weight_decay"): (float, 1e-5),
    ("backbone", "steps"): (int, 700),
    ("backbone", "batch"): (int, 8),
    ("backbone", "lr"): (float, 1e-3),
    ("backbone", "weight_decay"): (float, 1e-5),
    ("backbone", "lowpass"): (bool, True),
    ("adapter", "preset"): (str, "toy"),
    ("adapter", "pair_mode"): (str, "forward"),
    ("adapter", "steps"): (int, 2000),
    ("adapter", "batch"): (int, 8),
    ("adapter", "lr"): (float, 1e-4),
    ("adapter", "weight_decay"): (float, 1e-5),
    ("adapter", "finetune"): (bool, False),
    ("adapter", "finetune_steps"): (int, 300),
    ("handover", "t_total"): (int, 30),
    ("handover", "t_s"): (int, 18),
    ("handover", "t_t"): (int, 18),
    ("handover", "renoise_mode"): (str, "strength"),
    ("handover", "sigma_mode"): (str, "posterior"),
    ("run", "seed"): (int, 0),
    ("run", "out_dir"): (str, "out"),
    ("run", "sample_count"): (int, 4),
    ("run", "ablate_seeds"): (int, 2),
    ("metrics", "frechet"): (bool, True),
    ("metrics", "spectrum"): (bool, True),
}

SECTIONS = []
for _s, _k in SCHEMA:
    if _s not in SECTIONS:
        SECTIONS.append(_s)

# which sections feed each artifact stage's filename hash
STAGE_SECTIONS = {
    "data": ("schedule", "data"),
    "ae": ("schedule", "data", "autoencoder"),
    "backbone": ("schedule", "data", "autoencoder", "backbone"),
    "adapter": ("schedule", "data", "autoencoder", "backbone", "adapter"),
    "run": tuple(SECTIONS),
}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw, typ, where):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {where} (expected {typ.__name__})")


class RunConfig:
    def __init__(self, values=None):
        self.values = {key: default for key, (_, default) in SCHEMA.items()}
        if values:
            for key, v in values.items():
                if key not in SCHEMA:
                    raise ConfigError(f"unknown config key {key[0]}.{key[1]}")
                self.values[key] = v

    def get(self, section, key):
        if (section, key) not in SCHEMA:
            raise ConfigError(f"unknown config key {section}.{key}")
        return self.values[(section, key)]

    def set(self, section, key, value):
        if (section, key) not in SCHEMA:
            raise ConfigError(f"unknown config key {section}.{key}")
        typ = SCHEMA[(section, key)][0]
        if not isinstance(value, typ):
            value = _parse(str(value), typ, f"{section}.{key}")
        self.values[(section, key)] = value

    def section(self, name):
        return {k: v for (s, k), v in self.values.items() if s == name}

    def serialize(self, sections=None):
        """Canonical text form; schema order, one value per line."""
        wanted = sections if sections is not None else SECTIONS
        out = io.StringIO()
        for sec in SECTIONS:
            if sec not in wanted:
                continue
            out.write(f"[{sec}]\n")
            for (s, k), _ in SCHEMA.items():
                if s == sec:
                    out.write(f"{k} = {_format(self.values[(s, k)])}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}")
        cfg = cls()
        for sec in parser.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section [{sec}] in {path}")
            for key, raw in parser.items(sec):
                if (sec, key) not in SCHEMA:
                    raise ConfigError(f"unknown config key {sec}.{key} in {path}")
                typ = SCHEMA[(sec, key)][0]
                cfg.values[(sec, key)] = _parse(raw, typ, f"{sec}.{key}")
        return cfg

    def stage_hash(self, stage):
        """8-hex-char tag for filenames; depends only on the sections that
        influence the named artifact stage."""
        text = self.serialize(sections=STAGE_SECTIONS[stage])
        return hashlib.sha256(text.encode()).hexdigest()[:8]

    def difficulty(self):
        return {"min_period": self.get("data", "min_period")}
