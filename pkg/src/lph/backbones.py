"""The two frozen-after-training toy denoisers with engineered,
complementary inductive biases.

The structure denoiser sees spatially aligned latents of the garment and
the masked person (channel concatenation, no attention) and is trained
against low-pass-filtered targets, so it nails geometry and mutes texture.
The texture denoiser sees only a coarse mask and pose for geometry; the
garment's appearance reaches it exclusively through cross-attention tokens
(a learned texture-class embedding plus swatch patches)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets, storage
from . import tensor as T
from .schedule import forward_noise
from .toyworld import (LATENT_CHANNELS, LATENT_SIZE, SWATCH, TEXTURE_CLASSES,
                       TryOnInstance)

TEMB_DIM = 64
PATCH = 8                      # swatch patch edge; 16 tokens per swatch
PATCH_DIM = PATCH * PATCH * 3

KINDS = ("structure", "texture")


class ConditioningError(TypeError):
    pass


@dataclass
class StructureConditioning:
    garment_latent: np.ndarray   # (4, 16, 16), encode_S of the tiled swatch
    masked_latent: np.ndarray    # (4, 16, 16), encode_S of the masked person


@dataclass
class TextureConditioning:
    mask_coarse: np.ndarray      # (1, 16, 16) pooled garment mask
    pose_coarse: np.ndarray      # (2, 16, 16) pooled pose map
    class_id: int
    swatch: np.ndarray           # (32, 32, 3)


def avg_pool4(plane):
    """4x4 average pooling of a (C, 64, 64) or (64, 64) array."""
    arr = np.asarray(plane, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    c, h, w = arr.shape
    out = arr.reshape(c, h // 4, 4, w // 4, 4).mean(axis=(2, 4))
    return out[0] if squeeze else out


def swatch_tokens_raw(swatch):
    """(32, 32, 3) swatch -> (16, 192) raw patch vectors."""
    s = np.asarray(swatch, dtype=np.float32)
    grid = SWATCH // PATCH
    patches = s.reshape(grid, PATCH, grid, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(grid * grid, PATCH_DIM)


def build_conditioning(kind, instance: TryOnInstance, spaces):
    """Conditioning record for one instance in the model's own latent space."""
    if kind == "structure":
        enc = spaces["S"]
        return StructureConditioning(
            garment_latent=enc.encode(instance.garment_canvas()),
            masked_latent=enc.encode(instance.masked_person))
    if kind == "texture":
        return TextureConditioning(
            mask_coarse=avg_pool4(instance.garment_mask_gt.astype(np.float32))[None],
            pose_coarse=avg_pool4(instance.pose_map),
            class_id=instance.class_id,
            swatch=instance.garment_sample)
    raise ValueError(f"unknown denoiser kind {kind!r}")


class Denoiser:
    """Two-resolution conditional U-Net predicting the added noise."""

    def __init__(self, kind, seed):
        if kind not in KINDS:
            raise ValueError(f"denoiser kind must be one of {KINDS}, got {kind!r}")
        self.kind = kind
        self.seed = seed
        self.trained = False
        self.base = 32 if kind == "structure" else 48
        self.cond_channels = 8 if kind == "structure" else 3
        c_in = LATENT_CHANNELS + self.cond_channels
        w = self.base
        self.store = T.ParameterStore()
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.conv_in = nets.Conv(self.store, "conv_in", c_in, w, 3, padding=1, rng=rng)
        self.temb1 = nets.Dense(self.store, "temb1", TEMB_DIM, w, rng=rng)
        self.down = nets.Conv(self.store, "down", w, 2 * w, 3, stride=2, padding=1, rng=rng)
        self.temb2 = nets.Dense(self.store, "temb2", TEMB_DIM, 2 * w, rng=rng)
        self.mid = nets.Conv(self.store, "mid", 2 * w, 2 * w, 3, padding=1, rng=rng)
        if kind == "texture":
            d = 2 * w
            self.class_emb = self.store.add(
                "attn.class_emb",
                (np.random.default_rng(np.random.PCG64(seed + 5))
                 .standard_normal((len(TEXTURE_CLASSES), d)) * 0.2).astype(np.float32))
            self.tok_proj = nets.Dense(self.store, "attn.tok_proj", PATCH_DIM, d, rng=rng)
            self.q_proj = nets.Dense(self.store, "attn.q_proj", d, d, rng=rng)
            self.out_proj = nets.Dense(self.store, "attn.out_proj", d, d, rng=rng)
        self.up = nets.ConvT(self.store, "up", 2 * w, w, 4, stride=2, padding=1, rng=rng)
        self.fuse = nets.Conv(self.store, "fuse", 2 * w, w, 3, padding=1, rng=rng)
        self.conv_out = nets.Conv(self.store, "conv_out", w, LATENT_CHANNELS, 3,
                                  padding=1, rng=rng)

    # -- forward ----------------------------------------------------------
    def _cond_planes(self, cond_list):
        if self.kind == "structure":
            for c in cond_list:
                if not isinstance(c, StructureConditioning):
                    raise ConditioningError(
                        f"structure denoiser needs StructureConditioning, got {type(c).__name__}")
            return np.stack([np.concatenate([c.garment_latent, c.masked_latent])
                             for c in cond_list])
        for c in cond_list:
            if not isinstance(c, TextureConditioning):
                raise ConditioningError(
                    f"texture denoiser needs TextureConditioning, got {type(c).__name__}")
        return np.stack([np.concatenate([c.mask_coarse, c.pose_coarse])
                         for c in cond_list])

    def forward(self, z_t, ts, cond_list):
        """z_t: Tensor (N, 4, 16, 16); ts: int array (N,); one conditioning
        record per sample."""
        n = z_t.shape[0]
        planes = T.Tensor(self._cond_planes(cond_list))
        x = T.concat([z_t, planes], axis=1)
        pe = T.Tensor(np.stack([nets.timestep_features(t, TEMB_DIM) for t in ts]))
        h1 = T.relu(nets.add_channel_bias(self.conv_in(x), self.temb1(pe)))
        h2 = T.relu(nets.add_channel_bias(self.down(h1), self.temb2(pe)))
        m = T.relu(self.mid(h2))
        if self.kind == "texture":
            m = self._attend(m, cond_list)
        u = T.relu(self.up(m))
        u = T.relu(self.fuse(T.concat([u, h1], axis=1)))
        return self.conv_out(u)

    def _attend(self, m, cond_list):
        n, d, h, w = m.shape
        onehot = np.zeros((len(cond_list), 1, len(TEXTURE_CLASSES)), dtype=np.float32)
        for i, c in enumerate(cond_list):
            onehot[i, 0, c.class_id] = 1.0
        class_tok = T.matmul(T.Tensor(onehot), self.class_emb)          # (N, 1, d)
        raw = T.Tensor(np.stack([swatch_tokens_raw(c.swatch) for c in cond_list]))
        patch_tok = self.tok_proj(raw)                                   # (N, 16, d)
        tokens = T.concat([class_tok, patch_tok], axis=1)
        q = T.reshape(m, (n, d, h * w))
        q = T._transpose_last(q)                                         # (N, HW, d)
        attended = T.cross_attention(self.q_proj(q), tokens)
        out = self.out_proj(attended)
        out = T.reshape(T._transpose_last(out), (n, d, h, w))
        return T.add(m, out)

    # -- cost / persistence ----------------------------------------------
    def describe(self):
        layers = [self.conv_in.describe(LATENT_SIZE), self.temb1.describe(),
                  self.down.describe(LATENT_SIZE), self.temb2.describe(),
                  self.mid.describe(LATENT_SIZE // 2)]
        if self.kind == "texture":
            d = 2 * self.base
            layers.append({"kind": "attention", "tokens": (LATENT_SIZE // 2) ** 2 + 17,
                           "dim": d})
            layers.append(self.tok_proj.describe())
        layers += [self.up.describe(LATENT_SIZE // 2), self.fuse.describe(LATENT_SIZE),
                   self.conv_out.describe(LATENT_SIZE)]
        return layers

    def descriptor(self):
        return f"denoiser/kind={self.kind}/seed={self.seed}/trained={int(self.trained)}"

    def save(self, path, opt_state=True):
        arrays = dict(self.store.state_arrays())
        if opt_state:
            for name in self.store.names():
                arrays[f"opt.m.{name}"] = self.store._m[name]
                arrays[f"opt.v.{name}"] = self.store._v[name]
                arrays[f"opt.step.{name}"] = np.array([self.store._step[name]],
                                                      dtype=np.float32)
        storage.save_checkpoint(path, self.descriptor(), arrays)

    @classmethod
    def load(cls, path):
        desc, arrays = storage.load_checkpoint(path)
        fields = dict(p.split("=") for p in desc.split("/")[1:])
        model = cls(fields["kind"], int(fields["seed"]))
        params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
        model.store.load_arrays(params)
        for name in model.store.names():
            if f"opt.m.{name}" in arrays:
                model.store._m[name] = arrays[f"opt.m.{name}"].astype(np.float32)
                model.store._v[name] = arrays[f"opt.v.{name}"].astype(np.float32)
                model.store._step[name] = int(arrays[f"opt.step.{name}"][0])
        model.trained = fields.get("trained") == "1"
        return model


def predict_noise(model, z_t, t, conditioning, allow_untrained=False):
    """Noise prediction for one latent; z_t is a (4, 16, 16) array."""
    if not model.trained and not allow_untrained:
        raise RuntimeError("denoiser has not been trained (pass allow_untrained for tests)")
    z = T.Tensor(np.asarray(z_t, dtype=np.float32)[None])
    out = model.forward(z, [t], [conditioning])
    return out.data[0]


# ---------------------------------------------------------------------------
# training

def _box_filter3(img):
    """3x3 box filter, one pass, edge-clamped (structure-bias knob)."""
    padded = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0


def training_targets(kind, instances, spaces, lowpass=True):
    """Clean latents z0 in the model's own space."""
    if kind == "structure":
        imgs = np.stack([_box_filter3(i.person_canvas) if lowpass else i.person_canvas
                         for i in instances])
        return spaces["S"].encode(imgs)
    imgs = np.stack([i.person_canvas for i in instances])
    return spaces["T"].encode(imgs)


def train_denoiser(kind, instances, spaces, schedule, steps=700, batch=8, lr=1e-3,
                   lr_final=1e-4, weight_decay=1e-5, seed=0, lowpass=True,
                   log_path=None, ckpt_path=None, start_step=0, model=None):
    """Train (or resume) a denoiser on the epsilon-prediction objective.

    Cosine lr ramp from lr to lr_final over the full schedule. The per-step
    RNG is derived from (seed, step), so resuming from a checkpoint at step
    k with the same total step count reproduces the un-resumed trajectory
    bit-exactly.
    """
    if model is None:
        model = Denoiser(kind, seed)
    if kind not in KINDS:
        raise ValueError(f"unknown denoiser kind {kind!r}")
    z0 = training_targets(kind, instances, spaces, lowpass=lowpass)
    conds = [build_conditioning(kind, inst, spaces) for inst in instances]
    log = []
    for step in range(start_step, steps):
        rng = np.random.default_rng(np.random.PCG64([seed, 0xD0, step]))
        idx = rng.integers(0, len(instances), size=batch)
        ts = rng.integers(0, schedule.t_train, size=batch)
        eps = rng.standard_normal((batch, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE)
                                  ).astype(np.float32)
        z_t = np.stack([forward_noise(z0[i], int(t), e, schedule)
                        for i, t, e in zip(idx, ts, eps)]).astype(np.float32)
        pred = model.forward(T.Tensor(z_t), ts, [conds[i] for i in idx])
        loss = T.mse(pred, T.Tensor(eps))
        val = float(loss.data)
        if not np.isfinite(val):
            raise T.NumericsError(f"denoiser[{kind}] loss diverged at step {step}")
        # plain float: a np.float64 lr would upcast the float32 params
        step_lr = float(lr_final + 0.5 * (lr - lr_final)
                        * (1 + np.cos(np.pi * step / steps)))
        model.store.zero_grad()
        loss.backward()
        T.adamw_step(model.store, model.store.grads(), lr=step_lr,
                     weight_decay=weight_decay)
        log.append((step, val))
    model.trained = True
    if log_path:
        storage.write_csv(log_path, ("step", "loss"), log)
    if ckpt_path:
        model.save(ckpt_path)
    return model


def heldout_eps_mse(model, instances, spaces, schedule, n_draws=64, seed=999,
                    lowpass=True):
    """Mean ||eps - eps_hat||^2 over held-out noisings, and the eps variance
    baseline it must beat."""
    z0 = training_targets(model.kind, instances, spaces, lowpass=lowpass)
    conds = [build_conditioning(model.kind, inst, spaces) for inst in instances]
    rng = np.random.default_rng(np.random.PCG64(seed))
    errs, base = [], []
    for d in range(n_draws):
        i = int(rng.integers(0, len(instances)))
        t = int(rng.integers(0, schedule.t_train))
        eps = rng.standard_normal(z0[i].shape).astype(np.float32)
        z_t = forward_noise(z0[i], t, eps, schedule).astype(np.float32)
        pred = predict_noise(model, z_t, t, conds[i])
        errs.append(float(np.mean((pred - eps) ** 2)))
        base.append(float(np.mean(eps ** 2)))
    return float(np.mean(errs)), float(np.mean(base))


def bias_probe(models, eval_instances, bundle, seeds=range(4)):
    """Score single-model generations; certifies the engineered bias gap.

    Returns {kind: {"iou_mean", "iou_std", "spec_mean", "spec_std"}} where
    the means pool instances and seeds and the stds are taken over per-seed
    means, the spread relevant for a margin-vs-seed-noise comparison.
    """
    from . import pipeline
    from .metrics import garment_iou, spectrum_distance
    out = {}
    for kind, model in models.items():
        per_seed_iou, per_seed_spec = [], []
        for s in seeds:
            ious, specs = [], []
            for inst in eval_instances:
                img = pipeline.run_single(kind, inst, bundle, seed=int(s))
                ious.append(garment_iou(img, inst))
                specs.append(spectrum_distance(img, inst.person_canvas,
                                               inst.garment_mask_gt))
            per_seed_iou.append(np.mean(ious))
            per_seed_spec.append(np.mean(specs))
        out[kind] = {"iou_mean": float(np.mean(per_seed_iou)),
                     "iou_std": float(np.std(per_seed_iou)),
                     "spec_mean": float(np.mean(per_seed_spec)),
                     "spec_std": float(np.std(per_seed_spec))}
    return out
