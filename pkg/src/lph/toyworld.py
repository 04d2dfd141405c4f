"""Procedural try-on world and the two toy latent spaces.

Instances are rasterized from integers only (colors are uint8 triples,
geometry is integer grid tests), so generation is bit-identical across
platforms.  Two plain conv autoencoders, trained with different seeds and
differently initialized channel-mixing heads, define the distinct latent
spaces "S" and "T" that the rest of the system bridges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets, storage
from . import tensor as T

CANVAS = 64
SWATCH = 32
LATENT_CHANNELS = 4
LATENT_SIZE = 16

TEXTURE_CLASSES = ("plain", "stripes", "checker", "dots")

# saturated garment colors, deliberately far from skin/background tones
GARMENT_COLORS = [
    (214, 40, 40), (0, 92, 230), (247, 201, 14), (26, 163, 62),
    (168, 32, 186), (20, 196, 207), (240, 130, 16), (120, 30, 220),
]
_SKIN_TONES = [(224, 172, 130), (198, 144, 106), (168, 118, 86), (140, 95, 70)]


@dataclass(frozen=True)
class TextureParams:
    kind: str
    period: int
    orientation: int          # stripes: 0 horizontal, 1 vertical, 2 diagonal
    color_a: tuple
    color_b: tuple

    def palette(self):
        cols = [np.array(self.color_a, dtype=np.float64) / 255.0]
        if self.kind != "plain":
            cols.append(np.array(self.color_b, dtype=np.float64) / 255.0)
        return cols

    def record(self):
        return f"{self.kind}|{self.period}|{self.orientation}|" \
               f"{'.'.join(map(str, self.color_a))}|{'.'.join(map(str, self.color_b))}"


@dataclass
class TryOnInstance:
    seed: int
    person_canvas: np.ndarray     # (64, 64, 3) float32 in [0, 1]
    garment_sample: np.ndarray    # (32, 32, 3)
    body_mask: np.ndarray         # (64, 64) uint8
    garment_mask_gt: np.ndarray   # (64, 64) uint8
    masked_person: np.ndarray
    pose_map: np.ndarray          # (2, 64, 64) float32
    texture_params: TextureParams

    @property
    def texture_class(self):
        return self.texture_params.kind

    @property
    def class_id(self):
        return TEXTURE_CLASSES.index(self.texture_params.kind)

    def garment_canvas(self):
        """Swatch tiled to full canvas size (conditioning input)."""
        reps = CANVAS // SWATCH
        return np.tile(self.garment_sample, (reps, reps, 1))


def _texture_value(y, x, params):
    """0 -> color_a, 1 -> color_b, from integer pixel coordinates."""
    p = params.period
    if params.kind == "plain":
        return 0
    if params.kind == "stripes":
        if params.orientation == 0:
            return (y // p) % 2
        if params.orientation == 1:
            return (x // p) % 2
        return ((x + y) // p) % 2
    if params.kind == "checker":
        return ((x // p) + (y // p)) % 2
    # dots: color_b discs on a color_a ground
    cy, cx = y % p, x % p
    r = p // 3
    return 1 if (cy - p // 2) ** 2 + (cx - p // 2) ** 2 <= r * r else 0


def _render_texture(h, w, params):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    ca = np.array(params.color_a, dtype=np.uint8)
    cb = np.array(params.color_b, dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            img[y, x] = cb if _texture_value(y, x, params) else ca
    return img


def generate_instance(seed, difficulty=None):
    """Deterministic instance from a u64 seed."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    difficulty = difficulty or {}

    kind = TEXTURE_CLASSES[int(rng.integers(4))]
    min_period = int(np.clip(difficulty.get("min_period", 6), 4, 16))
    period = int(rng.integers(min_period, min_period + 7))
    orientation = int(rng.integers(3))
    ia, ib = rng.choice(len(GARMENT_COLORS), size=2, replace=False)
    params = TextureParams(kind, period, orientation,
                           GARMENT_COLORS[int(ia)], GARMENT_COLORS[int(ib)])

    bg_v = int(rng.integers(25, 70))
    bg = (bg_v, int(np.clip(bg_v + int(rng.integers(-8, 9)), 0, 255)),
          int(np.clip(bg_v + int(rng.integers(-8, 9)), 0, 255)))
    skin = _SKIN_TONES[int(rng.integers(len(_SKIN_TONES)))]

    cx = 32 + int(rng.integers(-3, 4))
    half_w = int(rng.integers(10, 15))
    ty0 = 14 + int(rng.integers(-2, 3))
    ty1 = 50 + int(rng.integers(-2, 4))
    head_r = int(rng.integers(5, 8))
    g_top = ty0 + int(rng.integers(0, 4))
    g_height = int(rng.integers(16, 27))
    g_bottom = min(g_top + g_height, ty1)

    canvas = np.zeros((CANVAS, CANVAS, 3), dtype=np.uint8)
    canvas[:, :] = bg
    body = np.zeros((CANVAS, CANVAS), dtype=np.uint8)
    garment = np.zeros((CANVAS, CANVAS), dtype=np.uint8)

    hy, hx = ty0 - head_r - 2, cx
    for y in range(CANVAS):
        for x in range(CANVAS):
            in_torso = ty0 <= y < ty1 and cx - half_w <= x < cx + half_w
            in_head = (y - hy) ** 2 + (x - hx) ** 2 <= head_r * head_r
            leg_w = max(2, half_w // 3)
            in_legs = ty1 <= y < min(ty1 + 10, CANVAS) and (
                cx - half_w + 1 <= x < cx - half_w + 1 + leg_w
                or cx + half_w - 1 - leg_w <= x < cx + half_w - 1)
            if in_torso or in_head or in_legs:
                body[y, x] = 1
                canvas[y, x] = skin
            if in_torso and g_top <= y < g_bottom:
                garment[y, x] = 1
                canvas[y, x] = (params.color_b if _texture_value(y, x, params)
                                else params.color_a)

    # clamp garment area into [0.08, 0.4] of the canvas (regenerate taller
    # region if the draw came out too small; geometry above makes the upper
    # bound unreachable)
    frac = garment.sum() / (CANVAS * CANVAS)
    if frac < 0.08:
        grow = g_bottom
        while garment.sum() / (CANVAS * CANVAS) < 0.08 and grow < ty1:
            garment[grow, cx - half_w:cx + half_w] = 1
            for x in range(cx - half_w, cx + half_w):
                canvas[grow, x] = (params.color_b if _texture_value(grow, x, params)
                                   else params.color_a)
            grow += 1

    pose = np.zeros((2, CANVAS, CANVAS), dtype=np.float32)
    ys, xs = np.nonzero(body)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    pose[0, ys, xs] = (xs - x0) / max(1, x1 - x0)
    pose[1, ys, xs] = (ys - y0) / max(1, y1 - y0)

    person = canvas.astype(np.float32) / 255.0
    sample = _render_texture(SWATCH, SWATCH, params).astype(np.float32) / 255.0
    masked = person * (1 - garment[..., None].astype(np.float32))

    return TryOnInstance(seed=seed, person_canvas=person, garment_sample=sample,
                         body_mask=body, garment_mask_gt=garment,
                         masked_person=masked, pose_map=pose, texture_params=params)


def generate_dataset(n, base_seed=0, difficulty=None):
    return [generate_instance(base_seed + i, difficulty) for i in range(n)]


def save_dataset(directory, instances, difficulty=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    storage.write_csv(directory / "meta.csv", ("key", "value"),
                      sorted((difficulty or {}).items()))
    rows = []
    for inst in instances:
        stem = f"inst_{inst.seed:08d}"
        person = directory / f"{stem}_person.ppm"
        swatch = directory / f"{stem}_garment.ppm"
        masked = directory / f"{stem}_masked.ppm"
        storage.save_ppm(person, inst.person_canvas)
        storage.save_ppm(swatch, inst.garment_sample)
        storage.save_ppm(masked, inst.masked_person)
        rows.append((inst.seed, inst.texture_class, inst.texture_params.record(),
                     person.name, swatch.name, masked.name))
    storage.write_csv(directory / "index.csv",
                      ("seed", "class", "params", "person", "garment", "masked"), rows)


def load_dataset(directory):
    """Instances are regenerated from the indexed seeds (generation is
    deterministic); stored pixels are authoritative and verified."""
    directory = Path(directory)
    difficulty = None
    if (directory / "meta.csv").exists():
        _, meta = storage.read_csv(directory / "meta.csv")
        difficulty = {k: int(v) for k, v in meta} or None
    _, rows = storage.read_csv(directory / "index.csv")
    instances = []
    for row in rows:
        inst = generate_instance(int(row[0]), difficulty)
        stored = np.rint(storage.load_ppm(directory / row[3]) * 255).astype(np.uint8)
        expect = np.rint(inst.person_canvas * 255).astype(np.uint8)
        if stored.tobytes() != expect.tobytes():
            raise storage.CheckpointError(f"dataset file {row[3]} does not match its seed")
        instances.append(inst)
    return instances


# ---------------------------------------------------------------------------
# latent spaces

class Autoencoder:
    """Conv autoencoder; the final encoder conv is the channel-mixing head
    whose per-space seed makes the two latent spaces statistically distinct.
    The decoder upsamples with depth-to-space (sub-pixel) stages: the renders
    are piecewise constant with 1-px edges, and transposed-conv decoders
    plateau several dB short on exactly those edges."""

    def __init__(self, space_id, seed):
        if space_id not in ("S", "T"):
            raise ValueError(f"space id must be 'S' or 'T', got {space_id!r}")
        self.space_id = space_id
        self.seed = seed
        self.store = T.ParameterStore()
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.e0 = nets.Conv(self.store, "enc0", 3, 32, 3, stride=2, padding=1, rng=rng)
        self.e1 = nets.Conv(self.store, "enc1", 32, 64, 3, stride=2, padding=1, rng=rng)
        self.e2 = nets.Conv(self.store, "enc2", 64, 64, 3, stride=1, padding=1, rng=rng)
        mix_rng = np.random.default_rng(np.random.PCG64(seed * 7919 + 13))
        mix_init = T.kaiming_uniform((4, 64, 3, 3), 64 * 9, mix_rng) * 1.5
        self.e3 = nets.Conv(self.store, "enc3_mix", 64, 4, 3, stride=1, padding=1,
                            rng=mix_rng, weight_init=mix_init)
        self.d0 = nets.Conv(self.store, "dec0", 4, 64, 3, stride=1, padding=1, rng=rng)
        self.d1 = nets.Conv(self.store, "dec1", 64, 256, 3, stride=1, padding=1, rng=rng)
        self.d2 = nets.Conv(self.store, "dec2", 64, 64, 3, stride=1, padding=1, rng=rng)
        self.d3 = nets.Conv(self.store, "dec3", 64, 12, 3, stride=1, padding=1, rng=rng)

    def encode_t(self, x):
        h = T.relu(self.e0(x))
        h = T.relu(self.e1(h))
        h = T.relu(self.e2(h))
        return self.e3(h)

    def decode_t(self, z):
        h = T.relu(self.d0(z))
        h = T.depth_to_space(T.relu(self.d1(h)), 2)
        h = T.relu(self.d2(h))
        return T.sigmoid(T.depth_to_space(self.d3(h), 2))

    def encode(self, images):
        """(N, H, W, 3) or single (H, W, 3) float image -> latents array."""
        single = images.ndim == 3
        batch = images[None] if single else images
        x = T.Tensor(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))
        z = self.encode_t(x).data
        return z[0] if single else z

    def decode(self, latents):
        single = latents.ndim == 3
        batch = latents[None] if single else latents
        out = self.decode_t(T.Tensor(np.asarray(batch, dtype=np.float32))).data
        img = out.transpose(0, 2, 3, 1)
        return img[0] if single else img

    def describe(self):
        return [self.e0.describe(64), self.e1.describe(32), self.e2.describe(16),
                self.e3.describe(16), self.d0.describe(16), self.d1.describe(16),
                self.d2.describe(32), self.d3.describe(32)]

    def descriptor(self):
        return f"autoencoder/space={self.space_id}/seed={self.seed}"

    def save(self, path):
        storage.save_checkpoint(path, self.descriptor(), self.store.state_arrays())

    @classmethod
    def load(cls, path):
        desc, arrays = storage.load_checkpoint(path)
        fields = dict(p.split("=") for p in desc.split("/")[1:])
        ae = cls(fields["space"], int(fields["seed"]))
        ae.store.load_arrays(arrays)
        return ae


@dataclass
class LatentState:
    """A 4-channel latent tagged with its timestep and latent-space id."""
    data: np.ndarray
    t: int
    space: str

    def __post_init__(self):
        if self.space not in ("S", "T"):
            raise ValueError(f"latent space tag must be 'S' or 'T', got {self.space!r}")


def training_images(instances):
    """All canvases the autoencoders must reconstruct."""
    imgs = []
    for inst in instances:
        imgs.append(inst.person_canvas)
        imgs.append(inst.masked_person)
        imgs.append(inst.garment_canvas())
    return np.stack(imgs)


def psnr(a, b):
    err = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if err == 0:
        return float("inf")
    return -10.0 * np.log10(err)


def train_autoencoder(space_id, instances, steps=9000, batch=8, lr=3e-3,
                      lr_final=1e-4, weight_decay=1e-5, seed=None, log_path=None):
    """Train one latent space; returns the trained Autoencoder.

    Cosine lr ramp from lr to lr_final; at the default budget on the default
    dataset size this reaches the 28 dB held-out reconstruction target."""
    if not instances:
        raise ValueError("autoencoder training needs a non-empty dataset")
    if seed is None:
        seed = {"S": 101, "T": 202}[space_id]
    ae = Autoencoder(space_id, seed)
    images = training_images(instances)
    rng = np.random.default_rng(np.random.PCG64(seed + 1))
    log = []
    for step in range(steps):
        # plain float: a np.float64 lr would upcast the float32 params
        step_lr = float(lr_final + 0.5 * (lr - lr_final)
                        * (1 + np.cos(np.pi * step / steps)))
        idx = rng.integers(0, len(images), size=batch)
        x = T.Tensor(np.ascontiguousarray(images[idx].transpose(0, 3, 1, 2)))
        recon = ae.decode_t(ae.encode_t(x))
        loss = T.mse(recon, x)
        val = float(loss.data)
        if not np.isfinite(val):
            raise T.NumericsError(f"autoencoder[{space_id}] loss diverged at step {step}")
        ae.store.zero_grad()
        loss.backward()
        T.adamw_step(ae.store, ae.store.grads(), lr=step_lr, weight_decay=weight_decay)
        log.append((step, val))
    if log_path:
        storage.write_csv(log_path, ("step", "loss"), log)
    return ae


def reconstruction_psnr(ae, instances):
    images = np.stack([inst.person_canvas for inst in instances])
    recon = ae.decode(ae.encode(images))
    return psnr(recon, images)


DIVERGENCE_FEATURE_DIM = 16


def latent_features(ae, instances, dim=DIVERGENCE_FEATURE_DIM):
    from .metrics import random_projection
    images = np.stack([inst.person_canvas for inst in instances])
    lat = ae.encode(images).reshape(len(instances), -1)
    proj = random_projection(lat.shape[1], dim)
    return lat @ proj


def latent_space_divergence(space_a, space_b, instances):
    """Gaussian-moment (Frechet) distance between the two encoders' latent
    distributions over the same instances."""
    from .metrics import feature_stats, frechet_gaussian
    fa = latent_features(space_a, instances)
    fb = latent_features(space_b, instances)
    mu_a, cov_a = feature_stats(fa)
    mu_b, cov_b = feature_stats(fb)
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)
