"""The latent adapter: a compact strided-conv encoder/decoder that
translates latents from space S to space T at a given noise level, plus
paired-latent dataset construction and its MSE training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets, storage
from . import tensor as T
from .nets import sinusoidal_pe
from .schedule import forward_noise
from .toyworld import LATENT_CHANNELS, LATENT_SIZE, LatentState

# "paper" lands within 20% of the 1M-parameter budget for this layer
# structure; "toy" is the fast default used everywhere else
PRESETS = {
    "paper": (4, 64, 128, 256),
    "toy": (4, 32, 64, 128),
}
PE_DIM = 128


class AdapterError(ValueError):
    pass


class AdapterNet:
    """Encoder: three strided 3x3 convs; timestep embedding injected at the
    bottleneck; decoder: three transposed 4x4 convs.  The final decoder
    layer carries no activation (latents are signed); strict_relu restores
    the all-ReLU variant for comparison."""

    def __init__(self, preset="toy", seed=0, pe_dim=PE_DIM, strict_relu=False):
        if preset not in PRESETS:
            raise AdapterError(f"unknown preset {preset!r}")
        c0, c1, c2, c3 = PRESETS[preset]
        self.preset = preset
        self.seed = seed
        self.pe_dim = pe_dim
        self.strict_relu = strict_relu
        self.channels = (c0, c1, c2, c3)
        self.store = T.ParameterStore()
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.e0 = nets.Conv(self.store, "enc0", c0, c1, 3, stride=2, padding=1, rng=rng)
        self.e1 = nets.Conv(self.store, "enc1", c1, c2, 3, stride=2, padding=1, rng=rng)
        self.e2 = nets.Conv(self.store, "enc2", c2, c3, 3, stride=2, padding=1, rng=rng)
        self.t_proj = nets.Dense(self.store, "t_proj", pe_dim, c3, rng=rng)
        self.d0 = nets.ConvT(self.store, "dec0", c3, c2, 4, stride=2, padding=1, rng=rng)
        self.d1 = nets.ConvT(self.store, "dec1", c2, c1, 4, stride=2, padding=1, rng=rng)
        self.d2 = nets.ConvT(self.store, "dec2", c1, c0, 4, stride=2, padding=1, rng=rng)

    def forward(self, z, ts):
        """z: Tensor (N, 4, 16, 16); ts: iterable of ints."""
        pe = T.Tensor(np.stack([sinusoidal_pe(max(int(t), 0), self.pe_dim)
                                for t in ts]).astype(np.float32))
        h = T.relu(self.e0(z))
        h = T.relu(self.e1(h))
        h = T.relu(self.e2(h))
        h = nets.add_channel_bias(h, self.t_proj(pe))
        h = T.relu(self.d0(h))
        h = T.relu(self.d1(h))
        out = self.d2(h)
        if self.strict_relu:
            out = T.relu(out)
        return out

    def param_count(self):
        return self.store.num_values()

    def describe(self):
        s = LATENT_SIZE
        return [self.e0.describe(s), self.e1.describe(s // 2), self.e2.describe(s // 4),
                self.t_proj.describe(), self.d0.describe(s // 8), self.d1.describe(s // 4),
                self.d2.describe(s // 2)]

    def descriptor(self):
        return f"adapter/preset={self.preset}/seed={self.seed}/strict_relu={int(self.strict_relu)}"

    def save(self, path):
        storage.save_checkpoint(path, self.descriptor(), self.store.state_arrays())

    @classmethod
    def load(cls, path):
        desc, arrays = storage.load_checkpoint(path)
        fields = dict(p.split("=") for p in desc.split("/")[1:])
        net = cls(fields["preset"], int(fields["seed"]),
                  strict_relu=fields.get("strict_relu") == "1")
        net.store.load_arrays(arrays)
        return net


def adapt(net, state: LatentState):
    """Translate a latent from space S to space T at its noise level."""
    if state.space != "S":
        raise AdapterError(f"adapter input must be tagged 'S', got {state.space!r} "
                           "(double adaptation?)")
    z = np.asarray(state.data, dtype=np.float32)
    if z.shape != (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE):
        raise AdapterError(f"unexpected latent shape {z.shape}")
    out = net.forward(T.Tensor(z[None]), [state.t]).data[0]
    return LatentState(data=out, t=state.t, space="T")


# ---------------------------------------------------------------------------
# paired-latent dataset

@dataclass
class PairedLatentDataset:
    z_s: np.ndarray   # (N, 4, 16, 16)
    z_t: np.ndarray   # (N, 4, 16, 16)
    ts: np.ndarray    # (N,) training timesteps
    mode: str

    def __len__(self):
        return len(self.ts)

    def save(self, path, index_path=None):
        arrays = {"z_s": self.z_s, "z_t": self.z_t,
                  "ts": self.ts.astype(np.float32)}
        storage.save_checkpoint(path, f"paired_latents/mode={self.mode}", arrays)
        if index_path:
            storage.write_csv(index_path, ("entry", "timestep"),
                              [(i, int(t)) for i, t in enumerate(self.ts)])

    @classmethod
    def load(cls, path):
        desc, arrays = storage.load_checkpoint(path)
        mode = dict(p.split("=") for p in desc.split("/")[1:])["mode"]
        return cls(z_s=arrays["z_s"], z_t=arrays["z_t"],
                   ts=arrays["ts"].astype(np.int64), mode=mode)


def build_paired_dataset(mode, instances, spaces, schedule, ladder,
                         models=None, seed=0, sigma_mode="zero"):
    """forward mode: both encoders' clean latents noised with the same eps
    at every ladder timestep.  trajectory mode: deterministic reverse
    trajectories of both backbones from a shared initial draw, paired by
    step index."""
    if mode not in ("forward", "trajectory"):
        raise AdapterError(f"unknown paired-dataset mode {mode!r}")
    rng = np.random.default_rng(np.random.PCG64([seed, 0xA0]))
    zs, zt, ts = [], [], []
    if mode == "forward":
        for inst in instances:
            z0_s = spaces["S"].encode(inst.person_canvas)
            z0_t = spaces["T"].encode(inst.person_canvas)
            for t in ladder.indices:
                eps = rng.standard_normal(z0_s.shape).astype(np.float32)
                zs.append(forward_noise(z0_s, int(t), eps, schedule))
                zt.append(forward_noise(z0_t, int(t), eps, schedule))
                ts.append(int(t))
    else:
        if models is None or not all(models.get(k) and models[k].trained
                                     for k in ("structure", "texture")):
            raise AdapterError("trajectory mode needs trained structure and texture backbones")
        from . import backbones as B
        from .schedule import ddpm_step
        for inst in instances:
            conds = {k: B.build_conditioning(k, inst, spaces)
                     for k in ("structure", "texture")}
            z_pair = {}
            init = rng.standard_normal(
                (LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE)).astype(np.float32)
            for kind in ("structure", "texture"):
                z = init.copy()
                traj = []
                for k in range(ladder.step_count):
                    t, t_prev = ladder.step_pair(k)
                    traj.append((int(t), z.copy()))
                    eps_hat = B.predict_noise(models[kind], z, t, conds[kind])
                    z = ddpm_step(z, eps_hat, t, None, schedule, t_prev=t_prev,
                                  sigma_mode="zero")
                z_pair[kind] = traj
            for (t, a), (_, b) in zip(z_pair["structure"], z_pair["texture"]):
                zs.append(a)
                zt.append(b)
                ts.append(t)
    return PairedLatentDataset(z_s=np.stack(zs).astype(np.float32),
                               z_t=np.stack(zt).astype(np.float32),
                               ts=np.asarray(ts, dtype=np.int64), mode=mode)


def linear_mix_task(instances, space, t_max, seed=77):
    """Constructed sanity task: targets are the source latents under a
    fixed random invertible 4x4 channel mix.

    Sources are real encoder latents (compressible), not white noise; the
    adapter's spatial bottleneck cannot transport an i.i.d. signal."""
    imgs = np.stack([i.person_canvas for i in instances])
    z_s = np.asarray(space.encode(imgs), dtype=np.float32)
    rng = np.random.default_rng(np.random.PCG64(seed))
    while True:
        mix = (rng.standard_normal((LATENT_CHANNELS, LATENT_CHANNELS)) * 0.5
               ).astype(np.float32)
        if abs(np.linalg.det(mix)) > 0.1:
            break
    z_t = np.einsum("ij,njhw->nihw", mix, z_s)
    ts = rng.integers(0, t_max, size=len(z_s))
    return PairedLatentDataset(z_s=z_s, z_t=z_t, ts=ts, mode="forward")


def batch_loss(net, z_s, z_t, ts):
    """Mean squared error of the adapter on one mini-batch."""
    pred = net.forward(T.Tensor(np.asarray(z_s, dtype=np.float32)), ts)
    return T.mse(pred, T.Tensor(np.asarray(z_t, dtype=np.float32)))


def train_adapter(net, paired, steps=2000, batch=8, lr=1e-4, weight_decay=1e-5,
                  seed=0, log_path=None, ckpt_path=None):
    """Minimize E ||A(z_s, pe(t)) - z_t||^2 with AdamW."""
    if len(paired) == 0:
        raise AdapterError("paired dataset is empty")
    log = []
    for step in range(steps):
        rng = np.random.default_rng(np.random.PCG64([seed, 0xAD, step]))
        idx = rng.integers(0, len(paired), size=batch)
        loss = batch_loss(net, paired.z_s[idx], paired.z_t[idx], paired.ts[idx])
        val = float(loss.data)
        if not np.isfinite(val):
            raise T.NumericsError(f"adapter loss diverged at step {step}")
        net.store.zero_grad()
        loss.backward()
        T.adamw_step(net.store, net.store.grads(), lr=lr, weight_decay=weight_decay)
        log.append((step, val))
    if log_path:
        storage.write_csv(log_path, ("step", "loss"), log)
    if ckpt_path:
        net.save(ckpt_path)
    return net


def dataset_mse(net, paired, limit=256):
    """Adapter MSE over (up to limit) dataset entries, batched."""
    n = min(len(paired), limit)
    total = 0.0
    for start in range(0, n, 16):
        end = min(start + 16, n)
        loss = batch_loss(net, paired.z_s[start:end], paired.z_t[start:end],
                          paired.ts[start:end])
        total += float(loss.data) * (end - start)
    return total / n
