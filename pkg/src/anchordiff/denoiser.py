"""Denoisers: the exact mixture oracle and a small trainable MLP.

Both expose the same interface used by the samplers:

    predict_eps(x, t) -> eps_hat

with x shaped (N, F, C) in the denoiser's own model space (N items, F frames,
C channels) and t an integer step array broadcastable to (N, F). Per-frame
noise levels are first-class: the MLP embeds the step index of every frame
separately, so mixed assignments (clean history, noisy future) are
in-distribution after training.

Model space: each denoiser carries an optional per-channel affine normalizer
(offset, scale). Samplers run the diffusion entirely in model space and convert
clean quantities (contexts, anchors, outputs) at the boundary, which keeps the
unit-variance noise assumption intact.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .mixture import GaussianMixture, gmm_posterior_mean
from .schedule import DiffusionSchedule, build_schedule, forward_sample

log = logging.getLogger(__name__)

FORMAT_TAG = "anchordiff-denoiser-v1"


def _broadcast_steps(t, n, frames):
    t = np.asarray(t, dtype=int)
    if t.ndim == 0:
        return np.full((n, frames), int(t))
    if t.shape == (frames,):
        return np.broadcast_to(t, (n, frames)).copy()
    if t.shape == (n, frames):
        return t
    raise ValueError(f"step array shape {t.shape} not broadcastable to ({n}, {frames})")


class Normalizer:
    """Per-channel affine map between world units and model space."""

    def __init__(self, offset=None, scale=None, channels=None):
        if offset is None:
            self.offset = np.zeros(channels)
            self.scale = np.ones(channels)
        else:
            self.offset = np.asarray(offset, dtype=float)
            self.scale = np.asarray(scale, dtype=float)
            if np.any(self.scale <= 0):
                raise ValueError("normalizer scales must be positive")

    def to_model(self, values):
        return (np.asarray(values, dtype=float) - self.offset) / self.scale

    def to_world(self, values):
        return np.asarray(values, dtype=float) * self.scale + self.offset

    @property
    def is_identity(self):
        return np.all(self.offset == 0.0) and np.all(self.scale == 1.0)


class GmmOracleDenoiser:
    """Closed-form denoiser for mixture-distributed single-frame data.

    Converts the exact posterior mean E[x0 | x_t] into a noise estimate. Works
    in world units (identity normalizer) since the mixture is exact there.
    """

    kind = "gmm_oracle"
    frames = 1

    def __init__(self, gmm: GaussianMixture, sched: DiffusionSchedule):
        self.gmm = gmm
        self.sched = sched
        self.channels = gmm.dim
        self.normalizer = Normalizer(channels=gmm.dim)

    def predict_eps(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.channels:
            raise ValueError(f"expected (N, 1, {self.channels}) input, got {x.shape}")
        steps = _broadcast_steps(t, x.shape[0], 1)[:, 0]
        eps = np.zeros_like(x)
        for step in np.unique(steps):
            if step == 0:
                continue
            mask = steps == step
            pts = x[mask, 0, :]
            ab = self.sched.alpha_bars[int(step)]
            x0 = gmm_posterior_mean(pts, int(step), self.gmm, self.sched)
            eps[mask, 0, :] = (pts - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        return eps


def sinusoidal_embedding(steps, dim):
    """Standard sin/cos positional features of integer step indices.

    steps: integer array (...,); returns (..., dim) float64. dim must be even.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    angles = np.asarray(steps, dtype=float)[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


class MlpDenoiser:
    """Fully connected eps-prediction network over flattened frame stacks.

    Input per item: F frames of (C channels + time embedding of that frame's
    own step index), flattened. Output: the noise estimate for every frame.
    """

    kind = "mlp"

    def __init__(self, frames, channels, hidden=(256, 256), time_embed_dim=8,
                 normalizer=None, torch_seed=0):
        self.frames = int(frames)
        self.channels = int(channels)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_embed_dim = int(time_embed_dim)
        self.normalizer = normalizer or Normalizer(channels=channels)
        self.loss_history: list[float] = []
        torch.manual_seed(int(torch_seed))
        sizes = [self.frames * (self.channels + self.time_embed_dim)]
        sizes += list(self.hidden)
        layers = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            layers += [torch.nn.Linear(a, b), torch.nn.SiLU()]
        layers.append(torch.nn.Linear(sizes[-1], self.frames * self.channels))
        self.net = torch.nn.Sequential(*layers).double()

    def _features(self, x, steps):
        emb = sinusoidal_embedding(steps, self.time_embed_dim)
        feats = np.concatenate([x, emb], axis=-1)
        return feats.reshape(x.shape[0], -1)

    def predict_eps(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[1] != self.frames or x.shape[2] != self.channels:
            raise ValueError(
                f"expected (N, {self.frames}, {self.channels}) input, got {x.shape}")
        steps = _broadcast_steps(t, x.shape[0], self.frames)
        feats = torch.from_numpy(self._features(x, steps))
        with torch.no_grad():
            out = self.net(feats).numpy()
        eps = out.reshape(x.shape)
        eps[steps == 0] = 0.0
        return eps


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 256
    learning_rate: float = 1e-3
    hidden: tuple = (256, 256)
    time_embed_dim: int = 8
    uniform_prob: float = 0.5      # same step for every frame
    rolling_prob: float = 0.25     # leading clean frames, constant tail step
    clean_prob: float = 0.2        # per-frame zeroing rate in the independent pattern


def _sample_step_patterns(rng, batch, frames, t_max, cfg):
    """Per-frame step assignments covering the sampler's usage patterns."""
    steps = np.empty((batch, frames), dtype=int)
    mode = rng.random(batch)
    for i in range(batch):
        if mode[i] < cfg.uniform_prob or frames == 1:
            steps[i] = rng.integers(1, t_max + 1)
        elif mode[i] < cfg.uniform_prob + cfg.rolling_prob:
            clean = int(rng.integers(0, frames))          # 0..frames-1 leading zeros
            tail = int(rng.integers(1, t_max + 1))
            steps[i, :clean] = 0
            steps[i, clean:] = tail
        else:
            row = rng.integers(1, t_max + 1, size=frames)
            drop = rng.random(frames) < cfg.clean_prob
            row[drop] = 0
            if (row == 0).all():
                row[int(rng.integers(0, frames))] = int(rng.integers(1, t_max + 1))
            steps[i] = row
    return steps


def train_denoiser(dataset, sched, config, rng):
    """Fit an eps-prediction MLP to a clean dataset under the given schedule.

    dataset: (N, F, C) clean samples in world units. Returns an MlpDenoiser with
    the dataset's per-channel affine normalizer baked in and a per-epoch loss
    history. Zero epochs returns the freshly initialized network untouched.
    Raises RuntimeError if the loss goes non-finite.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 3:
        raise ValueError(f"dataset must be (N, F, C), got shape {data.shape}")
    n, frames, channels = data.shape
    if n < 1:
        raise ValueError("dataset is empty")

    flat = data.reshape(-1, channels)
    offset = flat.mean(axis=0)
    scale = np.maximum(flat.std(axis=0), 1e-8)
    normalizer = Normalizer(offset=offset, scale=scale)
    model_data = normalizer.to_model(data)

    torch_seed = int(rng.integers(2**31 - 1))
    den = MlpDenoiser(
        frames=frames,
        channels=channels,
        hidden=config.hidden,
        time_embed_dim=config.time_embed_dim,
        normalizer=normalizer,
        torch_seed=torch_seed,
    )
    if config.epochs == 0:
        return den

    opt = torch.optim.Adam(den.net.parameters(), lr=config.learning_rate)
    batches = max(1, int(np.ceil(n / config.batch_size)))
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(batches):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            if idx.size == 0:
                continue
            x0 = model_data[idx]
            steps = _sample_step_patterns(rng, idx.size, frames, sched.num_steps, config)
            eps = rng.standard_normal(x0.shape)
            x_t = forward_sample(x0, steps, eps, sched)
            feats = torch.from_numpy(den._features(x_t, steps))
            target = torch.from_numpy(eps.reshape(idx.size, -1))
            mask = torch.from_numpy(
                np.repeat(steps >= 1, channels, axis=1).astype(float))
            pred = den.net(feats)
            loss = torch.sum(mask * (pred - target) ** 2) / torch.clamp(mask.sum(), min=1.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = float(loss.item())
            if not np.isfinite(val):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, batch {b}")
            epoch_loss += val
        epoch_loss /= batches
        den.loss_history.append(epoch_loss)
        log.info("denoiser epoch %d/%d loss %.6f", epoch + 1, config.epochs, epoch_loss)
    return den


def eps_prediction_mse(den, dataset, sched, rng, draws=4):
    """Monte Carlo eps-MSE of a denoiser on held-out clean data (uniform steps)."""
    data = np.asarray(dataset, dtype=float)
    model_data = den.normalizer.to_model(data)
    total, count = 0.0, 0
    for _ in range(draws):
        steps = rng.integers(1, sched.num_steps + 1, size=(data.shape[0], data.shape[1]))
        eps = rng.standard_normal(model_data.shape)
        x_t = forward_sample(model_data, steps, eps, sched)
        pred = den.predict_eps(x_t, steps)
        total += float(np.sum((pred - eps) ** 2))
        count += eps.size
    return total / count


def save_denoiser(den, path):
    """Serialize a denoiser to a versioned JSON parameter file."""
    if den.kind == "gmm_oracle":
        payload = {
            "format": FORMAT_TAG,
            "kind": den.kind,
            "gmm": {
                "weights": den.gmm.weights.tolist(),
                "means": den.gmm.means.tolist(),
                "covariances": den.gmm.covariances.tolist(),
            },
            "schedule": {
                "num_steps": den.sched.num_steps,
                "beta_min": float(den.sched.betas[1]),
                "beta_max": float(den.sched.betas[-1]),
                "variance_kind": den.sched.variance_kind,
            },
        }
    elif den.kind == "mlp":
        tensors = {}
        for name, param in den.net.state_dict().items():
            arr = param.numpy().astype(np.float64)
            tensors[name] = {
                "shape": list(arr.shape),
                "dtype": "f8",
                "data": base64.b64encode(arr.tobytes()).decode("ascii"),
            }
        payload = {
            "format": FORMAT_TAG,
            "kind": den.kind,
            "arch": {
                "frames": den.frames,
                "channels": den.channels,
                "hidden": list(den.hidden),
                "time_embed_dim": den.time_embed_dim,
            },
            "normalizer": {
                "offset": den.normalizer.offset.tolist(),
                "scale": den.normalizer.scale.tolist(),
            },
            "loss_history": den.loss_history,
            "tensors": tensors,
        }
    else:
        raise ValueError(f"unknown denoiser kind {den.kind!r}")
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_denoiser(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported parameter file format {payload.get('format')!r}")
    kind = payload["kind"]
    if kind == "gmm_oracle":
        gmm = GaussianMixture(
            weights=np.array(payload["gmm"]["weights"]),
            means=np.array(payload["gmm"]["means"]),
            covariances=np.array(payload["gmm"]["covariances"]),
        )
        s = payload["schedule"]
        sched = build_schedule(s["num_steps"], s["beta_min"], s["beta_max"], s["variance_kind"])
        return GmmOracleDenoiser(gmm, sched)
    if kind == "mlp":
        arch = payload["arch"]
        norm = Normalizer(
            offset=np.array(payload["normalizer"]["offset"]),
            scale=np.array(payload["normalizer"]["scale"]),
        )
        den = MlpDenoiser(
            frames=arch["frames"],
            channels=arch["channels"],
            hidden=tuple(arch["hidden"]),
            time_embed_dim=arch["time_embed_dim"],
            normalizer=norm,
        )
        state = {}
        for name, spec in payload["tensors"].items():
            raw = base64.b64decode(spec["data"])
            arr = np.frombuffer(raw, dtype=np.float64).reshape(spec["shape"]).copy()
            state[name] = torch.from_numpy(arr)
        den.net.load_state_dict(state)
        den.loss_history = list(payload.get("loss_history", []))
        return den
    raise ValueError(f"unknown denoiser kind {kind!r}")
