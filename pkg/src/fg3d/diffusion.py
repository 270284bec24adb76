"""Conditional denoising diffusion over point clouds: schedule, training, sampling.

The forward process scales a normalized cloud by sqrt(alpha_bar_t) and adds
Gaussian noise; the denoiser is trained to predict that noise with a mean
squared error objective. Ancestral sampling runs the learned chain from pure
noise, optionally guided by an ALS condition cloud.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import geom, metrics, nn
from .geom import PointCloud
from ._util import derive_seed

CHECKPOINT_MAGIC = b"FG3D"
CHECKPOINT_VERSION = 1


class InvalidSchedule(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    """Training hit a non-finite loss; carries a diagnostic state dict."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with the derived per-step quantities.

    Arrays are indexed by t-1 for t in 1..T. Posterior variances use
    sigma_t^2 = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "posterior_var"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def make_schedule(T: int, beta0: float = 1e-4, betaT: float = 0.02) -> DiffusionSchedule:
    if not (0 < beta0 < betaT < 1) or T < 2:
        raise InvalidSchedule(f"need 0 < beta0 < betaT < 1 and T >= 2, got {beta0}, {betaT}, {T}")
    t = np.arange(1, T + 1, dtype=np.float64)
    betas = beta0 + (betaT - beta0) * (t - 1) / (T - 1)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev_bars = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_var = betas * (1.0 - prev_bars) / (1.0 - alpha_bars)
    return DiffusionSchedule(T, betas, alphas, alpha_bars, posterior_var)


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Forward corruption: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ShapeMismatch(f"x0 {x0.shape} vs noise {noise.shape}")
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must be in [1, {sched.T}]")
    abar = sched.alpha_bars[t - 1]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


@dataclass
class DenoiserWeights:
    """Architecture config plus the parameter tensors, in declared order."""

    config: nn.DenoiserConfig
    params: dict
    meta: dict = field(default_factory=dict)

    def copy(self) -> "DenoiserWeights":
        return DenoiserWeights(self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


def init_weights(config: nn.DenoiserConfig, seed: int) -> DenoiserWeights:
    return DenoiserWeights(config, nn.init_params(config, seed))


def denoise_predict(weights: DenoiserWeights, x_t: np.ndarray, t: int, cond=None) -> np.ndarray:
    """Predicted noise for a single cloud (N, 3); cond is (M, 3) or None."""
    x = np.asarray(x_t, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ShapeMismatch(f"x_t must be (N, 3), got {x.shape}")
    cond_b = None if cond is None else np.asarray(cond, dtype=np.float64)[None, :, :]
    out = nn.forward(weights.params, weights.config, x[None, :, :], np.array([t]), cond_b)
    return out[0]


@dataclass(frozen=True)
class TrainConfig:
    T: int = 1000
    beta0: float = 1e-4
    betaT: float = 0.02
    batch_size: int = 16
    n_points: int = 2048
    cond_points: int = 1024  # condition cloud resampled to at most this many
    learning_rate: float = 1e-3
    lr_decay: bool = False  # linear decay to lr/5 over the run; default off
    ema_decay: float = 0.0  # exponential weight averaging for the shipped model; 0 = off
    iterations: int = 2000
    seed: int = 0
    grad_clip: float = 10.0
    conditional: bool = True
    checkpoint_every: int = 250
    val_pairs: int = 10  # validation pairs per checkpoint
    val_points: int = 256  # generation size for validation metrics
    arch: nn.DenoiserConfig = nn.DenoiserConfig()

    def __post_init__(self):
        if self.n_points < 8:
            raise ValueError("n_points must be >= 8")
        for name in ("T", "batch_size", "learning_rate", "iterations"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    train_loss: float
    val_cd: float
    val_emd: float
    val_epc: float


@dataclass
class TrainHistory:
    checkpoints: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def add(self, ckpt: Checkpoint) -> None:
        if self.checkpoints and ckpt.iteration <= self.checkpoints[-1].iteration:
            raise ValueError("checkpoint iterations must strictly increase")
        self.checkpoints.append(ckpt)

    def to_dicts(self) -> list[dict]:
        return [vars(c) for c in self.checkpoints]


def _stratified_steps(T: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform per-element timesteps, stratified across the batch.

    Each element draws uniformly within a randomly assigned stratum of [1, T],
    so marginals stay uniform while batch losses lose most of their t-draw
    variance (the loss is spiky near t = 1).
    """
    edges = np.linspace(0.0, float(T), batch + 1)
    u = rng.random(batch)
    t = np.floor(edges[:-1] + u * (edges[1:] - edges[:-1])).astype(np.int64) + 1
    t = np.clip(t, 1, T)
    return t[rng.permutation(batch)]


def _pair_batch(pairs, cfg: TrainConfig, rng: np.random.Generator):
    """Stacked (x0, cond) batch with per-step random subsampling."""
    idx = rng.integers(0, len(pairs), size=cfg.batch_size)
    x0 = np.empty((cfg.batch_size, cfg.n_points, 3), dtype=np.float64)
    conds = None
    if cfg.conditional:
        m = min(cfg.cond_points, min(len(pairs[i].als) for i in idx))
        conds = np.empty((cfg.batch_size, m, 3), dtype=np.float64)
    for row, i in enumerate(idx):
        pair = pairs[i]
        sub_seed = int(rng.integers(0, 2**63 - 1))
        x0[row] = geom.subsample_fixed(pair.tls, cfg.n_points, sub_seed).points
        if conds is not None:
            conds[row] = geom.subsample_fixed(pair.als, conds.shape[1], sub_seed + 1).points
    return x0, conds


def _validation_metrics(weights, pairs, sched, cfg: TrainConfig, seed: int):
    """Mean CD / EMD / EPC of one generation per validation pair."""
    cds, emds, epcs = [], [], []
    for i, pair in enumerate(pairs[: cfg.val_pairs]):
        cond = pair.als.points if cfg.conditional else None
        gen = sample(weights, cond, cfg.val_points, sched, derive_seed(seed, "val", i))
        ref = geom.subsample_fixed(pair.tls, cfg.val_points, derive_seed(seed, "ref", i)).points
        cds.append(metrics.chamfer(gen, ref))
        emds.append(metrics.emd_exact(gen, ref))
        try:
            epcs.append(metrics.epc(gen, pair.als.points))
        except metrics.DegenerateHull:
            pass
    return (
        float(np.mean(cds)),
        float(np.mean(emds)),
        float(np.mean(epcs)) if epcs else float("nan"),
    )


def train(dataset, cfg: TrainConfig, val=None) -> tuple[DenoiserWeights, TrainHistory]:
    """Noise-prediction training over TLS/ALS pairs with periodic validation.

    Checkpoints (including iteration 0, the untrained model) record smoothed
    training loss and validation CD/EMD/EPC from generated samples.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset must be nonempty")
    val = list(val) if val else []
    sched = make_schedule(cfg.T, cfg.beta0, cfg.betaT)
    weights = init_weights(cfg.arch, derive_seed(cfg.seed, "init"))
    optimizer = nn.Adam(weights.params, lr=cfg.learning_rate, clip_norm=cfg.grad_clip)
    rng = np.random.default_rng(derive_seed(cfg.seed, "train"))
    history = TrainHistory()
    losses: list[float] = []
    ema = None
    if cfg.ema_decay > 0:
        ema = DenoiserWeights(cfg.arch, {k: v.copy() for k, v in weights.params.items()})

    def shipped() -> DenoiserWeights:
        return ema if ema is not None else weights

    def record(iteration: int) -> None:
        recent = losses[-100:]
        train_loss = float(np.mean(recent)) if recent else float("nan")
        if val:
            cd, emd, epc_v = _validation_metrics(
                shipped(), val, sched, cfg, derive_seed(cfg.seed, "ckpt", iteration)
            )
        else:
            cd = emd = epc_v = float("nan")
        history.add(Checkpoint(iteration, train_loss, cd, emd, epc_v))

    record(0)
    for step in range(1, cfg.iterations + 1):
        x0, conds = _pair_batch(dataset, cfg, rng)
        t = _stratified_steps(cfg.T, cfg.batch_size, rng)
        noise = rng.standard_normal(x0.shape)
        abar = sched.alpha_bars[t - 1][:, None, None]
        x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise
        if cfg.lr_decay:
            frac = step / cfg.iterations
            optimizer.lr = cfg.learning_rate * (1.0 - 0.9 * frac)
        loss, grads = nn.loss_and_grads(weights.params, weights.config, x_t, t, noise, conds)
        if not np.isfinite(loss):
            raise NonFiniteLoss(
                f"loss became non-finite at step {step}",
                {
                    "step": step,
                    "loss": loss,
                    "recent_losses": losses[-10:],
                    "param_norms": {k: float(np.linalg.norm(v)) for k, v in weights.params.items()},
                },
            )
        optimizer.step(weights.params, grads)
        if ema is not None:
            d = cfg.ema_decay
            for name, value in weights.params.items():
                ema.params[name] = d * ema.params[name] + (1.0 - d) * value
        losses.append(loss)
        if step % cfg.checkpoint_every == 0 or step == cfg.iterations:
            record(step)

    weights = shipped()
    weights.meta = {
        "trained_iterations": cfg.iterations,
        "T": cfg.T,
        "beta0": cfg.beta0,
        "betaT": cfg.betaT,
        "n_points": cfg.n_points,
        "conditional": cfg.conditional,
    }
    history.losses = losses
    return weights, history


def loss_monotone_fraction(losses, window: int = 100) -> float:
    """Fraction of consecutive smoothed-loss windows that do not increase.

    Window means are stochastic estimates, so an increase only counts when it
    exceeds one standard error of the difference between the two window means;
    flat-at-convergence trajectories are monotone under this reading, while a
    diverging run is not.
    """
    losses = np.asarray(losses, dtype=np.float64)
    n_windows = len(losses) // window
    if n_windows < 2:
        raise ValueError("need at least two full windows")
    chunks = losses[: n_windows * window].reshape(n_windows, window)
    means = chunks.mean(axis=1)
    ses = chunks.std(axis=1, ddof=1) / np.sqrt(window)
    diffs = means[1:] - means[:-1]
    allowance = np.sqrt(ses[1:] ** 2 + ses[:-1] ** 2)
    return float(np.mean(diffs <= allowance))


def sample(
    weights: DenoiserWeights,
    cond,
    n_points: int,
    sched: DiffusionSchedule,
    seed: int,
) -> np.ndarray:
    """Ancestral reverse-chain sampling from Gaussian noise; (n_points, 3)."""
    rng = np.random.default_rng(derive_seed(seed, "sample"))
    cond_b = None if cond is None else np.asarray(cond, dtype=np.float64)[None, :, :]
    x = rng.standard_normal((1, n_points, 3))
    for t in range(sched.T, 0, -1):
        eps_hat = nn.forward(weights.params, weights.config, x, np.array([t]), cond_b)
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        abar = sched.alpha_bars[t - 1]
        x = (x - (beta / np.sqrt(1.0 - abar)) * eps_hat.astype(np.float64)) / np.sqrt(alpha)
        if t > 1:
            x = x + np.sqrt(sched.posterior_var[t - 1]) * rng.standard_normal(x.shape)
    return x[0]


def ensemble_sample(
    weights: DenoiserWeights,
    cond,
    n_points: int,
    runs: int,
    sched: DiffusionSchedule,
    seed: int,
    merge_voxel: float = 0.0,
) -> np.ndarray:
    """Union of independent generations, optionally fused on a voxel grid."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    parts = [
        sample(weights, cond, n_points, sched, derive_seed(seed, "run", r))
        for r in range(runs)
    ]
    merged = np.vstack(parts)
    if merge_voxel > 0:
        merged = geom.voxel_downsample(PointCloud(merged), merge_voxel).points
    return merged


# ---------------------------------------------------------------------------
# Checkpoint file format: magic, version, length-prefixed JSON config, then
# parameter tensors in declared order as little-endian float32 with a shape
# header (u32 ndim, u32 dims...).
# ---------------------------------------------------------------------------


def save_checkpoint(path, weights: DenoiserWeights) -> None:
    config_json = nn.config_to_json(weights.config, {"meta": weights.meta}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_json)))
        fh.write(config_json)
        spec = nn.parameter_spec(weights.config)
        fh.write(struct.pack("<I", len(spec)))
        for name, shape in spec:
            tensor = np.asarray(weights.params[name], dtype="<f4")
            if tensor.shape != shape:
                raise ValueError(f"{name}: shape {tensor.shape} != declared {shape}")
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes(order="C"))


def load_checkpoint(path) -> DenoiserWeights:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        (json_len,) = struct.unpack("<I", fh.read(4))
        payload = json.loads(fh.read(json_len).decode("utf-8"))
        config = nn.DenoiserConfig.from_dict(payload["architecture"])
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        spec = nn.parameter_spec(config)
        if n_tensors != len(spec):
            raise ValueError(f"{path}: tensor count {n_tensors} != declared {len(spec)}")
        params = {}
        for name, shape in spec:
            (ndim,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            if dims != shape:
                raise ValueError(f"{path}: {name} shape {dims} != declared {shape}")
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims)
            params[name] = data.astype(np.float32)
    return DenoiserWeights(config, params, payload.get("meta", {}))


def schedule_from_weights(weights: DenoiserWeights) -> DiffusionSchedule:
    meta = weights.meta
    return make_schedule(int(meta["T"]), float(meta["beta0"]), float(meta["betaT"]))
