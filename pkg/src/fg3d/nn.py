"""Permutation-invariant conditional denoiser, forward and backward in numpy.

The condition encoder is a shared per-point MLP with a global max-pool head
producing a condition vector c. The denoiser applies shared per-point layers
to [point, pooled global feature, sinusoidal time embedding], modulated per
block by feature-wise scale/shift computed from c. Output rows follow input
rows (permutation equivariance); pooling makes both encoders order-invariant.

Gradients are hand-derived; tests check every parameter tensor against
central finite differences on a float64 path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class DenoiserConfig:
    cond_widths: tuple = (128, 256)
    d_c: int = 128
    point_width: int = 128
    time_dim: int = 64
    width: int = 256
    n_blocks: int = 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cond_widths"] = list(self.cond_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["cond_widths"] = tuple(d["cond_widths"])
        return cls(**d)


def parameter_spec(cfg: DenoiserConfig) -> list[tuple[str, tuple]]:
    """Declared (name, shape) order; checkpoint tensors follow this order.

    The input projection over [point, pooled feature, time embedding] is kept
    as three blocks (in_wx / in_wg / in_wt) so the pooled and time features
    can be projected per batch row instead of per point.
    """
    w1, w2 = cfg.cond_widths
    spec = [
        ("ce_w1", (3, w1)),
        ("ce_b1", (w1,)),
        ("ce_w2", (w1, w2)),
        ("ce_b2", (w2,)),
        ("ce_w3", (w2, cfg.d_c)),
        ("ce_b3", (cfg.d_c,)),
        ("pe_w", (3, cfg.point_width)),
        ("pe_b", (cfg.point_width,)),
        ("in_wx", (3, cfg.width)),
        ("in_wg", (cfg.point_width, cfg.width)),
        ("in_wt", (cfg.time_dim, cfg.width)),
        ("in_b", (cfg.width,)),
    ]
    for i in range(cfg.n_blocks):
        spec += [
            (f"blk{i}_w", (cfg.width, cfg.width)),
            (f"blk{i}_b", (cfg.width,)),
            (f"blk{i}_ws", (cfg.d_c, cfg.width)),
            (f"blk{i}_bs", (cfg.width,)),
            (f"blk{i}_wu", (cfg.d_c, cfg.width)),
            (f"blk{i}_bu", (cfg.width,)),
        ]
    spec += [("out_w", (cfg.width, 3)), ("out_b", (3,))]
    return spec


def init_params(cfg: DenoiserConfig, seed: int, dtype=np.float32) -> dict:
    """Fan-in scaled Gaussian weights; modulation maps start at zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_spec(cfg):
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        elif "_ws" in name or "_wu" in name:
            # small but nonzero so the modulation path carries gradient early
            params[name] = rng.normal(0.0, 0.05 / np.sqrt(shape[0]), shape).astype(dtype)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape).astype(dtype)
    return params


def time_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = np.exp(-np.log(10000.0) * exponents)[None, :]
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def _silu(z):
    sig = np.tanh(0.5 * z)  # overflow-free sigmoid via tanh, built in place
    sig += 1.0
    sig *= 0.5
    return z * sig, sig


def _silu_grad(z, sig):
    out = 1.0 - sig
    out *= z
    out += 1.0
    out *= sig
    return out


def _maxpool(a):
    """Max over axis 1 with argmax rows for the backward scatter."""
    idx = np.argmax(a, axis=1)
    pooled = np.take_along_axis(a, idx[:, None, :], axis=1)[:, 0, :]
    return pooled, idx


def _scatter_pool_grad(shape, idx, grad):
    out = np.zeros(shape, dtype=grad.dtype)
    b = np.arange(shape[0])[:, None]
    f = np.arange(shape[2])[None, :]
    out[b, idx, f] = grad
    return out


def forward(params: dict, cfg: DenoiserConfig, x, t, cond=None, cache: dict | None = None):
    """Predicted per-point noise for x (B, N, 3) at steps t, conditioned on cond.

    cond is (B, M, 3) or None; absent conditioning uses a zero condition vector.
    Pass a dict as cache to retain intermediates for the backward pass.
    Per-point layers run on row-flattened (B*N, .) views so each layer is a
    single GEMM.
    """
    dtype = params["out_w"].dtype
    x = np.asarray(x, dtype=dtype)
    b, n, _ = x.shape
    temb = time_embedding(t, cfg.time_dim, dtype)

    if cond is not None:
        cond = np.asarray(cond, dtype=dtype)
        m = cond.shape[1]
        cf = cond.reshape(b * m, 3)
        ce_z1 = cf @ params["ce_w1"] + params["ce_b1"]
        ce_a1, ce_s1 = _silu(ce_z1)
        ce_z2 = ce_a1 @ params["ce_w2"] + params["ce_b2"]
        ce_a2, ce_s2 = _silu(ce_z2)
        pool, pool_idx = _maxpool(ce_a2.reshape(b, m, -1))
        c = pool @ params["ce_w3"] + params["ce_b3"]
    else:
        c = np.zeros((b, cfg.d_c), dtype=dtype)

    xf = x.reshape(b * n, 3)
    pe_z = xf @ params["pe_w"] + params["pe_b"]
    pe_a, pe_s = _silu(pe_z)
    g, g_idx = _maxpool(pe_a.reshape(b, n, cfg.point_width))

    # per-batch-row projections broadcast over points, avoiding a (B*N, .) concat
    row_feat = g @ params["in_wg"] + temb @ params["in_wt"] + params["in_b"]
    in_z = (xf @ params["in_wx"]).reshape(b, n, cfg.width)
    in_z = in_z + row_feat[:, None, :]
    in_z = in_z.reshape(b * n, cfg.width)
    h, in_s = _silu(in_z)

    blocks = []
    for i in range(cfg.n_blocks):
        z = h @ params[f"blk{i}_w"] + params[f"blk{i}_b"]
        s = c @ params[f"blk{i}_ws"] + params[f"blk{i}_bs"]
        u = c @ params[f"blk{i}_wu"] + params[f"blk{i}_bu"]
        a = z.reshape(b, n, cfg.width) * (1.0 + s)[:, None, :]
        a += u[:, None, :]
        a = a.reshape(b * n, cfg.width)
        h_next, a_sig = _silu(a)
        blocks.append({"h_in": h, "z": z, "s": s, "a": a, "a_sig": a_sig})
        h = h_next

    eps = (h @ params["out_w"] + params["out_b"]).reshape(b, n, 3)

    if cache is not None:
        cache.update(
            x=x, temb=temb, cond=cond, c=c, pe_z=pe_z, pe_a=pe_a, pe_s=pe_s,
            g=g, g_idx=g_idx, in_z=in_z, in_s=in_s, blocks=blocks, h_last=h,
        )
        if cond is not None:
            cache.update(
                ce_z1=ce_z1, ce_a1=ce_a1, ce_s1=ce_s1, ce_z2=ce_z2,
                ce_s2=ce_s2, pool=pool, pool_idx=pool_idx,
            )
    return eps


def loss_and_grads(params: dict, cfg: DenoiserConfig, x, t, target, cond=None):
    """Mean squared noise-prediction error and gradients for every parameter."""
    cache: dict = {}
    eps = forward(params, cfg, x, t, cond, cache)
    dtype = eps.dtype
    target = np.asarray(target, dtype=dtype)
    diff = eps - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))

    grads = {name: np.zeros_like(val) for name, val in params.items()}
    b, n, _ = cache["x"].shape
    d_eps = ((2.0 / diff.size) * diff).reshape(b * n, 3)

    h_last = cache["h_last"]
    grads["out_w"] = h_last.T @ d_eps
    grads["out_b"] = d_eps.sum(axis=0)
    d_h = d_eps @ params["out_w"].T

    d_c = np.zeros_like(cache["c"])
    for i in reversed(range(cfg.n_blocks)):
        blk = cache["blocks"][i]
        d_a = d_h * _silu_grad(blk["a"], blk["a_sig"])
        d_a3 = d_a.reshape(b, n, cfg.width)
        d_z = (d_a3 * (1.0 + blk["s"])[:, None, :]).reshape(b * n, cfg.width)
        d_s = np.einsum("bnw,bnw->bw", d_a3, blk["z"].reshape(b, n, cfg.width))
        d_u = d_a3.sum(axis=1)
        grads[f"blk{i}_ws"] = cache["c"].T @ d_s
        grads[f"blk{i}_bs"] = d_s.sum(axis=0)
        grads[f"blk{i}_wu"] = cache["c"].T @ d_u
        grads[f"blk{i}_bu"] = d_u.sum(axis=0)
        d_c += d_s @ params[f"blk{i}_ws"].T + d_u @ params[f"blk{i}_wu"].T
        grads[f"blk{i}_w"] = blk["h_in"].T @ d_z
        grads[f"blk{i}_b"] = d_z.sum(axis=0)
        d_h = d_z @ params[f"blk{i}_w"].T

    d_in_z = d_h * _silu_grad(cache["in_z"], cache["in_s"])
    d_in_rows = d_in_z.reshape(b, n, cfg.width).sum(axis=1)  # grad of broadcast row_feat
    grads["in_wx"] = cache["x"].reshape(b * n, 3).T @ d_in_z
    grads["in_wg"] = cache["g"].T @ d_in_rows
    grads["in_wt"] = cache["temb"].T @ d_in_rows
    grads["in_b"] = d_in_rows.sum(axis=0)

    d_g = d_in_rows @ params["in_wg"].T
    d_pe_a = _scatter_pool_grad((b, n, cfg.point_width), cache["g_idx"], d_g)
    d_pe_z = d_pe_a.reshape(b * n, cfg.point_width) * _silu_grad(cache["pe_z"], cache["pe_s"])
    grads["pe_w"] = cache["x"].reshape(b * n, 3).T @ d_pe_z
    grads["pe_b"] = d_pe_z.sum(axis=0)

    if cache["cond"] is not None:
        w1, w2 = cfg.cond_widths
        m = cache["cond"].shape[1]
        grads["ce_w3"] = cache["pool"].T @ d_c
        grads["ce_b3"] = d_c.sum(axis=0)
        d_pool = d_c @ params["ce_w3"].T
        d_ce_a2 = _scatter_pool_grad((b, m, w2), cache["pool_idx"], d_pool)
        d_ce_z2 = d_ce_a2.reshape(b * m, w2) * _silu_grad(cache["ce_z2"], cache["ce_s2"])
        grads["ce_w2"] = cache["ce_a1"].T @ d_ce_z2
        grads["ce_b2"] = d_ce_z2.sum(axis=0)
        d_ce_a1 = d_ce_z2 @ params["ce_w2"].T
        d_ce_z1 = d_ce_a1 * _silu_grad(cache["ce_z1"], cache["ce_s1"])
        grads["ce_w1"] = cache["cond"].reshape(b * m, 3).T @ d_ce_z1
        grads["ce_b1"] = d_ce_z1.sum(axis=0)

    return loss, grads


class Adam:
    """Adaptive-moment optimizer with global gradient-norm clipping."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 10.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        scale = 1.0
        if self.clip_norm > 0 and total > self.clip_norm:
            scale = self.clip_norm / total
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            g = g * scale
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def config_to_json(cfg: DenoiserConfig, extra: dict | None = None) -> str:
    payload = {"architecture": cfg.to_dict()}
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True)
