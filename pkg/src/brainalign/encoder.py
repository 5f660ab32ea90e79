"""The trainable brain module.

Architecture (applied to a batch of 3-second, n-channel windows at 40 Hz,
shape (B, n, 120)):

1. per-timestep linear projection n -> hidden_dim
2. a stack of residual blocks, each two dilated temporal convolutions
   (kernel 3, "same" padding) with a GELU between them
3. additive attention over time: score_t = v . tanh(W h_t + b), softmax over
   the 120 steps, weighted sum
4. final linear hidden_dim -> out_dim, plus an optional linear head
   (attached for finetuning, initialized at identity-plus-noise)

Forward and backward are plain numpy; `backward` returns exact reverse-mode
gradients of the forward map, verified against central finite differences in
the test suite. Parameters are treated as immutable: every update produces a
new parameter set, so concurrent readers are safe.

The learnable log-temperature of the contrastive loss (`t_prime`) lives here
as a scalar parameter so that checkpoints capture the full trainable state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import InvalidSpecError
from .rng import philox

CKPT_MAGIC = b"ckpt1\x00\x00\x00"
WINDOW_SAMPLES = 120

GradientSet = dict  # name -> array, shape-congruent with EncoderParams.arrays


@dataclass(frozen=True)
class EncoderConfig:
    n_channels: int
    out_dim: int
    hidden_dim: int = 320
    n_blocks: int = 5
    kernel_size: int = 3
    dilation_cycle: tuple[int, ...] = (1, 2, 4)
    attention_dim: int = 64
    n_times: int = WINDOW_SAMPLES
    with_head: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_channels", "out_dim", "hidden_dim", "n_blocks",
                     "kernel_size", "attention_dim", "n_times"):
            if getattr(self, name) <= 0:
                raise InvalidSpecError(f"{name} must be positive")
        if self.kernel_size % 2 == 0:
            raise InvalidSpecError("kernel_size must be odd for same-padding")
        if not self.dilation_cycle:
            raise InvalidSpecError("dilation_cycle must be nonempty")

    def dilation(self, block: int) -> int:
        return self.dilation_cycle[block % len(self.dilation_cycle)]


@dataclass
class EncoderParams:
    """Named trainable arrays plus non-trainable buffers (e.g. z-score stats)."""

    config: EncoderConfig
    arrays: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return self.arrays["in_proj.W"].dtype

    @property
    def t_prime(self) -> float:
        return float(self.arrays["t_prime"])

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "EncoderParams":
        return EncoderParams(config=self.config,
                             arrays={k: v.copy() for k, v in self.arrays.items()},
                             buffers={k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(config=self.config,
                             arrays={k: v.astype(dtype) for k, v in self.arrays.items()},
                             buffers=dict(self.buffers))


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(config: EncoderConfig, dtype=np.float32) -> EncoderParams:
    """Deterministic initialization from config.seed (Philox stream)."""
    rng = philox(config.seed)
    h, a, k = config.hidden_dim, config.attention_dim, config.kernel_size
    arrays: dict[str, np.ndarray] = {}
    arrays["in_proj.W"] = _he_uniform(rng, (config.n_channels, h), config.n_channels, dtype)
    arrays["in_proj.b"] = np.zeros(h, dtype=dtype)
    for i in range(config.n_blocks):
        for conv in ("conv1", "conv2"):
            arrays[f"block{i}.{conv}.W"] = _he_uniform(rng, (k, h, h), k * h, dtype)
            arrays[f"block{i}.{conv}.b"] = np.zeros(h, dtype=dtype)
    arrays["attn.W"] = _he_uniform(rng, (h, a), h, dtype)
    arrays["attn.b"] = np.zeros(a, dtype=dtype)
    arrays["attn.v"] = _he_uniform(rng, (a,), a, dtype)
    arrays["out.W"] = _he_uniform(rng, (h, config.out_dim), h, dtype)
    arrays["out.b"] = np.zeros(config.out_dim, dtype=dtype)
    arrays["t_prime"] = np.zeros((), dtype=dtype)
    params = EncoderParams(config=config, arrays=arrays)
    if config.with_head:
        params = attach_head(replace_config(params, with_head=False),
                             noise_scale=0.0, seed=config.seed)
    return params


def replace_config(params: EncoderParams, **kwargs) -> EncoderParams:
    return EncoderParams(config=replace(params.config, **kwargs),
                         arrays=dict(params.arrays), buffers=dict(params.buffers))


def attach_head(params: EncoderParams, noise_scale: float = 1e-3,
                seed: int = 0) -> EncoderParams:
    """Append a d->d linear head at identity-plus-noise; prior arrays unchanged."""
    if params.config.with_head:
        raise InvalidSpecError("head already present")
    d = params.config.out_dim
    dtype = params.dtype
    rng = philox(seed, 0x4EAD)
    W = np.eye(d, dtype=dtype)
    if noise_scale > 0:
        W = W + (noise_scale * rng.standard_normal((d, d))).astype(dtype)
    arrays = dict(params.arrays)
    arrays["head.W"] = W
    arrays["head.b"] = np.zeros(d, dtype=dtype)
    return EncoderParams(config=replace(params.config, with_head=True),
                         arrays=arrays, buffers=dict(params.buffers))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _conv_stack(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """(B, T, H) -> (B, T, k*H): shifted copies for a same-padded dilated conv."""
    b, t, h = x.shape
    pad = dilation * (k - 1) // 2
    xp = np.zeros((b, t + 2 * pad, h), dtype=x.dtype)
    xp[:, pad:pad + t, :] = x
    return np.concatenate([xp[:, j * dilation:j * dilation + t, :] for j in range(k)],
                          axis=2)


def _conv_forward(x: np.ndarray, W: np.ndarray, bias: np.ndarray,
                  dilation: int) -> tuple[np.ndarray, np.ndarray]:
    k, h, _ = W.shape
    stack = _conv_stack(x, k, dilation)
    y = stack.reshape(-1, k * h) @ W.reshape(k * h, h)
    return y.reshape(x.shape) + bias, stack


def _conv_backward(dy: np.ndarray, stack: np.ndarray, W: np.ndarray,
                   dilation: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b, t, h = dy.shape
    k = W.shape[0]
    dy_flat = dy.reshape(-1, h)
    dW = (stack.reshape(-1, k * h).T @ dy_flat).reshape(k, h, h)
    db = dy_flat.sum(axis=0)
    dstack = (dy_flat @ W.reshape(k * h, h).T).reshape(b, t, k, h)
    pad = dilation * (k - 1) // 2
    dxp = np.zeros((b, t + 2 * pad, h), dtype=dy.dtype)
    for j in range(k):
        dxp[:, j * dilation:j * dilation + t, :] += dstack[:, :, j, :]
    return dxp[:, pad:pad + t, :], dW, db


def _check_batch(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    cfg = params.config
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1] != cfg.n_channels or batch.shape[2] != cfg.n_times:
        raise InvalidSpecError(
            f"batch shape {batch.shape} incompatible with (B, {cfg.n_channels}, {cfg.n_times})")
    return batch.astype(params.dtype, copy=False)


def _forward_cached(params: EncoderParams, batch: np.ndarray) -> tuple[np.ndarray, dict]:
    cfg = params.config
    A = params.arrays
    x = _check_batch(params, batch)
    xt = np.ascontiguousarray(np.transpose(x, (0, 2, 1)))   # (B, T, n)
    h = xt @ A["in_proj.W"] + A["in_proj.b"]
    cache: dict = {"xt": xt, "blocks": []}
    for i in range(cfg.n_blocks):
        dil = cfg.dilation(i)
        a1, stack1 = _conv_forward(h, A[f"block{i}.conv1.W"], A[f"block{i}.conv1.b"], dil)
        g = _gelu(a1)
        c, stack2 = _conv_forward(g, A[f"block{i}.conv2.W"], A[f"block{i}.conv2.b"], dil)
        cache["blocks"].append({"a1": a1, "stack1": stack1, "stack2": stack2, "dil": dil})
        h = h + c
    z = h @ A["attn.W"] + A["attn.b"]
    u = np.tanh(z)
    scores = u @ A["attn.v"]                                # (B, T)
    m = scores.max(axis=1, keepdims=True)
    e = np.exp(scores - m)
    alpha = e / e.sum(axis=1, keepdims=True)
    pooled = np.einsum("bt,bth->bh", alpha, h)
    out = pooled @ A["out.W"] + A["out.b"]
    cache.update(h=h, u=u, alpha=alpha, pooled=pooled, pre_head=out)
    if cfg.with_head:
        out = out @ A["head.W"] + A["head.b"]
    return out, cache


def forward(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    """Embed a batch of brain windows: (B, n, T) -> (B, out_dim)."""
    out, _ = _forward_cached(params, batch)
    return out


def attention_weights(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    """Per-example softmax weights over the time axis, shape (B, T)."""
    _, cache = _forward_cached(params, batch)
    return cache["alpha"]


def backward(params: EncoderParams, batch: np.ndarray,
             upstream_grad: np.ndarray) -> GradientSet:
    """Exact reverse-mode gradients of `forward` w.r.t. every trainable array.

    `t_prime` does not enter the forward map, so its entry is zero here; the
    loss contributes it separately. Buffers are non-trainable and absent.
    """
    cfg = params.config
    A = params.arrays
    out, cache = _forward_cached(params, batch)
    dout = np.asarray(upstream_grad, dtype=params.dtype)
    if dout.shape != out.shape:
        raise InvalidSpecError(f"upstream grad shape {dout.shape} != output {out.shape}")

    grads: GradientSet = {}
    if cfg.with_head:
        pre = cache["pre_head"]
        grads["head.W"] = pre.T @ dout
        grads["head.b"] = dout.sum(axis=0)
        dout = dout @ A["head.W"].T

    pooled, h, u, alpha = cache["pooled"], cache["h"], cache["u"], cache["alpha"]
    grads["out.W"] = pooled.T @ dout
    grads["out.b"] = dout.sum(axis=0)
    dpooled = dout @ A["out.W"].T

    dalpha = np.einsum("bh,bth->bt", dpooled, h)
    dh = alpha[:, :, None] * dpooled[:, None, :]
    dscores = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    grads["attn.v"] = np.einsum("bta,bt->a", u, dscores)
    du = dscores[:, :, None] * A["attn.v"][None, None, :]
    dz = du * (1.0 - u * u)
    grads["attn.W"] = cache["h"].reshape(-1, cfg.hidden_dim).T @ dz.reshape(-1, cfg.attention_dim)
    grads["attn.b"] = dz.sum(axis=(0, 1))
    dh = dh + dz @ A["attn.W"].T

    for i in reversed(range(cfg.n_blocks)):
        blk = cache["blocks"][i]
        dc = dh  # residual: gradient flows both into the block and around it
        dg, dW2, db2 = _conv_backward(dc, blk["stack2"], A[f"block{i}.conv2.W"], blk["dil"])
        grads[f"block{i}.conv2.W"] = dW2
        grads[f"block{i}.conv2.b"] = db2
        da1 = dg * _gelu_grad(blk["a1"])
        dx, dW1, db1 = _conv_backward(da1, blk["stack1"], A[f"block{i}.conv1.W"], blk["dil"])
        grads[f"block{i}.conv1.W"] = dW1
        grads[f"block{i}.conv1.b"] = db1
        dh = dh + dx

    grads["in_proj.W"] = cache["xt"].reshape(-1, cfg.n_channels).T @ dh.reshape(-1, cfg.hidden_dim)
    grads["in_proj.b"] = dh.sum(axis=(0, 1))
    grads["t_prime"] = np.zeros((), dtype=params.dtype)
    return grads


# ---------------------------------------------------------------------------
# ckpt1 checkpoint format
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {"f32": "<f4", "f64": "<f8"}


def _dtype_tag(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "f32"
    if a.dtype == np.float64:
        return "f64"
    raise InvalidSpecError(f"checkpoint arrays must be float32/float64, got {a.dtype}")


def history_digest(history_json: str) -> str:
    return hashlib.sha256(history_json.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, params: EncoderParams, step: int = 0,
                    metric_digest: str = "", opt_state=None) -> Path:
    """Serialize params (+ optional optimizer moments) to the ckpt1 format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs: list[tuple[str, str, np.ndarray]] = []
    for name in sorted(params.arrays):
        blobs.append((name, "param", params.arrays[name]))
    for name in sorted(params.buffers):
        blobs.append((name, "buffer", params.buffers[name]))
    if opt_state is not None:
        for name in sorted(opt_state.m):
            blobs.append((name, "opt_m", opt_state.m[name]))
        for name in sorted(opt_state.v):
            blobs.append((name, "opt_v", opt_state.v[name]))
    header = {
        "format": "ckpt1",
        "config": asdict(params.config),
        "step": int(step),
        "metric_digest": metric_digest,
        "opt_step": int(opt_state.step) if opt_state is not None else None,
        "blobs": [{"name": n, "group": g, "shape": list(a.shape),
                   "dtype": _dtype_tag(a)} for n, g, a in blobs],
    }
    head = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for _, _, a in blobs:
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return path


@dataclass
class CheckpointBundle:
    params: EncoderParams
    step: int
    metric_digest: str
    opt_state: "object | None" = None


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    from .trainer import OptimizerState  # deferred to avoid an import cycle

    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise InvalidSpecError(f"{path}: not a ckpt1 checkpoint")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    cfg_doc = dict(header["config"])
    cfg_doc["dilation_cycle"] = tuple(cfg_doc["dilation_cycle"])
    config = EncoderConfig(**cfg_doc)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {},
                                                "opt_m": {}, "opt_v": {}}
    for blob in header["blobs"]:
        dt = np.dtype(_DTYPE_TAGS[blob["dtype"]])
        n = int(np.prod(blob["shape"])) if blob["shape"] else 1
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(blob["shape"]).copy()
        off += n * dt.itemsize
        groups[blob["group"]][blob["name"]] = arr
    params = EncoderParams(config=config, arrays=groups["param"], buffers=groups["buffer"])
    opt_state = None
    if groups["opt_m"]:
        opt_state = OptimizerState(m=groups["opt_m"], v=groups["opt_v"],
                                   step=header.get("opt_step") or 0)
    return CheckpointBundle(params=params, step=header["step"],
                            metric_digest=header.get("metric_digest", ""),
                            opt_state=opt_state)
