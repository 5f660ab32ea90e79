"""Optimization loop: AdamW, one-cycle schedule, early stopping, checkpoints.

The same hyperparameters drive pretraining and finetuning. Each epoch runs
seeded-shuffled batches (the last, possibly partial, batch is kept — the loss
normalizes by its true size), then evaluates the median relative retrieval
rank on the validation split, with the whole split as the retrieval set.
Training stops when that metric has not improved for `early_stop_patience`
epochs or at `max_epochs`, whichever comes first; the best parameters are
kept.

Per-epoch batch order is derived statelessly from (shuffle seed, epoch), so
training resumed from a checkpoint (params + optimizer moments + step) is
bit-identical to uninterrupted training.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import encoder as enc
from . import objective as obj
from .errors import InvalidSpecError, StepRejectedError
from .rng import philox

MIN_IMPROVEMENT = 1e-6  # strictly-lower-by margin for early stopping


@dataclass(frozen=True)
class OneCycleConfig:
    max_lr: float = 2e-4
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if not 0.0 < self.pct_start < 1.0:
            raise InvalidSpecError("pct_start must lie in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4              # optimizer base rate; per-step rate comes from the schedule
    batch_size: int = 128
    max_epochs: int = 100
    onecycle: OneCycleConfig = field(default_factory=OneCycleConfig)
    early_stop_patience: int = 10
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    mode: str = "pretrain"        # pretrain | finetune
    dtype: str = "float32"        # float64 for bit-determinism checks
    symmetric_loss: bool = False
    head_noise: float = 1e-3

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise InvalidSpecError("patience must be >= 1")
        if self.batch_size < 2:
            raise InvalidSpecError("contrastive batches need >= 2 examples")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: enc.EncoderParams) -> "OptimizerState":
        return cls(m={k: np.zeros_like(a) for k, a in params.arrays.items()},
                   v={k: np.zeros_like(a) for k, a in params.arrays.items()},
                   step=0)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def record(self, epoch: int, train_loss: float, val_median_rank: float,
               lr: float, wall_time: float) -> None:
        self.epochs.append({"epoch": epoch, "train_loss": train_loss,
                            "val_median_rank": val_median_rank,
                            "lr": lr, "wall_time": wall_time})

    def loss_sequence(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]

    def to_json(self) -> str:
        return json.dumps({"epochs": self.epochs, "best_epoch": self.best_epoch,
                           "stop_reason": self.stop_reason}, indent=1)


def onecycle_lr(step: int, total_steps: int, cfg: OneCycleConfig) -> float:
    """Piecewise-linear one-cycle rate: ramp to max_lr, then anneal far below it."""
    if total_steps <= 0:
        raise InvalidSpecError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InvalidSpecError(f"step {step} outside [0, {total_steps}]")
    initial = cfg.max_lr / cfg.div_factor
    final = initial / cfg.final_div_factor
    peak_step = cfg.pct_start * total_steps
    if step <= peak_step:
        frac = step / peak_step
        return initial + frac * (cfg.max_lr - initial)
    frac = (step - peak_step) / (total_steps - peak_step)
    return cfg.max_lr + frac * (final - cfg.max_lr)


def adamw_step(params: enc.EncoderParams, grads: enc.GradientSet,
               state: OptimizerState, lr: float,
               cfg: TrainConfig) -> tuple[enc.EncoderParams, OptimizerState]:
    """One decoupled-weight-decay Adam step; returns new params and state."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise StepRejectedError(f"non-finite gradients for {bad}", bad)
    b1, b2 = cfg.betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_arrays = {}
    new_m = {}
    new_v = {}
    for k, theta in params.arrays.items():
        g = grads[k].astype(theta.dtype, copy=False)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        step_dir = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta
        new_arrays[k] = (theta - lr * step_dir).astype(theta.dtype)
        new_m[k] = m
        new_v[k] = v
    # keep the learnable log-temperature in a numerically safe range
    new_arrays["t_prime"] = np.clip(new_arrays["t_prime"],
                                    -obj.T_PRIME_CLAMP, obj.T_PRIME_CLAMP)
    new_params = enc.EncoderParams(config=params.config, arrays=new_arrays,
                                   buffers=dict(params.buffers))
    return new_params, OptimizerState(m=new_m, v=new_v, step=t)


def contrastive_loss_and_grads(params: enc.EncoderParams, batch: np.ndarray,
                               targets: np.ndarray, symmetric: bool = False
                               ) -> tuple[float, enc.GradientSet]:
    """End-to-end loss and gradients for one batch (targets already z-scored)."""
    U = enc.forward(params, batch)
    loss, dU, _, dt_prime = obj.loss_and_grads_from_embeddings(
        U, targets, params.t_prime, symmetric)
    grads = enc.backward(params, batch, dU)
    grads["t_prime"] = grads["t_prime"] + np.asarray(dt_prime, dtype=params.dtype)
    return loss, grads


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = philox(seed, epoch, 0x5870)
    return rng.permutation(n)


def _forward_in_batches(params: enc.EncoderParams, X: np.ndarray,
                        batch_size: int = 512) -> np.ndarray:
    outs = [enc.forward(params, X[i:i + batch_size])
            for i in range(0, X.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def validation_median_rank(params: enc.EncoderParams, X_val: np.ndarray,
                           Y_val: np.ndarray) -> float:
    from .evaluation import relative_ranks
    U = _forward_in_batches(params, X_val)
    return float(np.median(relative_ranks(U, Y_val)))


@dataclass
class TrainState:
    """Everything needed to resume training mid-run, bit-exactly."""
    params: enc.EncoderParams
    opt: OptimizerState
    epoch: int = 0


def train(params: enc.EncoderParams,
          X_train: np.ndarray, Y_train: np.ndarray,
          X_val: np.ndarray, Y_val: np.ndarray,
          cfg: TrainConfig,
          resume: TrainState | None = None,
          log=None) -> tuple[enc.EncoderParams, TrainHistory]:
    """Optimize the contrastive objective with early stopping on val median rank.

    X_* are (N, n_channels, T) brain windows, Y_* the z-scored target vectors.
    Returns the best parameters seen and the epoch-level history.
    """
    if X_train.shape[0] == 0 or X_val.shape[0] == 0:
        raise InvalidSpecError("train and val sets must be nonempty")
    dtype = cfg.np_dtype
    X_train = np.asarray(X_train, dtype=dtype)
    Y_train = np.asarray(Y_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=dtype)
    Y_val = np.asarray(Y_val, dtype=np.float64)

    state = resume or TrainState(params=params.astype(dtype),
                                 opt=OptimizerState.zeros_like(params.astype(dtype)))
    n = X_train.shape[0]
    batches_per_epoch = int(np.ceil(n / cfg.batch_size))
    total_steps = cfg.max_epochs * batches_per_epoch

    history = TrainHistory()
    best_params = state.params.copy()
    best_metric = np.inf
    best_epoch = -1

    for epoch in range(state.epoch, cfg.max_epochs):
        t_start = time.time()
        order = _epoch_order(cfg.seed, epoch, n)
        epoch_loss = 0.0
        diverged = False
        lr = float("nan")
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if idx.size < 2:
                continue  # a 1-element tail carries no contrastive signal
            lr = onecycle_lr(state.opt.step, total_steps, cfg.onecycle)
            loss, grads = contrastive_loss_and_grads(
                state.params, X_train[idx], Y_train[idx], cfg.symmetric_loss)
            if not np.isfinite(loss):
                diverged = True
                break
            state.params, state.opt = adamw_step(state.params, grads, state.opt, lr, cfg)
            epoch_loss += loss * idx.size
        if diverged:
            history.stop_reason = "divergence"
            history.best_epoch = best_epoch
            return best_params, history

        val_rank = validation_median_rank(state.params, X_val, Y_val)
        history.record(epoch, epoch_loss / n, val_rank, lr, time.time() - t_start)
        if log is not None:
            log(f"epoch {epoch:3d}  loss {epoch_loss / n:.4f}  "
                f"val_median_rank {val_rank:.4f}  lr {lr:.2e}")
        if val_rank < best_metric - MIN_IMPROVEMENT:
            best_metric = val_rank
            best_epoch = epoch
            best_params = state.params.copy()
        state.epoch = epoch + 1
        if epoch - best_epoch >= cfg.early_stop_patience:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"
    history.best_epoch = best_epoch
    return best_params, history


def finetune(pretrained: enc.EncoderParams,
             X_train: np.ndarray, Y_train_raw: np.ndarray,
             X_val: np.ndarray, Y_val_raw: np.ndarray,
             cfg: TrainConfig, log=None):
    """Attach a linear head, refit target z-scoring on the task train split,
    then train all weights with the pretraining hyperparameters.

    Returns (params_best, history, task_stats); raw (un-z-scored) targets go
    in, the refit stats come out for evaluating with the same normalization.
    """
    from .features import apply_zscore, fit_zscore

    if X_train.shape[1] != pretrained.config.n_channels:
        raise InvalidSpecError(
            f"task data has {X_train.shape[1]} channels, checkpoint expects "
            f"{pretrained.config.n_channels}")
    params = pretrained if pretrained.config.with_head else enc.attach_head(
        pretrained, noise_scale=cfg.head_noise, seed=cfg.seed)
    params = params.astype(cfg.np_dtype)
    stats = fit_zscore(Y_train_raw, source_split="task-train")
    params.buffers["zscore_mean"] = stats.mean.copy()
    params.buffers["zscore_std"] = stats.std.copy()
    if cfg.max_epochs == 0:
        return params, TrainHistory(stop_reason="max_epochs"), stats
    best, history = train(params, X_train, apply_zscore(Y_train_raw, stats),
                          X_val, apply_zscore(Y_val_raw, stats), cfg, log=log)
    return best, history, stats
