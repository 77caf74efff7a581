"""Siamese training with AdamW, linear warmup and antenna-masking strategies."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DivergenceError, NumericError, UsageError
from .metrics import PseudoDistanceProvider, sample_training_pairs
from .models import AntennaSubset, save_checkpoint
from .rngs import STREAM_TRAIN_BATCH, stream_rng
from .sim import CirDataset
from .tensor import ParamSet, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Strategy:
    """``fixed-n:<n_t>`` or ``random-n``."""

    kind: str
    n_t: int | None = None

    def __post_init__(self):
        if self.kind == "fixed-n":
            if self.n_t is None or self.n_t < 1:
                raise ConfigurationError(f"fixed-n needs n_t >= 1, got {self.n_t}")
        elif self.kind == "random-n":
            if self.n_t is not None:
                raise ConfigurationError("random-n takes no n_t")
        else:
            raise ConfigurationError(f"unknown strategy {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        text = text.strip().lower()
        if text == "random-n":
            return cls("random-n")
        if text.startswith("fixed-n:"):
            try:
                return cls("fixed-n", int(text.split(":", 1)[1]))
            except ValueError:
                pass
        raise ConfigurationError(f"strategy must be 'fixed-n:<k>' or 'random-n', got {text!r}")

    def __str__(self) -> str:
        return "random-n" if self.kind == "random-n" else f"fixed-n:{self.n_t}"

    def validate(self, a_max: int) -> None:
        if self.kind == "fixed-n" and not 1 <= self.n_t <= a_max:
            raise ConfigurationError(f"fixed-n:{self.n_t} needs 1 <= n_t <= a_max={a_max}")

    def descriptor(self) -> dict:
        return {"strategy": str(self), "kind": self.kind, "n_t": self.n_t}

    def draw(self, a_max: int, rng: np.random.Generator) -> AntennaSubset:
        if self.kind == "fixed-n":
            return sample_subset_fixed_n(a_max, self.n_t, rng)
        return sample_subset_random_n(a_max, rng)


@dataclass(frozen=True)
class TrainConfig:
    strategy: Strategy = field(default_factory=lambda: Strategy("random-n"))
    batch_size: int = 64
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    lr: float = 3e-4
    warmup_steps: int = 500
    weight_decay: float = 1e-4
    seed: int = 0
    metric: str = "fused-geodesic"

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight_decay must be nonnegative")

    def total_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return self.epochs * max(1, math.ceil(n_samples / self.batch_size))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "OptimizerState":
        return cls({p: np.zeros(t.shape) for p, t in params.items()},
                   {p: np.zeros(t.shape) for p, t in params.items()})


def siamese_loss(p_n, p_k, d_nk: float) -> float:
    diff = np.asarray(p_n, dtype=np.float64) - np.asarray(p_k, dtype=np.float64)
    return float((d_nk - math.sqrt(float(diff @ diff))) ** 2)


def siamese_batch_loss(p_n: Tensor, p_k: Tensor, d: np.ndarray,
                       weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean over pairs of ``(d - |p_n - p_k|)^2``; uniform weights by default."""
    resid = T.square(Tensor(d) - T.norm_lastdim(p_n - p_k))
    if weights is None:
        return T.mean_all(resid)
    w = np.asarray(weights, dtype=np.float64)
    return T.scale(T.sum_all(T.mul(resid, Tensor(w))), 1.0 / w.sum())


def adamw_step(params: ParamSet, grads: dict, state: OptimizerState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[ParamSet, OptimizerState]:
    """One AdamW update with decay decoupled from the adaptive step."""
    if set(grads) != set(params):
        raise UsageError("gradient paths do not match parameter paths")
    step = state.step + 1
    bc1, bc2 = 1 - beta1 ** step, 1 - beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for p, t in params.items():
        g = grads[p].data if isinstance(grads[p], Tensor) else np.asarray(grads[p])
        if g.shape != t.shape:
            raise UsageError(f"gradient for {p} has shape {g.shape}, parameter has {t.shape}")
        m = beta1 * state.m[p] + (1 - beta1) * g
        v = beta2 * state.v[p] + (1 - beta2) * g * g
        x = t.data - lr * weight_decay * t.data
        x = x - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[p], new_m[p], new_v[p] = x, m, v
    return ParamSet(new_params), OptimizerState(new_m, new_v, step)


def warmup_lr(step: int, warmup_steps: int, base_lr: float) -> float:
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def sample_subset_fixed_n(a_max: int, n_t: int, rng: np.random.Generator) -> AntennaSubset:
    if not 1 <= n_t <= a_max:
        raise ConfigurationError(f"n_t={n_t} outside [1, {a_max}]")
    return AntennaSubset(tuple(sorted(int(i) for i in rng.choice(a_max, size=n_t, replace=False))))


def sample_subset_random_n(a_max: int, rng: np.random.Generator) -> AntennaSubset:
    if a_max < 1:
        raise ConfigurationError("a_max must be >= 1")
    n_t = int(rng.integers(1, a_max + 1))
    return sample_subset_fixed_n(a_max, n_t, rng)


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    subset_size: int


@dataclass
class TrainResult:
    model: object
    log: list
    state: OptimizerState

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.log])


def pair_loss(model, params: ParamSet, dataset: CirDataset, n_idx, k_idx, d,
              subset: Sequence[int], weights=None) -> Tensor:
    """Mean Siamese loss for index pairs, both members seen through ``subset``."""
    ids = list(subset)
    b = len(n_idx)
    rows = np.concatenate([n_idx, k_idx])
    out = model.apply(params, dataset.taps[rows][:, ids], ids)
    return siamese_batch_loss(T.slice_rows(out, 0, b), T.slice_rows(out, b, 2 * b), d, weights)


def train(model, dataset: CirDataset, provider: PseudoDistanceProvider, config: TrainConfig,
          checkpoint_path=None, on_step: Callable | None = None,
          pair_weights: Callable | None = None, checkpoint_extra: dict | None = None) -> TrainResult:
    """Optimize ``model.params`` in place and return the per-step log.

    Each step draws one antenna subset and a batch of pairs; the subset is
    shared by both members of every pair.  ``pair_weights(n_idx, k_idx, d)``
    may supply per-pair loss weights.
    """
    a_max = model.config.a_max
    if dataset.a_max != a_max:
        raise ConfigurationError(f"model a_max={a_max} but dataset has {dataset.a_max} antennas")
    if provider.n != len(dataset):
        raise ConfigurationError("pseudo-distance provider was built for a different dataset")
    config.strategy.validate(a_max)
    params = model.params
    state = OptimizerState.zeros_like(params)
    history = []
    total = config.total_steps(len(dataset))
    for step in range(total):
        rng = stream_rng(config.seed, STREAM_TRAIN_BATCH, step)
        subset = config.strategy.draw(a_max, rng)
        n_idx, k_idx, d = sample_training_pairs(provider, len(dataset), config.batch_size, rng)
        weights = pair_weights(n_idx, k_idx, d) if pair_weights else None
        lr = warmup_lr(step, config.warmup_steps, config.lr)
        tape = Tape()
        tracked = params.track(tape)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = pair_loss(model, tracked, dataset, n_idx, k_idx, d, subset.ids, weights)
        except NumericError as exc:
            raise DivergenceError(f"non-finite activations at step {step} (lr={lr:.3g}): {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {step} (lr={lr:.3g}, subset={subset.ids})")
        grads = T.backward(loss, tape, tracked)
        params, state = adamw_step(params, grads, state, lr, weight_decay=config.weight_decay)
        history.append(StepLog(step, lr, value, len(subset)))
        if on_step is not None:
            on_step(step, subset, n_idx, k_idx, value)
        if step % 100 == 0:
            log.debug("step %d lr %.3g loss %.5g |S|=%d", step, lr, value, len(subset))
    model.params = params
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, config.strategy.descriptor(),
                        {"steps": total, "seed": config.seed, "metric": config.metric, **(checkpoint_extra or {})})
    return TrainResult(model, history, state)


def write_loss_csv(path, history: Sequence[StepLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lr", "loss"])
        for r in history:
            writer.writerow([r.step, repr(r.lr), repr(r.loss)])
