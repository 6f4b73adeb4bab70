"""Adam with gradient clipping and a plateau-halving learning-rate schedule."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .data import MixtureExample, segment_and_batch
from .losses import LossConfig, batch_loss
from .model import SeparationModel

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient is NaN/Inf."""


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 7.0
    batch_size: int = 16
    epochs: int = 100
    patience: int = 3
    factor: float = 0.5
    segment_seconds: float = 4.0
    seed: int = 0
    dtype: str = "float32"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def train_preset(name: str, **overrides) -> TrainConfig:
    if name == "paper":
        base = dict(lr0=1e-3, clip_norm=7.0, batch_size=16, epochs=100, segment_seconds=4.0)
    elif name == "desk":
        base = dict(lr0=1e-3, clip_norm=7.0, batch_size=4, epochs=20, segment_seconds=1.0)
    else:
        raise ValueError(f"unknown preset {name!r}")
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0  # completed epochs
    lr: float = 1e-3
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    halvings: int = 0
    seed: int = 0

    def scalars(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "lr": self.lr, "best_val_loss": self.best_val_loss,
                "epochs_since_improvement": self.epochs_since_improvement, "halvings": self.halvings,
                "seed": self.seed}

    def to_optimizer(self, model: SeparationModel) -> dict:
        names = [n for n, _ in model.named_parameters()]
        zeros = {n: np.zeros_like(p.data) for n, p in model.named_parameters()}
        return {"scalars": self.scalars(), "m": {n: self.m.get(n, zeros[n]) for n in names},
                "v": {n: self.v.get(n, zeros[n]) for n in names}}

    @classmethod
    def from_optimizer(cls, opt: dict) -> "TrainState":
        return cls(m=dict(opt["m"]), v=dict(opt["v"]), **opt["scalars"])


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], clip_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``clip_norm``.

    Returns the (possibly) rescaled gradients and the pre-clip norm.
    """
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return [g * g.dtype.type(scale) for g in grads], norm
    return list(grads), norm


def adam_step(params: Sequence[tuple[str, ag.Tensor]], grads: Sequence[np.ndarray], state: TrainState,
              cfg: TrainConfig) -> TrainState:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for (name, _), g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            log.error("non-finite gradient in %s at step %d; update rejected", name, state.step)
            raise NonFiniteError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for (name, p), g in zip(params, grads):
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


def lr_schedule(state: TrainState, val_loss: float, cfg: TrainConfig) -> TrainState:
    """Halve the learning rate once ``patience`` consecutive epochs show no reduction.

    Epochs are counted per plateau: the epoch that sets a new best (strictly
    lower) loss opens the plateau, each later epoch that fails to beat it
    extends it. After a halving the count starts again from zero, so
    ``[5, 4, 4, 4, 4]`` halves once, after the fourth epoch.
    """
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 1
    else:
        state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= cfg.patience:
        state.lr *= cfg.factor
        state.halvings += 1
        state.epochs_since_improvement = 0
        log.info("validation plateau: lr -> %g", state.lr)
    return state


def train_step(model: SeparationModel, mixture: np.ndarray, sources: np.ndarray, state: TrainState,
               cfg: TrainConfig, ids: Sequence[str] = ()) -> tuple[float, float]:
    """One forward/backward/clip/Adam update; returns (loss, pre-clip grad norm)."""
    named = list(model.named_parameters())
    model.zero_grad()
    est = model(ag.Tensor(mixture.astype(model.dtype)))
    loss, _ = batch_loss(est, sources.astype(model.dtype), cfg.loss)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {state.step} on batch {list(ids)}")
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in named]
    grads, norm = clip_gradients(grads, cfg.clip_norm)
    adam_step(named, grads, state, cfg)
    return value, norm


def evaluate_loss(model: SeparationModel, examples: Sequence[MixtureExample], cfg: TrainConfig) -> float:
    total, count = 0.0, 0
    with ag.no_grad():
        for batch in segment_and_batch(examples, cfg.batch_size, cfg.segment_seconds, train=False,
                                       min_length=model.config.L, dtype=model.dtype):
            est = model(ag.Tensor(batch.mixture))
            loss, _ = batch_loss(est, batch.sources, cfg.loss)
            total += loss.item() * len(batch.ids)
            count += len(batch.ids)
    return total / count


def train(model: SeparationModel, train_examples: Sequence[MixtureExample],
          val_examples: Sequence[MixtureExample], cfg: TrainConfig, out_dir: str | Path,
          state: TrainState | None = None, max_epochs: int | None = None) -> TrainState:
    """Run epochs until ``cfg.epochs`` are complete, checkpointing after each.

    Writes ``epoch_XXXX.ckpt``, ``best.ckpt`` and ``metrics.jsonl`` in
    ``out_dir``. Pass the ``state`` from a loaded checkpoint to resume.
    ``max_epochs`` bounds the epochs run in this call.
    """
    if not train_examples or not val_examples:
        raise ValueError("training needs non-empty train and validation sets")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = TrainState(lr=cfg.lr0, seed=cfg.seed)
    if cfg.loss.beta == 0 and model.config.I > 1:
        log.warning("deep encoder/decoder trained with pure SI-SNR (beta=0) may be unstable")
    metrics_path = out / "metrics.jsonl"
    run = 0
    while state.epoch < cfg.epochs and (max_epochs is None or run < max_epochs):
        epoch = state.epoch
        start = time.time()
        losses, norm = [], 0.0
        for batch in segment_and_batch(train_examples, cfg.batch_size, cfg.segment_seconds, train=True,
                                       seed=cfg.seed, epoch=epoch, min_length=model.config.L,
                                       dtype=model.dtype):
            value, norm = train_step(model, batch.mixture, batch.sources, state, cfg, batch.ids)
            losses.append(value)
        val = evaluate_loss(model, val_examples, cfg)
        if not math.isfinite(val):
            raise NonFiniteError(f"non-finite validation loss after epoch {epoch}")
        improved = val < state.best_val_loss
        lr_used = state.lr
        lr_schedule(state, val, cfg)
        state.epoch += 1
        record = {"epoch": epoch, "step": state.step, "train_loss": float(np.mean(losses)), "val_loss": val,
                  "lr": lr_used, "grad_norm": norm, "wall_time": time.time() - start}
        with open(metrics_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        opt = state.to_optimizer(model)
        meta = {"train_config": cfg.to_dict()}
        save_checkpoint(out / f"epoch_{epoch:04d}.ckpt", model, opt, meta)
        if improved:
            save_checkpoint(out / "best.ckpt", model, opt, meta)
        log.info("epoch %d: train %.4f val %.4f lr %g", epoch, record["train_loss"], val, lr_used)
        run += 1
    return state


def resume(path: str | Path) -> tuple[SeparationModel, TrainState, TrainConfig | None]:
    ckpt = load_checkpoint(path)
    if ckpt.optimizer is None:
        raise ValueError(f"{path} holds no optimizer state to resume from")
    state = TrainState.from_optimizer(ckpt.optimizer)
    cfg = ckpt.meta.get("train_config")
    return ckpt.model, state, TrainConfig(**cfg) if cfg else None


@dataclass
class OverfitResult:
    variant: str
    reached: bool
    steps: int
    si_snr: float
    seconds: float
    history: list = field(default_factory=list)  # (step, loss, mean SI-SNR)


def mean_pit_si_snr(model: SeparationModel, mixture: np.ndarray, sources: np.ndarray) -> float:
    """Mean per-source SI-SNR (dB) of the PIT-aligned estimates over a batch."""
    from .losses import pit_si_snr

    with ag.no_grad():
        est = model(ag.Tensor(mixture.astype(model.dtype)))
        scores = [-pit_si_snr(est[b], ag.Tensor(sources[b].astype(model.dtype)))[0].item()
                  for b in range(est.shape[0])]
    return float(np.mean(scores))


def overfit(model: SeparationModel, examples: Sequence[MixtureExample], cfg: TrainConfig,
            target_db: float = 15.0, max_steps: int = 2000, max_seconds: float = 1800.0,
            check_every: int = 50) -> OverfitResult:
    """Train full-batch on a fixed set of mixtures until the mean train SI-SNR reaches ``target_db``."""
    mixture = np.stack([e.mixture.samples for e in examples]).astype(model.dtype)
    sources = np.stack([[s.samples for s in e.sources] for e in examples]).astype(model.dtype)
    state = TrainState(lr=cfg.lr0, seed=cfg.seed)
    start = time.time()
    history = []
    score = mean_pit_si_snr(model, mixture, sources)
    while state.step < max_steps and time.time() - start < max_seconds:
        loss, _ = train_step(model, mixture, sources, state, cfg)
        if state.step % check_every == 0:
            score = mean_pit_si_snr(model, mixture, sources)
            history.append((state.step, loss, score))
            log.info("overfit %s step %d: loss %.3f, SI-SNR %.2f dB", model.config.encoder_variant,
                     state.step, loss, score)
            if score >= target_db:
                break
    else:
        score = mean_pit_si_snr(model, mixture, sources)
    return OverfitResult(model.config.encoder_variant, score >= target_db, state.step, score,
                         time.time() - start, history)
