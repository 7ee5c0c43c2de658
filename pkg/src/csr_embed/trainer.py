"""Training loop: seeded batching, Adam, dead-latent bookkeeping, checkpoints."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import TrainConfig
from .model import SaeModel, init_model, load_model, save_model
from .objective import DivergenceError, batch_loss_and_grads

log = logging.getLogger(__name__)

REPORT_FIELDS = ("epoch", "l_k", "l_4k", "l_aux", "l_ncl", "total", "dead_fraction")


class DeadLatentTracker:
    """Step index at which each latent last fired.

    A latent is dead once more than ``window`` steps have passed since it
    fired. Every latent counts as having fired at step 0, so nothing is dead
    during the first window.
    """

    def __init__(self, h: int, window: int):
        self.window = window
        self.current_step = 0
        self.last_fired = np.zeros(h, dtype=np.int64)

    @property
    def h(self) -> int:
        return self.last_fired.size

    def dead_mask(self) -> np.ndarray:
        return (self.current_step - self.last_fired) > self.window

    def dead(self) -> np.ndarray:
        return np.flatnonzero(self.dead_mask())

    def update(self, active: np.ndarray) -> None:
        """Advance one step; ``active`` is a boolean mask or index array of latents that fired."""
        self.current_step += 1
        self.last_fired[np.asarray(active)] = self.current_step


def dead_fraction(tracker: DeadLatentTracker) -> float:
    return float(tracker.dead_mask().sum()) / tracker.h


class Adam:
    """Adam with decoupled weight decay applied to selected parameters."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0, decay=()):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(decay)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and name in self.decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    def add(self, **rec) -> None:
        self.epochs.append({k: rec[k] for k in REPORT_FIELDS})

    def to_lines(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.epochs)

    def write(self, path) -> None:
        Path(path).write_text(self.to_lines())

    @classmethod
    def read(cls, path) -> "TrainReport":
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])

    @property
    def final(self) -> Optional[dict]:
        return self.epochs[-1] if self.epochs else None


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``model`` holds the last finite parameters."""

    def __init__(self, msg: str, model: SaeModel, report: TrainReport):
        super().__init__(msg)
        self.model = model
        self.report = report


def _as_f32(params: dict) -> SaeModel:
    return SaeModel(*(params[n].astype(np.float32) for n in ("W_enc", "b_enc", "b_pre")))


def train(
    data,
    labels,
    cfg: TrainConfig,
    init: Optional[SaeModel] = None,
    counter: Optional[Counter] = None,
    history: Optional[list] = None,
) -> tuple[SaeModel, TrainReport]:
    """Fit a tied TopK autoencoder to the rows of ``data``.

    Master weights are float64; the returned model is float32. ``history``,
    when given, receives the boolean active-latent mask of every step.
    """
    data = np.asarray(data, dtype=np.float32)
    n, d = data.shape
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} rows, got {n}")
    if cfg.supervised and labels is None:
        raise ValueError("supervised contrastive loss needs labels")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError("labels must align with data rows")

    model = init if init is not None else init_model(d, cfg.h, cfg.seed, data.mean(axis=0, dtype=np.float64))
    if model.h != cfg.h or model.d != d:
        raise ValueError("initial model shape does not match config/data")
    report = TrainReport()
    if cfg.epochs == 0:
        return model, report

    params = {k: v.astype(np.float64) for k, v in model.params().items()}
    shadow = SaeModel(params["W_enc"], params["b_enc"], params["b_pre"])
    opt = Adam(cfg.lr, (0.9, 0.999), cfg.adam_eps, cfg.weight_decay, decay=("W_enc",))
    tracker = DeadLatentTracker(cfg.h, cfg.dead_window)
    rng = np.random.default_rng(cfg.seed)
    min_batch = 2 if cfg.gamma > 0 else 1

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(("l_k", "l_4k", "l_aux", "l_ncl", "total"), 0.0)
        steps = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            if idx.size < min_batch:
                continue
            y = labels[idx] if labels is not None else None
            try:
                br = batch_loss_and_grads(shadow, data[idx], y, cfg, tracker.dead_mask(), counter=counter)
            except DivergenceError as exc:
                raise TrainingDiverged(str(exc), _as_f32(params), report) from exc
            before = {k: v.copy() for k, v in params.items()}
            opt.step(params, br.grads)
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise TrainingDiverged("non-finite parameters after update", _as_f32(before), report)
            tracker.update(br.active)
            if history is not None:
                history.append(br.active.copy())
            for key in sums:
                sums[key] += getattr(br, key)
            steps += 1
        means = {k: v / max(steps, 1) for k, v in sums.items()}
        frac = dead_fraction(tracker)
        report.add(epoch=epoch, dead_fraction=frac, **means)
        log.info("epoch %d total=%.6g l_k=%.6g dead=%.3f", epoch, means["total"], means["l_k"], frac)

    return _as_f32(params), report


def checkpoint(model: SaeModel, path) -> None:
    save_model(model, path)


def resume(path) -> SaeModel:
    return load_model(path)
