"""Mini-batch training with Adam on binary cross-entropy."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericalError
from .metrics import macro_auc
from .models import Model, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "train_loss", "val_macro_auc", "wall_time_s"]


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 0 or self.max_epochs < 1:
            raise ValueError("patience must be >= 0 and max_epochs >= 1")


@dataclass
class Dataset:
    """Features (N x bands x frames) and binary labels (N x K)."""

    x: np.ndarray
    y: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        if self.x.ndim != 3 or self.y.ndim != 2 or len(self.x) != len(self.y):
            raise ContractError(f"dataset shapes {self.x.shape} / {self.y.shape} are inconsistent")

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_macro_auc: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def aucs(self) -> list[float]:
        return [r.val_macro_auc for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class TrainResult:
    history: TrainHistory
    best_auc: float
    best_epoch: int
    best_checkpoint: Path | None


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over all N*K entries (predictions clamped at 1e-7)."""
    return T.binary_cross_entropy(pred, target, clamp=1e-7)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (config.lr * m_hat / (np.sqrt(v_hat) + config.eps_adam)).astype(p.dtype)
    return state


class Adam:
    """Adam bound to a model's parameter tensors."""

    def __init__(self, model: Model, config: TrainConfig):
        self.model = model
        self.config = config
        self.state = AdamState()

    def step(self) -> None:
        named = self.model.named_parameters()
        params, grads = {}, {}
        for name, p in named.items():
            if p.grad is not None:
                params[name] = p.data
                grads[name] = p.grad
        adam_step(params, grads, self.state, self.config)


def evaluate_auc(model: Model, data: Dataset, batch_size: int = 32) -> float:
    scores = model.predict(data.x, batch_size=batch_size)
    return macro_auc(scores, data.y).macro


def train_step(model: Model, opt: Adam, xb: np.ndarray, yb: np.ndarray) -> float:
    model.train()
    model.zero_grad()
    loss = bce_loss(model(xb), yb)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalError(f"training loss became {value}")
    loss.backward()
    opt.step()
    return value


def _write_history_row(path: Path, rec: EpochRecord, first: bool) -> None:
    with open(path, "w" if first else "a", newline="") as fh:
        w = csv.writer(fh)
        if first:
            w.writerow(HISTORY_HEADER)
        w.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_macro_auc), f"{rec.wall_time:.3f}"])


def read_history(path) -> TrainHistory:
    hist = TrainHistory()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            hist.append(EpochRecord(int(row["epoch"]), float(row["train_loss"]),
                                    float(row["val_macro_auc"]), float(row["wall_time_s"])))
    return hist


def train(model: Model, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          out_dir=None, callback=None) -> TrainResult:
    """Train until ``max_epochs`` or ``patience`` epochs without a better validation AUC.

    With ``out_dir`` the history is appended to ``history.csv`` after every
    epoch and ``best.ckpt`` is overwritten (a plain copy, not a symlink)
    whenever the validation AUC improves.  On divergence the best checkpoint
    written so far is left in place and :class:`NumericalError` is raised.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("training and validation sets must be non-empty")
    k = model.spec.output_dim
    if train_set.y.shape[1] != k or val_set.y.shape[1] != k:
        raise ContractError(f"labels have {train_set.y.shape[1]} columns, model predicts {k}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model, config)
    history = TrainHistory()
    best_auc, best_epoch = -math.inf, 0
    best_path = None
    n = len(train_set)
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            if len(idx) == 1 and n > 1:
                # batch norm on 1x1 maps needs two samples; fold the straggler away
                continue
            loss = train_step(model, opt, train_set.x[idx], train_set.y[idx])
            total += loss * len(idx)
            seen += len(idx)
        train_loss = total / max(seen, 1)
        val_auc = evaluate_auc(model, val_set, config.batch_size)
        rec = EpochRecord(epoch, train_loss, val_auc, time.perf_counter() - t0)
        history.append(rec)
        if out is not None:
            _write_history_row(out / "history.csv", rec, epoch == 1)
        log.info("epoch %d  loss %.5f  val AUC %.4f  (%.1fs)", epoch, train_loss, val_auc, rec.wall_time)
        if callback is not None:
            callback(rec)
        if val_auc > best_auc:
            best_auc, best_epoch = val_auc, epoch
            if out is not None:
                best_path = out / "best.ckpt"
                save_checkpoint(model, best_path)
        if epoch - best_epoch >= config.patience:
            break
    return TrainResult(history, best_auc, best_epoch, best_path)
