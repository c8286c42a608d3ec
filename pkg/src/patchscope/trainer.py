"""Image-level BCE training with Adam and a validation-accuracy plateau schedule."""

from __future__ import annotations

import time
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .datasets import BatchLoader, DatasetManifest, PreprocessConfig
from .errors import ConfigError, DataError, NumericalError
from .nets import Model, ModelWeights


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    patience: int = 5
    threshold: float = 0.001  # absolute val-ACC gain that counts as improvement
    drop_factor: float = 10.0
    min_lr: float = 1e-6  # training stops once the LR falls below this
    max_epochs: int = 30
    seed: int = 0
    precision: str = "float32"
    workers: int = 1

    def __post_init__(self):
        for name in ("lr", "eps", "batch_size", "patience", "drop_factor", "max_epochs", "min_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.threshold < 0:
            raise ConfigError("plateau threshold must be >= 0")
        if self.drop_factor <= 1:
            raise ConfigError("drop_factor must exceed 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# loss and optimiser


def bce_image_loss(scores: T.Tensor, labels) -> T.Tensor:
    """Mean BCE of pre-sigmoid image logits; labels are 1/0 or "fake"/"real"."""
    lab = np.asarray(labels)
    if lab.dtype.kind in "US":
        bad = set(lab.tolist()) - {"real", "fake"}
        if bad:
            raise ConfigError(f"labels must be real/fake, got {sorted(bad)}")
        lab = (lab == "fake").astype(np.float64)
    else:
        bad = set(np.unique(lab).tolist()) - {0, 1}
        if bad:
            raise ConfigError(f"labels must be 0 (real) or 1 (fake), got {sorted(bad)}")
    if lab.shape != scores.shape:
        raise ConfigError(f"labels of shape {lab.shape} for scores of shape {scores.shape}")
    return T.bce_with_logits(scores, lab)


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros(cls, params: list[T.Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[T.Tensor], grads: list[np.ndarray | None], state: AdamState, cfg: TrainConfig, lr: float | None = None) -> None:
    """One bias-corrected Adam update in place; a non-finite gradient aborts before any change."""
    lr = cfg.lr if lr is None else lr
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("adam_step: params, grads and state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if g is None:
            continue
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ConfigError(f"adam_step: shape mismatch for {p.name}: {g.shape} vs {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {p.name or '?'}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1 - cfg.beta1**t
    c2 = 1 - cfg.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)


class PlateauScheduler:
    """Divide the LR by ``drop_factor`` after ``patience`` epochs without a ``threshold`` gain."""

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.lr
        self.patience = cfg.patience
        self.threshold = cfg.threshold
        self.factor = cfg.drop_factor
        self.best = -np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; True when the LR was dropped."""
        if metric > self.best + self.threshold:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr /= self.factor
            self.bad_epochs = 0
            return True
        return False


# ---------------------------------------------------------------------------
# training log


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    # values never contain spaces so every line splits back into key=value tokens
    return str(v).replace(" ", "_")


@dataclass
class TrainLog:
    """Plain-text, one ``key=value`` record per line."""

    lines: list[str]

    def add(self, **kv) -> None:
        self.lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in kv.items()))

    def to_text(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def records(self, kind: str | None = None) -> list[dict[str, str]]:
        out = []
        for line in self.lines:
            rec = dict(tok.split("=", 1) for tok in line.split(" "))
            if kind is None or rec.get("record") == kind:
                out.append(rec)
        return out

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_text())


class TrainingAborted(NumericalError):
    def __init__(self, message: str, log: TrainLog):
        super().__init__(message)
        self.log = log


# ---------------------------------------------------------------------------
# fit


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((T.sigmoid_np(logits) >= 0.5).astype(np.int64) == labels))


def validate(model: Model, loader: BatchLoader) -> tuple[float, float]:
    """(accuracy at probability 0.5, mean BCE) over a loader."""
    logits, labels = [], []
    with T.no_grad():
        for batch in loader.epoch(0):
            logits.append(model.forward(T.Tensor(batch.x), training=False).data.astype(np.float64))
            labels.append(batch.labels)
    z = np.concatenate(logits)
    y = np.concatenate(labels)
    loss = float(np.mean(T.softplus_np(z) - y * z))
    return _accuracy(z, y), loss


def fit(
    model: Model,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    pre: PreprocessConfig | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[ModelWeights, TrainLog]:
    """Train ``model`` in place on the train split, selecting the best val-accuracy epoch.

    Only the train and val records are visible to training.  Returns the selected
    weights (also loaded into ``model``) and the log.
    """
    view = manifest.subset(("train", "val"))
    for s in ("train", "val"):
        if not view.has_split(s):
            raise DataError(f"training needs a non-empty {s!r} split")
    pre = pre or PreprocessConfig(representation=model.config.representation, seed=cfg.seed)
    if pre.representation != model.config.representation:
        raise ConfigError(f"preprocessing representation {pre.representation} != model's {model.config.representation}")
    train_loader = BatchLoader(view, "train", pre, cfg.batch_size, shuffle=True, train=True, workers=cfg.workers)
    val_loader = BatchLoader(view, "val", pre, cfg.batch_size, shuffle=False, train=False, workers=cfg.workers)

    log = TrainLog([])
    log.add(record="config", **{k: getattr(cfg, k) for k in TrainConfig.keys() if k != "workers"})
    with T.precision(cfg.precision):
        work = model.astype(cfg.precision)
        params = work.parameters()
        state = AdamState.zeros(params)
        sched = PlateauScheduler(cfg)
        best = (-np.inf, 0, work.copy_weights())
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            total, count = 0.0, 0
            for batch in train_loader.epoch(epoch):
                work.zero_grad()
                try:
                    loss = bce_image_loss(work.forward(T.Tensor(batch.x), training=True), batch.labels)
                    value = float(loss.item())
                    if not np.isfinite(value):
                        raise NumericalError(f"non-finite training loss at epoch {epoch}")
                    loss.backward()
                    adam_step(params, [p.grad for p in params], state, cfg, sched.lr)
                except NumericalError as e:
                    log.add(record="abort", epoch=epoch, reason=str(e))
                    raise TrainingAborted(str(e), log) from None
                total += value * len(batch.labels)
                count += len(batch.labels)
            val_acc, val_loss = validate(work, val_loader)
            lr_used = sched.lr
            log.add(record="epoch", epoch=epoch, train_loss=total / count, val_loss=val_loss, val_acc=val_acc, lr=lr_used)
            if progress:
                progress(f"epoch {epoch}: train_loss={total / count:.5f} val_acc={val_acc:.4f} lr={lr_used:g} ({time.perf_counter() - t0:.1f}s)")
            if val_acc > best[0]:
                best = (val_acc, epoch, work.copy_weights())
            if sched.step(val_acc):
                log.add(record="lr_drop", epoch=epoch, lr=sched.lr)
            if sched.lr < cfg.min_lr:
                log.add(record="stop", epoch=epoch, reason="lr below min_lr")
                break
        log.add(record="best", epoch=best[1], val_acc=best[0])
    selected = Model(model.config, best[2]).astype(T.get_precision()).weights
    model.load_weights(selected)
    return selected, log
