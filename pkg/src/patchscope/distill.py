"""Patch-level distillation from a trained teacher into the tiny student."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from . import tensor as T
from .datasets import BatchLoader, DatasetManifest, PreprocessConfig
from .errors import ConfigError, DataError, NumericalError
from .nets import Model, ModelWeights, build_tiny, tiny_config
from .trainer import AdamState, TrainConfig, TrainLog, TrainingAborted, adam_step, bce_image_loss

MODES = ("logit_mse", "hard_label")


@dataclass
class DistillSet:
    """Teacher-grid patches with their teacher logits and image labels."""

    patches: np.ndarray  # [N,3,q,q] float32
    targets: np.ndarray | None  # [N] teacher logits
    labels: np.ndarray  # [N] image label of each patch, 1 = fake
    image_index: np.ndarray  # [N] source image position

    def __post_init__(self):
        n = len(self.patches)
        if self.patches.ndim != 4 or self.patches.shape[1] != 3 or self.patches.shape[2] != self.patches.shape[3]:
            raise ConfigError(f"patches must be [N,3,q,q], got {self.patches.shape}")
        if len(self.labels) != n or len(self.image_index) != n or (self.targets is not None and len(self.targets) != n):
            raise ConfigError("distill set arrays have different lengths")
        if self.targets is not None and not np.isfinite(self.targets).all():
            raise NumericalError("distillation targets must be finite")

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def patch_size(self) -> int:
        return self.patches.shape[2]

    def save(self, path: str | Path) -> None:
        recs = {"patches": self.patches, "labels": self.labels.astype(np.float64), "image_index": self.image_index.astype(np.float64)}
        if self.targets is not None:
            recs["targets"] = self.targets
        container.save(path, recs)

    @classmethod
    def load(cls, path: str | Path) -> "DistillSet":
        r = container.load(path)
        missing = {"patches", "labels", "image_index"} - set(r)
        if missing:
            raise DataError(f"{path}: distill set lacks records {sorted(missing)}")
        return cls(r["patches"], r.get("targets"), r["labels"].astype(np.int64), r["image_index"].astype(np.int64))

    @classmethod
    def concat(cls, parts: list["DistillSet"]) -> "DistillSet":
        if not parts:
            raise DataError("no distillation samples")
        targets = None if any(p.targets is None for p in parts) else np.concatenate([p.targets for p in parts])
        return cls(
            np.concatenate([p.patches for p in parts]),
            targets,
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.image_index for p in parts]),
        )


def patch_windows(teacher: Model, height: int, width: int) -> list[tuple[int, int]]:
    """Top-left corners of the teacher's score-map cells, raster order."""
    g = teacher.geometry
    q = g.receptive_field
    if height < q or width < q:
        raise ConfigError(f"image {height}x{width} smaller than the {q}x{q} teacher patch")
    rows = (height - q - g.offset) // g.stride + 1
    cols = (width - q - g.offset) // g.stride + 1
    return [(g.offset + i * g.stride, g.offset + j * g.stride) for i in range(rows) for j in range(cols)]


def extract_teacher_patches(teacher: Model, images: np.ndarray, labels=None, first_index: int = 0) -> DistillSet:
    """One sample per teacher score-map cell for each preprocessed ``[3,H,W]`` image of a batch."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    b, _, h, w = x.shape
    windows = patch_windows(teacher, h, w)
    q = teacher.geometry.receptive_field
    with T.no_grad():
        smap = teacher.score_map(T.Tensor(x)).data[:, 0]
    if smap.shape[1] * smap.shape[2] != len(windows):
        raise ConfigError("score map does not match the teacher's window grid")
    ys = np.array([y for y, _ in windows])
    xs = np.array([x0 for _, x0 in windows])
    # [B, N, 3, q, q] gather via a sliding view
    view = np.lib.stride_tricks.sliding_window_view(x, (q, q), axis=(2, 3))  # [B,3,H-q+1,W-q+1,q,q]
    patches = view[:, :, ys, xs].transpose(0, 2, 1, 3, 4).reshape(b * len(windows), 3, q, q)
    lab = np.zeros(b, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    return DistillSet(
        patches.astype(np.float32),
        smap.reshape(-1).astype(np.float64),
        np.repeat(lab, len(windows)),
        np.repeat(np.arange(first_index, first_index + b), len(windows)),
    )


def build_distill_set(
    teacher: Model,
    manifest: DatasetManifest,
    pre: PreprocessConfig | None = None,
    split: str = "train",
    batch_size: int = 32,
    workers: int = 1,
    random_crops: bool = True,
) -> DistillSet:
    """Distillation samples from every image of ``split`` (seeded crops, manifest order)."""
    pre = pre or PreprocessConfig(representation=teacher.config.representation)
    loader = BatchLoader(manifest, split, pre, batch_size, shuffle=False, train=random_crops, workers=workers)
    parts = []
    n = 0
    for batch in loader.epoch(0):
        parts.append(extract_teacher_patches(teacher, batch.x, batch.labels, n))
        n += len(batch.labels)
    return DistillSet.concat(parts)


def student_patch_logits(student: Model, patches: T.Tensor, training: bool = False) -> T.Tensor:
    return student.forward(patches, training=training, pooling="average")


def train_student(
    samples: DistillSet,
    mode: str,
    cfg: TrainConfig,
    student: Model | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[ModelWeights, TrainLog]:
    """Fit the tiny student on patch samples for ``cfg.max_epochs`` epochs.

    ``logit_mse`` regresses teacher logits; ``hard_label`` fits each patch to its
    image's label with BCE.  Batches hold ``cfg.batch_size`` patches (one image's
    worth by convention), drawn from a seeded global shuffle.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if len(samples) == 0:
        raise DataError("empty distillation set")
    if mode == "logit_mse" and samples.targets is None:
        raise ConfigError("logit_mse mode needs teacher targets")
    student = student or build_tiny(tiny_config(), seed=cfg.seed)
    if student.config.kind != "tiny":
        raise ConfigError("the student must be a tiny model")
    log = TrainLog([])
    log.add(record="config", mode=mode, samples=len(samples), **{k: getattr(cfg, k) for k in TrainConfig.keys() if k != "workers"})
    with T.precision(cfg.precision):
        work = student.astype(cfg.precision)
        params = work.parameters()
        state = AdamState.zeros(params)
        n = len(samples)
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 7])).permutation(n)
            total = 0.0
            for a in range(0, n, cfg.batch_size):
                idx = np.sort(order[a : a + cfg.batch_size])
                x = T.Tensor(samples.patches[idx])
                work.zero_grad()
                try:
                    pred = student_patch_logits(work, x, training=True)
                    if mode == "logit_mse":
                        loss = T.mse(pred, samples.targets[idx])
                    else:
                        loss = bce_image_loss(pred, samples.labels[idx])
                    value = float(loss.item())
                    if not np.isfinite(value):
                        raise NumericalError(f"non-finite distillation loss at epoch {epoch}")
                    loss.backward()
                    adam_step(params, [p.grad for p in params], state, cfg)
                except NumericalError as e:
                    log.add(record="abort", epoch=epoch, reason=str(e))
                    raise TrainingAborted(str(e), log) from None
                total += value * len(idx)
            log.add(record="epoch", epoch=epoch, train_loss=total / n, lr=cfg.lr)
            if progress:
                progress(f"student epoch {epoch}: {mode} loss={total / n:.6f} ({time.perf_counter() - t0:.1f}s)")
    weights = Model(student.config, work.weights).astype(T.get_precision()).weights
    student.load_weights(weights)
    return weights, log
