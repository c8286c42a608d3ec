"""Inference: patch score maps, pooled image scores, heatmaps, top-k patches and score files."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import BatchLoader, DatasetManifest, PreprocessConfig
from .errors import ConfigError, DataError, MissingFileError
from .imageio import Image, write_image
from .nets import Model


@dataclass
class PatchScoreMap:
    """Patch logits on the model's output grid.

    Cell ``(i, j)`` scores the ``patch_size`` window whose top-left input pixel is
    ``(offset + i*stride, offset + j*stride)``.
    """

    grid: np.ndarray
    stride: int
    patch_size: int
    offset: int = 0
    image_id: str = ""

    def __post_init__(self):
        grid = np.asarray(self.grid)
        self.grid = grid if grid.dtype in (np.float32, np.float64) else grid.astype(np.float64)
        if self.grid.ndim != 2 or self.grid.size < 1:
            raise ConfigError(f"score map must be a non-empty 2-D grid, got shape {self.grid.shape}")
        if self.stride < 1 or self.patch_size < 1:
            raise ConfigError("stride and patch size must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def window(self, i: int, j: int) -> tuple[int, int]:
        return self.offset + i * self.stride, self.offset + j * self.stride


def _as_batch(x) -> np.ndarray:
    if isinstance(x, Image):
        x = x.to_rgb().to_float()
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    return x[None] if x.ndim == 3 else x


def score_maps(model: Model, x, image_ids: list[str] | None = None) -> list[PatchScoreMap]:
    """Score maps for a ``[B,3,H,W]`` batch of preprocessed images."""
    x = _as_batch(x)
    with T.no_grad():
        grids = model.score_map(T.Tensor(x)).data[:, 0]
    g = model.geometry
    ids = image_ids or [""] * len(grids)
    return [PatchScoreMap(grid, g.stride, g.receptive_field, g.offset, i) for grid, i in zip(grids, ids)]


def score_map(model: Model, image, image_id: str = "") -> PatchScoreMap:
    """Score map of one preprocessed ``[3,H,W]`` image."""
    return score_maps(model, image, [image_id])[0]


POOLINGS = ("average", "max")


def image_score(smap: PatchScoreMap, pooling: str = "average") -> float:
    """Pooled image logit: arithmetic mean or maximum of the cells."""
    if pooling == "average":
        # same reduction and range clamp as the model's average pooling, so both agree exactly
        g = smap.grid.reshape(-1)
        return float(np.clip(g.mean(), g.min(), g.max()))
    if pooling == "max":
        return float(smap.grid.max())
    raise ConfigError(f"pooling must be one of {POOLINGS}, got {pooling!r}")


def fake_probability(logit):
    out = T.sigmoid_np(np.asarray(logit, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# exports


def heatmap_samples(smap: PatchScoreMap) -> np.ndarray:
    """Min-max normalised uint8 grid; a constant map becomes mid-gray with a warning."""
    g = smap.grid
    lo, hi = g.min(), g.max()
    if hi == lo:
        warnings.warn(f"score map {smap.image_id!r} is constant ({lo}); heatmap is uniform mid-gray", stacklevel=2)
        return np.full(g.shape, 128, dtype=np.uint8)
    return np.rint((g - lo) / (hi - lo) * 255).astype(np.uint8)


def export_heatmap(smap: PatchScoreMap, out_path: str | Path) -> tuple[Path, Path]:
    """Write the grid-resolution PGM and a CSV sidecar of exact logits; returns both paths."""
    out_path = Path(out_path)
    if out_path.suffix.lower() != ".pgm":
        out_path = out_path.with_suffix(".pgm")
    write_image(out_path, Image(heatmap_samples(smap), "pgm"))
    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "y", "x", "logit"])
        for (i, j), v in np.ndenumerate(smap.grid):
            y, x = smap.window(i, j)
            w.writerow([i, j, y, x, repr(float(v))])
    return out_path, csv_path


@dataclass
class TopPatch:
    row: int
    col: int
    logit: float
    crop: np.ndarray


def top_k_patches(smap: PatchScoreMap, image, k: int) -> list[TopPatch]:
    """The k highest-logit cells (ties by raster order) with their windows cut from ``image``.

    ``image`` is the preprocessed ``[C,H,W]`` array the map was computed from, or an
    :class:`Image` of the same size (crops are then ``[q,q,C]`` pixel blocks).
    """
    n = smap.grid.size
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    order = np.argsort(-smap.grid.reshape(-1), kind="stable")[:k]
    q = smap.patch_size
    out = []
    for flat in order:
        i, j = divmod(int(flat), smap.grid.shape[1])
        y, x = smap.window(i, j)
        if isinstance(image, Image):
            crop = image.pixels[y : y + q, x : x + q]
        else:
            crop = np.asarray(image)[:, y : y + q, x : x + q]
        if min(crop.shape[-2:] if not isinstance(image, Image) else crop.shape[:2]) < q or y < 0 or x < 0:
            raise ConfigError(f"cell ({i},{j}) window falls outside the image")
        out.append(TopPatch(i, j, float(smap.grid[i, j]), crop.copy()))
    return out


# ---------------------------------------------------------------------------
# batch scoring and score files


@dataclass
class ScoreSet:
    paths: list[str]
    logits: np.ndarray
    labels: np.ndarray | None  # 1 = fake; None when unknown
    errors: list[tuple[str, str]]

    @property
    def probabilities(self) -> np.ndarray:
        return T.sigmoid_np(self.logits)

    def by_path(self) -> dict[str, float]:
        return dict(zip(self.paths, self.logits.tolist()))


def score_records(
    model: Model,
    manifest: DatasetManifest,
    split: str,
    pre: PreprocessConfig,
    batch_size: int = 32,
    pooling: str | None = None,
    workers: int = 1,
    transform=None,
) -> ScoreSet:
    """Image logits for every record of ``split`` (centre crops, manifest order).

    ``transform(record, image) -> image`` runs before preprocessing (used for re-encoding sweeps).
    """
    loader = BatchLoader(manifest, split, pre, batch_size, shuffle=False, train=False, workers=workers, image_hook=transform)
    paths, logits, labels, errors = [], [], [], []
    with T.no_grad():
        for batch in loader.epoch(0):
            out = model.forward(T.Tensor(batch.x), training=False, pooling=pooling)
            logits.append(out.data.astype(np.float64))
            labels.append(batch.labels)
            paths.extend(batch.paths)
            errors.extend(batch.errors)
    return ScoreSet(paths, np.concatenate(logits), np.concatenate(labels), errors)


SCORE_HEADER = ["image_path", "logit", "probability", "label"]


def write_scores(path: str | Path, scores: ScoreSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        probs = scores.probabilities
        for i, p in enumerate(scores.paths):
            label = "" if scores.labels is None else ("fake" if scores.labels[i] else "real")
            w.writerow([p, repr(float(scores.logits[i])), repr(float(probs[i])), label])


def read_scores(path: str | Path) -> ScoreSet:
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise MissingFileError(f"no such score file: {path}") from None
    with fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != SCORE_HEADER[:3]:
        raise DataError(f"{path}: expected header {','.join(SCORE_HEADER)}")
    paths, logits, labels = [], [], []
    for n, row in enumerate(rows[1:], 2):
        if len(row) < 3:
            raise DataError(f"{path}:{n}: too few columns")
        paths.append(row[0])
        logits.append(float(row[1]))
        lab = row[3] if len(row) > 3 else ""
        if lab not in ("", "real", "fake"):
            raise DataError(f"{path}:{n}: label {lab!r} not real/fake")
        labels.append(lab)
    if len(set(paths)) != len(paths):
        raise DataError(f"{path}: duplicate image paths")
    known = all(lab for lab in labels)
    lab_arr = np.array([lab == "fake" for lab in labels], dtype=np.int64) if known and labels else None
    return ScoreSet(paths, np.asarray(logits, dtype=np.float64), lab_arr, [])

