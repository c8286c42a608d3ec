"""Metrics, evaluation reports, the JPEG-bias sweep, score ensembling and the cost/latency bench."""

from __future__ import annotations

import csv
import io
import math
import platform
import time
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import tensor as T
from .datasets import DatasetManifest, PreprocessConfig, set_name
from .errors import ConfigError, DataError, MetricUndefinedError
from .imageio import Image
from .nets import FLOP_CONVENTION, Model, count_flops, count_params
from .scorer import ScoreSet, score_records

POSITIVE_CLASS = "fake"
JPEG_PIPELINE = "baseline JFIF, 4:2:0 chroma, IJG-scaled standard tables"


# ---------------------------------------------------------------------------
# metrics


def average_precision(scores, labels) -> float:
    """Step-interpolated AP with fake (label 1) as the positive class.

    Items are ranked by descending score; equal scores keep their input order.
    AP = sum_n (R_n - R_{n-1}) P_n over the ranked list.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ConfigError(f"{s.size} scores for {y.size} labels")
    n_pos = int(np.sum(y == 1))
    if n_pos == 0 or n_pos == y.size:
        raise MetricUndefinedError("average precision needs both real and fake samples")
    order = np.argsort(-s, kind="stable")
    tp = np.cumsum(y[order] == 1).astype(np.float64)
    precision = tp / np.arange(1, y.size + 1)
    recall = tp / n_pos
    step = recall - np.concatenate(([0.0], recall[:-1]))
    # correctly rounded sum, so the result does not depend on summation order
    return math.fsum((step * precision).tolist())


def accuracy(probabilities, labels, threshold: float = 0.5) -> float:
    """Fraction correct; probability >= threshold is a fake decision."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ConfigError(f"{p.size} probabilities for {y.size} labels")
    if p.size == 0:
        raise MetricUndefinedError("accuracy of an empty set")
    return float(np.mean((p >= threshold).astype(np.int64) == y))


# ---------------------------------------------------------------------------
# reports


@dataclass
class SetResult:
    name: str
    n_real: int
    n_fake: int
    acc: float
    ap: float
    skipped: int = 0


@dataclass
class EvalReport:
    sets: list[SetResult]
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sets:
            raise MetricUndefinedError("evaluation report has no sets")

    @property
    def mAP(self) -> float:
        return float(np.mean([s.ap for s in self.sets]))

    @property
    def mean_acc(self) -> float:
        return float(np.mean([s.acc for s in self.sets]))

    def result(self, name: str) -> SetResult:
        for s in self.sets:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [f"# {k}: {v}" for k, v in self.metadata.items()]
        lines.append(f"{'set':<24} {'n_real':>7} {'n_fake':>7} {'ACC':>8} {'AP':>8} {'skipped':>8}")
        for s in self.sets:
            lines.append(f"{s.name:<24} {s.n_real:>7} {s.n_fake:>7} {s.acc:>8.4f} {s.ap:>8.4f} {s.skipped:>8}")
        lines.append(f"{'mean':<24} {'':>7} {'':>7} {self.mean_acc:>8.4f} {self.mAP:>8.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["set", "n_real", "n_fake", "acc", "ap", "skipped"])
        for s in self.sets:
            w.writerow([s.name, s.n_real, s.n_fake, repr(s.acc), repr(s.ap), s.skipped])
        w.writerow(["mean", "", "", repr(self.mean_acc), repr(self.mAP), ""])
        return buf.getvalue()

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        txt, cs = stem.with_suffix(".txt"), stem.with_suffix(".csv")
        txt.write_text(self.to_text(), encoding="utf-8")
        cs.write_text(self.to_csv(), encoding="utf-8")
        return txt, cs


def report_from_scores(
    scores: ScoreSet, set_of: dict[str, str], metadata: dict[str, str] | None = None, skipped: dict[str, int] | None = None
) -> EvalReport:
    """Group scored images into sets (first-appearance order) and compute ACC/AP per set."""
    if scores.labels is None:
        raise DataError("scores carry no labels; cannot evaluate")
    names: list[str] = []
    groups: dict[str, list[int]] = {}
    for i, p in enumerate(scores.paths):
        name = set_of.get(p, "all")
        if name not in groups:
            names.append(name)
            groups[name] = []
        groups[name].append(i)
    skipped = skipped or {}
    results = []
    for name in names:
        idx = np.asarray(groups[name])
        z, y = scores.logits[idx], scores.labels[idx]
        try:
            ap = average_precision(z, y)
        except MetricUndefinedError:
            raise MetricUndefinedError(f"set {name!r} has only one class; AP undefined") from None
        results.append(SetResult(name, int(np.sum(y == 0)), int(np.sum(y == 1)), accuracy(T.sigmoid_np(z), y), ap, skipped.get(name, 0)))
    meta = {"positive_class": POSITIVE_CLASS, "decision": "probability >= 0.5 is fake"}
    meta.update(metadata or {})
    return EvalReport(results, meta)


def _preprocess_meta(pre: PreprocessConfig) -> str:
    return f"bilinear resize {pre.resize_to}, centre crop {pre.crop}, representation {pre.representation}"


def evaluate(
    model: Model,
    manifest: DatasetManifest,
    split: str = "test",
    pre: PreprocessConfig | None = None,
    batch_size: int = 32,
    pooling: str | None = None,
    model_id: str = "",
    workers: int = 1,
    transform=None,
    extra_meta: dict[str, str] | None = None,
) -> tuple[EvalReport, ScoreSet]:
    pre = pre or PreprocessConfig(representation=model.config.representation)
    scores = score_records(model, manifest, split, pre, batch_size, pooling, workers, transform)
    set_of = {r.path: set_name(r) for r in manifest.split(split)}
    skipped: dict[str, int] = {}
    for path, _ in scores.errors:
        skipped[set_of[path]] = skipped.get(set_of[path], 0) + 1
    meta = {
        "model": model_id or model.config.kind,
        "pooling": pooling or model.config.pooling,
        "preprocessing": _preprocess_meta(pre),
        "split": split,
    }
    meta.update(extra_meta or {})
    return report_from_scores(scores, set_of, meta, skipped), scores


def jpeg_recompress(img: Image, quality: int) -> Image:
    from .jpeg import jpeg_decode, jpeg_encode

    return Image(jpeg_decode(jpeg_encode(img, quality)).pixels, img.source_format)


def _recompress_fakes(rec, img: Image, quality: int) -> Image:
    return jpeg_recompress(img, quality) if rec.label == "fake" else img


def jpeg_bias_sweep(
    model: Model,
    manifest: DatasetManifest,
    qualities=(100, 90, 80, 70),
    split: str = "test",
    pre: PreprocessConfig | None = None,
    batch_size: int = 32,
    model_id: str = "",
    workers: int = 1,
) -> dict[int, EvalReport]:
    """Re-encode the fake images of ``split`` at each quality (100 = untouched) and re-evaluate."""
    out = {}
    for q in qualities:
        q = int(q)
        if not 1 <= q <= 100:
            raise ConfigError(f"JPEG quality must be in [1, 100], got {q}")
        hook = None if q == 100 else partial(_recompress_fakes, quality=q)
        meta = {"jpeg_quality": str(q), "jpeg_pipeline": JPEG_PIPELINE if q != 100 else "none (passthrough)"}
        out[q], _ = evaluate(model, manifest, split, pre, batch_size, None, model_id, workers, hook, meta)
    return out


# ---------------------------------------------------------------------------
# ensembling

ALPHA_GRID = tuple(np.round(np.linspace(0.0, 4.0, 81), 10).tolist()) + (1e3, 1e6)


def ensemble_scores(a: ScoreSet, b: ScoreSet, alpha: float) -> ScoreSet:
    """Per-image ``logit_a + alpha * logit_b`` in ``a``'s order."""
    pa, pb = set(a.paths), set(b.paths)
    if pa != pb:
        diff = sorted(pa ^ pb)
        shown = ", ".join(diff[:10]) + (f" (+{len(diff) - 10} more)" if len(diff) > 10 else "")
        raise DataError(f"score files cover different images; symmetric difference: {shown}")
    bmap = b.by_path()
    zb = np.array([bmap[p] for p in a.paths])
    labels = a.labels
    if labels is None and b.labels is not None:
        lb = dict(zip(b.paths, b.labels.tolist()))
        labels = np.array([lb[p] for p in a.paths])
    return ScoreSet(list(a.paths), a.logits + alpha * zb, labels, [])


def search_alpha(a: ScoreSet, b: ScoreSet, grid=ALPHA_GRID) -> tuple[float, float]:
    """Alpha with the highest AP on a labelled (validation) score pair; ties go to the smaller alpha."""
    best = (-1.0, 0.0)
    for alpha in grid:
        comb = ensemble_scores(a, b, alpha)
        if comb.labels is None:
            raise DataError("alpha search needs labelled scores")
        ap = average_precision(comb.logits, comb.labels)
        if ap > best[0]:
            best = (ap, float(alpha))
    return best[1], best[0]


# ---------------------------------------------------------------------------
# bench


@dataclass
class BenchReport:
    model: str
    input_hw: tuple[int, int]
    flops: int
    params: int
    latency_ms_median: float
    latency_ms_p95: float
    repeats: int
    hardware: str

    def to_text(self) -> str:
        return (
            f"model: {self.model}\n"
            f"input: {self.input_hw[0]}x{self.input_hw[1]}\n"
            f"flops: {self.flops} ({self.flops / 1e9:.4f} G; {FLOP_CONVENTION})\n"
            f"params: {self.params} ({self.params / 1e6:.5f} M)\n"
            f"latency_median_ms: {self.latency_ms_median:.3f}\n"
            f"latency_p95_ms: {self.latency_ms_p95:.3f}\n"
            f"repeats: {self.repeats}\n"
            f"hardware: {self.hardware}\n"
        )


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'}, python {platform.python_version()}, numpy {np.__version__}, 1 worker"


def bench(model: Model, input_hw=(224, 224), repeats: int = 10, warmup: int = 1, seed: int = 0) -> BenchReport:
    """Cost-model FLOPs/params plus single-image, single-worker forward latency."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    h, w = input_hw
    x = T.Tensor(np.random.default_rng(seed).random((1, 3, h, w)))
    times = []
    with T.num_threads(1), T.no_grad():
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            model.forward(x, training=False)
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(times)
    return BenchReport(
        model.config.kind,
        (h, w),
        count_flops(model.config, (h, w)),
        count_params(model.config),
        float(np.median(arr)),
        float(np.percentile(arr, 95)),
        repeats,
        hardware_descriptor(),
    )
