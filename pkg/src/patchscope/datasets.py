"""Manifests, preprocessing, the gradient representation and the synthetic real/fake generator."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, MissingFileError, PatchscopeError
from .imageio import Image, read_image, write_image

LABELS = ("real", "fake")
SPLITS = ("train", "val", "test")
IMAGE_EXTS = (".ppm", ".pgm", ".jpg", ".jpeg", ".jfif")


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    split: str

    @property
    def target(self) -> int:
        """1 for fake (the positive class), 0 for real."""
        return int(self.label == "fake")


@dataclass
class DatasetManifest:
    """Ordered records; paths are relative to ``root``."""

    records: list[Record]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for r in self.records:
            if r.label not in LABELS:
                raise ConfigError(f"{r.path}: label {r.label!r} not in {LABELS}")
            if r.split not in SPLITS:
                raise ConfigError(f"{r.path}: split {r.split!r} not in {SPLITS}")
            if r.path in seen:
                raise ConfigError(f"duplicate manifest path {r.path}")
            seen.add(r.path)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[Record]:
        """Records of one split; an empty requested split is an error."""
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        recs = [r for r in self.records if r.split == name]
        if not recs:
            raise DataError(f"manifest has no {name!r} records")
        return recs

    def has_split(self, name: str) -> bool:
        return any(r.split == name for r in self.records)

    def subset(self, splits) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split in splits], self.root)

    def resolve(self, rec: Record) -> Path:
        return self.root / rec.path

    def to_text(self) -> str:
        return "".join(f"{r.path}\t{r.label}\t{r.split}\n" for r in self.records)

    def save(self, path: str | Path) -> None:
        """Write the TSV; record paths are kept relative to the manifest's own directory."""
        path = Path(path)
        out = self
        if path.parent.resolve() != self.root.resolve():
            rebased = [Record(_relative(self.root / r.path, path.parent), r.label, r.split) for r in self.records]
            out = DatasetManifest(rebased, path.parent)
        path.write_text(out.to_text(), encoding="utf-8", newline="\n")


def _relative(target: Path, base: Path) -> str:
    return Path(os.path.relpath(target.resolve(), base.resolve())).as_posix()


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MissingFileError(f"no such manifest: {path}") from None
    records = []
    for n, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\r").split("\t")
        if len(parts) != 3:
            raise ConfigError(f"{path}:{n}: expected path<TAB>label<TAB>split, got {line!r}")
        records.append(Record(*parts))
    return DatasetManifest(records, path.parent)


def manifest_from_tree(root: str | Path, default_split: str = "test") -> DatasetManifest:
    """Index a WildRF-style tree: any directory named ``real`` or ``fake`` holds images of that label.

    The split is taken from the nearest ancestor directory named train/val/test, otherwise
    ``default_split``.
    """
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"no such directory: {root}")
    records = []
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.suffix.lower() not in IMAGE_EXTS:
            continue
        parts = p.relative_to(root).parts[:-1]
        labels = [d for d in parts if d in LABELS]
        if not labels:
            continue
        splits = [d for d in parts if d in SPLITS]
        records.append(Record(p.relative_to(root).as_posix(), labels[-1], splits[-1] if splits else default_split))
    if not records:
        raise DataError(f"no images under real/ or fake/ directories in {root}")
    return DatasetManifest(records, root)


def set_name(rec: Record) -> str:
    """Evaluation set of a record: the directory above its real/ or fake/ folder, else its split."""
    parts = Path(rec.path).parts[:-1]
    for i in range(len(parts) - 1, -1, -1):
        if parts[i] in LABELS:
            if i > 0 and parts[i - 1] not in SPLITS:
                return parts[i - 1]
            break
    return rec.split


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    resize_to: int = 256
    crop: int = 224
    representation: str = "raw"
    seed: int = 0
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.resize_to < 1 or self.crop < 1:
            raise ConfigError("resize_to and crop must be positive")
        if self.crop > self.resize_to:
            raise ConfigError(f"crop {self.crop} larger than resize_to {self.resize_to}")
        if self.representation not in ("raw", "gradient"):
            raise ConfigError(f"representation must be raw or gradient, got {self.representation!r}")
        if self.interpolation != "bilinear":
            raise ConfigError("only bilinear resizing is implemented")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights [n_out, n_in] with edge clamping."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize_bilinear(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a ``[C,H,W]`` array (no antialiasing)."""
    c, h, w = x.shape
    if (h, w) == (height, width):
        return x.copy()
    rh = _interp_matrix(h, height)
    rw = _interp_matrix(w, width)
    return np.einsum("oh,chw,pw->cop", rh, x, rw, optimize=True)


def crop_offsets(size: int, crop: int, train: bool, rng: np.random.Generator | None) -> tuple[int, int]:
    if train:
        if rng is None:
            raise ConfigError("random crops need an rng")
        return int(rng.integers(0, size - crop + 1)), int(rng.integers(0, size - crop + 1))
    off = (size - crop) // 2
    return off, off


def gradient_transform(x: np.ndarray) -> np.ndarray:
    """Per-channel forward-difference magnitude, same spatial size (last row/column replicated).

    Accepts ``[C,H,W]`` or ``[B,C,H,W]``.
    """
    x = np.asarray(x)
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise ConfigError(f"gradient_transform needs a 3-channel image, got shape {x.shape}")
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    dy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    return np.sqrt(dx * dx + dy * dy)


def preprocess(img: Image, cfg: PreprocessConfig, train: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Image -> ``[3,crop,crop]`` float64 in [0,1] (or its gradient magnitude)."""
    x = img.to_rgb().to_float()
    x = resize_bilinear(x, cfg.resize_to, cfg.resize_to)
    top, left = crop_offsets(cfg.resize_to, cfg.crop, train, rng)
    x = x[:, top : top + cfg.crop, left : left + cfg.crop]
    if cfg.representation == "gradient":
        x = gradient_transform(x)
    return np.ascontiguousarray(x)


@dataclass
class Batch:
    x: np.ndarray  # [B,3,crop,crop]
    labels: np.ndarray  # [B] 1 = fake
    paths: list[str]
    errors: list[tuple[str, str]]  # (path, message) of records that failed to load


def _record_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def _load_one(manifest: DatasetManifest, rec: Record, cfg: PreprocessConfig, train: bool, rng, hook=None):
    try:
        img = read_image(manifest.resolve(rec))
        if hook is not None:
            img = hook(rec, img)
        return preprocess(img, cfg, train, rng), None
    except (PatchscopeError, OSError) as e:
        return None, f"{type(e).__name__}: {e}"


def load_records(
    manifest: DatasetManifest,
    records: list[Record],
    cfg: PreprocessConfig,
    train: bool,
    rngs: list[np.random.Generator | None],
    workers: int = 1,
    hook=None,
) -> Batch:
    """Load and preprocess records in order; failures are reported per record.

    ``hook(record, image) -> image`` runs between decoding and preprocessing.
    """
    jobs = list(zip(records, rngs))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(lambda j: _load_one(manifest, j[0], cfg, train, j[1], hook), jobs))
    else:
        results = [_load_one(manifest, r, cfg, train, g, hook) for r, g in jobs]
    xs, labels, paths, errors = [], [], [], []
    for rec, (arr, err) in zip(records, results):
        if err is not None:
            errors.append((rec.path, err))
            continue
        xs.append(arr)
        labels.append(rec.target)
        paths.append(rec.path)
    if not xs:
        listing = "; ".join(f"{p} ({m})" for p, m in errors)
        raise DataError(f"every record in the batch failed to load: {listing}")
    return Batch(np.stack(xs), np.asarray(labels, dtype=np.int64), paths, errors)


def load_batch(
    manifest: DatasetManifest,
    split: str,
    batch_size: int,
    cfg: PreprocessConfig,
    rng: np.random.Generator,
    train: bool | None = None,
    workers: int = 1,
) -> Batch:
    """Draw ``batch_size`` records of ``split`` without replacement and preprocess them.

    Random crops are used for the train split unless ``train`` says otherwise.
    """
    recs = manifest.split(split)
    train = split == "train" if train is None else train
    idx = rng.permutation(len(recs))[: min(batch_size, len(recs))]
    seeds = rng.integers(0, 2**63, size=len(idx))
    rngs = [np.random.default_rng(int(s)) if train else None for s in seeds]
    return load_records(manifest, [recs[i] for i in idx], cfg, train, rngs, workers)


class BatchLoader:
    """Epoch-wise batches over one split; contents depend only on (manifest order, seed, epoch)."""

    def __init__(
        self,
        manifest: DatasetManifest,
        split: str,
        cfg: PreprocessConfig,
        batch_size: int,
        shuffle: bool,
        train: bool,
        workers: int = 1,
        image_hook=None,
    ):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.manifest = manifest
        self.records = manifest.split(split)
        self.cfg = cfg
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.train = train
        self.workers = workers
        self.image_hook = image_hook

    def __len__(self) -> int:
        return -(-len(self.records) // self.batch_size)

    def epoch(self, epoch: int = 0) -> Iterator[Batch]:
        n = len(self.records)
        order = np.arange(n)
        if self.shuffle:
            order = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, epoch, 2**31])).permutation(n)
        for a in range(0, n, self.batch_size):
            idx = order[a : a + self.batch_size]
            rngs = [_record_rng(self.cfg.seed, epoch, int(i)) if self.train else None for i in idx]
            yield load_records(
                self.manifest, [self.records[i] for i in idx], self.cfg, self.train, rngs, self.workers, self.image_hook
            )


# ---------------------------------------------------------------------------
# synthetic real/fake data

SENSOR_SIGMA = 2.0
OCTAVES = 5
BASE_CELLS = 3


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3 - 2 * t)


def value_noise(size: int, rng: np.random.Generator, octaves: int = OCTAVES, base_cells: int = BASE_CELLS) -> np.ndarray:
    """Multi-octave smoothstep value noise, ``[size,size,3]`` in [0,255]."""
    out = np.zeros((size, size, 3))
    amp = 1.0
    total = 0.0
    for o in range(octaves):
        cells = base_cells * 2**o
        lattice = rng.random((cells + 1, cells + 1, 3))
        t = (np.arange(size) + 0.5) / size * cells
        i = np.minimum(t.astype(np.int64), cells - 1)
        f = _smoothstep(t - i)
        rows = lattice[i] * (1 - f)[:, None, None] + lattice[i + 1] * f[:, None, None]
        layer = rows[:, i] * (1 - f)[None, :, None] + rows[:, i + 1] * f[None, :, None]
        out += amp * layer
        total += amp
        amp *= 0.5
    out /= total
    lo, hi = out.min(), out.max()
    return 20 + 215 * (out - lo) / max(hi - lo, 1e-12)


def _down_up(content: np.ndarray) -> np.ndarray:
    chw = content.transpose(2, 0, 1)
    h, w = chw.shape[1:]
    small = resize_bilinear(chw, h // 2, w // 2)
    return resize_bilinear(small, h, w).transpose(1, 2, 0)


def synth_image(label: str, size: int, rng: np.random.Generator) -> Image:
    content = value_noise(size, rng)
    if label == "real":
        px = content + rng.normal(0.0, SENSOR_SIGMA, content.shape)
    else:
        px = _down_up(content)
    return Image(np.clip(np.rint(px), 0, 255).astype(np.uint8), "ppm")


def mean_abs_laplacian(img: Image | np.ndarray) -> float:
    """Mean |4-neighbour Laplacian| of the luma channel over interior pixels."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    px = px.astype(np.float64)
    y = px[..., :3] @ np.array([0.299, 0.587, 0.114]) if px.ndim == 3 and px.shape[-1] == 3 else px.reshape(px.shape[:2])
    lap = y[1:-1, :-2] + y[1:-1, 2:] + y[:-2, 1:-1] + y[2:, 1:-1] - 4 * y[1:-1, 1:-1]
    return float(np.abs(lap).mean())


def _split_sizes(n: int, fractions: tuple[float, float, float]) -> list[int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    return [n_train, n_val, max(n - n_train - n_val, 0)]


def synth_generate(
    n_real: int,
    n_fake: int,
    image_size: int,
    seed: int,
    out_dir: str | Path,
    split_fractions: tuple[float, float, float] = (2 / 3, 1 / 6, 1 / 6),
    real_jpeg_quality: int | None = None,
) -> DatasetManifest:
    """Write a synthetic dataset (PPM files + ``manifest.tsv``) and return its manifest.

    Real images are value noise plus Gaussian sensor noise; fakes are value noise
    passed through a 2x bilinear down/up-sampling.  ``real_jpeg_quality`` JPEG
    round-trips every real image, giving a compression-confounded set.
    """
    if n_real < 0 or n_fake < 0 or n_real + n_fake == 0:
        raise ConfigError("synth_generate needs at least one image")
    if image_size < 2:
        raise ConfigError("image_size must be >= 2")
    if abs(sum(split_fractions) - 1) > 1e-9 or min(split_fractions) < 0:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {split_fractions}")
    if n_real == 0:
        warnings.warn("synth_generate: n_real=0, manifest holds fake records only", stacklevel=2)
    if n_fake == 0:
        warnings.warn("synth_generate: n_fake=0, manifest holds real records only", stacklevel=2)
    out = Path(out_dir)
    records = []
    for ci, (label, count) in enumerate((("real", n_real), ("fake", n_fake))):
        idx = 0
        for split, k in zip(SPLITS, _split_sizes(count, split_fractions)):
            folder = out / split / label
            folder.mkdir(parents=True, exist_ok=True)
            for _ in range(k):
                rng = np.random.default_rng(np.random.SeedSequence([seed, ci, idx]))
                img = synth_image(label, image_size, rng)
                if label == "real" and real_jpeg_quality is not None:
                    from .jpeg import jpeg_decode, jpeg_encode

                    img = Image(jpeg_decode(jpeg_encode(img, real_jpeg_quality)).pixels, "ppm")
                rel = f"{split}/{label}/{idx:05d}.ppm"
                write_image(out / rel, img)
                records.append(Record(rel, label, split))
                idx += 1
    manifest = DatasetManifest(records, out)
    manifest.save(out / "manifest.tsv")
    return manifest
