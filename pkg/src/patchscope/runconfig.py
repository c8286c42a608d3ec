"""Flat ``key=value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .datasets import PreprocessConfig
from .errors import ConfigError, MissingFileError
from .nets import ModelConfig, ladeda_config, tiny_config
from .trainer import TrainConfig


@dataclass(frozen=True)
class Field:
    kind: type
    default: object
    help: str


def _b(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(s)


FIELDS: dict[str, Field] = {
    # paths
    "data": Field(str, "", "dataset manifest (TSV: path, label, split)"),
    "out": Field(str, "", "output directory"),
    "model": Field(str, "", "model file (PSCP1 container)"),
    "teacher": Field(str, "", "teacher model file"),
    "image": Field(str, "", "input image (PPM/PGM/JPEG)"),
    "root": Field(str, "", "directory tree with real/ and fake/ folders"),
    "distill_set": Field(str, "", "materialised distillation set to load instead of extracting"),
    "save_distill_set": Field(bool, False, "also write the distillation set to the output directory"),
    "scores_a": Field(str, "", "first score CSV"),
    "scores_b": Field(str, "", "second score CSV"),
    "val_scores_a": Field(str, "", "validation score CSV for the first scorer (alpha search)"),
    "val_scores_b": Field(str, "", "validation score CSV for the second scorer (alpha search)"),
    # model
    "arch": Field(str, "ladeda", "ladeda or tiny"),
    "patch_size": Field(int, 9, "LaDeDa receptive field (5 or 9)"),
    "width_divisor": Field(int, 1, "divide every LaDeDa width by this (desk-scale runs)"),
    "pooling": Field(str, "average", "average or max"),
    "init_seed": Field(int, 0, "weight initialisation seed"),
    # preprocessing
    "resize_to": Field(int, 256, "resize side before cropping"),
    "crop": Field(int, 224, "crop side"),
    "representation": Field(str, "raw", "raw or gradient"),
    # training (TrainConfig)
    "lr": Field(float, 2e-4, "initial learning rate"),
    "beta1": Field(float, 0.9, "Adam beta1"),
    "beta2": Field(float, 0.999, "Adam beta2"),
    "eps": Field(float, 1e-8, "Adam epsilon"),
    "batch_size": Field(int, 32, "batch size (images, or patches when distilling)"),
    "patience": Field(int, 5, "plateau patience in epochs"),
    "threshold": Field(float, 0.001, "val-accuracy gain that counts as improvement"),
    "drop_factor": Field(float, 10.0, "LR divisor on plateau"),
    "min_lr": Field(float, 1e-6, "stop once the LR falls below this"),
    "max_epochs": Field(int, 30, "epoch limit"),
    "seed": Field(int, 0, "seed for shuffling, crops and synthesis"),
    "precision": Field(str, "float32", "float32 or float64"),
    "workers": Field(int, 1, "image-loading worker lanes"),
    # distillation
    "mode": Field(str, "logit_mse", "logit_mse or hard_label"),
    # evaluation
    "split": Field(str, "test", "manifest split to use"),
    "qualities": Field(str, "100,90,80,70", "comma-separated JPEG qualities"),
    "alpha": Field(str, "", "ensemble weight; empty means grid search on validation scores"),
    "top_k": Field(int, 5, "number of most-fake patches to export"),
    "repeats": Field(int, 10, "timed forward passes"),
    "input_size": Field(int, 224, "square input side for the bench"),
    "default_split": Field(str, "test", "split for records outside train/val/test folders"),
    # synthesis
    "n_real": Field(int, 600, "real images to synthesise"),
    "n_fake": Field(int, 600, "fake images to synthesise"),
    "image_size": Field(int, 224, "synthetic image side"),
    "split_fractions": Field(str, "0.6666666666666666,0.16666666666666666,0.16666666666666666", "train,val,test fractions"),
    "real_jpeg_quality": Field(int, 0, "JPEG round-trip every real image at this quality (0 = off)"),
    # runtime
    "threads": Field(int, 0, "worker threads (0 = PATCHSCOPE_THREADS or 1)"),
}

_MODEL_KEYS = ["arch", "patch_size", "width_divisor", "pooling", "representation", "init_seed"]
_PRE_KEYS = ["resize_to", "crop", "representation"]
_TRAIN_KEYS = [k for k in TrainConfig.keys()]

COMMAND_KEYS: dict[str, list[str]] = {
    "synth": ["out", "n_real", "n_fake", "image_size", "seed", "split_fractions", "real_jpeg_quality"],
    "manifest": ["root", "out", "default_split"],
    "train": ["data", "out", *_MODEL_KEYS, *_PRE_KEYS, *_TRAIN_KEYS],
    "distill": ["teacher", "data", "out", "mode", "distill_set", "save_distill_set", *_PRE_KEYS, *_TRAIN_KEYS],
    "score": ["model", "data", "out", "split", "pooling", *_PRE_KEYS, "batch_size", "workers"],
    "heatmap": ["model", "image", "out", "top_k", *_PRE_KEYS],
    "eval": ["model", "data", "out", "split", "pooling", *_PRE_KEYS, "batch_size", "workers"],
    "jpeg-sweep": ["model", "data", "out", "split", "qualities", *_PRE_KEYS, "batch_size", "workers"],
    "ensemble": ["scores_a", "scores_b", "val_scores_a", "val_scores_b", "alpha", "out"],
    "bench": ["model", "arch", "patch_size", "width_divisor", "input_size", "repeats", "out"],
}
for _cmd in COMMAND_KEYS:
    COMMAND_KEYS[_cmd] = list(dict.fromkeys(COMMAND_KEYS[_cmd] + ["threads"]))


def parse_value(key: str, raw: str):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELDS[key].kind
    try:
        return _b(raw) if kind is bool else kind(raw.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k == "command":
            continue
        out[k] = parse_value(k, v)
    return out


def read_config(path: str | Path) -> dict[str, object]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MissingFileError(f"no such config file: {path}") from None
    return parse_text(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    """Resolved values for one command: defaults < config file < command-line flags."""

    def __init__(self, command: str, values: dict[str, object] | None = None):
        if command not in COMMAND_KEYS:
            raise ConfigError(f"unknown command {command!r}")
        self.command = command
        self.values = {k: FIELDS[k].default for k in COMMAND_KEYS[command]}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if key not in COMMAND_KEYS[self.command]:
            raise ConfigError(f"config key {key!r} does not apply to {self.command}")
        if isinstance(value, str) and FIELDS[key].kind is not str:
            value = parse_value(key, value)
        self.values[key] = value

    def __getitem__(self, key: str):
        if key not in self.values:
            if key in FIELDS:
                return FIELDS[key].default
            raise KeyError(key)
        return self.values[key]

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if self[k] in ("", None)]
        if missing:
            raise ConfigError(f"{self.command}: missing required setting(s) {', '.join(missing)}")

    def to_text(self) -> str:
        lines = [f"command={self.command}"]
        lines += [f"{k}={_fmt(self.values[k])}" for k in COMMAND_KEYS[self.command] if k in self.values]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, name: str = "resolved.cfg") -> Path:
        path = Path(out_dir) / name
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    # typed views ---------------------------------------------------------

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self[k] for k in TrainConfig.keys()})

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(resize_to=self["resize_to"], crop=self["crop"], representation=self["representation"], seed=self["seed"])

    def model_config(self) -> ModelConfig:
        arch = self["arch"]
        if arch == "ladeda":
            return ladeda_config(self["patch_size"], self["width_divisor"], self["pooling"], self["representation"])
        if arch == "tiny":
            return tiny_config(self["pooling"], self["representation"])
        raise ConfigError(f"arch must be ladeda or tiny, got {arch!r}")

    def int_list(self, key: str) -> list[int]:
        try:
            return [int(x) for x in str(self[key]).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {self[key]!r}") from None

    def float_list(self, key: str) -> list[float]:
        try:
            return [float(x) for x in str(self[key]).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated numbers, got {self[key]!r}") from None
