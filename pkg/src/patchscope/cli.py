"""Command-line entry point: ``patchscope <command> [flags]``.

Every command accepts ``--config FILE`` (flat key=value), per-key flags that
override the file, and ``--set key=value``.  The fully resolved configuration
is written to ``resolved.cfg`` in the output directory.  Failures print one
line ``error: <ErrorClass>: <message>`` to stderr and exit with the error's code.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, PatchscopeError
from .runconfig import COMMAND_KEYS, FIELDS, RunConfig, read_config

HELP = {
    "synth": "generate the synthetic real/fake dataset",
    "manifest": "index a directory tree of real/ and fake/ folders",
    "train": "train a detector on the train split, selecting on val",
    "distill": "distil a trained teacher into the tiny student",
    "score": "write per-image logits and probabilities",
    "heatmap": "export a patch-score heatmap and the most-fake patches of one image",
    "eval": "ACC/AP report for one split",
    "jpeg-sweep": "re-evaluate with fake images JPEG-recompressed at several qualities",
    "ensemble": "combine two score files linearly",
    "bench": "FLOPs, parameters and single-image latency",
}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchscope", description=__doc__.split("\n\n")[0])
    parser.add_argument("--threads", dest="threads_global", type=int, default=None,
                        help="worker threads (also PATCHSCOPE_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, keys in COMMAND_KEYS.items():
        p = sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd])
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        for key in keys:
            f = FIELDS[key]
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=f.kind.__name__.upper(),
                           help=f"{f.help} (default: {f.default!r})")
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(args.command)
    if args.config:
        for k, v in read_config(args.config).items():
            cfg.set(k, v)
    for key in COMMAND_KEYS[args.command]:
        v = getattr(args, key, None)
        if v is not None:
            cfg.set(key, v)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    if getattr(args, "threads_global", None) is not None and cfg["threads"] == 0:
        cfg.set("threads", args.threads_global)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    cfg.require("out")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> None:
    from .datasets import synth_generate

    out = _out_dir(cfg)
    fr = cfg.float_list("split_fractions")
    if len(fr) != 3:
        raise ConfigError("split_fractions needs three values")
    q = cfg["real_jpeg_quality"] or None
    m = synth_generate(cfg["n_real"], cfg["n_fake"], cfg["image_size"], cfg["seed"], out, tuple(fr), q)
    cfg.write(out)
    _log(f"wrote {len(m)} images and {out / 'manifest.tsv'}")


def cmd_manifest(cfg: RunConfig) -> None:
    from .datasets import manifest_from_tree

    cfg.require("root", "out")
    m = manifest_from_tree(cfg["root"], cfg["default_split"])
    out = Path(cfg["out"])
    if out.suffix.lower() != ".tsv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "manifest.tsv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    m.save(out)
    cfg.write(out.parent)
    _log(f"wrote {len(m)} records to {out}")


def cmd_train(cfg: RunConfig) -> None:
    from .datasets import load_manifest
    from .nets import build
    from .trainer import TrainingAborted, fit

    cfg.require("data")
    out = _out_dir(cfg)
    cfg.write(out)
    manifest = load_manifest(cfg["data"])
    model = build(cfg.model_config(), seed=cfg["init_seed"])
    try:
        _, log = fit(model, manifest, cfg.train_config(), cfg.preprocess_config(), progress=_log)
    except TrainingAborted as e:
        e.log.save(out / "trainlog.txt")
        raise
    log.save(out / "trainlog.txt")
    model.save(out / "model.bin")
    _log(f"wrote {out / 'model.bin'} and {out / 'trainlog.txt'}")


def cmd_distill(cfg: RunConfig) -> None:
    from .datasets import load_manifest
    from .distill import DistillSet, build_distill_set, train_student
    from .nets import load_model
    from .trainer import TrainingAborted

    out = _out_dir(cfg)
    if cfg["distill_set"]:
        # stored patches are already in their representation; the student must be told it via config
        cfg.write(out)
        samples = DistillSet.load(cfg["distill_set"])
    else:
        cfg.require("teacher", "data")
        teacher = load_model(cfg["teacher"])
        if cfg["representation"] != teacher.config.representation:
            _log(f"note: using the teacher's representation {teacher.config.representation!r}")
            cfg.set("representation", teacher.config.representation)
        cfg.write(out)
        samples = build_distill_set(teacher, load_manifest(cfg["data"]), cfg.preprocess_config(), workers=cfg["workers"])
    if cfg["save_distill_set"]:
        samples.save(out / "distill_set.bin")
    from .nets import build_tiny, tiny_config

    student = build_tiny(tiny_config(representation=cfg["representation"]), seed=cfg["seed"])
    try:
        _, log = train_student(samples, cfg["mode"], cfg.train_config(), student, progress=_log)
    except TrainingAborted as e:
        e.log.save(out / "distill_log.txt")
        raise
    log.save(out / "distill_log.txt")
    student.save(out / "student.bin")
    _log(f"wrote {out / 'student.bin'} from {len(samples)} patch samples")


def _scoring_inputs(cfg: RunConfig):
    from .datasets import PreprocessConfig, load_manifest
    from .nets import load_model

    cfg.require("model", "data")
    model = load_model(cfg["model"])
    pre = cfg.preprocess_config()
    if pre.representation != model.config.representation:
        _log(f"note: using the model's representation {model.config.representation!r}")
        pre = PreprocessConfig(pre.resize_to, pre.crop, model.config.representation, pre.seed)
        cfg.set("representation", model.config.representation)
    return model, load_manifest(cfg["data"]), pre


def cmd_score(cfg: RunConfig) -> None:
    from .scorer import score_records, write_scores

    out = _out_dir(cfg)
    model, manifest, pre = _scoring_inputs(cfg)
    cfg.write(out)
    scores = score_records(model, manifest, cfg["split"], pre, cfg["batch_size"], cfg["pooling"], cfg["workers"])
    write_scores(out / "scores.csv", scores)
    for path, msg in scores.errors:
        _log(f"skipped {path}: {msg}")
    _log(f"wrote {len(scores.paths)} scores to {out / 'scores.csv'}")


def cmd_eval(cfg: RunConfig) -> None:
    from .evaluate import evaluate
    from .scorer import write_scores

    out = _out_dir(cfg)
    model, manifest, pre = _scoring_inputs(cfg)
    cfg.write(out)
    report, scores = evaluate(model, manifest, cfg["split"], pre, cfg["batch_size"], cfg["pooling"],
                              Path(cfg["model"]).name, cfg["workers"])
    report.save(out / "report")
    write_scores(out / "scores.csv", scores)
    print(report.to_text(), end="")


def cmd_jpeg_sweep(cfg: RunConfig) -> None:
    from .evaluate import jpeg_bias_sweep

    out = _out_dir(cfg)
    model, manifest, pre = _scoring_inputs(cfg)
    cfg.write(out)
    qualities = cfg.int_list("qualities")
    if not qualities:
        raise ConfigError("qualities is empty")
    reports = jpeg_bias_sweep(model, manifest, qualities, cfg["split"], pre, cfg["batch_size"], Path(cfg["model"]).name,
                              cfg["workers"])
    for q, rep in reports.items():
        rep.save(out / f"report_q{q}")
        print(f"quality {q}: mean ACC {rep.mean_acc:.4f}  mAP {rep.mAP:.4f}")


def cmd_heatmap(cfg: RunConfig) -> None:
    from .datasets import preprocess
    from .imageio import Image, read_image, write_image
    from .nets import load_model
    from .scorer import export_heatmap, fake_probability, image_score, score_map, top_k_patches

    cfg.require("model", "image")
    out = _out_dir(cfg)
    model = load_model(cfg["model"])
    cfg.set("representation", model.config.representation)
    cfg.write(out)
    img = read_image(cfg["image"])
    pre = cfg.preprocess_config()
    x = preprocess(img, pre, train=False)
    smap = score_map(model, x, Path(cfg["image"]).name)
    export_heatmap(smap, out / "heatmap.pgm")
    # crops come from the resized/cropped raw image so they can be viewed
    raw = preprocess(img, type(pre)(pre.resize_to, pre.crop, "raw", pre.seed))
    view = Image(np.clip(np.rint(raw.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8))
    k = min(cfg["top_k"], smap.grid.size)
    rows = ["rank,row,col,y,x,logit"]
    for rank, tp in enumerate(top_k_patches(smap, view, k), 1):
        write_image(out / f"top{rank}.ppm", Image(tp.crop))
        y, x0 = smap.window(tp.row, tp.col)
        rows.append(f"{rank},{tp.row},{tp.col},{y},{x0},{tp.logit!r}")
    (out / "top_patches.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    logit = image_score(smap, model.config.pooling)
    print(f"{cfg['image']}: logit {logit:.6f} probability {fake_probability(logit):.6f} grid {smap.shape[0]}x{smap.shape[1]}")


def cmd_ensemble(cfg: RunConfig) -> None:
    from .evaluate import average_precision, ensemble_scores, report_from_scores, search_alpha
    from .scorer import read_scores, write_scores

    cfg.require("scores_a", "scores_b")
    out = _out_dir(cfg)
    a, b = read_scores(cfg["scores_a"]), read_scores(cfg["scores_b"])
    if cfg["alpha"] == "":
        cfg.require("val_scores_a", "val_scores_b")
        alpha, val_ap = search_alpha(read_scores(cfg["val_scores_a"]), read_scores(cfg["val_scores_b"]))
        _log(f"alpha={alpha!r} selected on validation (AP {val_ap:.4f})")
    else:
        try:
            alpha = float(cfg["alpha"])
        except ValueError:
            raise ConfigError(f"alpha must be a number, got {cfg['alpha']!r}") from None
    cfg.set("alpha", repr(alpha))
    cfg.write(out)
    comb = ensemble_scores(a, b, alpha)
    write_scores(out / "scores.csv", comb)
    if comb.labels is not None:
        rep = report_from_scores(comb, {}, {"ensemble": f"logit_a + {alpha!r} * logit_b"})
        rep.save(out / "report")
        print(f"ensemble AP {average_precision(comb.logits, comb.labels):.4f} (alpha={alpha!r})")


def cmd_bench(cfg: RunConfig) -> None:
    from .evaluate import bench
    from .nets import build, load_model

    out = _out_dir(cfg)
    model = load_model(cfg["model"]) if cfg["model"] else build(cfg.model_config())
    cfg.write(out)
    rep = bench(model, (cfg["input_size"], cfg["input_size"]), cfg["repeats"])
    (out / "bench.txt").write_text(rep.to_text(), encoding="utf-8")
    print(rep.to_text(), end="")


COMMANDS = {
    "synth": cmd_synth,
    "manifest": cmd_manifest,
    "train": cmd_train,
    "distill": cmd_distill,
    "score": cmd_score,
    "heatmap": cmd_heatmap,
    "eval": cmd_eval,
    "jpeg-sweep": cmd_jpeg_sweep,
    "ensemble": cmd_ensemble,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        threads = cfg["threads"] or T.threads_from_env(1)
        T.set_num_threads(threads)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda m, *a, **k: _log(f"warning: {m}")
            COMMANDS[args.command](cfg)
    except PatchscopeError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, MemoryError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
