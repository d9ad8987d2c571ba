"""``ifgan`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, TrainConfig
from .data import (
    EXPRESSION_NAMES,
    FaceSample,
    FormatError,
    augment,
    denormalize,
    load_corpus,
    make_folds,
    preprocess,
    read_pgm,
    save_corpus,
    synth_corpus,
    write_pgm,
)
from .tensor import Tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GUTTER = 4
RESUMABLE_KEYS = {"steps", "checkpoint_every", "eval_every", "log_wall_time"}

log = logging.getLogger("ifgan")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict | None
    out_dir: Path
    files: list[str] = field(default_factory=list)

    def add(self, path) -> Path:
        path = Path(path)
        rel = os.path.relpath(path, self.out_dir)
        if rel not in self.files:
            self.files.append(rel)
        return path

    def write(self) -> Path:
        path = self.out_dir / "run_manifest.json"
        doc = {"run_id": self.run_id, "command": self.command, "config": self.config, "files": self.files}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


def _run_manifest(command: str, config: TrainConfig | None, out_dir: Path, extra: str = "") -> RunManifest:
    key = f"{command}\n{config.to_json() if config else ''}\n{extra}"
    run_id = hashlib.sha256(key.encode()).hexdigest()[:12]
    out_dir.mkdir(parents=True, exist_ok=True)
    return RunManifest(run_id, command, config.to_dict() if config else None, out_dir)


def _workers() -> int:
    raw = os.environ.get("IFGAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"IFGAN_THREADS must be an integer, got {raw!r}")
    return max(1, min(n, os.cpu_count() or 1))


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def _load_prepared(corpus_path, side: int):
    from .training import PreparedCorpus

    path = _manifest_path(corpus_path)
    if not path.exists():
        raise DataError(f"corpus manifest not found: {path}")
    samples, meta = load_corpus(path)
    return PreparedCorpus(samples, side, workers=_workers()), meta


def _config_from(args, base: TrainConfig | None = None, **overrides) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else (base or TrainConfig())
    changes = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.precision is not None:
        changes["precision"] = args.precision
    return cfg.replace(**changes) if changes else cfg


def _out_dir(args, default: str) -> Path:
    return Path(args.out_dir or default)


# -- verbs --------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    for name in ("identities", "classes", "levels", "side"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be positive")
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.side < 32:
        raise UsageError("--side must be at least 32")
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args, "corpus")
    samples = synth_corpus(args.identities, args.classes, args.levels, args.side, seed, args.affinity)
    try:
        path = save_corpus(samples, out, args.classes, args.levels, args.side, seed, args.affinity)
    except OSError as err:
        raise DataError(f"cannot write corpus to {out}: {err}")
    print(f"wrote {len(samples)} images and {path}")
    return EXIT_OK


def _save_checkpoint(manifest: RunManifest, path: Path, config, trainer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path, config, trainer.models, trainer.opts, trainer.step)
    manifest.add(path)


def cmd_train(args) -> int:
    from .plotting import plot_losses
    from .training import FoldData, Trainer, truncate_metrics, write_metrics_header

    overrides = dict(fold=args.fold, steps=args.steps, corpus=args.corpus, lambda1=args.lambda1,
                     lambda2=args.lambda2, lambda3=args.lambda3)
    resume = None
    if args.resume:
        resume = ckpt.load(args.resume)
        base = TrainConfig.from_dict(resume.config)
        cfg = _config_from(args, base, **overrides)
        a, b = base.to_dict(), cfg.to_dict()
        diff = sorted(k for k in a if a[k] != b[k] and k not in RESUMABLE_KEYS)
        if diff:
            raise UsageError(f"resume config differs from checkpoint in: {', '.join(diff)}")
    else:
        cfg = _config_from(args, **overrides)

    out = _out_dir(args, f"runs/fold{cfg.fold}")
    manifest = _run_manifest("train", cfg, out)
    corpus, _ = _load_prepared(cfg.corpus, cfg.image_side)
    data = FoldData(corpus, cfg)
    trainer = Trainer(cfg, data)
    metrics = out / "metrics.csv"
    if resume is not None:
        _, trainer.models, trainer.opts, trainer.step = ckpt.to_training(resume, cfg.dtype)
        if trainer.models.e_desc.num_classes != data.K:
            raise DataError(f"checkpoint has {trainer.models.e_desc.num_classes} classes, corpus has {data.K}")
        if metrics.exists():
            truncate_metrics(metrics, trainer.step)
        else:
            write_metrics_header(metrics)
    else:
        write_metrics_header(metrics)
    manifest.add(metrics)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    manifest.add(out / "config.json")

    def on_step(tr, m):
        if cfg.checkpoint_every and tr.step % cfg.checkpoint_every == 0:
            _save_checkpoint(manifest, out / "checkpoints" / f"step_{tr.step:06d}.ifg", cfg, tr)
        if tr.step % 50 == 0:
            log.info("step %d d %.4f g_adv %.4f l1 %.4f expr %.4f/%.4f", m.step, m.d_loss, m.g_adv, m.l1,
                     m.expr_real, m.expr_fake)

    remaining = max(0, cfg.steps - trainer.step)
    t0 = time.perf_counter()
    trainer.train(remaining, metrics, on_step)
    _save_checkpoint(manifest, out / "checkpoints" / "final.ifg", cfg, trainer)
    manifest.add(plot_losses(metrics, out / "losses.png"))
    manifest.add(manifest.write())
    print(f"trained steps {trainer.step - remaining + 1}..{trainer.step} in {time.perf_counter() - t0:.1f}s; "
          f"final checkpoint {out / 'checkpoints' / 'final.ifg'}")
    return EXIT_OK


def _restore(args):
    from .training import FoldData

    ck = ckpt.load(args.checkpoint)
    cfg, models, _, step = ckpt.to_training(ck)
    if getattr(args, "fold", None) is not None and args.fold != cfg.fold:
        raise UsageError(f"--fold {args.fold} does not match the checkpoint's fold {cfg.fold}")
    if getattr(args, "corpus", None):
        cfg = cfg.replace(corpus=args.corpus)
    corpus, _ = _load_prepared(cfg.corpus, cfg.image_side)
    if corpus.num_classes != models.e_desc.num_classes:
        raise DataError(f"corpus has {corpus.num_classes} classes, checkpoint expects {models.e_desc.num_classes}")
    return cfg, models, step, FoldData(corpus, cfg)


def cmd_eval(args) -> int:
    from .plotting import plot_confusion
    from .training import evaluate, probe_sets

    cfg, models, step, data = _restore(args)
    res = evaluate(models, data)
    probe_in, probe_gen = probe_sets(models, data, cfg.seed)
    n_ids = len(data.corpus.identities())
    report = {
        "fold": cfg.fold,
        "step": step,
        "test_identities": data.test_ids,
        "test_count": len(data.test),
        "accuracy": res.accuracy,
        "confusion": res.confusion.tolist(),
        "expression_chance": 1.0 / data.K,
        "probe_input": probe_in,
        "probe_generated": probe_gen,
        "probe_chance": 1.0 / n_ids,
    }
    out = _out_dir(args, f"runs/fold{cfg.fold}/eval")
    manifest = _run_manifest("eval", cfg, out, Path(args.checkpoint).name)
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    manifest.add(path)
    manifest.add(plot_confusion(res.confusion, out / "confusion.png", f"fold {cfg.fold}, step {step}"))
    manifest.add(manifest.write())
    print(f"fold {cfg.fold} step {step}: accuracy {res.accuracy:.4f} on {len(data.test)} test images; "
          f"identity probe input {probe_in:.3f} generated {probe_gen:.3f} (chance {1.0 / n_ids:.3f})")
    return EXIT_OK


def _keypoints_for(path: Path, manifest_entries: dict) -> np.ndarray:
    sidecar = path.with_suffix(".kps.json")
    if sidecar.exists():
        kps = np.asarray(json.loads(sidecar.read_text()), dtype=np.float64)
    elif path.resolve() in manifest_entries:
        kps = np.asarray(manifest_entries[path.resolve()], dtype=np.float64)
    else:
        raise DataError(f"no keypoints for {path} (expected {sidecar.name} or a manifest entry)")
    if kps.shape != (3, 2):
        raise DataError(f"keypoints for {path} must be 3 [x, y] pairs, got shape {kps.shape}")
    return kps


def transfer_grid(panels: list[list[np.ndarray]], gutter: int = GUTTER) -> np.ndarray:
    """Tile rows of equally sized uint8 panels with white gutters between them."""
    m = panels[0][0].shape[0]
    cols = len(panels[0])
    grid = np.full((len(panels) * m + (len(panels) - 1) * gutter, cols * m + (cols - 1) * gutter), 255, np.uint8)
    for r, row in enumerate(panels):
        for c, img in enumerate(row):
            y, x = r * (m + gutter), c * (m + gutter)
            grid[y:y + m, x:x + m] = img
    return grid


def cmd_transfer(args) -> int:
    from .plotting import plot_transfer
    from .training import predict

    cfg, models, _, data = _restore(args)
    entries = {}
    if args.manifest:
        doc = json.loads(Path(args.manifest).read_text())
        root = Path(args.manifest).parent
        entries = {(root / e["path"]).resolve(): e["keypoints"] for e in doc.get("samples", [])}
    rows, names = [], []
    for raw in args.images:
        path = Path(raw)
        try:
            image = read_pgm(path)
        except OSError as err:
            raise DataError(f"cannot read {path}: {err}")
        kps = _keypoints_for(path, entries)
        sample = FaceSample(image, -1, -1, 0, kps, path=str(path))
        x = augment(preprocess(sample, cfg.image_side), "test", cfg.resize_side, cfg.crop_side).astype(cfg.dtype)
        i_se = Tensor(x[None, None])
        i_an = Tensor(data.i_an[None, None].copy())
        logits, gen = predict(models, i_an, i_se)
        k = int(np.argmax(logits[0]))
        rows.append([denormalize(x), denormalize(data.i_an), denormalize(gen[0, 0]), denormalize(data.i_ae[k])])
        name = EXPRESSION_NAMES[k] if k < len(EXPRESSION_NAMES) else str(k)
        names.append(name)
        print(f"{path}: predicted {name} (class {k})")
    grid = transfer_grid(rows)
    out_path = Path(args.out) if args.out else _out_dir(args, "transfer") / "transfer.pgm"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = _run_manifest("transfer", cfg, out_path.parent, "\n".join(args.images))
    write_pgm(out_path, grid)
    manifest.add(out_path)
    manifest.add(plot_transfer(grid, out_path.with_suffix(".png"),
                               "input | average neutral | generated | average of predicted class"))
    manifest.add(manifest.write())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    if args.scale < 1:
        raise UsageError("--scale must be >= 1")
    t0 = time.perf_counter()
    results = run_suite(scale=args.scale, seed=0 if args.seed is None else args.seed, log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_folds(args) -> int:
    cfg = _config_from(args, n_folds=args.n_folds, corpus=args.corpus)
    if args.identities is not None:
        ids = list(range(args.identities))
    else:
        path = _manifest_path(cfg.corpus)
        if not path.exists():
            raise DataError(f"corpus manifest not found: {path} (or pass --identities)")
        doc = json.loads(path.read_text())
        ids = sorted({e["identity_id"] for e in doc.get("samples", [])})
    try:
        plan = make_folds(ids, cfg.n_folds, cfg.seed)
    except ValueError as err:
        raise UsageError(str(err))
    doc = plan.to_dict()
    doc["runs"] = [dict(zip(("train", "validation", "test"), plan.run(r))) for r in range(plan.n_folds)]
    print(json.dumps(doc, indent=1))
    return EXIT_OK


def cmd_cross_validate(args) -> int:
    from .plotting import plot_confusion, plot_cv_summary
    from .training import run_cross_validation

    cfg = _config_from(args, steps=args.steps, corpus=args.corpus, n_folds=args.n_folds,
                       spurious_keep_other=args.spurious_keep_other)
    folds = args.folds if args.folds else None
    if folds and any(not 0 <= f < cfg.n_folds for f in folds):
        raise UsageError(f"--folds entries must lie in [0, {cfg.n_folds})")
    corpus, _ = _load_prepared(cfg.corpus, cfg.image_side)
    out = _out_dir(args, "runs/cv")
    manifest = _run_manifest("cross-validate", cfg, out, str(folds))
    report = run_cross_validation(
        cfg, corpus, folds,
        progress=lambda e: print(f"fold {e['fold']}: ifgan {e['accuracy']:.3f} baseline "
                                 f"{e['baseline_accuracy']:.3f} probe {e['probe_input']:.3f} -> "
                                 f"{e['probe_generated']:.3f}", flush=True))
    path = out / "cv_report.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    manifest.add(path)
    manifest.add(plot_cv_summary(report, out / "cv_summary.png"))
    for f in report["per_fold"]:
        manifest.add(plot_confusion(f["confusion"], out / f"confusion_fold{f['fold']}.png", f"fold {f['fold']}"))
    manifest.add(manifest.write())
    print(f"mean accuracy ifgan {report['mean_accuracy']:.4f} baseline {report['baseline_mean_accuracy']:.4f} "
          f"(chance {report['chance']:.4f})")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON TrainConfig file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", default=argparse.SUPPRESS)
    common.add_argument("--precision", choices=("f32", "f64"), default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="ifgan", description="Identity-free expression recognition with a conditional GAN.",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", parents=[common], help="render a synthetic face corpus")
    s.add_argument("--identities", type=int, default=20)
    s.add_argument("--classes", type=int, default=6)
    s.add_argument("--levels", type=int, default=4)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--affinity", action="store_true",
                   help="tie each identity's appearance to one expression class")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", parents=[common], help="train G, D and E on one fold")
    s.add_argument("--fold", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--corpus")
    s.add_argument("--resume", help="checkpoint to continue from")
    for k in (1, 2, 3):
        s.add_argument(f"--lambda{k}", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="test accuracy and identity probes of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--fold", type=int)
    s.add_argument("--corpus")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("transfer", parents=[common], help="render expression-transfer grids")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", help="corpus manifest supplying keypoints")
    s.add_argument("--corpus")
    s.add_argument("--out", help="output PGM path")
    s.add_argument("images", nargs="+")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    s.add_argument("--scale", type=int, default=1, help="spatial size multiplier for primitive checks")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("folds", parents=[common], help="print the subject-exclusive fold plan")
    s.add_argument("--n-folds", type=int)
    s.add_argument("--identities", type=int, help="use identities 0..N-1 instead of a corpus")
    s.add_argument("--corpus")
    s.set_defaults(func=cmd_folds)

    s = sub.add_parser("cross-validate", parents=[common], help="train and test IF-GAN and the baseline on every fold")
    s.add_argument("--steps", type=int)
    s.add_argument("--n-folds", type=int)
    s.add_argument("--folds", type=int, nargs="*")
    s.add_argument("--corpus")
    s.add_argument("--spurious-keep-other", type=float)
    s.set_defaults(func=cmd_cross_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for name in ("config", "seed", "out_dir", "precision"):
            if not hasattr(args, name):
                setattr(args, name, None)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ckpt.CheckpointError, json.JSONDecodeError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
