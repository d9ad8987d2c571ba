"""Joint optimization of G, D and E, evaluation, and the identity-leakage probe."""

from __future__ import annotations

import contextlib
import copy
import csv
import logging
import time
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data.folds import FoldPlan, make_folds
from .data.preprocess import AverageFaces, augment, average_faces, preprocess
from .data.synth import FaceSample, spurious_training_subset
from .losses import combined_loss, d_loss, expr_loss_parts, g_adv_loss, l1_loss
from .models import ClassifierDesc, ModelBundle, classifier_forward, init_buffers
from .nn import Adam, ParamStore, init_params
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "d_loss", "g_adv", "l1", "expr_real", "expr_fake", "lr_g", "lr_d", "lr_e", "wall_ms")


class NumericalFailure(FloatingPointError):
    """A loss or gradient went non-finite; carries a diagnostic snapshot."""

    def __init__(self, msg: str, snapshot: dict):
        super().__init__(f"{msg}: {snapshot}")
        self.snapshot = snapshot


@dataclass
class StepMetrics:
    step: int
    d_loss: float
    g_adv: float
    l1: float
    expr_real: float
    expr_fake: float
    lr_g: float
    lr_d: float
    lr_e: float
    wall_ms: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(v)) for v in astuple(self)[1:]]


@dataclass
class Batch:
    i_an: Tensor
    i_se: Tensor
    i_ae: Tensor
    labels: np.ndarray


@dataclass
class Optimizers:
    g: Adam
    d: Adam
    e: Adam


# -- data for one cross-validation run ---------------------------------------


class PreparedCorpus:
    """Aligned and equalized images for a corpus, computed once."""

    def __init__(self, samples: Sequence[FaceSample], side: int, workers: int = 1):
        self.samples = list(samples)
        self.side = side
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                self.images = list(pool.map(lambda s: preprocess(s, side), self.samples))
        else:
            self.images = [preprocess(s, side) for s in self.samples]
        self.num_classes = 1 + max(s.expression_label for s in self.samples)

    def identities(self) -> list[int]:
        return sorted({s.identity_id for s in self.samples})


class FoldData:
    """Training pool, evaluation sets and fold averages for run ``config.fold``."""

    def __init__(self, corpus: PreparedCorpus, config: TrainConfig, num_classes: int | None = None):
        self.config = config
        self.corpus = corpus
        self.K = num_classes or corpus.num_classes
        self.plan: FoldPlan = make_folds(corpus.identities(), config.n_folds, config.seed)
        self.train_ids, self.val_ids, self.test_ids = self.plan.run(config.fold)
        train_set = set(self.train_ids)

        idx = list(range(len(corpus.samples)))
        if config.spurious_keep_other is not None:
            kept = spurious_training_subset(corpus.samples, self.train_ids, self.K,
                                            config.spurious_keep_other, config.seed)
            keep_ids = {id(s) for s in kept}
            idx = [i for i in idx if id(corpus.samples[i]) in keep_ids]
        train_idx = [i for i in idx if corpus.samples[i].identity_id in train_set]
        self.averages: AverageFaces = average_faces(
            [corpus.samples[i] for i in train_idx], [corpus.images[i] for i in train_idx],
            self.K, tuple(config.peak_levels))
        self.pool = [i for i in train_idx
                     if not corpus.samples[i].is_neutral
                     and corpus.samples[i].intensity_level >= config.train_min_level]
        peak = set(config.peak_levels)

        def eval_set(ids):
            ids = set(ids)
            return [i for i in range(len(corpus.samples))
                    if corpus.samples[i].identity_id in ids and not corpus.samples[i].is_neutral
                    and corpus.samples[i].intensity_level in peak]

        self.val = eval_set(self.val_ids)
        self.test = eval_set(self.test_ids)
        dt = config.dtype
        test_view = lambda img: augment(img, "test", config.resize_side, config.crop_side)
        self.i_an = test_view(self.averages.neutral).astype(dt)
        self.i_ae = np.stack([test_view(a) for a in self.averages.expressive]).astype(dt)

    def batch(self, step: int) -> Batch:
        """Training batch for ``step`` (a pure function of seed, fold and step)."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, cfg.fold, step, 101])
        B = min(cfg.batch_size, len(self.pool))
        chosen = rng.choice(len(self.pool), size=B, replace=False)
        imgs, labels = [], []
        for c in chosen:
            i = self.pool[c]
            imgs.append(augment(self.corpus.images[i], "train", cfg.resize_side, cfg.crop_side, rng))
            labels.append(self.corpus.samples[i].expression_label)
        return self._make_batch(np.stack(imgs), np.array(labels))

    def eval_inputs(self, indices: Sequence[int]) -> Batch:
        cfg = self.config
        imgs = [augment(self.corpus.images[i], "test", cfg.resize_side, cfg.crop_side) for i in indices]
        labels = [self.corpus.samples[i].expression_label for i in indices]
        return self._make_batch(np.stack(imgs), np.array(labels))

    def _make_batch(self, imgs: np.ndarray, labels: np.ndarray) -> Batch:
        dt = self.config.dtype
        B = len(imgs)
        return Batch(
            i_an=Tensor(np.broadcast_to(self.i_an, (B, 1) + self.i_an.shape).copy().astype(dt)),
            i_se=Tensor(imgs[:, None].astype(dt)),
            i_ae=Tensor(self.i_ae[labels][:, None].copy()),
            labels=labels,
        )

    def eval_batch_for_l1(self, n: int = 32) -> Batch:
        """Fixed, augmentation-free batch from the training pool."""
        step = max(1, len(self.pool) // n)
        return self.eval_inputs(self.pool[::step][:n])


# -- the optimization step ----------------------------------------------------


@contextlib.contextmanager
def frozen(*stores: ParamStore):
    """Stop recording weight gradients for the given stores."""
    saved = [(t, t.requires_grad) for s in stores for t in s.tensors()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, rg in saved:
            t.requires_grad = rg


def _max_grad(stores) -> float:
    vals = [float(np.max(np.abs(t.grad))) for s in stores for t in s.tensors() if t.grad is not None and t.grad.size]
    return max(vals, default=0.0)


def _check_finite(step: int, losses: dict, stores) -> None:
    bad = [k for k, v in losses.items() if not np.isfinite(v)]
    grads_ok = all(np.all(np.isfinite(t.grad)) for s in stores for t in s.tensors() if t.grad is not None)
    if bad or not grads_ok:
        snap = {"step": step, "losses": losses, "max_abs_grad": _max_grad(stores)}
        raise NumericalFailure("non-finite " + (", ".join(bad) if bad else "gradient"), snap)


def train_step(batch: Batch, models: ModelBundle, opts: Optimizers, config: TrainConfig,
               step: int = 0) -> StepMetrics:
    """One D update, one G update, one E update, in that order.

    Any non-finite loss or gradient aborts with a NumericalFailure carrying
    the step, the losses known so far and the largest gradient magnitude.
    """
    try:
        return _train_step(batch, models, opts, config, step)
    except NumericalFailure:
        raise
    except FloatingPointError as err:
        snap = {"step": step, "losses": {}, "max_abs_grad": _max_grad([models.g, models.d, models.e])}
        raise NumericalFailure(str(err), snap) from err


def _train_step(batch: Batch, models: ModelBundle, opts: Optimizers, config: TrainConfig,
                step: int) -> StepMetrics:
    t0 = time.perf_counter()
    w = config.weights
    i_an, i_se, i_ae, labels = batch.i_an, batch.i_se, batch.i_ae, batch.labels
    B = i_se.shape[0]

    # (1) discriminator: real tuple vs detached fake tuple
    fake = models.generate(i_an, i_se).detach()
    opts.d.zero_grad()
    with frozen(models.g, models.e), Tape() as tape:
        logits = models.discriminate(T.concat([i_an, i_an], 0), T.concat([i_se, i_se], 0),
                                     T.concat([i_ae, fake], 0))
        d = d_loss(logits[:B], logits[B:])
        obj_d = T.mul(d, w.adversarial)
    tape.backward(obj_d)
    _check_finite(step, {"d_loss": d.item()}, [models.d])
    opts.d.step()

    # (2) generator: fool D, match the average expressive face, keep the expression
    opts.g.zero_grad()
    with frozen(models.d, models.e), Tape() as tape:
        fake = models.generate(i_an, i_se)
        g_adv = g_adv_loss(models.discriminate(i_an, i_se, fake))
        l1 = l1_loss(fake, i_ae)
        ce_fake = T.cross_entropy(models.classify(i_se, fake, training=True, update_stats=False), labels)
        zero = T.Tensor(np.zeros((), dtype=fake.dtype))
        obj_g = combined_loss(zero, g_adv, l1, zero, ce_fake, w).generator
    tape.backward(obj_g)
    _check_finite(step, {"g_adv": g_adv.item(), "l1": l1.item()}, [models.g])
    opts.g.step()

    # (3) classifier on both pairs, generated image detached
    fake = models.generate(i_an, i_se).detach()
    opts.e.zero_grad()
    with frozen(models.g, models.d), Tape() as tape:
        logits = models.classify(T.concat([i_se, i_se], 0), T.concat([i_ae, fake], 0), training=True)
        e_real, e_fake = expr_loss_parts(logits[:B], logits[B:], labels)
        obj_e = T.mul(T.add(e_real, e_fake), w.expression)
    tape.backward(obj_e)
    _check_finite(step, {"expr_real": e_real.item(), "expr_fake": e_fake.item()}, [models.e])
    opts.e.step()

    wall = (time.perf_counter() - t0) * 1000.0 if config.log_wall_time else 0.0
    return StepMetrics(step, d.item(), g_adv.item(), l1.item(), e_real.item(), e_fake.item(),
                       opts.g.state.lr, opts.d.state.lr, opts.e.state.lr, wall)


def make_optimizers(models: ModelBundle, config: TrainConfig) -> Optimizers:
    b1, b2 = config.beta1, config.beta2
    return Optimizers(Adam(models.g, config.lr_g, b1, b2), Adam(models.d, config.lr_d, b1, b2),
                      Adam(models.e, config.lr_e, b1, b2))


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist()}


def predict(models: ModelBundle, i_an: Tensor, i_se: Tensor, chunk: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Test-time path: logits of E({I_SE, G({I_AN, I_SE})}) and the generated images."""
    logits, gens = [], []
    for lo in range(0, i_se.shape[0], chunk):
        a, s = i_an[lo:lo + chunk], i_se[lo:lo + chunk]
        g = models.generate(a, s)
        logits.append(models.classify(s, g, training=False).data)
        gens.append(g.data)
    return np.concatenate(logits), np.concatenate(gens)


def confusion_from(labels: np.ndarray, preds: np.ndarray, K: int) -> EvalResult:
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    return EvalResult(float(np.mean(preds == labels)), conf, preds)


def evaluate(models: ModelBundle, data: FoldData, indices: Sequence[int] | None = None) -> EvalResult:
    """Accuracy and confusion on the test fold (argmax, ties to the lowest class)."""
    indices = data.test if indices is None else indices
    if not indices:
        raise ValueError("empty evaluation set")
    overlap = data.averages.source_identities & {data.corpus.samples[i].identity_id for i in indices}
    if overlap:
        raise ValueError(f"evaluation identities {sorted(overlap)} contributed to the average faces")
    b = data.eval_inputs(indices)
    logits, _ = predict(models, b.i_an, b.i_se)
    return confusion_from(b.labels, np.argmax(logits, axis=1), data.K)


# -- identity-leakage probe -----------------------------------------------------


PROBE_STEPS = 200
PROBE_LR = 0.1
PROBE_POOL = 4


def probe_features(images: Sequence[np.ndarray] | np.ndarray, pool: int = PROBE_POOL) -> np.ndarray:
    x = np.asarray([np.asarray(getattr(im, "data", im), dtype=np.float64).reshape(
        np.asarray(getattr(im, "data", im)).shape[-2:]) for im in images])
    n, H, W = x.shape
    Hp, Wp = H // pool, W // pool
    x = x[:, :Hp * pool, :Wp * pool].reshape(n, Hp, pool, Wp, pool).mean(axis=(2, 4))
    return x.reshape(n, -1)


def stratified_split(ids: np.ndarray, seed: int, train_frac: float = 0.75) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 53])
    tr, te = [], []
    for c in np.unique(ids):
        members = np.flatnonzero(ids == c)
        members = members[rng.permutation(len(members))]
        k = int(round(train_frac * len(members)))
        tr += members[:k].tolist()
        te += members[k:].tolist()
    return np.array(sorted(tr)), np.array(sorted(te))


def identity_probe(images, identity_ids: Sequence[int], seed: int = 0) -> float:
    """Held-out accuracy of a linear softmax probe predicting identity from pixels.

    Features are 4x4 average-pooled pixels, centred on the training split.
    Protocol is fixed: 75/25 stratified split, zero-initialized weights,
    200 full-batch gradient steps at learning rate 0.1.
    """
    ids = np.asarray(identity_ids)
    classes, y = np.unique(ids, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("identity probe needs at least two identities")
    counts = np.bincount(y)
    if counts.min() < 4:
        raise ValueError(f"identity {classes[np.argmin(counts)]} has {counts.min()} samples; probe needs >= 4")
    X = probe_features(images)
    tr, te = stratified_split(y, seed)
    mu = X[tr].mean(axis=0)
    Xtr, Xte = X[tr] - mu, X[te] - mu
    C = len(classes)
    W = np.zeros((X.shape[1], C))
    b = np.zeros(C)
    onehot = np.eye(C)[y[tr]]
    for _ in range(PROBE_STEPS):
        z = Xtr @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(tr)
        W -= PROBE_LR * (Xtr.T @ g)
        b -= PROBE_LR * g.sum(axis=0)
    pred = np.argmax(Xte @ W + b, axis=1)
    return float(np.mean(pred == y[te]))


def probe_sets(models: ModelBundle, data: FoldData, seed: int) -> tuple[float, float]:
    """Probe accuracy on inputs I_SE and on generated images, all expressive samples."""
    idx = [i for i, s in enumerate(data.corpus.samples) if not s.is_neutral]
    b = data.eval_inputs(idx)
    _, gens = predict(models, b.i_an, b.i_se)
    ids = [data.corpus.samples[i].identity_id for i in idx]
    return identity_probe(b.i_se.data[:, 0], ids, seed), identity_probe(gens[:, 0], ids, seed)


# -- raw-image baseline -----------------------------------------------------------


class Baseline:
    """The classifier architecture trained directly on single subject images."""

    def __init__(self, config: TrainConfig, num_classes: int):
        self.config = config
        _, _, e = config.descriptors(num_classes)
        self.desc = ClassifierDesc(e.channels, e.num_classes, e.base_width, e.stages, e.blocks,
                                   e.zero_head, pair_input=False)
        self.params = init_params(self.desc.param_specs("B"), config.seed + 3, config.dtype)
        self.buffers = init_buffers(self.desc, "B", config.dtype)
        self.opt = Adam(self.params, config.lr_e, config.beta1, config.beta2)

    def logits(self, x: Tensor, training: bool) -> Tensor:
        return classifier_forward(self.desc, self.params, x, None, self.buffers, training, training, prefix="B")

    def train_step(self, batch: Batch) -> float:
        self.opt.zero_grad()
        with Tape() as tape:
            loss = T.cross_entropy(self.logits(batch.i_se, True), batch.labels)
        tape.backward(loss)
        self.opt.step()
        return loss.item()

    def evaluate(self, data: FoldData, indices: Sequence[int] | None = None) -> EvalResult:
        indices = data.test if indices is None else indices
        b = data.eval_inputs(indices)
        logits = np.concatenate([self.logits(b.i_se[lo:lo + 32], False).data
                                 for lo in range(0, len(indices), 32)])
        return confusion_from(b.labels, np.argmax(logits, axis=1), data.K)

    def snapshot(self):
        return copy.deepcopy((self.params, self.buffers))

    def restore(self, snap) -> None:
        params, buffers = snap
        for name, t in params.items():
            self.params[name].data[...] = t.data
        for name, rs in buffers.items():
            self.buffers[name].mean[...] = rs.mean
            self.buffers[name].var[...] = rs.var


# -- run orchestration ------------------------------------------------------------


def write_metrics_header(path: Path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(METRICS_HEADER)


def append_metrics(path: Path, m: StepMetrics) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(m.row())


def truncate_metrics(path: Path, last_step: int) -> None:
    """Keep the header and rows with step <= last_step (used on resume)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


class Trainer:
    """Owns the models, optimizers and step counter of one fold's run."""

    def __init__(self, config: TrainConfig, data: FoldData, models: ModelBundle | None = None):
        self.config = config
        self.data = data
        g, d, e = config.descriptors(data.K)
        self.models = models or ModelBundle.create(g, d, e, config.seed, config.dtype)
        self.opts = make_optimizers(self.models, config)
        self.step = 0

    def train(self, n_steps: int, metrics_path: Path | None = None, on_step=None) -> list[StepMetrics]:
        out = []
        for _ in range(n_steps):
            self.step += 1
            m = train_step(self.data.batch(self.step), self.models, self.opts, self.config, self.step)
            if metrics_path is not None:
                append_metrics(metrics_path, m)
            out.append(m)
            if on_step is not None:
                on_step(self, m)
        return out

    def eval_l1(self, batch: Batch) -> float:
        gen = self.models.generate(batch.i_an, batch.i_se)
        return l1_loss(gen, batch.i_ae).item()

    def snapshot(self) -> ModelBundle:
        return copy.deepcopy(self.models)


def _train_with_selection(trainer: Trainer, baseline: Baseline, data: FoldData, steps: int, eval_every: int):
    """Train both systems for ``steps``, keeping the snapshots best on validation."""
    best = {"ifgan": (-1.0, None), "baseline": (-1.0, None)}

    def consider(force=False):
        if not data.val:
            return
        acc = evaluate(trainer.models, data, data.val).accuracy
        if acc > best["ifgan"][0] or force:
            best["ifgan"] = (acc, trainer.snapshot())
        acc_b = baseline.evaluate(data, data.val).accuracy
        if acc_b > best["baseline"][0] or force:
            best["baseline"] = (acc_b, baseline.snapshot())

    for s in range(1, steps + 1):
        trainer.train(1)
        baseline.train_step(data.batch(s))
        if eval_every and (s % eval_every == 0 or s == steps):
            consider()
    if best["ifgan"][1] is not None:
        trainer.models = best["ifgan"][1]
        baseline.restore(best["baseline"][1])
    return best["ifgan"][0], best["baseline"][0]


def run_cross_validation(config: TrainConfig, corpus: PreparedCorpus, folds: Sequence[int] | None = None,
                         progress=None) -> dict:
    """Train and test IF-GAN and the raw baseline on every run of the fold plan."""
    folds = range(config.n_folds) if folds is None else folds
    per_fold = []
    for r in folds:
        cfg = config.replace(fold=r)
        data = FoldData(corpus, cfg)
        trainer = Trainer(cfg, data)
        baseline = Baseline(cfg, data.K)
        l1_batch = data.eval_batch_for_l1()
        l1_start = trainer.eval_l1(l1_batch)
        val_acc, val_acc_b = _train_with_selection(trainer, baseline, data, cfg.steps, cfg.eval_every)
        res = evaluate(trainer.models, data)
        res_b = baseline.evaluate(data)
        probe_in, probe_gen = probe_sets(trainer.models, data, cfg.seed)
        entry = {
            "fold": r,
            "test_identities": data.test_ids,
            "accuracy": res.accuracy,
            "baseline_accuracy": res_b.accuracy,
            "validation_accuracy": val_acc,
            "baseline_validation_accuracy": val_acc_b,
            "confusion": res.confusion.tolist(),
            "baseline_confusion": res_b.confusion.tolist(),
            "l1_start": l1_start,
            "l1_end": trainer.eval_l1(l1_batch),
            "probe_input": probe_in,
            "probe_generated": probe_gen,
        }
        per_fold.append(entry)
        log.info("fold %d: ifgan %.3f baseline %.3f probe %.3f -> %.3f", r, res.accuracy, res_b.accuracy,
                 probe_in, probe_gen)
        if progress is not None:
            progress(entry)
    mean = lambda k: float(np.mean([f[k] for f in per_fold]))
    return {
        "per_fold": per_fold,
        "mean_accuracy": mean("accuracy"),
        "baseline_mean_accuracy": mean("baseline_accuracy"),
        "probe_input": mean("probe_input"),
        "probe_generated": mean("probe_generated"),
        "chance": 1.0 / corpus.num_classes,
        "config": config.to_dict(),
    }
