"""Training, fine-tuning, evaluation and ensembling of zoo models.

A trained model is written as two files: ``<name>.ckpt`` (binary parameters)
and ``<name>.ckpt.json`` (model spec, class labels, preprocessing mean and
fingerprint), plus a ``metrics.csv`` next to them.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..data import (
    DatasetManifest,
    PreprocessSpec,
    SplitPlan,
    channel_means,
    load_manifest,
    make_splits,
    preprocess,
    synth_textures,
)
from ..layers import softmax, softmax_xent
from ..network import FingerprintMismatch, NetworkGraph, load_checkpoint, save_checkpoint
from ..optim import FINETUNE_LR, make_config, sgd_step
from ..tensor import derive_rng
from ..zoo import ModelSpec, build, initialize
from .config import ConfigError, RunConfig

METRICS_HEADER = ["step", "epoch", "split", "loss", "top1", "wall_ms"]

# sub-stream ids of the run seed
RNG_INIT, RNG_SHUFFLE, RNG_DROPOUT, RNG_AUGMENT, RNG_HEAD = range(5)


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class ImageSource:
    """Images of one split, held in memory or read lazily from paths."""

    labels: np.ndarray
    arrays: np.ndarray | None = None
    paths: list[Path] | None = None

    def __len__(self):
        return len(self.labels)

    def raw(self, i: int) -> np.ndarray | Path:
        return self.arrays[i] if self.arrays is not None else self.paths[i]

    def batch(self, idx, spec: PreprocessSpec, mode: str = "eval", rng=None) -> np.ndarray:
        return np.concatenate([preprocess(self.raw(i), spec, mode, rng) for i in idx], axis=0)


@dataclass
class DataBundle:
    manifest: DatasetManifest
    train: ImageSource
    test: ImageSource

    @property
    def labels(self) -> list[str]:
        return self.manifest.labels


def parse_synthetic(source: str) -> dict:
    body = source.split(":", 1)[1]
    opts = dict(classes=5, train=100, test=50, size=64, seed=0, offset=0)
    for part in filter(None, body.split(",")):
        key, _, val = part.partition("=")
        if key.strip() not in opts:
            raise ConfigError(f"unknown synthetic option {key!r}")
        opts[key.strip()] = int(val)
    return opts


def load_data(source: str, plan: SplitPlan) -> DataBundle:
    """``synthetic:classes=5,train=100,test=50,size=64,seed=0,offset=0`` or a dataset path."""
    if source.startswith("synthetic:"):
        o = parse_synthetic(source)
        ds = synth_textures(o["classes"], o["train"], o["size"], derive_rng(o["seed"], 0), o["offset"], o["test"])
        tr, te = ds.subset("train"), ds.subset("test")
        return DataBundle(ds.manifest, ImageSource(tr.labels, tr.images), ImageSource(te.labels, te.images))
    manifest = load_manifest(source)
    if not manifest.items:
        raise ConfigError(f"{source}: manifest lists no images")
    train, test = make_splits(manifest, plan)

    def src(items):
        return ImageSource(np.array([it.class_id for it in items]), paths=[manifest.resolve(it) for it in items])

    return DataBundle(manifest, src(train), src(test))


def dataset_mean(source: ImageSource, spec: PreprocessSpec) -> tuple[float, float, float]:
    """Per-channel mean of the eval-mode (resized, centre-cropped) training images."""
    plain = replace(spec, mean=(0.0, 0.0, 0.0))
    return channel_means(preprocess(source.raw(i), plain, "eval")[0] for i in range(len(source)))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    split: str
    loss: float
    top1: float
    wall_ms: int = 0
    per_class: list[float] = field(default_factory=list)

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch), self.split, f"{self.loss:.10g}", f"{self.top1:.10g}", str(self.wall_ms)]


def write_metrics(path: Path, records: list[MetricsRecord]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row())
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# evaluation


def predict_scores(graph: NetworkGraph, source: ImageSource, spec: PreprocessSpec, batch_size: int = 64) -> np.ndarray:
    """Logits for every image, evaluated in order in fixed-size chunks."""
    out = []
    for start in range(0, len(source), batch_size):
        idx = range(start, min(start + batch_size, len(source)))
        x = source.batch(idx, spec, "eval")
        out.append(graph.predict(x).reshape(len(idx), -1))
    return np.concatenate(out, axis=0) if out else np.zeros((0, graph.spec.class_count))


def score_record(logits: np.ndarray, labels: np.ndarray, k: int, step=0, epoch=0, split="test") -> MetricsRecord:
    loss, _ = softmax_xent(logits.reshape(len(labels), -1, 1, 1), labels) if len(labels) else (0.0, None)
    return accuracy_record(logits.argmax(axis=1), labels, k, loss, step, epoch, split)


def accuracy_record(pred, labels, k, loss, step=0, epoch=0, split="test") -> MetricsRecord:
    hit = pred == labels
    per_class = [float(hit[labels == c].mean()) if np.any(labels == c) else float("nan") for c in range(k)]
    return MetricsRecord(step, epoch, split, float(loss), float(hit.mean()) if len(hit) else 0.0, 0, per_class)


def evaluate(graph: NetworkGraph, source: ImageSource, spec: PreprocessSpec, step=0, epoch=0) -> MetricsRecord:
    return score_record(predict_scores(graph, source, spec), source.labels, graph.spec.class_count, step, epoch)


# ---------------------------------------------------------------------------
# model files


def save_model(path: Path, graph: NetworkGraph, mean, labels) -> None:
    save_checkpoint(path, graph)
    meta = {
        "model": graph.spec.to_dict(),
        "mean": list(mean),
        "labels": list(labels),
        "fingerprint": graph.fingerprint(),
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class LoadedModel:
    graph: NetworkGraph
    mean: tuple[float, float, float]
    labels: list[str]


def load_model(path: str | Path) -> LoadedModel:
    path = Path(path)
    meta_path = Path(str(path) + ".json")
    if not path.exists() or not meta_path.exists():
        raise FileNotFoundError(f"checkpoint {path} or its metadata {meta_path} is missing")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    spec = ModelSpec.from_dict(meta["model"])
    graph = build(spec)
    graph.materialize()
    load_checkpoint(path, graph)
    return LoadedModel(graph, tuple(meta["mean"]), meta["labels"])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    graph: NetworkGraph
    metrics: list[MetricsRecord]
    mean: tuple[float, float, float]
    checkpoint: Path | None = None

    @property
    def final(self) -> MetricsRecord:
        return [m for m in self.metrics if m.split == "test"][-1]

    def epochs_to(self, threshold: float) -> int | None:
        """First epoch whose test accuracy reaches ``threshold`` (0 = before training)."""
        for m in self.metrics:
            if m.split == "test" and m.top1 >= threshold:
                return m.epoch
        return None


def fit(graph: NetworkGraph, cfg: RunConfig, data: DataBundle, pre: PreprocessSpec, log=None) -> list[MetricsRecord]:
    """SGD over ``cfg.epochs`` epochs; one test row before training and every ``eval_every`` epochs."""
    t0 = time.perf_counter()

    def wall():
        return int((time.perf_counter() - t0) * 1000) if cfg.timing else 0

    shuffle = derive_rng(cfg.seed, RNG_SHUFFLE)
    drop_rng = derive_rng(cfg.seed, RNG_DROPOUT)
    aug_rng = derive_rng(cfg.seed, RNG_AUGMENT)
    graph.check_input(data.train.batch([0], pre, "eval").shape)

    rec = evaluate(graph, data.test, pre)
    rec.wall_ms = wall()
    records = [rec]
    if log:
        log(rec)
    step = 0
    bs = cfg.optim.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(len(data.train))
        losses, hits = [], 0
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            x = data.train.batch(idx, pre, "train", aug_rng)
            y = data.train.labels[idx]
            loss, g_logits, acts = graph.loss(x, y, train=True, rng=drop_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {step} (epoch {epoch}); check the learning rate")
            graph.zero_grad()
            graph.backward(acts, g_logits)
            sgd_step(graph.params, cfg.optim, step)
            step += 1
            losses.append(loss * len(idx))
            hits += int((acts.values[graph.logits].reshape(len(idx), -1).argmax(axis=1) == y).sum())
        for p in graph.params.values():
            if not np.all(np.isfinite(p.value)):
                raise NumericError(f"non-finite parameters after epoch {epoch}")
        rec = MetricsRecord(step, epoch, "train", sum(losses) / len(order), hits / len(order), wall())
        records.append(rec)
        if log:
            log(rec)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rec = evaluate(graph, data.test, pre, step, epoch)
            if not np.isfinite(rec.loss):
                raise NumericError(f"non-finite test loss after epoch {epoch}; check the learning rate")
            rec.wall_ms = wall()
            records.append(rec)
            if log:
                log(rec)
    return records


def _prepare(cfg: RunConfig, data: DataBundle) -> RunConfig:
    k = data.manifest.class_count
    if cfg.class_count_auto:
        cfg = cfg.with_classes(k)
    elif cfg.model.class_count != k:
        raise ConfigError(f"model.class_count {cfg.model.class_count} but dataset has {k} classes")
    if cfg.batch_auto:
        bs = make_config(dataset_size_hint=len(data.train)).batch_size
        cfg = replace(cfg, optim=replace(cfg.optim, batch_size=bs))
    return cfg


def _claim_output(out_dir) -> None:
    """Outputs go to fresh paths: an existing checkpoint is never overwritten."""
    if out_dir is None:
        return
    ckpt = Path(out_dir) / "model.ckpt"
    if ckpt.exists():
        raise FileExistsError(f"{ckpt} already exists; choose a fresh --out directory")


def _finish(out_dir, graph, records, mean, labels) -> Path | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    save_model(ckpt, graph, mean, labels)
    write_metrics(out / "metrics.csv", records)
    return ckpt


def train(cfg: RunConfig, out_dir=None, data: DataBundle | None = None, log=None) -> TrainResult:
    """Train from scratch (or from ``checkpoint.in`` with an identical architecture)."""
    _claim_output(out_dir)
    data = data or load_data(cfg.data, cfg.split)
    cfg = _prepare(cfg, data)
    graph = build(cfg.model, derive_rng(cfg.seed, RNG_INIT))
    mean = dataset_mean(data.train, cfg.preprocess) if cfg.mean_auto else cfg.preprocess.mean
    if cfg.checkpoint_in:
        src = load_model(cfg.checkpoint_in)
        if src.graph.fingerprint() != graph.fingerprint():
            raise FingerprintMismatch(f"{cfg.checkpoint_in}: architecture differs from the configured model")
        graph.load_state_dict(src.graph.state_dict())
    pre = replace(cfg.preprocess, mean=mean)
    records = fit(graph, cfg, data, pre, log)
    ckpt = _finish(out_dir, graph, records, mean, data.labels)
    return TrainResult(graph, records, mean, ckpt)


def finetune(cfg: RunConfig, source: str | Path, out_dir=None, data: DataBundle | None = None, log=None) -> TrainResult:
    """Load every layer of ``source``, re-initialise the classifier for the new classes, train at the finetune rate.

    The classifier is reset when its width changes (``finetune.reset_head =
    auto``) or always/never with ``true``/``false``.  A reset classifier
    learns ``finetune.head_lr_mult`` times faster than the loaded layers.  Preprocessing keeps the
    source model's mean unless one is set explicitly.
    """
    _claim_output(out_dir)
    data = data or load_data(cfg.data, cfg.split)
    src = load_model(source)
    cfg = _prepare(cfg, data)
    if cfg.lr_auto:
        scale = float(cfg.raw.get("optim.lr_scale", "1"))
        cfg = replace(cfg, optim=replace(cfg.optim, base_lr=FINETUNE_LR * scale))
    head = cfg.model.head_name
    # compare wiring before allocating anything
    if build(cfg.model).fingerprint(exclude=(head,)) != src.graph.fingerprint(exclude=(head,)):
        raise FingerprintMismatch(f"{source}: layers other than {head!r} differ from the configured model")
    graph = build(cfg.model, derive_rng(cfg.seed, RNG_INIT))
    same_head = graph.node(head).layer.param_shapes() == src.graph.node(head).layer.param_shapes()
    reset = cfg.reset_head == "true" or (cfg.reset_head == "auto" and not same_head)
    if not reset and not same_head:
        raise FingerprintMismatch(f"classifier {head!r} changes shape; it must be reset")
    graph.load_state_dict(src.graph.state_dict(), skip=(head,) if reset else ())
    if reset:
        _reinit_head(graph, cfg.model, derive_rng(cfg.seed, RNG_HEAD))
        cfg = replace(cfg, optim=replace(cfg.optim, lr_mult={**cfg.optim.lr_mult, head: cfg.head_lr_mult}))
    mean = src.mean if cfg.mean_auto else cfg.preprocess.mean
    pre = replace(cfg.preprocess, mean=mean)
    records = fit(graph, cfg, data, pre, log)
    ckpt = _finish(out_dir, graph, records, mean, data.labels)
    return TrainResult(graph, records, mean, ckpt)


def _reinit_head(graph: NetworkGraph, spec: ModelSpec, rng) -> None:
    tmp = build(spec, rng)
    head = spec.head_name
    for name in ("weight", "bias"):
        graph.params[f"{head}.{name}"].value[...] = tmp.params[f"{head}.{name}"].value


# ---------------------------------------------------------------------------
# evaluation commands


@dataclass
class EvalReport:
    records: list[MetricsRecord]
    labels: list[str]

    @property
    def accuracies(self) -> list[float]:
        return [r.top1 for r in self.records]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def format(self) -> str:
        lines = []
        for i, r in enumerate(self.records):
            lines.append(f"fold {i}: top1 {r.top1:.4f}  loss {r.loss:.4f}")
        if len(self.records) > 1:
            lines.append(f"mean {self.mean:.4f} +/- {self.std:.4f} over {len(self.records)} folds")
        lines.append("per-class accuracy (" + ("fold 0" if len(self.records) > 1 else "test") + "):")
        for label, acc in zip(self.labels, self.records[0].per_class):
            lines.append(f"  {label:<32} {acc:.4f}")
        return "\n".join(lines)


def _check_classes(model: LoadedModel, data: DataBundle, path) -> None:
    if model.graph.spec.class_count != data.manifest.class_count:
        raise ConfigError(
            f"{path}: model has {model.graph.spec.class_count} classes, dataset {data.manifest.class_count}"
        )


def eval_checkpoints(checkpoints: list, cfg: RunConfig, data_by_fold=None) -> EvalReport:
    """Checkpoint ``i`` is scored on fold ``i`` of the split plan (one checkpoint: fold ``split.index``).

    With several folds the report carries mean and standard deviation.
    """
    plan = cfg.split
    if len(checkpoints) > 1 and len(checkpoints) != plan.fold_count:
        raise ConfigError(f"{len(checkpoints)} checkpoints for a {plan.fold_count}-fold split plan")
    records, labels = [], []
    for i, path in enumerate(checkpoints):
        fold = plan if len(checkpoints) == 1 else plan.fold(i)
        data = data_by_fold(fold) if data_by_fold else load_data(cfg.data, fold)
        model = load_model(path)
        _check_classes(model, data, path)
        pre = replace(cfg.preprocess, mean=model.mean)
        graph = model.graph
        graph.check_input(data.test.batch([0], pre).shape)
        records.append(evaluate(graph, data.test, pre))
        labels = data.labels
    return EvalReport(records, labels)


def eval_ensemble(checkpoints: list, cfg: RunConfig, data: DataBundle | None = None) -> MetricsRecord:
    """Sum the softmax outputs of several models and take the argmax."""
    if not checkpoints:
        raise ConfigError("ensemble needs at least one checkpoint")
    data = data or load_data(cfg.data, cfg.split)
    total = None
    models = [load_model(p) for p in checkpoints]
    k = models[0].graph.spec.class_count
    for path, model in zip(checkpoints, models):
        if model.graph.spec.class_count != k:
            raise ConfigError(f"{path}: class count {model.graph.spec.class_count} != {k}")
        _check_classes(model, data, path)
        pre = replace(cfg.preprocess, mean=model.mean)
        probs = softmax(predict_scores(model.graph, data.test, pre))
        total = probs if total is None else total + probs
    labels = data.test.labels
    loss = -float(np.mean(np.log(total[np.arange(len(labels)), labels] / len(models))))
    return accuracy_record(total.argmax(axis=1), labels, k, loss)
