"""SGD training loop with momentum, weight decay and a reduce-on-plateau
learning-rate schedule driven by the validation loss."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data, evaluate, models, ops


class OptimizerError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 12
    epochs: int = 80
    lr_floor: float = 1e-7
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    seed: int = 0
    frame_size: int = 32       # model input H = W after resize
    val_batch_size: int = 24

    def __post_init__(self):
        if not self.lr >= self.lr_floor > 0:
            raise ValueError(f"need lr >= lr_floor > 0, got {self.lr}, {self.lr_floor}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1 or self.epochs < 1 or self.plateau_patience < 1:
            raise ValueError("batch_size, epochs and plateau_patience must be >= 1")


def sgd_update(value, grad, velocity, lr, momentum, weight_decay):
    """In-place momentum SGD on one tensor:
    g' = g + wd * w;  v <- momentum * v + g';  w <- w - lr * v."""
    g = grad + weight_decay * value
    velocity *= momentum
    velocity += g
    value -= lr * velocity


def sgd_step(params, lr, momentum, weight_decay):
    """One optimizer step over a list of Param objects."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"non-finite gradient in parameter {p.name}")
        sgd_update(p.value, p.grad, p.velocity, lr, momentum, weight_decay)


class PlateauScheduler:
    """Multiply the lr by ``factor`` after ``patience`` epochs without the
    validation loss improving by at least ``min_delta``; floored."""

    def __init__(self, lr, factor=0.1, patience=5, min_delta=1e-4, floor=1e-7):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.floor = floor
        self.best = np.inf
        self.stale = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.stale = 0
        return self.lr


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    macro_acc: float
    per_class_acc: list


@dataclass
class TrainResult:
    checkpoint_dir: Path
    metrics_path: Path
    rows: list
    best_epoch: int
    best_macro: float
    initial_loss: float
    split_hashes: dict
    class_names: list


def metrics_csv(rows, class_names) -> str:
    header = "epoch,train_loss,val_loss,lr,macro_acc," + ",".join(
        f"acc_{n}" for n in class_names)
    lines = [header]
    for r in rows:
        cells = [str(r.epoch), f"{r.train_loss:.8g}", f"{r.val_loss:.8g}",
                 f"{r.lr:.8g}", f"{r.macro_acc:.8g}"]
        cells += ["" if a is None else f"{a:.8g}" for a in r.per_class_acc]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _class_names(entries, n_classes):
    names = {e.label: e.class_name for e in entries}
    return [names.get(i, f"class{i}") for i in range(n_classes)]


def train(train_cfg: TrainConfig, model_cfg: models.ModelConfig, entries,
          out_dir, logmel_cfg=None) -> TrainResult:
    """Train one model on a manifest; persists the best-validation-accuracy
    checkpoint and a per-epoch metrics CSV under ``out_dir``.

    Fully deterministic for a fixed (config, seed, data) triple: shuffling,
    flip decisions and initialization all derive from ``train_cfg.seed``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_entries = [e for e in entries if e.split == "train"]
    val_entries = [e for e in entries if e.split == "val"]
    if not train_entries or not val_entries:
        raise ValueError("manifest must contain both train and val splits")

    need_frames = model_cfg.mode in ("visual", "av")
    need_audio = model_cfg.mode in ("audio", "av")
    train_set = data.prepare_dataset(train_entries, model_cfg.clip_len,
                                     train_cfg.frame_size, need_frames,
                                     need_audio, logmel_cfg)
    val_set = data.prepare_dataset(val_entries, model_cfg.clip_len,
                                   train_cfg.frame_size, need_frames,
                                   need_audio, logmel_cfg)
    labels = np.asarray([c.label for c in train_set])

    params = models.init_params(model_cfg, seed=train_cfg.seed)
    scheduler = PlateauScheduler(train_cfg.lr, train_cfg.plateau_factor,
                                 train_cfg.plateau_patience,
                                 train_cfg.plateau_min_delta, train_cfg.lr_floor)
    class_names = _class_names(entries, model_cfg.n_classes)
    rows = []
    lr = train_cfg.lr
    best_macro = -1.0
    best_epoch = 0
    best_state = params.state_dict()
    last_good_state = params.state_dict()
    initial_loss = None

    n = len(train_set)
    for epoch in range(1, train_cfg.epochs + 1):
        order = data.clip_rng(train_cfg.seed, "shuffle", epoch).permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            chunk = [train_set[i] for i in idx]
            clip_batch = None
            logmel_batch = None
            if need_frames:
                frames = []
                for c in chunk:
                    f = c.frames
                    flip_rng = data.clip_rng(train_cfg.seed, "flip", epoch, c.entry.id)
                    if flip_rng.random() < 0.5:
                        f = data.flip_clip(f)
                    frames.append(f)
                clip_batch = np.stack(frames)
            if need_audio:
                logmel_batch = evaluate.stack_logmels([c.logmel for c in chunk])
            logits = models.model_forward(params, clip_batch, logmel_batch,
                                          train=True)
            loss, grad = ops.softmax_cross_entropy(logits, labels[idx])
            if initial_loss is None:
                initial_loss = loss
            if not np.isfinite(loss):
                dump = out / "checkpoint_last_good"
                params.load_state_dict(last_good_state)
                models.save_checkpoint(params, dump)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; last good state "
                    f"dumped to {dump}"
                )
            params.zero_grad()
            models.model_backward(params, grad)
            sgd_step(params.parameters(), lr, train_cfg.momentum,
                     train_cfg.weight_decay)
            loss_sum += loss * len(idx)
        train_loss = loss_sum / n

        val_logits, val_labels = evaluate.predict_logits(
            params, val_set, train_cfg.val_batch_size)
        val_loss, _ = ops.softmax_cross_entropy(val_logits, val_labels)
        report = evaluate.report_from_predictions(
            val_labels, val_logits.argmax(axis=1), model_cfg.n_classes)
        lr = scheduler.step(val_loss)
        rows.append(EpochRow(epoch, train_loss, val_loss, lr,
                             report.macro_acc, report.per_class_acc))
        last_good_state = params.state_dict()
        if report.macro_acc > best_macro:
            best_macro = report.macro_acc
            best_epoch = epoch
            best_state = params.state_dict()

    metrics_path = out / "metrics.csv"
    metrics_path.write_text(metrics_csv(rows, class_names))
    params.load_state_dict(best_state)
    ckpt_dir = models.save_checkpoint(params, out / "checkpoint_best")
    split_hashes = {"train": data.split_hash(train_entries),
                    "val": data.split_hash(val_entries)}
    summary = {
        "initial_loss": initial_loss,
        "best_epoch": best_epoch,
        "best_macro_acc": best_macro,
        "split_hashes": split_hashes,
        "train_config": asdict(train_cfg),
        "model_config": asdict(model_cfg),
    }
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2,
                                                       sort_keys=True))
    return TrainResult(checkpoint_dir=ckpt_dir, metrics_path=metrics_path,
                       rows=rows, best_epoch=best_epoch, best_macro=best_macro,
                       initial_loss=initial_loss, split_hashes=split_hashes,
                       class_names=class_names)


def ablation_run(train_cfg: TrainConfig, model_cfg: models.ModelConfig,
                 entries, out_dir, logmel_cfg=None) -> dict:
    """Train and evaluate the visual-only, audio-only and audio-visual arms
    under one seed and identical splits; writes a comparison table."""
    from dataclasses import replace

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for mode in ("visual", "audio", "av"):
        arm_cfg = replace(model_cfg, mode=mode)
        arm_dir = out / f"arm_{mode}"
        result = train(train_cfg, arm_cfg, entries, arm_dir, logmel_cfg)
        params = models.load_checkpoint(result.checkpoint_dir)
        val_entries = [e for e in entries if e.split == "val"]
        report = evaluate.evaluate(params, val_entries, train_cfg.frame_size,
                                   logmel_cfg=logmel_cfg)
        results[mode] = {"result": result, "report": report}

    class_names = _class_names(entries, model_cfg.n_classes)
    lines = ["class," + ",".join(results.keys())]
    for i, name in enumerate(class_names):
        cells = [name]
        for mode in results:
            acc = results[mode]["report"].per_class_acc[i]
            cells.append("" if acc is None else f"{acc:.8g}")
        lines.append(",".join(cells))
    macro_cells = ["macro"] + [f"{results[m]['report'].macro_acc:.8g}"
                               for m in results]
    lines.append(",".join(macro_cells))
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    hashes = {m: results[m]["result"].split_hashes for m in results}
    (out / "ablation_summary.json").write_text(json.dumps({
        "split_hashes": hashes,
        "macro_acc": {m: results[m]["report"].macro_acc for m in results},
    }, indent=2, sort_keys=True))
    return results
