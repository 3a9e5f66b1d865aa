"""Per-class top-1 accuracy, confusion matrices and the occlusion sweep."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import data, models


@dataclass
class EvalReport:
    """Per-class accuracy (None for empty classes), confusion counts
    (rows = true label), macro/micro accuracy and per-class sample counts."""

    per_class_acc: list
    confusion: np.ndarray
    macro_acc: float
    micro_acc: float
    class_counts: list

    def to_json(self) -> str:
        return json.dumps({
            "per_class_acc": self.per_class_acc,
            "confusion": self.confusion.tolist(),
            "macro_acc": self.macro_acc,
            "micro_acc": self.micro_acc,
            "class_counts": self.class_counts,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(per_class_acc=raw["per_class_acc"],
                   confusion=np.asarray(raw["confusion"], dtype=np.int64),
                   macro_acc=raw["macro_acc"], micro_acc=raw["micro_acc"],
                   class_counts=raw["class_counts"])


def report_from_predictions(labels, preds, n_classes: int) -> EvalReport:
    """Confusion and accuracies from parallel label/prediction vectors.

    Classes with no samples report accuracy None (undefined, not zero) and
    are excluded from the macro mean.
    """
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    counts = confusion.sum(axis=1)
    per_class = [
        float(confusion[i, i] / counts[i]) if counts[i] else None
        for i in range(n_classes)
    ]
    defined = [a for a in per_class if a is not None]
    macro = float(np.mean(defined)) if defined else math.nan
    micro = float(confusion.trace() / counts.sum()) if counts.sum() else math.nan
    return EvalReport(per_class_acc=per_class, confusion=confusion,
                      macro_acc=macro, micro_acc=micro,
                      class_counts=counts.tolist())


SILENCE_LOGMEL = float(np.log(0.01))  # matches the default log offset


def stack_logmels(logmels, pad_value=SILENCE_LOGMEL):
    """Stack (1, M, F_i) images into (B, 1, M, max F), padding with silence."""
    max_f = max(lm.shape[-1] for lm in logmels)
    out = np.full((len(logmels), 1, logmels[0].shape[1], max_f), pad_value,
                  dtype=np.float32)
    for i, lm in enumerate(logmels):
        out[i, :, :, :lm.shape[-1]] = lm
    return out


def predict_logits(params: models.ModelParams, dataset, batch_size=24,
                   mask=None, occlusion=None):
    """Eval-mode logits for a list of LoadedClip; returns (logits, labels).

    ``mask`` replaces one modality with its neutral value (black frames or a
    silence-valued log-mel). ``occlusion`` is (kind, ratio, seed) and patches
    the frames with a per-clip stream derived from the seed and clip id.
    """
    cfg = params.config
    need_frames = cfg.mode in ("visual", "av")
    need_audio = cfg.mode in ("audio", "av")
    if mask not in (None, "visual", "audio"):
        raise ValueError(f"mask must be None, 'visual' or 'audio', got {mask!r}")
    all_logits = []
    labels = []
    for lo in range(0, len(dataset), batch_size):
        chunk = dataset[lo:lo + batch_size]
        clip_batch = None
        logmel_batch = None
        if need_frames:
            frames = [c.frames for c in chunk]
            if occlusion is not None:
                kind, ratio, seed = occlusion
                frames = [
                    data.apply_occlusion(
                        f, kind, ratio, data.clip_rng(seed, "occlude", kind, c.entry.id))
                    for f, c in zip(frames, chunk)
                ]
            clip_batch = np.stack(frames)
            if mask == "visual":
                clip_batch = np.zeros_like(clip_batch)
        if need_audio:
            logmel_batch = stack_logmels([c.logmel for c in chunk])
            if mask == "audio":
                logmel_batch = np.full_like(logmel_batch, SILENCE_LOGMEL)
        all_logits.append(models.model_forward(params, clip_batch, logmel_batch,
                                               train=False))
        labels.extend(c.label for c in chunk)
    return np.concatenate(all_logits), np.asarray(labels)


def evaluate(params: models.ModelParams, entries, frame_size: int, *,
             dark=False, mask=None, occlusion=None, batch_size=24,
             logmel_cfg=None, dataset=None) -> EvalReport:
    """Argmax evaluation of a model over manifest entries.

    ``dark`` restricts to the dark subset before loading. A preloaded
    ``dataset`` (from ``data.prepare_dataset``) skips IO and must match
    ``entries``.
    """
    cfg = params.config
    if dark:
        entries = data.dark_subset(entries)
        if dataset is not None:
            keep = {e.id for e in entries}
            dataset = [c for c in dataset if c.entry.id in keep]
    if not entries:
        raise ValueError("no entries to evaluate (dark filter removed everything?)")
    if dataset is None:
        dataset = data.prepare_dataset(
            entries, cfg.clip_len, frame_size,
            need_frames=cfg.mode in ("visual", "av"),
            need_audio=cfg.mode in ("audio", "av"),
            logmel_cfg=logmel_cfg)
    logits, labels = predict_logits(params, dataset, batch_size, mask, occlusion)
    preds = logits.argmax(axis=1)
    return report_from_predictions(labels, preds, cfg.n_classes)


def occlusion_sweep(params: models.ModelParams, entries, kind: str,
                    ratios, seeds, frame_size: int, *, batch_size=24,
                    logmel_cfg=None, dataset=None):
    """Accuracy under eval-time occlusion, averaged over seeds per ratio.

    Returns a list of rows ``{"ratio", "per_class_acc", "macro_acc"}`` in
    the given ratio order; a ratio of 0 reproduces plain evaluation.
    """
    if any(not 0 <= r <= 1 for r in ratios):
        raise ValueError(f"ratios must lie in [0, 1], got {ratios}")
    cfg = params.config
    if dataset is None:
        dataset = data.prepare_dataset(
            entries, cfg.clip_len, frame_size,
            need_frames=cfg.mode in ("visual", "av"),
            need_audio=cfg.mode in ("audio", "av"),
            logmel_cfg=logmel_cfg)
    rows = []
    for ratio in ratios:
        reports = []
        for seed in seeds:
            occ = None if ratio == 0 else (kind, float(ratio), int(seed))
            logits, labels = predict_logits(params, dataset, batch_size,
                                            occlusion=occ)
            reports.append(report_from_predictions(labels, logits.argmax(axis=1),
                                                   cfg.n_classes))
        per_class = []
        for i in range(cfg.n_classes):
            vals = [r.per_class_acc[i] for r in reports if r.per_class_acc[i] is not None]
            per_class.append(float(np.mean(vals)) if vals else None)
        macro = float(np.mean([r.macro_acc for r in reports]))
        rows.append({"ratio": float(ratio), "per_class_acc": per_class,
                     "macro_acc": macro})
    return rows


def sweep_to_csv(rows, class_names) -> str:
    """Ratio grid as CSV: one row per ratio, columns ratio + per-class acc."""
    header = "ratio," + ",".join(f"acc_{n}" for n in class_names)
    lines = [header]
    for row in rows:
        cells = [f"{row['ratio']:.8g}"]
        cells += ["" if a is None else f"{a:.8g}" for a in row["per_class_acc"]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def confusion_to_csv(report: EvalReport, class_names) -> str:
    header = "true\\pred," + ",".join(class_names)
    lines = [header]
    for i, name in enumerate(class_names):
        lines.append(name + "," + ",".join(str(int(v)) for v in report.confusion[i]))
    return "\n".join(lines) + "\n"
