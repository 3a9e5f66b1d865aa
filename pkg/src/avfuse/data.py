"""Dataset manifests, clip loading, temporal sampling, augmentation and the
occlusion transforms used by the robustness sweeps.

Video on disk is codec-free: either a single 4-D AVT tensor (3, l, H, W) per
clip or a directory of per-frame 3-D AVT tensors. Audio is WAV. A manifest
is JSON-lines, one entry per line, paths relative to the manifest file.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import audio as audio_mod
from . import avt, ops, wavio

CLASS_NAMES = (
    "arrest", "chase", "fight", "knockdown", "run", "shoot", "scatter",
    "normal1", "normal2",
)
ILLUMINATIONS = ("normal", "low")
SPLITS = ("train", "val")

NIGHT_START = 18 * 60   # dark-subset window: [18:00, 24:00) and [0:00, 6:00)
NIGHT_END = 6 * 60


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    video_path: str
    audio_path: str
    label: int
    class_name: str
    time_of_day: int        # minutes since midnight
    illumination: str
    split: str
    base_dir: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.label < 0:
            raise ManifestError(f"{self.id}: negative label {self.label}")
        if not 0 <= self.time_of_day < 24 * 60:
            raise ManifestError(f"{self.id}: time_of_day {self.time_of_day} out of range")
        if self.illumination not in ILLUMINATIONS:
            raise ManifestError(f"{self.id}: illumination must be one of {ILLUMINATIONS}")
        if self.split not in SPLITS:
            raise ManifestError(f"{self.id}: split must be one of {SPLITS}")

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        if path.is_absolute() or self.base_dir is None:
            return path
        return self.base_dir / path

    @property
    def video_file(self) -> Path:
        return self._resolve(self.video_path)

    @property
    def audio_file(self) -> Path:
        return self._resolve(self.audio_path)


_FIELDS = ("id", "video_path", "audio_path", "label", "class_name",
           "time_of_day", "illumination", "split")


def save_manifest(entries, path) -> None:
    """Write entries as JSON-lines with a fixed key order."""
    lines = []
    for e in entries:
        record = {k: getattr(e, k) for k in _FIELDS}
        lines.append(json.dumps(record, separators=(", ", ": ")))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path, n_classes=None, check_paths=True) -> list:
    """Load and validate a JSON-lines manifest.

    Labels must lie in [0, n_classes) (inferred as max + 1 when not given),
    the label <-> class_name mapping must be one-to-one, and every referenced
    media file must exist unless ``check_paths`` is disabled.
    """
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            entries.append(ManifestEntry(**record, base_dir=base))
        except (json.JSONDecodeError, TypeError, ManifestError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    if not entries:
        raise ManifestError(f"{path}: empty manifest")
    n = n_classes if n_classes is not None else max(e.label for e in entries) + 1
    names: dict[int, str] = {}
    for e in entries:
        if e.label >= n:
            raise ManifestError(f"{path}: entry {e.id} has label {e.label} >= {n}")
        if names.setdefault(e.label, e.class_name) != e.class_name:
            raise ManifestError(
                f"{path}: label {e.label} maps to both "
                f"{names[e.label]!r} and {e.class_name!r}"
            )
    if len(set(names.values())) != len(names):
        raise ManifestError(f"{path}: two labels share one class name")
    if check_paths:
        dangling = [e.id for e in entries
                    if not e.video_file.exists() or not e.audio_file.exists()]
        if dangling:
            raise ManifestError(
                f"{path}: missing media for entries: {', '.join(dangling)}"
            )
    return entries


def dark_subset(entries) -> list:
    """Night-time entries plus anything tagged low illumination."""
    return [
        e for e in entries
        if e.time_of_day >= NIGHT_START or e.time_of_day < NIGHT_END
        or e.illumination == "low"
    ]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_frame_indices(length: int, target: int) -> np.ndarray:
    """Fixed-interval sampling: stride max(1, length // target), clipped.

    Always returns exactly ``target`` monotone indices below ``length``;
    clips shorter than the target repeat their final frame.
    """
    if length < 1 or target < 1:
        raise ValueError(f"need length, target >= 1, got {length}, {target}")
    stride = max(1, length // target)
    return np.minimum(np.arange(target) * stride, length - 1)


def load_video_tensor(path) -> np.ndarray:
    """Read a clip as (3, l, H, W): single 4-D AVT file or frame directory."""
    path = Path(path)
    if path.is_dir():
        frame_files = sorted(path.glob("*.avt"))
        if not frame_files:
            raise FileNotFoundError(f"{path}: no frame AVT files")
        frames = [avt.read_avt(f) for f in frame_files]
        tensor = np.stack(frames, axis=1)
    else:
        tensor = avt.read_avt(path)
    if tensor.ndim != 4 or tensor.shape[0] != 3:
        raise ops.ShapeError(f"{path}: expected (3, l, H, W), got {tensor.shape}")
    return tensor


def resize_clip(frames, out_h, out_w):
    if frames.shape[-2:] == (out_h, out_w):
        return frames.astype(np.float32, copy=False)
    return ops.bilinear_resize_forward(frames, out_h, out_w).astype(np.float32)


def flip_clip(frames):
    """Horizontal flip of every frame together (per-clip decision)."""
    return np.ascontiguousarray(frames[..., ::-1])


def spatial_transform(frames, out_h, out_w, train=False, rng=None):
    """Resize all frames to ``out_h x out_w``; in train mode, flip the whole
    clip horizontally with probability 0.5."""
    out = resize_clip(frames, out_h, out_w)
    if train:
        if rng is None:
            raise ValueError("train-mode spatial_transform needs an rng")
        if rng.random() < 0.5:
            out = flip_clip(out)
    return out


def temporal_patch(frames, ratio: float, rng) -> np.ndarray:
    """Black out round(ratio * T) whole frames chosen by ``rng``."""
    if not 0 <= ratio <= 1:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    T = frames.shape[1]
    count = round_half_up(ratio * T)
    out = frames.copy()
    if count:
        idx = rng.choice(T, size=count, replace=False)
        out[:, idx] = 0.0
    return out


def spatial_patch(frames, area_ratio: float, rng) -> np.ndarray:
    """Zero one square of area ~ ``area_ratio`` of each frame, at an
    independent random position per frame (side clipped to fit)."""
    if not 0 <= area_ratio <= 1:
        raise ValueError(f"area_ratio must be in [0, 1], got {area_ratio}")
    _, T, H, W = frames.shape
    side = round_half_up(math.sqrt(area_ratio * H * W))
    side = min(side, H, W)
    out = frames.copy()
    if side == 0:
        return out
    for t in range(T):
        top = int(rng.integers(0, H - side + 1))
        left = int(rng.integers(0, W - side + 1))
        out[:, t, top:top + side, left:left + side] = 0.0
    return out


def apply_occlusion(frames, kind: str, ratio: float, rng):
    if kind == "temporal":
        return temporal_patch(frames, ratio, rng)
    if kind == "spatial":
        return spatial_patch(frames, ratio, rng)
    raise ValueError(f"occlusion kind must be temporal or spatial, got {kind!r}")


def clip_rng(seed: int, *parts) -> np.random.Generator:
    """Independent per-clip stream derived from the global seed and stable
    hashes of the identifying parts (strings or ints)."""
    words = [int(seed) & 0xFFFFFFFF]
    for part in parts:
        if isinstance(part, (int, np.integer)):
            words.append(int(part) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode()).digest()
            words.append(int.from_bytes(digest[:4], "little"))
    return np.random.default_rng(words)


@dataclass
class LoadedClip:
    """One fully preprocessed sample: resized frames and/or log-mel image."""

    entry: ManifestEntry
    frames: np.ndarray | None      # (3, T, h, w) in [0, 1], pre-flip
    logmel: np.ndarray | None      # (1, M, F)
    label: int


def load_clip_frames(entry: ManifestEntry, clip_len: int, out_h: int, out_w: int):
    tensor = load_video_tensor(entry.video_file)
    idx = sample_frame_indices(tensor.shape[1], clip_len)
    return resize_clip(tensor[:, idx], out_h, out_w)


def load_clip_logmel(entry: ManifestEntry, logmel_cfg=None, cache_dir=None):
    if cache_dir is not None:
        cached = Path(cache_dir) / f"{entry.id}.avt"
        if cached.exists():
            return avt.read_avt(cached)[None]
    clip = wavio.read_wav(entry.audio_file)
    return audio_mod.log_mel(clip, logmel_cfg).values[None]


def prepare_dataset(entries, clip_len, frame_size, need_frames=True,
                    need_audio=True, logmel_cfg=None, cache_dir=None):
    """Materialize every clip once; augmentation happens per epoch on top."""
    out = []
    for entry in entries:
        frames = (load_clip_frames(entry, clip_len, frame_size, frame_size)
                  if need_frames else None)
        logmel = (load_clip_logmel(entry, logmel_cfg, cache_dir)
                  if need_audio else None)
        out.append(LoadedClip(entry=entry, frames=frames, logmel=logmel,
                              label=entry.label))
    return out


def split_hash(entries) -> str:
    """Order-independent fingerprint of a set of entry ids."""
    joined = "\n".join(sorted(e.id for e in entries))
    return hashlib.sha256(joined.encode()).hexdigest()[:16]
