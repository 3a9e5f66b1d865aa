"""Deterministic generator of a miniature labeled audio-visual dataset.

Each clip is a handful of bright gaussian blobs moving over a noisy dark
background; the blob count and motion pattern encode the class. Classes come
in deliberately confusable visual pairs (same count and pattern), and the
audio-salient member of a pair carries a class-specific tone burst over the
background noise, so the event is only fully decidable with both modalities:

    pattern        classes (salient in caps)
    fast linear    SHOOT / run
    scatter-out    SCATTER / chase
    chase-pair     ARREST / fight
    slow wander    KNOCKDOWN / normal1, normal2 (two wandering blobs)

Dark variants scale brightness by 0.25 and double the pixel noise while the
audio stays untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import avt, wavio
from .data import (CLASS_NAMES, ManifestEntry, clip_rng, round_half_up,
                   save_manifest)
from .util import map_parallel

# class -> (blob count, motion pattern)
CLASS_VISUALS = {
    "shoot": (2, "linear"),
    "run": (2, "linear"),
    "scatter": (3, "scatter"),
    "chase": (3, "scatter"),
    "arrest": (2, "chase"),
    "fight": (2, "chase"),
    "knockdown": (1, "wander"),
    "normal1": (1, "wander"),
    "normal2": (2, "wander"),
}

DEFAULT_SALIENT = ("shoot", "scatter", "arrest", "knockdown")

DARK_BRIGHTNESS = 0.25
DARK_NOISE_FACTOR = 2.0
TRAIN_FRACTION = 0.8


@dataclass
class SynthConfig:
    n_classes: int = 9
    clips_per_class: int = 40
    frame_h: int = 32
    frame_w: int = 32
    clip_len: int = 60
    audio_salient_classes: tuple[str, ...] = DEFAULT_SALIENT
    dark_fraction: float = 0.0
    visual_noise: float = 0.02
    audio_noise: float = 0.02
    audio_seconds: float = 1.0
    audio_rate: int = 16_000
    seed: int = 0

    def __post_init__(self):
        if self.n_classes != len(CLASS_NAMES):
            raise ValueError(
                f"the generator encodes exactly the {len(CLASS_NAMES)} known "
                f"classes, got n_classes={self.n_classes}"
            )
        self.audio_salient_classes = tuple(self.audio_salient_classes)
        unknown = set(self.audio_salient_classes) - set(CLASS_NAMES)
        if unknown:
            raise ValueError(f"unknown audio-salient classes: {sorted(unknown)}")
        if not 0 <= self.dark_fraction <= 1:
            raise ValueError(f"dark_fraction must be in [0, 1], got {self.dark_fraction}")
        if self.clips_per_class < 1 or self.clip_len < 1:
            raise ValueError("clips_per_class and clip_len must be >= 1")


def tone_table(salient_classes) -> dict[str, int]:
    """Class fundamentals, evenly spread over [600, 2700] Hz and at least
    300 Hz apart so the 64-bin mel front end resolves them."""
    names = sorted(salient_classes)
    k = len(names)
    if k == 0:
        return {}
    if k == 1:
        freqs = [1500]
    else:
        step = (2700 - 600) / (k - 1)
        if step < 300:
            raise ValueError(f"{k} salient classes cannot keep 300 Hz spacing")
        freqs = [round_half_up(600 + i * step) for i in range(k)]
    return dict(zip(names, freqs))


# ----------------------------------------------------------------------
# blob trajectories (unit coordinates, (n_blobs, frames, 2) as (y, x))
# ----------------------------------------------------------------------

_MARGIN = 0.12
_LO, _HI = 0.04, 0.96


def _reflect(pos):
    # Fold positions back into [_LO, _HI] so linear motion bounces off walls.
    span = _HI - _LO
    folded = np.mod(pos - _LO, 2 * span)
    folded = np.where(folded > span, 2 * span - folded, folded)
    return folded + _LO


def _traj_linear(rng, n, frames):
    start = rng.uniform(_MARGIN, 1 - _MARGIN, size=(n, 1, 2))
    angle = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    speed = rng.uniform(0.055, 0.085, size=(n, 1, 1))
    step = speed * np.concatenate([np.sin(angle), np.cos(angle)], axis=2)
    t = np.arange(frames).reshape(1, frames, 1)
    return _reflect(start + step * t)


def _traj_scatter(rng, n, frames):
    center = 0.5 + rng.uniform(-0.06, 0.06, size=(1, 1, 2))
    angles = (np.arange(n).reshape(n, 1, 1) * 2 * np.pi / n
              + rng.uniform(0, 2 * np.pi)
              + rng.uniform(-0.4, 0.4, size=(n, 1, 1)))
    speed = rng.uniform(0.04, 0.062, size=(n, 1, 1))
    step = speed * np.concatenate([np.sin(angles), np.cos(angles)], axis=2)
    t = np.arange(frames).reshape(1, frames, 1)
    return _reflect(center + step * t)


def _traj_chase(rng, n, frames):
    # A pursuit pair: both blobs close on each other, then jitter in place.
    a = rng.uniform(_MARGIN, 1 - _MARGIN, size=2)
    b = 1.0 - a + rng.uniform(-0.08, 0.08, size=2)
    b = np.clip(b, _LO, _HI)
    speed = rng.uniform(0.030, 0.045)
    pos = np.zeros((2, frames, 2))
    pa, pb = a.copy(), b.copy()
    for t in range(frames):
        pos[0, t], pos[1, t] = pa, pb
        delta = pb - pa
        dist = np.hypot(*delta)
        if dist > 0.12:
            direction = delta / dist
            pa = pa + speed * direction
            pb = pb - speed * direction
        else:
            pa = np.clip(pa + rng.normal(0, 0.02, 2), _LO, _HI)
            pb = np.clip(pb + rng.normal(0, 0.02, 2), _LO, _HI)
    if n != 2:
        raise ValueError("chase pattern is defined for exactly 2 blobs")
    return pos


def _traj_wander(rng, n, frames):
    start = rng.uniform(_MARGIN, 1 - _MARGIN, size=(n, 1, 2))
    steps = rng.normal(0, 0.012, size=(n, frames, 2))
    steps[:, 0] = 0
    return np.clip(start + np.cumsum(steps, axis=1), _LO, _HI)


_PATTERNS = {
    "linear": _traj_linear,
    "scatter": _traj_scatter,
    "chase": _traj_chase,
    "wander": _traj_wander,
}

BLOB_AMP = 0.9
BLOB_SIGMA = 0.065  # of min(H, W)


def render_clip(rng, class_name, cfg: SynthConfig, dark: bool) -> np.ndarray:
    """Render one clip as (3, clip_len, H, W) float32 in [0, 1]."""
    n_blobs, pattern = CLASS_VISUALS[class_name]
    traj = _PATTERNS[pattern](rng, n_blobs, cfg.clip_len)
    H, W = cfg.frame_h, cfg.frame_w
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    sigma = BLOB_SIGMA
    dy = ys.reshape(1, 1, H, 1) - traj[:, :, 0].reshape(n_blobs, cfg.clip_len, 1, 1)
    dx = xs.reshape(1, 1, 1, W) - traj[:, :, 1].reshape(n_blobs, cfg.clip_len, 1, 1)
    blobs = BLOB_AMP * np.exp(-(dy**2 + dx**2) / (2 * sigma**2))
    clean = np.clip(blobs.sum(axis=0), 0.0, 1.0)  # (clip_len, H, W)
    if dark:
        clean = clean * DARK_BRIGHTNESS
        noise_sigma = cfg.visual_noise * DARK_NOISE_FACTOR
    else:
        noise_sigma = cfg.visual_noise
    frames = np.repeat(clean[None], 3, axis=0)
    frames = frames + rng.normal(0, noise_sigma, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def render_audio(rng, class_name, cfg: SynthConfig, tones: dict[str, int]) -> np.ndarray:
    """One second of background noise, plus tone bursts for salient classes."""
    n = round_half_up(cfg.audio_rate * cfg.audio_seconds)
    samples = rng.normal(0, cfg.audio_noise, size=n)
    f0 = tones.get(class_name)
    if f0 is not None:
        t = np.arange(n) / cfg.audio_rate
        amp = rng.uniform(0.35, 0.5)
        phase = rng.uniform(0, 2 * np.pi)
        tone = amp * np.sin(2 * np.pi * f0 * t + phase)
        envelope = np.zeros(n)
        for anchor in (0.08, 0.42, 0.72):
            start = anchor * cfg.audio_seconds + rng.uniform(-0.03, 0.03)
            lo = max(0, int(start * cfg.audio_rate))
            hi = min(n, lo + int(0.18 * cfg.audio_rate))
            envelope[lo:hi] = 1.0
        samples = samples + tone * envelope
    return np.clip(samples, -1.0, 1.0)


def _draw_time_of_day(rng, dark: bool) -> int:
    if dark and rng.random() < 2 / 3:
        night = int(rng.integers(18 * 60, 30 * 60))  # 18:00 .. 05:59 next day
        return night % (24 * 60)
    return int(rng.integers(6 * 60, 18 * 60))


def generate(cfg: SynthConfig, out_dir):
    """Write the dataset tree (frames/, audio/, manifest.jsonl); returns the
    manifest entries. Byte-identical for identical configs."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    tones = tone_table(cfg.audio_salient_classes)

    n = cfg.clips_per_class
    n_train = round_half_up(TRAIN_FRACTION * n)

    jobs = []
    for ci, name in enumerate(CLASS_NAMES):
        for part, lo, hi in (("train", 0, n_train), ("val", n_train, n)):
            part_indices = np.arange(lo, hi)
            n_dark = round_half_up(cfg.dark_fraction * part_indices.size)
            dark_rng = clip_rng(cfg.seed, "dark", ci, part)
            dark_set = set(dark_rng.choice(part_indices, size=n_dark,
                                           replace=False).tolist()) if n_dark else set()
            for i in part_indices:
                jobs.append((ci, name, int(i), part, int(i) in dark_set))

    def build(job):
        ci, name, i, part, dark = job
        rng = clip_rng(cfg.seed, "clip", ci, i)
        clip_id = f"{name}_{i:04d}"
        frames = render_clip(rng, name, cfg, dark)
        samples = render_audio(rng, name, cfg, tones)
        avt.write_avt(out / "frames" / f"{clip_id}.avt", frames)
        wavio.write_wav(out / "audio" / f"{clip_id}.wav", samples, cfg.audio_rate)
        return ManifestEntry(
            id=clip_id,
            video_path=f"frames/{clip_id}.avt",
            audio_path=f"audio/{clip_id}.wav",
            label=ci,
            class_name=name,
            time_of_day=_draw_time_of_day(rng, dark),
            illumination="low" if dark else "normal",
            split=part,
            base_dir=out,
        )

    entries = map_parallel(build, jobs)
    entries.sort(key=lambda e: (e.label, e.id))
    save_manifest(entries, out / "manifest.jsonl")
    return entries


def degrade(entries, out_dir, kind: str, magnitude: float, seed: int = 0):
    """Materialize degraded copies of every entry under ``out_dir``.

    ``magnitude`` is the degradation strength, 0 meaning an untouched copy:
    for ``dark`` the brightness scale is 1 - magnitude; for ``audio_noise``
    the added noise RMS is magnitude times the signal RMS (so magnitude 1 is
    a 0 dB signal-to-noise ratio).
    """
    if kind not in ("dark", "audio_noise"):
        raise ValueError(f"kind must be dark or audio_noise, got {kind!r}")
    if magnitude < 0:
        raise ValueError(f"magnitude must be >= 0, got {magnitude}")
    if kind == "dark" and magnitude > 1:
        raise ValueError(f"dark magnitude must be <= 1, got {magnitude}")
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    tag = f"{kind}{magnitude:g}"

    def build(entry):
        from .data import load_video_tensor
        from .wavio import read_wav

        new_id = f"{entry.id}__{tag}"
        frames = load_video_tensor(entry.video_file)
        samples = read_wav(entry.audio_file)
        illumination = entry.illumination
        if kind == "dark":
            frames = (frames * (1.0 - magnitude)).astype(np.float32)
            if magnitude > 0:
                illumination = "low"
        else:
            rms = float(np.sqrt(np.mean(samples.samples**2)))
            if magnitude > 0 and rms > 0:
                rng = clip_rng(seed, "degrade", tag, entry.id)
                noise = rng.normal(0, magnitude * rms, size=samples.samples.size)
                samples.samples = np.clip(samples.samples + noise, -1.0, 1.0)
        avt.write_avt(out / "frames" / f"{new_id}.avt", frames)
        wavio.write_wav(out / "audio" / f"{new_id}.wav", samples.samples,
                        samples.sample_rate)
        return ManifestEntry(
            id=new_id,
            video_path=f"frames/{new_id}.avt",
            audio_path=f"audio/{new_id}.wav",
            label=entry.label,
            class_name=entry.class_name,
            time_of_day=entry.time_of_day,
            illumination=illumination,
            split=entry.split,
            base_dir=out,
        )

    new_entries = map_parallel(build, list(entries))
    save_manifest(new_entries, out / "manifest.jsonl")
    return new_entries
