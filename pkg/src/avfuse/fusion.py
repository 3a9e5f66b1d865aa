"""The five strategies for combining the visual and audio features.

Four of them (concat, concat + layer norm, concat with unified magnitude,
add) act on the pooled feature vectors right before the classifier. The
fifth (lf) works on the other end of the network: the audio feature's
self-correlation map is resized and stacked onto the video frames as a
fourth channel before the visual branch runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops

KINDS = ("concat", "concat_ln", "concat_um", "add", "lf")


class ContractError(ValueError):
    """A strategy was used at the wrong point of the pipeline."""


@dataclass(frozen=True)
class FusionStrategy:
    kind: str = "concat"
    um_scale: float = 10.0
    lf_raw: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown fusion kind {self.kind!r}, expected one of {KINDS}")
        if self.kind == "concat_um" and self.um_scale <= 0:
            raise ValueError(f"um_scale must be > 0, got {self.um_scale}")


def fused_width(c_v: int, c_a: int, strategy: FusionStrategy) -> int:
    """Width of the feature handed to the classifier."""
    if strategy.kind in ("concat", "concat_ln", "concat_um"):
        return c_v + c_a
    return c_v  # add fuses in place; lf never reaches this stage


def fuse(f_v, f_a, strategy: FusionStrategy, gamma=None, beta=None):
    """Combine (B, C_v) and (B, C_a) features; returns (fused, cache).

    ``gamma``/``beta`` are the learnable layer-norm parameters and are only
    consulted for the concat_ln strategy.
    """
    kind = strategy.kind
    if kind == "lf":
        raise ContractError(
            "lf is a pre-visual injection, use lf_inject on the frames instead"
        )
    if kind == "add" and f_v.shape[1] != f_a.shape[1]:
        raise ops.ShapeError(
            f"add fusion needs equal widths, got {f_v.shape[1]} and {f_a.shape[1]}"
        )
    cache = {"kind": kind, "c_v": f_v.shape[1], "c_a": f_a.shape[1]}
    if kind == "concat":
        return ops.concat_channels(f_v, f_a, axis=1), cache
    if kind == "concat_um":
        cache["scale"] = strategy.um_scale
        return ops.concat_channels(f_v, strategy.um_scale * f_a, axis=1), cache
    if kind == "concat_ln":
        cat = ops.concat_channels(f_v, f_a, axis=1)
        cache["cat"] = cat
        cache["gamma"] = gamma
        return ops.layer_norm_forward(cat, gamma, beta), cache
    return f_v + f_a, cache  # add


def fuse_backward(cache, grad_out):
    """Gradients w.r.t. (f_v, f_a, gamma, beta); the last two may be None."""
    kind = cache["kind"]
    c_v = cache["c_v"]
    if kind == "add":
        return grad_out, grad_out.copy(), None, None
    if kind == "concat_ln":
        grad_cat, g_gamma, g_beta = ops.layer_norm_backward(
            cache["cat"], cache["gamma"], grad_out
        )
        return grad_cat[:, :c_v], grad_cat[:, c_v:], g_gamma, g_beta
    grad_v = grad_out[:, :c_v]
    grad_a = grad_out[:, c_v:]
    if kind == "concat_um":
        grad_a = cache["scale"] * grad_a
    return grad_v, np.ascontiguousarray(grad_a), None, None


def lf_inject(frames, f_a, raw=False):
    """Stack the audio self-correlation map onto the frames as channel 4.

    ``frames`` is (B, 3, T, H, W) and ``f_a`` is (B, C_a). The per-sample
    outer product f_a (x) f_a is bilinearly resized to H x W, divided by its
    max magnitude so it sits on the same order as the [0, 1] frames (skipped
    when ``raw``), replicated across all T frames, and concatenated as an
    extra channel. Returns (out, cache) with out of shape (B, 4, T, H, W).
    """
    if frames.ndim != 5 or frames.shape[1] != 3:
        raise ops.ShapeError(f"frames must be (B, 3, T, H, W), got {frames.shape}")
    if f_a.ndim != 2 or f_a.shape[0] != frames.shape[0]:
        raise ops.ShapeError(
            f"audio feature {f_a.shape} does not match batch {frames.shape[0]}"
        )
    B, _, T, H, W = frames.shape
    corr = np.einsum("bi,bj->bij", f_a, f_a)
    resized = ops.bilinear_resize_forward(corr, H, W)
    if raw:
        scale = np.ones(B, dtype=resized.dtype)
    else:
        scale = np.abs(resized).max(axis=(1, 2))
        scale = np.where(scale == 0, 1.0, scale)
    channel = resized / scale[:, None, None]
    tiled = np.broadcast_to(channel[:, None, None], (B, 1, T, H, W))
    out = ops.concat_channels(frames.astype(tiled.dtype, copy=False), tiled, axis=1)
    cache = {"f_a": f_a, "resized": resized, "scale": scale, "raw": raw, "T": T}
    return out, cache


def lf_inject_backward(cache, grad_out):
    """Gradients of ``lf_inject`` w.r.t. (frames, f_a)."""
    f_a = cache["f_a"]
    resized = cache["resized"]
    scale = cache["scale"]
    grad_frames = np.ascontiguousarray(grad_out[:, :3])
    g_map = grad_out[:, 3].sum(axis=1)  # replication over T sums in reverse
    if cache["raw"]:
        grad_resized = g_map
    else:
        s = scale[:, None, None]
        grad_resized = g_map / s
        # The normalizer is |resized| at its per-sample argmax; route the
        # scale's gradient back to that single coordinate.
        B, H, W = g_map.shape
        flat = np.abs(resized).reshape(B, -1)
        am = flat.argmax(axis=1)
        nonzero = np.abs(resized).max(axis=(1, 2)) > 0
        d_scale = -(g_map * resized).sum(axis=(1, 2)) / scale**2
        rows, cols = np.divmod(am, W)
        sign = np.sign(resized[np.arange(B), rows, cols])
        upd = np.where(nonzero, d_scale * sign, 0.0)
        grad_resized = grad_resized.copy()
        grad_resized[np.arange(B), rows, cols] += upd
    c_a = f_a.shape[1]
    grad_corr = ops.bilinear_resize_backward(c_a, c_a, grad_resized)
    grad_f_a = np.einsum("bij,bj->bi", grad_corr, f_a) + np.einsum(
        "bij,bi->bj", grad_corr, f_a
    )
    return grad_frames, grad_f_a
