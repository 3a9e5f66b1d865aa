"""The three learnable networks and their parameter plumbing.

Visual branch: a shallow residual 3-D CNN over (B, C, T, H, W) clips ending
in global average pooling. Audio branch: a plain strided conv stack over
(B, 1, M, F) log-mel images, also GAP-pooled, so its output width does not
depend on the frame count F. Classifier: three linear layers.

Layers cache their inputs only during training forwards, so eval-mode
forwards with frozen parameters are pure and safe to run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import avt, fusion, ops

MODES = ("visual", "audio", "av")


class Param:
    """One learnable tensor with its gradient and SGD momentum slot."""

    __slots__ = ("name", "value", "grad", "velocity")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)


@dataclass
class ModelConfig:
    """Everything needed to build a model; scalable down for tests."""

    n_classes: int = 9
    mode: str = "av"
    fusion: str = "concat"
    um_scale: float = 10.0
    lf_raw: bool = False
    feature_dim: int = 512
    visual_widths: tuple[int, ...] | None = None
    visual_blocks: tuple[int, ...] | None = None
    audio_widths: tuple[int, ...] | None = None
    mel_bins: int = 64
    clip_len: int = 50
    classifier_hidden: tuple[int, int] = (512, 256)
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.fusion_strategy()  # validates kind and um_scale
        base = (16, 32, 64, self.feature_dim)
        if self.visual_widths is None:
            self.visual_widths = tuple(min(w, self.feature_dim) for w in base)
        else:
            self.visual_widths = tuple(self.visual_widths)
        if self.visual_blocks is None:
            self.visual_blocks = (1,) * len(self.visual_widths)
        else:
            self.visual_blocks = tuple(self.visual_blocks)
        if len(self.visual_blocks) != len(self.visual_widths):
            raise ValueError("visual_blocks must match visual_widths per stage")
        if self.audio_widths is None:
            self.audio_widths = tuple(min(w, self.feature_dim) for w in base)
        else:
            self.audio_widths = tuple(self.audio_widths)
        for name, widths in (("visual", self.visual_widths), ("audio", self.audio_widths)):
            if widths[-1] != self.feature_dim:
                raise ValueError(
                    f"{name} widths end at {widths[-1]} but feature_dim is "
                    f"{self.feature_dim}"
                )
        self.classifier_hidden = tuple(self.classifier_hidden)

    def fusion_strategy(self) -> fusion.FusionStrategy:
        return fusion.FusionStrategy(self.fusion, self.um_scale, self.lf_raw)

    @property
    def visual_in_channels(self) -> int:
        return 4 if (self.mode == "av" and self.fusion == "lf") else 3

    @property
    def classifier_in(self) -> int:
        if self.mode == "visual":
            return self.feature_dim
        if self.mode == "audio":
            return self.feature_dim
        return fusion.fused_width(self.feature_dim, self.feature_dim,
                                  self.fusion_strategy())


def _he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3dLayer:
    def __init__(self, name, rng, in_ch, out_ch, kernel=(3, 3, 3),
                 stride=(1, 1, 1), padding=(1, 1, 1), dtype=np.float32):
        fan_in = in_ch * int(np.prod(kernel))
        self.weight = Param(f"{name}.weight",
                            _he_init(rng, (out_ch, in_ch, *kernel), fan_in, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self._x = None

    def _kernel(self):
        return ops.Conv3dKernel(self.weight.value, self.bias.value,
                                self.stride, self.padding)

    def forward(self, x, train):
        if train:
            self._x = x
        return ops.conv3d_forward(x, self._kernel())

    def backward(self, grad_out):
        gx, gw, gb = ops.conv3d_backward(self._x, self._kernel(), grad_out)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def params(self):
        return [self.weight, self.bias]


class BatchNorm3dLayer:
    def __init__(self, name, channels, momentum=0.1, dtype=np.float32):
        self.name = name
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.stats = ops.BatchNormStats(channels, dtype=dtype)
        self.momentum = momentum
        self._x = None
        self._train = False

    def forward(self, x, train):
        if train:
            self._x = x
            self._train = True
        return ops.batch_norm3d_forward(x, self.gamma.value, self.beta.value,
                                        self.stats, train, self.momentum)

    def backward(self, grad_out):
        gx, gg, gb = ops.batch_norm3d_backward(self._x, self.gamma.value,
                                               self.stats, self._train, grad_out)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.stats.mean,
                f"{self.name}.running_var": self.stats.var}


class ReLULayer:
    def __init__(self):
        self._x = None

    def forward(self, x, train):
        if train:
            self._x = x
        return ops.relu_forward(x)

    def backward(self, grad_out):
        return ops.relu_backward(self._x, grad_out)

    def params(self):
        return []


class LinearLayer:
    def __init__(self, name, rng, in_dim, out_dim, dtype=np.float32):
        self.weight = Param(f"{name}.weight",
                            _he_init(rng, (out_dim, in_dim), in_dim, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def forward(self, x, train):
        if train:
            self._x = x
        return ops.linear_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad_out):
        gx, gw, gb = ops.linear_backward(self._x, self.weight.value, grad_out)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def params(self):
        return [self.weight, self.bias]


class BasicBlock3d:
    """Two 3x3x3 convs with batch norm and a (projected) residual skip."""

    def __init__(self, name, rng, in_ch, out_ch, stride, momentum, dtype):
        s3 = (stride, stride, stride)
        self.conv1 = Conv3dLayer(f"{name}.conv1", rng, in_ch, out_ch,
                                 stride=s3, dtype=dtype)
        self.bn1 = BatchNorm3dLayer(f"{name}.bn1", out_ch, momentum, dtype)
        self.relu1 = ReLULayer()
        self.conv2 = Conv3dLayer(f"{name}.conv2", rng, out_ch, out_ch, dtype=dtype)
        self.bn2 = BatchNorm3dLayer(f"{name}.bn2", out_ch, momentum, dtype)
        if stride != 1 or in_ch != out_ch:
            self.down = Conv3dLayer(f"{name}.down", rng, in_ch, out_ch,
                                    kernel=(1, 1, 1), stride=s3,
                                    padding=(0, 0, 0), dtype=dtype)
            self.down_bn = BatchNorm3dLayer(f"{name}.down_bn", out_ch, momentum, dtype)
        else:
            self.down = None
            self.down_bn = None
        self._pre = None

    def forward(self, x, train):
        identity = x
        if self.down is not None:
            identity = self.down_bn.forward(self.down.forward(x, train), train)
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        pre = h + identity
        if train:
            self._pre = pre
        return ops.relu_forward(pre)

    def backward(self, grad_out):
        g = ops.relu_backward(self._pre, grad_out)
        gh = self.conv2.backward(self.bn2.backward(g))
        gx = self.conv1.backward(self.bn1.backward(self.relu1.backward(gh)))
        if self.down is not None:
            gx = gx + self.down.backward(self.down_bn.backward(g))
        else:
            gx = gx + g
        return gx

    def layers(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.down is not None:
            out += [self.down, self.down_bn]
        return out

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]


class VisualNet:
    """Clip (B, C, T, H, W) -> feature (B, C_v) via residual stages and GAP."""

    def __init__(self, config: ModelConfig, rng, dtype):
        cfg = config
        w0 = cfg.visual_widths[0]
        self.in_channels = cfg.visual_in_channels
        self.clip_len = cfg.clip_len
        self.stem = Conv3dLayer("visual.stem.conv", rng, self.in_channels, w0,
                                stride=(1, 2, 2), dtype=dtype)
        self.stem_bn = BatchNorm3dLayer("visual.stem.bn", w0, cfg.bn_momentum, dtype)
        self.stem_relu = ReLULayer()
        self.blocks = []
        in_ch = w0
        for si, (width, n_blocks) in enumerate(zip(cfg.visual_widths, cfg.visual_blocks)):
            for bi in range(n_blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                self.blocks.append(BasicBlock3d(
                    f"visual.stage{si}.block{bi}", rng, in_ch, width, stride,
                    cfg.bn_momentum, dtype))
                in_ch = width
        self._gap_shape = None

    def forward(self, clip, train=False):
        if clip.ndim != 5:
            raise ops.ShapeError(f"clip must be (B, C, T, H, W), got {clip.shape}")
        if clip.shape[1] != self.in_channels:
            raise ops.ShapeError(
                f"clip has {clip.shape[1]} channels, expected {self.in_channels}"
            )
        if clip.shape[2] != self.clip_len:
            raise ops.ShapeError(
                f"clip has {clip.shape[2]} frames, configured length is {self.clip_len}"
            )
        h = self.stem_relu.forward(
            self.stem_bn.forward(self.stem.forward(clip, train), train), train)
        for block in self.blocks:
            h = block.forward(h, train)
        if train:
            self._gap_shape = h.shape
        return ops.global_avg_pool_forward(h)

    def backward(self, grad_feature):
        g = ops.global_avg_pool_backward(self._gap_shape, grad_feature)
        for block in reversed(self.blocks):
            g = block.backward(g)
        return self.stem.backward(self.stem_bn.backward(self.stem_relu.backward(g)))

    def layers(self):
        out = [self.stem, self.stem_bn]
        for b in self.blocks:
            out += b.layers()
        return out

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]


class AudioNet:
    """Log-mel (B, 1, M, F) -> feature (B, C_a); F may vary, GAP absorbs it."""

    def __init__(self, config: ModelConfig, rng, dtype):
        self.mel_bins = config.mel_bins
        self.stages = []
        in_ch = 1
        for si, width in enumerate(config.audio_widths):
            conv = Conv3dLayer(f"audio.stage{si}.conv", rng, in_ch, width,
                               kernel=(1, 3, 3), stride=(1, 2, 2),
                               padding=(0, 1, 1), dtype=dtype)
            bn = BatchNorm3dLayer(f"audio.stage{si}.bn", width,
                                  config.bn_momentum, dtype)
            self.stages.append((conv, bn, ReLULayer()))
            in_ch = width
        self._gap_shape = None

    def forward(self, logmel, train=False):
        if logmel.ndim != 4 or logmel.shape[1] != 1:
            raise ops.ShapeError(f"log-mel batch must be (B, 1, M, F), got {logmel.shape}")
        if logmel.shape[2] != self.mel_bins:
            raise ops.ShapeError(
                f"log-mel has {logmel.shape[2]} bins, configured {self.mel_bins}"
            )
        if logmel.shape[3] < 1:
            raise ops.ShapeError("log-mel must have at least one frame")
        h = logmel[:, :, None]  # lift to (B, 1, 1, M, F) for the 3-D kernels
        for conv, bn, relu in self.stages:
            h = relu.forward(bn.forward(conv.forward(h, train), train), train)
        if train:
            self._gap_shape = h.shape
        return ops.global_avg_pool_forward(h)

    def backward(self, grad_feature):
        g = ops.global_avg_pool_backward(self._gap_shape, grad_feature)
        for conv, bn, relu in reversed(self.stages):
            g = conv.backward(bn.backward(relu.backward(g)))
        return np.ascontiguousarray(g[:, :, 0])

    def layers(self):
        return [layer for conv, bn, _ in self.stages for layer in (conv, bn)]

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]


class ClassifierNet:
    """Linear -> ReLU -> Linear -> ReLU -> Linear, widths per configuration."""

    def __init__(self, config: ModelConfig, rng, dtype):
        h1, h2 = config.classifier_hidden
        d = config.classifier_in
        self.fc1 = LinearLayer("classifier.fc1", rng, d, h1, dtype)
        self.relu1 = ReLULayer()
        self.fc2 = LinearLayer("classifier.fc2", rng, h1, h2, dtype)
        self.relu2 = ReLULayer()
        self.fc3 = LinearLayer("classifier.fc3", rng, h2, config.n_classes, dtype)

    def forward(self, feature, train=False):
        h = self.relu1.forward(self.fc1.forward(feature, train), train)
        h = self.relu2.forward(self.fc2.forward(h, train), train)
        return self.fc3.forward(h, train)

    def backward(self, grad_logits):
        g = self.fc3.backward(grad_logits)
        g = self.fc2.backward(self.relu2.backward(g))
        return self.fc1.backward(self.relu1.backward(g))

    def layers(self):
        return [self.fc1, self.fc2, self.fc3]

    def params(self):
        return [p for layer in self.layers() for p in layer.params()]


class ModelParams:
    """The complete learnable state for one mode/fusion configuration."""

    def __init__(self, config: ModelConfig, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.dtype = dtype
        self.visual = None
        self.audio = None
        if config.mode in ("visual", "av"):
            self.visual = VisualNet(config, rng, dtype)
        if config.mode in ("audio", "av"):
            self.audio = AudioNet(config, rng, dtype)
        self.classifier = ClassifierNet(config, rng, dtype)
        self.fusion_gamma = None
        self.fusion_beta = None
        if config.mode == "av" and config.fusion == "concat_ln":
            width = config.classifier_in
            self.fusion_gamma = Param("fusion.ln.gamma", np.ones(width, dtype=dtype))
            self.fusion_beta = Param("fusion.ln.beta", np.zeros(width, dtype=dtype))
        self._fuse_cache = None
        self._lf_cache = None

    def parameters(self) -> list[Param]:
        out = []
        if self.visual is not None:
            out += self.visual.params()
        if self.audio is not None:
            out += self.audio.params()
        out += self.classifier.params()
        if self.fusion_gamma is not None:
            out += [self.fusion_gamma, self.fusion_beta]
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for net in (self.visual, self.audio):
            if net is None:
                continue
            for layer in net.layers():
                if isinstance(layer, BatchNorm3dLayer):
                    out.update(layer.buffers())
        return out

    def bn_layers(self):
        for net in (self.visual, self.audio):
            if net is None:
                continue
            for layer in net.layers():
                if isinstance(layer, BatchNorm3dLayer):
                    yield layer

    def state_dict(self) -> dict:
        """Copies of every parameter value and BN buffer, for snapshots."""
        state = {p.name: p.value.copy() for p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        state["__bn_initialized__"] = {
            layer.name: layer.stats.initialized for layer in self.bn_layers()
        }
        return state

    def load_state_dict(self, state: dict):
        for p in self.parameters():
            p.value[...] = state[p.name]
        for layer in self.bn_layers():
            layer.stats.mean[...] = state[f"{layer.name}.running_mean"]
            layer.stats.var[...] = state[f"{layer.name}.running_var"]
            layer.stats.initialized = state["__bn_initialized__"][layer.name]


def init_params(config: ModelConfig, seed=0, dtype=np.float32) -> ModelParams:
    """He fan-in initialized parameters, deterministic under ``seed``."""
    return ModelParams(config, seed=seed, dtype=dtype)


def model_forward(params: ModelParams, clip=None, logmel=None, train=False):
    """Dispatch per mode and fusion strategy; returns (B, N) logits."""
    cfg = params.config
    if cfg.mode == "visual":
        if clip is None:
            raise ValueError("visual mode requires a clip batch")
        return params.classifier.forward(params.visual.forward(clip, train), train)
    if cfg.mode == "audio":
        if logmel is None:
            raise ValueError("audio mode requires a log-mel batch")
        return params.classifier.forward(params.audio.forward(logmel, train), train)
    if clip is None or logmel is None:
        raise ValueError("audio-visual mode requires both a clip and a log-mel batch")
    strategy = cfg.fusion_strategy()
    f_a = params.audio.forward(logmel, train)
    if cfg.fusion == "lf":
        stacked, cache = fusion.lf_inject(clip, f_a, raw=cfg.lf_raw)
        if train:
            params._lf_cache = cache
        f_v = params.visual.forward(stacked, train)
        return params.classifier.forward(f_v, train)
    f_v = params.visual.forward(clip, train)
    gamma = params.fusion_gamma.value if params.fusion_gamma is not None else None
    beta = params.fusion_beta.value if params.fusion_beta is not None else None
    fused, cache = fusion.fuse(f_v, f_a, strategy, gamma, beta)
    if train:
        params._fuse_cache = cache
    return params.classifier.forward(fused, train)


def model_backward(params: ModelParams, grad_logits):
    """Accumulate parameter gradients after a ``train=True`` forward."""
    cfg = params.config
    g = params.classifier.backward(grad_logits)
    if cfg.mode == "visual":
        params.visual.backward(g)
        return
    if cfg.mode == "audio":
        params.audio.backward(g)
        return
    if cfg.fusion == "lf":
        g_stacked = params.visual.backward(g)
        _, g_fa = fusion.lf_inject_backward(params._lf_cache, g_stacked)
        params.audio.backward(g_fa)
        return
    g_fv, g_fa, g_gamma, g_beta = fusion.fuse_backward(params._fuse_cache, g)
    if g_gamma is not None:
        params.fusion_gamma.grad += g_gamma
        params.fusion_beta.grad += g_beta
    params.visual.backward(g_fv)
    params.audio.backward(g_fa)


def save_checkpoint(params: ModelParams, out_dir) -> Path:
    """Write every parameter and BN buffer as AVT plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for p in params.parameters():
        tensors[p.name] = f"{p.name}.avt"
        avt.write_avt(out / tensors[p.name], p.value)
    initialized = {}
    for layer in params.bn_layers():
        for name, buf in layer.buffers().items():
            tensors[name] = f"{name}.avt"
            avt.write_avt(out / tensors[name], buf)
        initialized[layer.name] = layer.stats.initialized
    manifest = {
        "format": "avfuse-checkpoint-v1",
        "config": asdict(params.config),
        "tensors": tensors,
        "bn_initialized": initialized,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(ckpt_dir) -> ModelParams:
    """Rebuild a model from ``save_checkpoint`` output, bit-exact."""
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    if manifest.get("format") != "avfuse-checkpoint-v1":
        raise ValueError(f"{ckpt}: not an avfuse checkpoint")
    raw = dict(manifest["config"])
    for key in ("visual_widths", "visual_blocks", "audio_widths", "classifier_hidden"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    config = ModelConfig(**raw)
    params = ModelParams(config, seed=0)
    loaded = {name: avt.read_avt(ckpt / fname)
              for name, fname in manifest["tensors"].items()}
    for p in params.parameters():
        if p.name not in loaded:
            raise ValueError(f"checkpoint missing tensor {p.name}")
        if loaded[p.name].shape != p.value.shape:
            raise ValueError(
                f"checkpoint tensor {p.name} has shape {loaded[p.name].shape}, "
                f"expected {p.value.shape}"
            )
        p.value = loaded[p.name].astype(params.dtype)
        p.grad = np.zeros_like(p.value)
        p.velocity = np.zeros_like(p.value)
    for layer in params.bn_layers():
        layer.stats.mean = loaded[f"{layer.name}.running_mean"].astype(params.dtype)
        layer.stats.var = loaded[f"{layer.name}.running_var"].astype(params.dtype)
        layer.stats.initialized = manifest["bn_initialized"][layer.name]
    return params
