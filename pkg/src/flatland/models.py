"""Scaled-down Wide PyramidNet with bottleneck blocks and ShakeDrop joins.

Block layout (Han et al. bottleneck)::

    BN -> conv1x1 -> BN -> ReLU -> conv3x3(stride) -> BN -> ReLU -> conv1x1 -> BN
    out = ShakeDrop(shortcut(x), block(x))

The shortcut average-pools on stride-2 blocks and zero-pads new channels.
``fold_batchnorm`` turns an eval-mode model into the three-conv,
two-activation inference form.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import tensor as T
from .regularizers import ShakeDropConfig, layer_rng, shakedrop_forward, shakedrop_inference
from .tensor import Parameter, Tensor


def round_half_up(x: float) -> int:
    return int(Decimal(repr(float(x))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class PyramidSpec:
    input_resolution: int = 16
    stem_downsample_factor: int = 1
    base_channels: int = 8
    total_channel_add: int = 24
    num_stages: int = 3
    blocks_per_stage: int = 3
    bottleneck_ratio: int = 4
    widen_factor: float = 1.0
    num_classes: int = 4
    in_channels: int = 3

    def __post_init__(self):
        for name in ("input_resolution", "stem_downsample_factor", "base_channels", "num_stages",
                     "blocks_per_stage", "bottleneck_ratio", "num_classes", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.total_channel_add < 0:
            raise ValueError("total_channel_add must be nonnegative")
        if self.widen_factor <= 0:
            raise ValueError("widen_factor must be positive")

    @property
    def num_blocks(self) -> int:
        return self.num_stages * self.blocks_per_stage

    @property
    def total_downsample(self) -> int:
        return self.stem_downsample_factor * 2 ** (self.num_stages - 1)

    def stage_resolutions(self, input_resolution: int | None = None) -> list[int]:
        """Spatial size entering each stage."""
        res = self.input_resolution if input_resolution is None else input_resolution
        if res % self.total_downsample:
            raise ValueError(f"resolution {res} not divisible by cumulative downsampling {self.total_downsample}")
        first = res // self.stem_downsample_factor
        return [first // 2 ** i for i in range(self.num_stages)]

    def to_dict(self) -> dict:
        return asdict(self)


def stem_channels(spec: PyramidSpec) -> int:
    return max(1, round_half_up(spec.widen_factor * spec.base_channels))


def channel_schedule(spec: PyramidSpec, k: int) -> int:
    """Output channels of global block ``k`` (1-based)."""
    n = spec.num_blocks
    if not 1 <= k <= n:
        raise ValueError(f"block index {k} outside [1, {n}]")
    base = round_half_up(spec.base_channels + k * spec.total_channel_add / n)
    return max(1, round_half_up(spec.widen_factor * base))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv:
    def __init__(self, name: str, cin: int, cout: int, k: int, stride: int, rng, bias: bool = False):
        self.stride = stride
        self.padding = k // 2
        std = math.sqrt(2.0 / (k * k * cout))
        self.weight = Parameter(rng.normal(0.0, std, size=(cout, cin, k, k)), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), name=f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class BatchNorm:
    def __init__(self, name: str, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.name = name
        self.weight = Parameter(np.ones(c), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c), name=f"{name}.bias")
        dt = self.weight.dtype
        self.running_mean = np.zeros(c, dtype=dt)
        self.running_var = np.ones(c, dtype=dt)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             training, self.momentum, self.eps)

    def params(self):
        return [self.weight, self.bias]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (scale, shift) of the eval-mode transform, in float64."""
        s = self.weight.data.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        t = self.bias.data.astype(np.float64) - self.running_mean.astype(np.float64) * s
        return s, t


def _fold_after(conv: Conv, s: np.ndarray, t: np.ndarray) -> None:
    """conv followed by per-channel affine -> single conv."""
    w = conv.weight.data.astype(np.float64) * s[:, None, None, None]
    b = (np.zeros(len(s)) if conv.bias is None else conv.bias.data.astype(np.float64)) * s + t
    _set_conv(conv, w, b)


def _fold_before(conv: Conv, s: np.ndarray, t: np.ndarray) -> None:
    """per-channel affine followed by an unpadded conv -> single conv."""
    if conv.padding:
        raise ValueError("cannot fold an affine in front of a zero-padded convolution")
    w0 = conv.weight.data.astype(np.float64)
    b = (np.zeros(w0.shape[0]) if conv.bias is None else conv.bias.data.astype(np.float64))
    b = b + (w0 * t[None, :, None, None]).sum(axis=(1, 2, 3))
    _set_conv(conv, w0 * s[None, :, None, None], b)


def _set_conv(conv: Conv, w: np.ndarray, b: np.ndarray) -> None:
    dt = conv.weight.dtype
    name = conv.weight.name
    conv.weight = Parameter(w.astype(dt), name=name, dtype=dt)
    conv.bias = Parameter(b.astype(dt), name=name.rsplit(".", 1)[0] + ".bias", dtype=dt)


class Bottleneck:
    def __init__(self, name: str, index: int, cin: int, cout: int, ratio: int, stride: int, rng):
        self.name = name
        self.index = index  # 1-based global position, used for RNG keys and gate decay
        self.cin, self.cout, self.stride = cin, cout, stride
        mid = max(1, round_half_up(cout / ratio))
        self.mid = mid
        self.bn0 = BatchNorm(f"{name}.bn0", cin)
        self.conv1 = Conv(f"{name}.conv1", cin, mid, 1, 1, rng)
        self.bn1 = BatchNorm(f"{name}.bn1", mid)
        self.conv2 = Conv(f"{name}.conv2", mid, mid, 3, stride, rng)
        self.bn2 = BatchNorm(f"{name}.bn2", mid)
        self.conv3 = Conv(f"{name}.conv3", mid, cout, 1, 1, rng)
        self.bn3 = BatchNorm(f"{name}.bn3", cout)
        self.folded = False
        self.activations = 0

    def branch(self, x: Tensor, training: bool) -> Tensor:
        self.activations = 0
        if self.folded:
            h = self.conv1(x)
        else:
            h = self.bn1(self.conv1(self.bn0(x, training)), training)
        h = self._act(h)
        h = self.conv2(h)
        if not self.folded:
            h = self.bn2(h, training)
        h = self._act(h)
        h = self.conv3(h)
        if not self.folded:
            h = self.bn3(h, training)
        return h

    def _act(self, h: Tensor) -> Tensor:
        self.activations += 1
        return T.relu(h)

    def shortcut(self, x: Tensor) -> Tensor:
        if self.stride == 2:
            x = T.avg_pool2d(x, 2)
        return T.pad_channels(x, self.cout - self.cin)

    def params(self):
        out = []
        for layer in self._layers():
            out.extend(layer.params())
        return out

    def buffers(self):
        out = {}
        for layer in self._layers():
            if isinstance(layer, BatchNorm):
                out.update(layer.buffers())
        return out

    def _layers(self):
        if self.folded:
            return [self.conv1, self.conv2, self.conv3]
        return [self.bn0, self.conv1, self.bn1, self.conv2, self.bn2, self.conv3, self.bn3]

    def fold(self, join_coefficient: float) -> None:
        s0, t0 = self.bn0.affine()
        _fold_before(self.conv1, s0, t0)
        _fold_after(self.conv1, *self.bn1.affine())
        _fold_after(self.conv2, *self.bn2.affine())
        s3, t3 = self.bn3.affine()
        _fold_after(self.conv3, s3 * join_coefficient, t3 * join_coefficient)
        self.folded = True


class PyramidNet:
    """Wide PyramidNet classifier; call with an (N, C, H, W) array or Tensor."""

    def __init__(self, spec: PyramidSpec, shakedrop: ShakeDropConfig | None = None, seed: int = 0,
                 use_shakedrop: bool = True):
        self.spec = spec
        self.shakedrop = shakedrop or ShakeDropConfig()
        self.use_shakedrop = use_shakedrop
        self.seed = seed
        self.training = True
        self.folded = False
        self.step = 0
        self.stage_input_shapes: list[tuple[int, ...]] = []
        rng = np.random.default_rng(seed)

        c0 = stem_channels(spec)
        self.stem_conv = Conv("stem.conv", spec.in_channels, c0, 3, 1, rng)
        self.stem_bn = BatchNorm("stem.bn", c0)
        self.blocks: list[Bottleneck] = []
        self.stage_starts: set[int] = set()
        cin, k = c0, 0
        for s in range(spec.num_stages):
            for b in range(spec.blocks_per_stage):
                k += 1
                stride = 2 if (s > 0 and b == 0) else 1
                if b == 0:
                    self.stage_starts.add(k)
                cout = channel_schedule(spec, k)
                self.blocks.append(Bottleneck(f"s{s + 1}.b{b + 1}", k, cin, cout, spec.bottleneck_ratio, stride, rng))
                cin = cout
        self.head_bn = BatchNorm("head.bn", cin)
        bound = 1.0 / math.sqrt(cin)
        self.fc_weight = Parameter(rng.uniform(-bound, bound, size=(spec.num_classes, cin)), name="head.fc.weight")
        self.fc_bias = Parameter(np.zeros(spec.num_classes), name="head.fc.bias")

    # -- mode ---------------------------------------------------------------
    def train(self) -> "PyramidNet":
        if self.folded:
            raise RuntimeError("a folded model is inference-only")
        self.training = True
        return self

    def eval(self) -> "PyramidNet":
        self.training = False
        return self

    # -- forward ------------------------------------------------------------
    def gate_prob(self, block: Bottleneck) -> float:
        return self.shakedrop.layer_gate_prob(block.index, len(self.blocks))

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.fc_weight.dtype)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise T.ShapeError(f"expected (N, {self.spec.in_channels}, H, W) input, got {x.shape}")
        res = x.shape[2]
        if x.shape[2] != x.shape[3] or res % self.spec.total_downsample:
            raise T.ShapeError(f"input {x.shape} not square or not divisible by {self.spec.total_downsample}")
        training = self.training
        if training:
            self.step += 1
        self.stage_input_shapes = []

        h = self.stem_conv(x)
        if not self.folded:
            h = self.stem_bn(h, training)
        h = T.relu(h)
        if self.spec.stem_downsample_factor > 1:
            h = T.avg_pool2d(h, self.spec.stem_downsample_factor)
        for blk in self.blocks:
            if blk.index in self.stage_starts:
                self.stage_input_shapes.append(h.shape)
            branch = blk.branch(h, training)
            short = blk.shortcut(h)
            if self.folded:
                h = T.add(short, branch)
            elif not self.use_shakedrop:
                h = T.add(short, branch)
            elif training:
                rng = layer_rng(self.seed, blk.index, self.step)
                h, _ = shakedrop_forward(short, branch, self.shakedrop, rng, self.gate_prob(blk))
            else:
                h = shakedrop_inference(short, branch, self.shakedrop, self.gate_prob(blk))
        if self.folded:
            return T.dense(T.global_avg_pool(h), self.fc_weight, self.fc_bias)
        h = self.head_bn(h, training)
        return T.dense(T.global_avg_pool(h), self.fc_weight, self.fc_bias)

    __call__ = forward

    # -- state --------------------------------------------------------------
    def _layers(self):
        layers = [self.stem_conv] + ([] if self.folded else [self.stem_bn])
        return layers

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self._layers():
            out.extend(layer.params())
        for blk in self.blocks:
            out.extend(blk.params())
        if not self.folded:
            out.extend(self.head_bn.params())
        out.extend([self.fc_weight, self.fc_bias])
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        if self.folded:
            return {}
        out = dict(self.stem_bn.buffers())
        for blk in self.blocks:
            out.update(blk.buffers())
        out.update(self.head_bn.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: b.copy() for name, b in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.named_parameters(), self.buffers()
        expected = set(params) | set(bufs)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else bufs[name]
            if target.shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} does not match model shape {target.shape}")
            target[...] = arr

    def copy(self) -> "PyramidNet":
        return copy.deepcopy(self)

    def num_activations_per_block(self) -> list[int]:
        return [b.activations for b in self.blocks]


def build_model(spec: PyramidSpec, shakedrop_cfg: ShakeDropConfig | None = None, seed: int = 0,
                use_shakedrop: bool = True) -> PyramidNet:
    spec.stage_resolutions()
    return PyramidNet(spec, shakedrop_cfg, seed=seed, use_shakedrop=use_shakedrop)


def fold_batchnorm(model: PyramidNet) -> PyramidNet:
    """Return an inference copy with every BatchNorm absorbed.

    The stem and in-block BNs fold into their neighbouring convolutions, the
    ShakeDrop expectation folds into each block's last convolution, and the
    head BN (separated from the classifier only by average pooling) folds
    into the classifier.  Folding an already folded model is a no-op.
    """
    if model.training:
        raise RuntimeError("fold_batchnorm requires an eval-mode model")
    if model.folded:
        return model.copy()
    m = model.copy()
    _fold_after(m.stem_conv, *m.stem_bn.affine())
    for blk in m.blocks:
        c = m.shakedrop.expected_coefficient(m.gate_prob(blk)) if m.use_shakedrop else 1.0
        blk.fold(c)
    s, t = m.head_bn.affine()
    w = m.fc_weight.data.astype(np.float64)
    dt = m.fc_weight.dtype
    m.fc_bias = Parameter((m.fc_bias.data.astype(np.float64) + w @ t).astype(dt), name="head.fc.bias", dtype=dt)
    m.fc_weight = Parameter((w * s[None, :]).astype(dt), name="head.fc.weight", dtype=dt)
    m.folded = True
    return m


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def model_header(model: PyramidNet, **meta) -> dict:
    return {
        "format": "flatland-model",
        "spec": model.spec.to_dict(),
        "shakedrop": asdict(model.shakedrop),
        "use_shakedrop": model.use_shakedrop,
        "seed": model.seed,
        "folded": model.folded,
        "meta": meta,
    }


def save_model(path, model: PyramidNet, **meta) -> None:
    """Write parameters and BN buffers with the architecture in the header."""
    from .checkpoint import save
    save(path, model.state_dict(), model_header(model, **meta))


def model_from_header(header: dict) -> PyramidNet:
    from .checkpoint import CheckpointError
    if header.get("format") != "flatland-model":
        raise CheckpointError("checkpoint header does not describe a flatland model")
    sd = dict(header["shakedrop"])
    for key in ("alpha_range", "gamma_range"):
        sd[key] = tuple(sd[key])
    model = build_model(PyramidSpec(**header["spec"]), ShakeDropConfig(**sd), seed=header.get("seed", 0),
                        use_shakedrop=header.get("use_shakedrop", True))
    if header.get("folded"):
        model = fold_batchnorm(model.eval())
    return model


def load_model(path) -> tuple[PyramidNet, dict]:
    """Rebuild a model from a checkpoint written by ``save_model``; returns (model, header)."""
    from .checkpoint import load
    tensors, header = load(path)
    model = model_from_header(header)
    model.load_state_dict(tensors)
    model.eval()
    return model, header
