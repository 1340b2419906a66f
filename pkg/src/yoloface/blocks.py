"""Composite building blocks: CBS, Stem, Focus, Bottleneck, C3, SPP, ShuffleV2.

Blocks are callables over float32 NCHW arrays. Parameters are held by name:
``param_specs(prefix)`` enumerates the expected tensors, ``bind(params,
prefix)`` attaches them. The flat hierarchical names double as archive keys.
"""
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import MissingTensorError, ShapeError

BN_EPS_DEFAULT = 1e-3


@dataclass(frozen=True)
class ParamSpec:
    """One named tensor a block expects: archive key, shape, role."""
    name: str
    shape: tuple
    kind: str  # weight | bias | bn_gamma | bn_beta | bn_mean | bn_var

    @property
    def learnable(self):
        # Running statistics are distribution estimates, not parameters.
        return self.kind not in ("bn_mean", "bn_var")


def _take(params, name, shape):
    if name not in params:
        raise MissingTensorError(name)
    arr = np.ascontiguousarray(np.asarray(params[name], dtype=np.float32))
    if tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"parameter {name!r}: archive shape {arr.shape}, model expects {shape}")
    return arr


class Module:
    """Base for parameterized blocks; composites list their children."""

    _children = ()

    def param_specs(self, prefix=""):
        for frag, child in self._children:
            yield from child.param_specs(f"{prefix}{frag}.")

    def bind(self, params, prefix=""):
        for frag, child in self._children:
            child.bind(params, f"{prefix}{frag}.")

    def __call__(self, x):
        raise NotImplementedError


class ConvBN(Module):
    """Conv + BatchNorm, with SiLU when ``act`` — the CBS block of the graph.

    ``pad`` defaults to k // 2 (shape-preserving at stride 1).
    """

    def __init__(self, cin, cout, k=1, stride=1, pad=None, groups=1, act=True,
                 eps=BN_EPS_DEFAULT):
        if cin < 1 or cout < 1:
            raise ShapeError("ConvBN: channels must be >= 1")
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad
        self.groups, self.act, self.eps = groups, act, eps
        self.weight = self.gamma = self.beta = self.mean = self.var = None

    def param_specs(self, prefix=""):
        yield ParamSpec(f"{prefix}conv.weight",
                        (self.cout, self.cin // self.groups, self.k, self.k), "weight")
        yield ParamSpec(f"{prefix}bn.gamma", (self.cout,), "bn_gamma")
        yield ParamSpec(f"{prefix}bn.beta", (self.cout,), "bn_beta")
        yield ParamSpec(f"{prefix}bn.mean", (self.cout,), "bn_mean")
        yield ParamSpec(f"{prefix}bn.var", (self.cout,), "bn_var")

    def bind(self, params, prefix=""):
        self.weight = _take(params, f"{prefix}conv.weight",
                            (self.cout, self.cin // self.groups, self.k, self.k))
        self.gamma = _take(params, f"{prefix}bn.gamma", (self.cout,))
        self.beta = _take(params, f"{prefix}bn.beta", (self.cout,))
        self.mean = _take(params, f"{prefix}bn.mean", (self.cout,))
        self.var = _take(params, f"{prefix}bn.var", (self.cout,))

    def __call__(self, x):
        y = ops.conv2d(x, self.weight, stride=self.stride, pad=self.pad, groups=self.groups)
        y = ops.batchnorm_apply(y, self.gamma, self.beta, self.mean, self.var, self.eps)
        return ops.silu(y) if self.act else y


class Stem(Module):
    """First stage: stride-2 CBS, then a squeeze-expand path next to a 2x2
    maxpool, concatenated and fused by a 1x1 CBS. Net 4x downsampling."""

    def __init__(self, cin, cout, eps=BN_EPS_DEFAULT):
        if cout % 2:
            raise ShapeError("Stem: output channels must be even")
        self.cin, self.cout = cin, cout
        self.conv1 = ConvBN(cin, cout, 3, 2, eps=eps)
        self.conv2a = ConvBN(cout, cout // 2, 1, 1, eps=eps)
        self.conv2b = ConvBN(cout // 2, cout, 3, 2, eps=eps)
        self.conv3 = ConvBN(2 * cout, cout, 1, 1, eps=eps)
        self._children = (("stem1", self.conv1), ("stem2a", self.conv2a),
                          ("stem2b", self.conv2b), ("stem3", self.conv3))

    def __call__(self, x):
        y = self.conv1(x)
        a = self.conv2b(self.conv2a(y))
        b = ops.maxpool(y, 2, 2, 0)
        return self.conv3(ops.concat_channels(a, b))


class Focus(Module):
    """Space-to-depth (2x2 -> 4C) plus CBS; the stem's ablation alternative."""

    def __init__(self, cin, cout, k=3, eps=BN_EPS_DEFAULT):
        self.cin, self.cout = cin, cout
        self.conv = ConvBN(4 * cin, cout, k, 1, eps=eps)
        self._children = (("conv", self.conv),)

    def __call__(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"Focus: spatial dims must be even, got {x.shape}")
        cat = ops.concat_channels(
            x[..., ::2, ::2], x[..., 1::2, ::2], x[..., ::2, 1::2], x[..., 1::2, 1::2]
        )
        return self.conv(cat)


class Bottleneck(Module):
    """CBS(1x1) -> CBS(3x3), with a residual add when ``shortcut``."""

    def __init__(self, cin, cout, shortcut=True, eps=BN_EPS_DEFAULT):
        if shortcut and cin != cout:
            raise ShapeError(f"Bottleneck: shortcut needs Cin == Cout, got {cin} vs {cout}")
        self.add = shortcut
        self.cv1 = ConvBN(cin, cout, 1, 1, eps=eps)
        self.cv2 = ConvBN(cout, cout, 3, 1, eps=eps)
        self._children = (("cv1", self.cv1), ("cv2", self.cv2))

    def __call__(self, x):
        y = self.cv2(self.cv1(x))
        return ops.add_elementwise(x, y) if self.add else y


class C3(Module):
    """Cross-stage partial block.

    Path A: CBS(1x1, Cout/2) -> n bottlenecks -> conv+BN. Path B: conv+BN
    (1x1, Cout/2) from the full input. Both pre-concat convs carry no
    activation so the concatenated halves stay distribution-comparable;
    a final 1x1 CBS mixes them.
    """

    def __init__(self, cin, cout, n=1, shortcut=True, eps=BN_EPS_DEFAULT):
        if cout % 2:
            raise ShapeError("C3: output channels must be even")
        if n < 1:
            raise ShapeError("C3: repeat count must be >= 1")
        ch = cout // 2
        self.cv1 = ConvBN(cin, ch, 1, 1, eps=eps)
        self.m = [Bottleneck(ch, ch, shortcut, eps=eps) for _ in range(n)]
        self.cva = ConvBN(ch, ch, 1, 1, act=False, eps=eps)
        self.cvb = ConvBN(cin, ch, 1, 1, act=False, eps=eps)
        self.cv3 = ConvBN(2 * ch, cout, 1, 1, eps=eps)
        self._children = tuple(
            [("cv1", self.cv1)]
            + [(f"m.{i}", b) for i, b in enumerate(self.m)]
            + [("cva", self.cva), ("cvb", self.cvb), ("cv3", self.cv3)]
        )

    def __call__(self, x):
        a = self.cv1(x)
        for b in self.m:
            a = b(a)
        a = self.cva(a)
        return self.cv3(ops.concat_channels(a, self.cvb(x)))


class SPP(Module):
    """Spatial pyramid pooling: parallel stride-1 max pools, concatenated."""

    def __init__(self, cin, cout, kernels=(7, 5, 3), eps=BN_EPS_DEFAULT):
        if any(k % 2 == 0 for k in kernels):
            raise ShapeError(f"SPP: kernels must be odd, got {kernels}")
        self.kernels = tuple(int(k) for k in kernels)
        ch = cin // 2
        self.cv1 = ConvBN(cin, ch, 1, 1, eps=eps)
        self.cv2 = ConvBN(ch * (len(self.kernels) + 1), cout, 1, 1, eps=eps)
        self._children = (("cv1", self.cv1), ("cv2", self.cv2))

    def __call__(self, x):
        y = self.cv1(x)
        branches = [y] + [ops.maxpool(y, k, 1, k // 2) for k in self.kernels]
        return self.cv2(ops.concat_channels(*branches))


class ShuffleV2Block(Module):
    """ShuffleNetV2 unit with depthwise 3x3 core and channel shuffle.

    Stride 1 splits channels and transforms the right half; stride 2
    transforms both halves and halves the grid. Activations match CBS.
    """

    def __init__(self, cin, cout, stride, eps=BN_EPS_DEFAULT):
        if stride not in (1, 2):
            raise ShapeError(f"ShuffleV2Block: stride must be 1 or 2, got {stride}")
        if cout % 2:
            raise ShapeError("ShuffleV2Block: output channels must be even")
        branch = cout // 2
        self.cin, self.cout, self.stride = cin, cout, stride
        if stride == 1:
            if cin != cout:
                raise ShapeError(f"ShuffleV2Block: stride 1 needs Cin == Cout, got {cin} vs {cout}")
            if cin % 2:
                raise ShapeError("ShuffleV2Block: stride 1 needs even input channels")
            self.b1 = []
            self.b2 = [
                ConvBN(branch, branch, 1, 1, eps=eps),
                ConvBN(branch, branch, 3, 1, groups=branch, act=False, eps=eps),
                ConvBN(branch, branch, 1, 1, eps=eps),
            ]
        else:
            self.b1 = [
                ConvBN(cin, cin, 3, 2, groups=cin, act=False, eps=eps),
                ConvBN(cin, branch, 1, 1, eps=eps),
            ]
            self.b2 = [
                ConvBN(cin, branch, 1, 1, eps=eps),
                ConvBN(branch, branch, 3, 2, groups=branch, act=False, eps=eps),
                ConvBN(branch, branch, 1, 1, eps=eps),
            ]
        self._children = tuple(
            [(f"b1.{i}", m) for i, m in enumerate(self.b1)]
            + [(f"b2.{i}", m) for i, m in enumerate(self.b2)]
        )

    def __call__(self, x):
        if self.stride == 1:
            left, right = ops.chunk2_channels(x)
            for m in self.b2:
                right = m(right)
        else:
            left = x
            for m in self.b1:
                left = m(left)
            right = x
            for m in self.b2:
                right = m(right)
        return ops.channel_shuffle(ops.concat_channels(left, right), 2)


class HeadConv(Module):
    """Per-level 1x1 output conv with bias (no BN, no activation)."""

    def __init__(self, cin, cout):
        self.cin, self.cout = cin, cout
        self.weight = self.bias = None

    def param_specs(self, prefix=""):
        yield ParamSpec(f"{prefix}weight", (self.cout, self.cin, 1, 1), "weight")
        yield ParamSpec(f"{prefix}bias", (self.cout,), "bias")

    def bind(self, params, prefix=""):
        self.weight = _take(params, f"{prefix}weight", (self.cout, self.cin, 1, 1))
        self.bias = _take(params, f"{prefix}bias", (self.cout,))

    def __call__(self, x):
        return ops.conv2d(x, self.weight, bias=self.bias)


BLOCK_KINDS = ("CBS", "Stem", "Bottleneck", "C3", "SPP", "ShuffleV2")


@dataclass(frozen=True)
class BlockSpec:
    """Declarative description of one block instance."""
    kind: str
    in_channels: int
    out_channels: int
    n: int = 1                      # C3 only
    kernels: tuple = (7, 5, 3)      # SPP only
    shortcut: bool = True           # Bottleneck / C3
    stride: int = 1                 # CBS / ShuffleV2
    k: int = 1                      # CBS kernel size

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ShapeError(f"unknown block kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channels must be >= 1")
        if self.kind == "C3" and self.n < 1:
            raise ShapeError("C3 repeat count must be >= 1")
        if self.kind == "SPP" and any(k % 2 == 0 for k in self.kernels):
            raise ShapeError("SPP kernels must be odd")


def build_block(spec, eps=BN_EPS_DEFAULT):
    """Instantiate the block a :class:`BlockSpec` describes."""
    cin, cout = spec.in_channels, spec.out_channels
    if spec.kind == "CBS":
        return ConvBN(cin, cout, spec.k, spec.stride, eps=eps)
    if spec.kind == "Stem":
        return Stem(cin, cout, eps=eps)
    if spec.kind == "Bottleneck":
        return Bottleneck(cin, cout, spec.shortcut, eps=eps)
    if spec.kind == "C3":
        return C3(cin, cout, spec.n, spec.shortcut, eps=eps)
    if spec.kind == "SPP":
        return SPP(cin, cout, spec.kernels, eps=eps)
    return ShuffleV2Block(cin, cout, spec.stride, eps=eps)


def infer_block_shape(spec, in_shape):
    """Output shape as a pure function of (input shape, BlockSpec)."""
    n, c, h, w = in_shape
    if c != spec.in_channels:
        raise ShapeError(f"{spec.kind}: input has {c} channels, spec expects {spec.in_channels}")
    cout = spec.out_channels
    if spec.kind == "CBS":
        ho = ops.conv_output_size(h, spec.k, spec.stride, spec.k // 2)
        wo = ops.conv_output_size(w, spec.k, spec.stride, spec.k // 2)
        return (n, cout, ho, wo)
    if spec.kind == "Stem":
        h1 = ops.conv_output_size(h, 3, 2, 1)
        w1 = ops.conv_output_size(w, 3, 2, 1)
        ha = ops.conv_output_size(h1, 3, 2, 1)
        wa = ops.conv_output_size(w1, 3, 2, 1)
        hb = ops.conv_output_size(h1, 2, 2, 0)
        wb = ops.conv_output_size(w1, 2, 2, 0)
        if (ha, wa) != (hb, wb):
            raise ShapeError(f"Stem: branch shapes diverge for odd input {h}x{w}")
        return (n, cout, ha, wa)
    if spec.kind == "ShuffleV2" and spec.stride == 2:
        return (n, cout, ops.conv_output_size(h, 3, 2, 1), ops.conv_output_size(w, 3, 2, 1))
    # Bottleneck / C3 / SPP / ShuffleV2 stride 1 preserve the grid.
    return (n, cout, h, w)
