"""Detector assembly: config, scaling rules, graph build, params/FLOPs.

A model is a flat list of graph nodes (blocks plus upsample/concat wiring)
with tapped level outputs feeding per-level 1x1 head convs. Parameter names
are ``layers.{i}.{...}`` and ``head.m.{k}.{weight,bias}``; the same names key
the weight archive.
"""
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import ops
from .blocks import (
    BN_EPS_DEFAULT,
    C3,
    SPP,
    Bottleneck,
    ConvBN,
    Focus,
    HeadConv,
    Module,
    ShuffleV2Block,
    Stem,
)
from .errors import ConfigError, ShapeError
from .head import AnchorSet

BACKBONES = ("csp", "shufflev2", "shufflev2-0.5")

# Backbone plans. CSP: base channel ladder scaled by (D, W). ShuffleV2:
# fixed stage widths with a uniform light neck; stage layout 4/8/4 blocks
# (one stride-2 lead + stride-1 repeats).
_CSP_CHANNELS = (64, 128, 256, 512, 1024)
_CSP_P6_CHANNELS = (64, 128, 256, 512, 768, 1024)
_SHUFFLE_PLANS = {
    "shufflev2": {"stem": 32, "stages": (128, 256, 512), "repeats": (3, 7, 3), "neck": 128},
    "shufflev2-0.5": {"stem": 16, "stages": (64, 128, 256), "repeats": (3, 7, 3), "neck": 64},
}


def scale_channels(base, width_multiple):
    """Scale a base channel count and round up to a multiple of 8 (min 8)."""
    if base < 1:
        raise ConfigError(f"base channels must be >= 1, got {base}")
    return max(8, int(math.ceil(base * width_multiple / 8)) * 8)


def scale_depth(base_n, depth_multiple):
    """Scale a repeat count, rounding half away from zero, minimum 1."""
    if base_n < 1:
        raise ConfigError(f"base repeat count must be >= 1, got {base_n}")
    return max(1, int(math.floor(base_n * depth_multiple + 0.5)))


def default_anchors(num_levels):
    """Per-level (w, h) priors: widths geometric over 4..512 px, h = 1.25 w.

    Not derived from any trained model; real anchors travel with the weight
    archive metadata and override these.
    """
    widths = np.geomspace(4.0, 512.0, 3 * num_levels)
    levels = []
    for i in range(num_levels):
        levels.append(tuple(
            (round(float(w), 2), round(float(w) * 1.25, 2))
            for w in widths[3 * i: 3 * i + 3]
        ))
    return tuple(levels)


_CONFIG_FIELDS = (
    "backbone", "depth_multiple", "width_multiple", "use_p6", "num_landmarks",
    "anchors", "input_size", "spp_kernels", "use_stem",
)


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture description; mirrors the JSON config file."""
    backbone: str = "csp"
    depth_multiple: float = 0.33
    width_multiple: float = 0.50
    use_p6: bool = False
    num_landmarks: int = 5
    anchors: tuple = None  # ((w,h) pairs per level) or None for defaults
    input_size: int = 640
    spp_kernels: tuple = (7, 5, 3)
    use_stem: bool = True

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choices {BACKBONES}")
        if self.depth_multiple <= 0 or self.width_multiple <= 0:
            raise ConfigError("depth/width multiples must be > 0")
        if self.num_landmarks < 0:
            raise ConfigError("num_landmarks must be >= 0")
        mult = 64 if self.use_p6 else 32
        if self.input_size < mult or self.input_size % mult:
            raise ConfigError(f"input_size must be a positive multiple of {mult}")
        if self.use_p6 and self.backbone != "csp":
            raise ConfigError("P6 output block is only defined for the csp backbone")
        if any(k % 2 == 0 or k < 1 for k in self.spp_kernels):
            raise ConfigError(f"spp_kernels must be odd and positive, got {self.spp_kernels}")
        if self.anchors is not None:
            levels = tuple(tuple(tuple(float(v) for v in wh) for wh in lvl) for lvl in self.anchors)
            object.__setattr__(self, "anchors", levels)
            if len(levels) != self.num_levels:
                raise ConfigError(
                    f"anchors must list {self.num_levels} levels, got {len(levels)}")
            counts = {len(lvl) for lvl in levels}
            if len(counts) != 1 or min(counts) < 1:
                raise ConfigError("anchor count per level must be >= 1 and equal across levels")
            for lvl in levels:
                for w, h in lvl:
                    if w <= 0 or h <= 0:
                        raise ConfigError("anchor sizes must be positive")
        object.__setattr__(self, "spp_kernels", tuple(int(k) for k in self.spp_kernels))

    @property
    def num_levels(self):
        return 4 if self.use_p6 else 3

    @property
    def strides(self):
        return (8, 16, 32, 64)[: self.num_levels]

    def anchor_sizes(self):
        return self.anchors if self.anchors is not None else default_anchors(self.num_levels)

    def anchor_set(self):
        return AnchorSet.from_sizes(self.strides, self.anchor_sizes())

    @property
    def head_channels_per_anchor(self):
        # 4 bbox + 1 conf + 1 cls + 2 per landmark point
        return 6 + 2 * self.num_landmarks

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("anchors", "spp_kernels") and v is not None:
                v = json.loads(json.dumps(v))  # tuples -> lists
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(_CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "anchors" in kwargs and kwargs["anchors"] is not None:
            kwargs["anchors"] = tuple(tuple(tuple(wh) for wh in lvl) for lvl in kwargs["anchors"])
        if "spp_kernels" in kwargs:
            kwargs["spp_kernels"] = tuple(kwargs["spp_kernels"])
        return cls(**kwargs)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def config_hash(self):
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


# Named configurations from the implemented-model table; x6 multiples follow
# the family convention (its row lists sizes but not (D, W)).
PRESETS = {
    "yolov5s": ModelConfig(depth_multiple=0.33, width_multiple=0.50),
    "yolov5s6": ModelConfig(depth_multiple=0.33, width_multiple=0.50, use_p6=True),
    "yolov5m": ModelConfig(depth_multiple=0.50, width_multiple=0.75),
    "yolov5m6": ModelConfig(depth_multiple=0.50, width_multiple=0.75, use_p6=True),
    "yolov5l": ModelConfig(depth_multiple=1.0, width_multiple=1.0),
    "yolov5l6": ModelConfig(depth_multiple=1.0, width_multiple=1.0, use_p6=True),
    "yolov5x6": ModelConfig(depth_multiple=1.33, width_multiple=1.25, use_p6=True),
    "yolov5n": ModelConfig(backbone="shufflev2", depth_multiple=1.0, width_multiple=1.0),
    "yolov5n-0.5": ModelConfig(backbone="shufflev2-0.5", depth_multiple=1.0, width_multiple=1.0),
}

# Published reference sizes (millions of params, GFLOPs) for reconciliation.
# Param targets are checked; FLOP figures are report-only because the
# published counting convention is unstated (ours: 2*MACs, one 640px image).
REFERENCE_SIZES = {
    "yolov5s": (7.075, 5.751),
    "yolov5s6": (12.386, 6.280),
    "yolov5m": (21.063, 18.146),
    "yolov5m6": (35.485, 19.773),
    "yolov5l": (46.627, 41.607),
    "yolov5l6": (76.674, 45.279),
    "yolov5x6": (141.158, 88.665),
    "yolov5n": (1.726, 2.111),
    "yolov5n-0.5": (0.447, 0.571),
}

PARAM_TOLERANCES = {"yolov5s": 0.03, "yolov5s6": 0.05, "yolov5n": 0.05}


def preset_name(config):
    """Name of the preset this config structurally matches, else None."""
    for name, preset in PRESETS.items():
        if (config.backbone, config.depth_multiple, config.width_multiple,
                config.use_p6, config.use_stem) == (
                preset.backbone, preset.depth_multiple, preset.width_multiple,
                preset.use_p6, preset.use_stem):
            return name
    return None


def resolve_config(name_or_path):
    """Accept a preset name or a JSON config file path."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    with open(name_or_path, "r", encoding="utf-8") as fh:
        return ModelConfig.from_json(fh.read())


class _Upsample(Module):
    def __call__(self, x):
        return ops.upsample_nearest2x(x)


class _Concat(Module):
    def __call__(self, *xs):
        return ops.concat_channels(*xs)


@dataclass
class Node:
    module: Module
    src: tuple          # absolute indices of input nodes; (-1,) = model input
    out_channels: int
    name: str = ""


class Model:
    """Executable detector graph with named parameters."""

    def __init__(self, config, eps=BN_EPS_DEFAULT):
        self.config = config
        self.eps = eps
        self.nodes = []
        self.level_nodes = []
        self.heads = []
        self._bound = False
        if config.backbone == "csp":
            self._build_csp()
        else:
            self._build_shuffle()
        na = len(config.anchor_sizes()[0])
        head_ch = na * config.head_channels_per_anchor
        self.heads = [HeadConv(self.nodes[i].out_channels, head_ch) for i in self.level_nodes]
        self._validate_strides()

    # ---- graph construction -------------------------------------------

    def _add(self, module, cout, src=None, name=""):
        if src is None:
            # Chain to the previous node; -1 (empty graph) is the model input.
            src = (len(self.nodes) - 1,)
        self.nodes.append(Node(module, tuple(src), cout, name))
        return len(self.nodes) - 1

    def _build_csp(self):
        cfg = self.config
        eps = self.eps
        w = lambda c: scale_channels(c, cfg.width_multiple)
        d = lambda n: scale_depth(n, cfg.depth_multiple)
        ch = lambda i: self.nodes[i].out_channels

        if cfg.use_stem:
            prev = self._add(Stem(3, w(64), eps), w(64), name="stem")
        else:
            prev = self._add(Focus(3, w(64), 3, eps), w(64), name="focus")
            prev = self._add(ConvBN(w(64), w(128), 3, 2, eps=eps), w(128))

        base = _CSP_P6_CHANNELS if cfg.use_p6 else _CSP_CHANNELS
        stage_channels = [w(c) for c in base[1:]]  # after the stem column
        c3_repeats = (3, 9, 9, 3) if cfg.use_p6 else (3, 9, 9)

        prev = self._add(C3(ch(prev), stage_channels[0], d(c3_repeats[0]), True, eps),
                         stage_channels[0])
        taps = []  # backbone feature taps, finest first
        for si in range(1, len(stage_channels) - 1):
            prev = self._add(ConvBN(ch(prev), stage_channels[si], 3, 2, eps=eps),
                             stage_channels[si])
            prev = self._add(C3(ch(prev), stage_channels[si], d(c3_repeats[si]), True, eps),
                             stage_channels[si])
            taps.append(prev)
        cl = stage_channels[-1]
        prev = self._add(ConvBN(ch(prev), cl, 3, 2, eps=eps), cl)
        prev = self._add(SPP(cl, cl, cfg.spp_kernels, eps), cl, name="spp")
        prev = self._add(C3(cl, cl, d(3), False, eps), cl)

        # PAN neck: top-down fuse over the taps, then bottom-up augmentation.
        lat_channels = list(reversed([self.nodes[t].out_channels for t in taps]))
        laterals = []
        td_outs = []
        for tap, lc in zip(reversed(taps), lat_channels):
            lat = self._add(ConvBN(ch(prev), lc, 1, 1, eps=eps), lc)
            laterals.append(lat)
            up = self._add(_Upsample(), lc, src=(lat,))
            cat = self._add(_Concat(), lc + ch(tap), src=(up, tap))
            prev = self._add(C3(ch(cat), lc, d(3), False, eps), lc)
            td_outs.append(lc)
        self.level_nodes = [prev]
        # Each bottom-up step lands one level coarser; its width follows the
        # top-down ladder in reverse, ending at the trunk width.
        bu_outs = list(reversed(td_outs))[1:] + [cl]
        for lat, out_c in zip(reversed(laterals), bu_outs):
            down_c = ch(prev)
            down = self._add(ConvBN(down_c, down_c, 3, 2, eps=eps), down_c)
            cat = self._add(_Concat(), down_c + ch(lat), src=(down, lat))
            prev = self._add(C3(ch(cat), out_c, d(3), False, eps), out_c)
            self.level_nodes.append(prev)

    def _build_shuffle(self):
        cfg = self.config
        eps = self.eps
        plan = _SHUFFLE_PLANS[cfg.backbone]
        ch = lambda i: self.nodes[i].out_channels

        prev = self._add(Stem(3, plan["stem"], eps), plan["stem"], name="stem")
        taps = []
        for sc, reps in zip(plan["stages"], plan["repeats"]):
            prev = self._add(ShuffleV2Block(ch(prev), sc, 2, eps), sc)
            for _ in range(reps):
                prev = self._add(ShuffleV2Block(sc, sc, 1, eps), sc)
            taps.append(prev)
        taps = taps[:-1]  # deepest stage feeds the neck directly

        nc = plan["neck"]
        laterals = []
        for tap in reversed(taps):
            lat = self._add(ConvBN(ch(prev), nc, 1, 1, eps=eps), nc)
            laterals.append(lat)
            up = self._add(_Upsample(), nc, src=(lat,))
            cat = self._add(_Concat(), nc + ch(tap), src=(up, tap))
            prev = self._add(C3(ch(cat), nc, 1, False, eps), nc)
        self.level_nodes = [prev]
        for lat in reversed(laterals):
            down = self._add(ConvBN(ch(prev), nc, 3, 2, eps=eps), nc)
            cat = self._add(_Concat(), nc + ch(lat), src=(down, lat))
            prev = self._add(C3(ch(cat), nc, 1, False, eps), nc)
            self.level_nodes.append(prev)

    # ---- parameters -----------------------------------------------------

    def param_specs(self):
        for i, node in enumerate(self.nodes):
            yield from node.module.param_specs(f"layers.{i}.")
        for k, h in enumerate(self.heads):
            yield from h.param_specs(f"head.m.{k}.")

    def bind(self, params):
        """Attach named tensors; rejects missing, extra, or misshaped keys."""
        expected = {s.name for s in self.param_specs()}
        extra = set(params) - expected
        if extra:
            raise ShapeError(f"archive has {len(extra)} keys the model does not define, "
                             f"e.g. {sorted(extra)[0]!r}")
        for i, node in enumerate(self.nodes):
            node.module.bind(params, f"layers.{i}.")
        for k, h in enumerate(self.heads):
            h.bind(params, f"head.m.{k}.")
        self._bound = True
        return self

    def count_params(self):
        """Learnable parameter elements (BN running stats excluded)."""
        return sum(int(np.prod(s.shape)) for s in self.param_specs() if s.learnable)

    # ---- shape walk / flops ----------------------------------------------

    def _walk_shapes(self, h, w):
        """Per-node output shapes (and flops) for a single 3-channel image."""
        shapes = [None] * len(self.nodes)
        total = 0
        for i, node in enumerate(self.nodes):
            ins = [((1, 3, h, w) if j == -1 else shapes[j]) for j in node.src]
            fl, out = _module_cost(node.module, ins)
            if out[1] != node.out_channels:
                raise ShapeError(
                    f"graph node {i}: inferred {out[1]} channels, declared {node.out_channels}")
            shapes[i] = out
            total += fl
        for k, idx in enumerate(self.level_nodes):
            fl, out = _module_cost(self.heads[k], [shapes[idx]])
            shapes.append(out)
            total += fl
        return shapes, total

    def _validate_strides(self):
        s = self.config.input_size
        shapes, _ = self._walk_shapes(s, s)
        for level, idx in enumerate(self.level_nodes):
            got = s // shapes[idx][2]
            want = self.config.strides[level]
            if shapes[idx][2] * want != s or got != want:
                raise ConfigError(f"level {level}: stride {got}, expected {want}")

    def count_flops(self, input_size=None):
        """Total flops for one image at ``input_size`` (2 per MAC, BN and
        activations counted per element)."""
        size = input_size or self.config.input_size
        _, total = self._walk_shapes(size, size)
        return total

    def level_shapes(self, h, w):
        shapes, _ = self._walk_shapes(h, w)
        return shapes[len(self.nodes):]

    # ---- execution --------------------------------------------------------

    def forward(self, x):
        """Run the graph; returns raw (pre-sigmoid) level maps, fine to coarse."""
        if not self._bound:
            raise ShapeError("model has no weights bound; call bind() or build()")
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected [N,3,H,W] input, got {x.shape}")
        mult = max(self.config.strides)
        if x.shape[2] % mult or x.shape[3] % mult:
            raise ShapeError(f"input dims must be multiples of {mult}, got {x.shape[2:]}")
        outs = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            ins = [(x if j == -1 else outs[j]) for j in node.src]
            outs[i] = node.module(*ins)
        return [self.heads[k](outs[idx]) for k, idx in enumerate(self.level_nodes)]

    __call__ = forward


def build(config, weights=None, seed=0):
    """Assemble an executable model.

    ``weights`` is a mapping of name -> array or a TensorArchive; when
    omitted, deterministic seeded weights are generated.
    """
    model = Model(config)
    if weights is None:
        from .weights_io import seeded_arrays
        weights = seeded_arrays(model.param_specs(), seed)
    elif hasattr(weights, "tensors"):
        weights = weights.tensors
    return model.bind(weights)


def _conv_cost(cin, cout, k, stride, pad, groups, h, w, bias, bn, act):
    ho = ops.conv_output_size(h, k, stride, pad)
    wo = ops.conv_output_size(w, k, stride, pad)
    elems = cout * ho * wo
    fl = 2 * elems * (cin // groups) * k * k
    if bias:
        fl += elems
    if bn:
        fl += 2 * elems
    if act:
        fl += 4 * elems
    return fl, ho, wo


def _module_cost(m, in_shapes):
    """(flops, out_shape) for one node; mirrors each block's forward."""
    if isinstance(m, _Concat):
        n, _, h, w = in_shapes[0]
        return 0, (n, sum(s[1] for s in in_shapes), h, w)
    (n, c, h, w) = in_shapes[0]
    if isinstance(m, _Upsample):
        return 0, (n, c, 2 * h, 2 * w)
    if isinstance(m, ConvBN):
        fl, ho, wo = _conv_cost(m.cin, m.cout, m.k, m.stride, m.pad, m.groups,
                                h, w, False, True, m.act)
        return fl, (n, m.cout, ho, wo)
    if isinstance(m, HeadConv):
        fl, ho, wo = _conv_cost(m.cin, m.cout, 1, 1, 0, 1, h, w, True, False, False)
        return fl, (n, m.cout, ho, wo)
    if isinstance(m, Stem):
        f1, s1 = _module_cost(m.conv1, [(n, c, h, w)])
        f2a, s2a = _module_cost(m.conv2a, [s1])
        f2b, s2b = _module_cost(m.conv2b, [s2a])
        pool_h = ops.conv_output_size(s1[2], 2, 2, 0)
        pool_w = ops.conv_output_size(s1[3], 2, 2, 0)
        fp = 4 * s1[1] * pool_h * pool_w
        cat = (n, s2b[1] + s1[1], s2b[2], s2b[3])
        f3, s3 = _module_cost(m.conv3, [cat])
        return f1 + f2a + f2b + fp + f3, s3
    if isinstance(m, Focus):
        return _module_cost(m.conv, [(n, 4 * c, h // 2, w // 2)])
    if isinstance(m, Bottleneck):
        f1, s1 = _module_cost(m.cv1, [(n, c, h, w)])
        f2, s2 = _module_cost(m.cv2, [s1])
        if m.add:
            f2 += int(np.prod(s2))
        return f1 + f2, s2
    if isinstance(m, C3):
        f, s = _module_cost(m.cv1, [(n, c, h, w)])
        for b in m.m:
            fb, s = _module_cost(b, [s])
            f += fb
        fa, s = _module_cost(m.cva, [s])
        fb_, sb = _module_cost(m.cvb, [(n, c, h, w)])
        f3, s3 = _module_cost(m.cv3, [(n, s[1] + sb[1], h, w)])
        return f + fa + fb_ + f3, s3
    if isinstance(m, SPP):
        f1, s1 = _module_cost(m.cv1, [(n, c, h, w)])
        fp = sum(k * k * s1[1] * s1[2] * s1[3] for k in m.kernels)
        cat = (n, s1[1] * (len(m.kernels) + 1), s1[2], s1[3])
        f2, s2 = _module_cost(m.cv2, [cat])
        return f1 + fp + f2, s2
    if isinstance(m, ShuffleV2Block):
        f = 0
        if m.stride == 1:
            s_l = (n, c // 2, h, w)
            s_r = (n, c // 2, h, w)
            for cv in m.b2:
                fr, s_r = _module_cost(cv, [s_r])
                f += fr
        else:
            s_l = (n, c, h, w)
            for cv in m.b1:
                fl_, s_l = _module_cost(cv, [s_l])
                f += fl_
            s_r = (n, c, h, w)
            for cv in m.b2:
                fr, s_r = _module_cost(cv, [s_r])
                f += fr
        return f, (n, s_l[1] + s_r[1], s_r[2], s_r[3])
    raise ShapeError(f"cannot cost module {type(m).__name__}")
