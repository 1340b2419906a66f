"""Decode raw level maps into face detections, filter, NMS, un-letterbox.

Decode convention per cell (cx, cy) and anchor (aw, ah) at stride s:
center (2*sig(t)-0.5+c)*s, size (2*sig(t))^2 * anchor, conf/cls sigmoid;
landmark coordinates are linear: t*anchor + cell*s (no sigmoid). Ranking
uses conf alone (score_mode "conf"); cls is reported but not ranked on.
"""
from dataclasses import dataclass, field

import numpy as np

from .datapipe import invert_points
from .errors import ConfigError, ShapeError
from .ops import sigmoid

SCORE_MODES = ("conf", "conf*cls")


@dataclass(frozen=True)
class AnchorLevel:
    """Anchor geometry of one pyramid level, in input-image pixels."""
    stride: int
    sizes: tuple  # ((w, h), ...)

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if not self.sizes:
            raise ConfigError("each level needs at least one anchor")
        for w, h in self.sizes:
            if w <= 0 or h <= 0:
                raise ConfigError(f"anchor sizes must be positive, got {(w, h)}")


@dataclass(frozen=True)
class AnchorSet:
    levels: tuple

    def __post_init__(self):
        strides = [lvl.stride for lvl in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ConfigError(f"strides must be strictly increasing, got {strides}")
        if len({len(lvl.sizes) for lvl in self.levels}) != 1:
            raise ConfigError("anchor count must be equal across levels")

    @classmethod
    def from_sizes(cls, strides, sizes_per_level):
        if len(strides) != len(sizes_per_level):
            raise ConfigError("one size list per stride required")
        return cls(tuple(
            AnchorLevel(int(s), tuple((float(w), float(h)) for w, h in sizes))
            for s, sizes in zip(strides, sizes_per_level)
        ))

    @property
    def num_anchors(self):
        return len(self.levels[0].sizes)


@dataclass
class Detection:
    """One face: corner box, scores, five landmark points."""
    box: tuple                 # (x1, y1, x2, y2)
    conf: float
    cls: float
    landmarks: np.ndarray      # [num_landmarks, 2]
    landmark_valid: bool = True

    def score(self, mode="conf"):
        return self.conf * self.cls if mode == "conf*cls" else self.conf


def decode_level(raw, level, num_landmarks=5, conf_thr=0.0):
    """Decode one level map into candidate detections (letterboxed coords).

    ``raw`` is ``[na*(6+2*nl), Gh, Gw]`` (a leading batch axis of 1 is
    allowed). Candidates below ``conf_thr`` are dropped. Output order is
    (anchor, row, col) — deterministic.
    """
    raw = np.asarray(raw)
    if raw.ndim == 4:
        if raw.shape[0] != 1:
            raise ShapeError("decode_level handles one image at a time")
        raw = raw[0]
    if raw.ndim != 3:
        raise ShapeError(f"level map must be [C,Gh,Gw], got shape {raw.shape}")
    na = len(level.sizes)
    no = 6 + 2 * num_landmarks
    if raw.shape[0] != na * no:
        raise ShapeError(f"level map has {raw.shape[0]} channels, expected {na}*{no}")
    gh, gw = raw.shape[1], raw.shape[2]
    s = float(level.stride)

    t = raw.astype(np.float64).reshape(na, no, gh, gw)
    sig = sigmoid(t[:, :6])
    cy, cx = np.meshgrid(np.arange(gh, dtype=np.float64),
                         np.arange(gw, dtype=np.float64), indexing="ij")
    aw = np.array([wh[0] for wh in level.sizes])[:, None, None]
    ah = np.array([wh[1] for wh in level.sizes])[:, None, None]

    bx = (2.0 * sig[:, 0] - 0.5 + cx) * s
    by = (2.0 * sig[:, 1] - 0.5 + cy) * s
    bw = (2.0 * sig[:, 2]) ** 2 * aw
    bh = (2.0 * sig[:, 3]) ** 2 * ah
    conf = sig[:, 4]
    cls = sig[:, 5]

    if num_landmarks:
        lt = t[:, 6:].reshape(na, num_landmarks, 2, gh, gw)
        lx = lt[:, :, 0] * aw[:, None] + cx * s
        ly = lt[:, :, 1] * ah[:, None] + cy * s

    keep = np.nonzero(conf >= conf_thr)
    out = []
    for a, y, x in zip(*keep):
        cxv, cyv = bx[a, y, x], by[a, y, x]
        wv, hv = bw[a, y, x], bh[a, y, x]
        if num_landmarks:
            lm = np.stack([lx[a, :, y, x], ly[a, :, y, x]], axis=1)
        else:
            lm = np.zeros((0, 2))
        out.append(Detection(
            box=(cxv - wv / 2, cyv - hv / 2, cxv + wv / 2, cyv + hv / 2),
            conf=float(conf[a, y, x]),
            cls=float(cls[a, y, x]),
            landmarks=lm,
            landmark_valid=num_landmarks > 0,
        ))
    return out


def iou(a, b):
    """Intersection over union of two corner boxes, 0 for degenerate overlap."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = ix2 - ix1, iy2 - iy1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def _iou_matrix_row(box, boxes):
    x1 = np.maximum(box[0], boxes[:, 0])
    y1 = np.maximum(box[1], boxes[:, 1])
    x2 = np.minimum(box[2], boxes[:, 2])
    y2 = np.minimum(box[3], boxes[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + areas - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms(dets, iou_thr=0.5):
    """Greedy NMS: keep by descending conf (ties keep the earlier index),
    suppress anything overlapping a kept box above ``iou_thr``."""
    if not 0 < iou_thr < 1:
        raise ConfigError(f"iou_thr must be in (0,1), got {iou_thr}")
    if not dets:
        return []
    order = np.argsort([-d.conf for d in dets], kind="stable")
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        kept.append(dets[order[i]])
        rest = alive.copy()
        rest[: i + 1] = False
        idx = np.nonzero(rest)[0]
        if idx.size:
            ious = _iou_matrix_row(boxes[i], boxes[idx])
            alive[idx[ious > iou_thr]] = False
    return kept


def postprocess(level_maps, anchors, conf_thr, iou_thr, transform, num_landmarks=5):
    """Full decode pipeline for one image.

    Decode every level, confidence-filter, NMS, invert the letterbox, clip
    boxes to the original image; degenerate boxes are dropped.
    """
    if len(level_maps) != len(anchors.levels):
        raise ShapeError(f"{len(level_maps)} level maps for {len(anchors.levels)} anchor levels")
    cands = []
    for lm, level in zip(level_maps, anchors.levels):
        cands.extend(decode_level(lm, level, num_landmarks, conf_thr))
    kept = nms(cands, iou_thr)
    ow, oh = transform.orig_w, transform.orig_h
    out = []
    for d in kept:
        corners = invert_points(
            np.array([[d.box[0], d.box[1]], [d.box[2], d.box[3]]]), transform)
        x1 = min(max(corners[0, 0], 0.0), ow)
        y1 = min(max(corners[0, 1], 0.0), oh)
        x2 = min(max(corners[1, 0], 0.0), ow)
        y2 = min(max(corners[1, 1], 0.0), oh)
        if x2 <= x1 or y2 <= y1:
            continue
        lm = invert_points(d.landmarks, transform) if d.landmarks.size else d.landmarks
        out.append(Detection((x1, y1, x2, y2), d.conf, d.cls, lm, d.landmark_valid))
    return out
