"""Image preprocessing, WiderFace annotation parsing, seeded augmentations.

Images are 8-bit RGB ``[H, W, 3]`` numpy arrays throughout. The letterbox
rule: scale the longer edge to the target, round the scaled shorter edge up
to the next stride multiple with symmetric padding (left/top gets the
floor). Up-down flipping is deliberately not offered anywhere here.
"""
import hashlib
from dataclasses import dataclass, fields

import cv2
import numpy as np

from .errors import ConfigError, FormatError

PAD_VALUE = 114  # mid-gray, the convention archive weights assume
MIN_FACE_DEFAULT = 4.0  # px; below half a P3 cell faces are sub-anchor


@dataclass(frozen=True)
class LetterboxTransform:
    """Affine map original -> letterboxed: p' = p * scale + pad."""
    scale: float
    pad_left: int
    pad_top: int
    out_w: int
    out_h: int
    orig_w: int
    orig_h: int


def letterbox(img_w, img_h, target=640, stride_mult=32):
    """Compute the letterbox transform for an image of the given size."""
    if img_w < 1 or img_h < 1:
        raise ConfigError(f"image dims must be >= 1, got {img_w}x{img_h}")
    if stride_mult not in (32, 64):
        raise ConfigError(f"stride_mult must be 32 or 64, got {stride_mult}")
    if target % stride_mult:
        raise ConfigError(f"target {target} not a multiple of stride {stride_mult}")
    scale = target / max(img_w, img_h)
    new_w = int(round(img_w * scale))
    new_h = int(round(img_h * scale))
    out_w = -(-new_w // stride_mult) * stride_mult
    out_h = -(-new_h // stride_mult) * stride_mult
    pad_w, pad_h = out_w - new_w, out_h - new_h
    return LetterboxTransform(
        scale=scale,
        pad_left=pad_w // 2,
        pad_top=pad_h // 2,
        out_w=out_w,
        out_h=out_h,
        orig_w=img_w,
        orig_h=img_h,
    )


def apply_letterbox(image, t, pad_value=PAD_VALUE):
    """Bilinear-resize then constant-pad an RGB image per the transform."""
    h, w = image.shape[:2]
    if (w, h) != (t.orig_w, t.orig_h):
        raise ConfigError(f"transform was computed for {t.orig_w}x{t.orig_h}, image is {w}x{h}")
    new_w = int(round(w * t.scale))
    new_h = int(round(h * t.scale))
    if (new_w, new_h) != (w, h):
        resized = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    else:
        resized = image.copy()
    out = np.full((t.out_h, t.out_w, 3), pad_value, dtype=image.dtype)
    out[t.pad_top: t.pad_top + new_h, t.pad_left: t.pad_left + new_w] = resized
    return out


def apply_points(points, t):
    """Map original-image (x, y) points into letterboxed coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    out[..., 0] = pts[..., 0] * t.scale + t.pad_left
    out[..., 1] = pts[..., 1] * t.scale + t.pad_top
    return out


def invert_points(points, t):
    """Map letterboxed (x, y) points back to original-image coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    out = pts.copy()
    out[..., 0] = (pts[..., 0] - t.pad_left) / t.scale
    out[..., 1] = (pts[..., 1] - t.pad_top) / t.scale
    return out


def to_input_tensor(image):
    """HWC uint8 RGB -> [1, 3, H, W] float32 in [0, 1]."""
    chw = np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32) / 255.0
    return chw[None]


def read_image(path):
    """Decode PNG/JPEG (and whatever else cv2 reads) to RGB uint8."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FormatError("unreadable or unsupported image", path=path)
    return np.ascontiguousarray(bgr[:, :, ::-1])


def write_image(path, image):
    if not cv2.imwrite(str(path), np.ascontiguousarray(image[:, :, ::-1])):
        raise FormatError("failed to write image", path=path)


# ---------------------------------------------------------------------------
# Annotations


@dataclass
class FaceAnnotation:
    """One face box with optional landmarks and dataset attribute flags."""
    box: tuple                       # (x, y, w, h)
    landmarks: np.ndarray = None     # [5, 2] or None
    landmark_valid: np.ndarray = None  # [5] bool
    blur: int = 0
    occlusion: int = 0
    pose: int = 0
    invalid: int = 0

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        if self.landmarks is not None:
            self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(5, 2)
            if self.landmark_valid is None:
                self.landmark_valid = np.ones(5, dtype=bool)
            else:
                self.landmark_valid = np.asarray(self.landmark_valid, dtype=bool).reshape(5)


def _numbers(line, path, lineno):
    try:
        return [float(v) for v in line.split()]
    except ValueError:
        raise FormatError(f"non-numeric field in {line!r}", path=path, line=lineno) from None


def parse_widerface(text, path="<annotations>"):
    """Parse either ground-truth layout into image -> [FaceAnnotation].

    Original layout: path line, face count line, then per-face lines of
    ``x y w h blur expression illumination invalid occlusion pose``. The
    dataset's "count 0 followed by one all-zero line" quirk is accepted.

    Extended layout: ``# path`` lines, then per-face lines of the box plus
    15 landmark numbers (five x, y, aux triplets); a landmark coordinate of
    -1 marks the point invalid.
    """
    lines = text.splitlines()
    stripped = [ln.strip() for ln in lines]
    first = next((s for s in stripped if s), None)
    if first is None:
        return {}
    if first.startswith("#"):
        return _parse_extended(stripped, path)
    return _parse_original(stripped, path)


def _parse_original(lines, path):
    out = {}
    i = 0
    n = len(lines)
    while i < n:
        if not lines[i]:
            i += 1
            continue
        name = lines[i]
        i += 1
        if i >= n:
            raise FormatError(f"missing face count after {name!r}", path=path, line=i)
        try:
            count = int(lines[i])
        except ValueError:
            raise FormatError(f"malformed face count {lines[i]!r}", path=path, line=i + 1) from None
        if count < 0:
            raise FormatError(f"negative face count {count}", path=path, line=i + 1)
        i += 1
        faces = []
        if count == 0:
            # Dataset quirk: an all-zero placeholder row follows a zero count.
            if i < n and lines[i]:
                vals = lines[i].split()
                if len(vals) >= 4 and all(v in ("0", "0.0") for v in vals):
                    i += 1
        for f in range(count):
            if i >= n or not lines[i]:
                raise FormatError(
                    f"truncated: expected {count} faces for {name!r}, got {f}",
                    path=path, line=i)
            vals = _numbers(lines[i], path, i + 1)
            if len(vals) < 4:
                raise FormatError(f"face line needs at least x y w h", path=path, line=i + 1)
            attrs = vals[4:10] + [0.0] * (10 - len(vals))
            faces.append(FaceAnnotation(
                box=tuple(vals[:4]),
                blur=int(attrs[0]), invalid=int(attrs[3]),
                occlusion=int(attrs[4]), pose=int(attrs[5]),
            ))
            i += 1
        out[name] = faces
    return out


def _parse_extended(lines, path):
    out = {}
    current = None
    for idx, line in enumerate(lines):
        if not line:
            continue
        if line.startswith("#"):
            current = line[1:].strip()
            out[current] = []
            continue
        if current is None:
            raise FormatError("face line before any '# path' header", path=path, line=idx + 1)
        vals = _numbers(line, path, idx + 1)
        if len(vals) < 19:
            raise FormatError(
                f"extended face line carries {len(vals)} numbers, needs box + 15",
                path=path, line=idx + 1)
        box = tuple(vals[:4])
        pts = np.array(vals[4:19], dtype=np.float64).reshape(5, 3)
        valid = (pts[:, 0] >= 0) & (pts[:, 1] >= 0)
        out[current].append(FaceAnnotation(
            box=box, landmarks=pts[:, :2], landmark_valid=valid))
    return out


# ---------------------------------------------------------------------------
# Augmentations

# Mirroring swaps the eye pair and the mouth-corner pair; the nose stays.
_HFLIP_LANDMARK_ORDER = (1, 0, 2, 4, 3)


def hflip(image, annotations):
    """Mirror horizontally (x' = W-1-x on pixels); remap landmark order."""
    h, w = image.shape[:2]
    flipped = np.ascontiguousarray(image[:, ::-1])
    out = []
    for a in annotations:
        x, y, bw, bh = a.box
        lm = None
        lv = None
        if a.landmarks is not None:
            lm = a.landmarks[list(_HFLIP_LANDMARK_ORDER)].copy()
            lm[:, 0] = (w - 1) - lm[:, 0]
            lv = a.landmark_valid[list(_HFLIP_LANDMARK_ORDER)].copy()
        out.append(FaceAnnotation(
            box=(w - x - bw, y, bw, bh), landmarks=lm, landmark_valid=lv,
            blur=a.blur, occlusion=a.occlusion, pose=a.pose, invalid=a.invalid))
    return flipped, out


def derive_seed(root_seed, index):
    """Splittable per-image seed: root hashed with the image index."""
    digest = hashlib.sha256(f"{root_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _scale_to(image, annotations, target):
    """Resize so the longer edge equals target; scale annotations along."""
    h, w = image.shape[:2]
    scale = target / max(w, h)
    nw, nh = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    resized = cv2.resize(image, (nw, nh), interpolation=cv2.INTER_LINEAR)
    out = []
    for a in annotations:
        x, y, bw, bh = a.box
        lm = a.landmarks * scale if a.landmarks is not None else None
        out.append(FaceAnnotation(
            box=(x * scale, y * scale, bw * scale, bh * scale),
            landmarks=lm, landmark_valid=None if lm is None else a.landmark_valid.copy(),
            blur=a.blur, occlusion=a.occlusion, pose=a.pose, invalid=a.invalid))
    return resized, out


def _shift_clip_faces(annotations, dx, dy, bound_w, bound_h, min_face):
    """Translate, clip to bounds, drop sub-min_face boxes, mask landmarks."""
    kept = []
    for a in annotations:
        x, y, bw, bh = a.box
        x1 = min(max(x + dx, 0.0), bound_w)
        y1 = min(max(y + dy, 0.0), bound_h)
        x2 = min(max(x + bw + dx, 0.0), bound_w)
        y2 = min(max(y + bh + dy, 0.0), bound_h)
        if x2 - x1 < min_face or y2 - y1 < min_face:
            continue
        lm = lv = None
        if a.landmarks is not None:
            lm = a.landmarks + np.array([dx, dy])
            inside = ((lm[:, 0] >= 0) & (lm[:, 0] < bound_w)
                      & (lm[:, 1] >= 0) & (lm[:, 1] < bound_h))
            lv = a.landmark_valid & inside
        kept.append(FaceAnnotation(
            box=(x1, y1, x2 - x1, y2 - y1), landmarks=lm, landmark_valid=lv,
            blur=a.blur, occlusion=a.occlusion, pose=a.pose, invalid=a.invalid))
    return kept


def mosaic(items, target=640, seed=0, min_face=MIN_FACE_DEFAULT, pad_value=PAD_VALUE):
    """Stitch four (image, annotations) pairs around a random center.

    Works on a 2*target canvas, center sampled uniformly from its middle
    half, then center-crops back to target. Faces smaller than ``min_face``
    px after the transform are dropped (the ignore-small rule).
    """
    if len(items) != 4:
        raise ConfigError(f"mosaic needs exactly 4 images, got {len(items)}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    canvas_size = 2 * target
    xc = int(rng.integers(target // 2, canvas_size - target // 2 + 1))
    yc = int(rng.integers(target // 2, canvas_size - target // 2 + 1))
    canvas = np.full((canvas_size, canvas_size, 3), pad_value, dtype=np.uint8)
    faces = []
    for quadrant, (image, anns) in enumerate(items):
        img, anns = _scale_to(image, anns, target)
        ih, iw = img.shape[:2]
        if quadrant == 0:    # top-left, anchored at the center
            x1, y1 = max(xc - iw, 0), max(yc - ih, 0)
            x2, y2 = xc, yc
        elif quadrant == 1:  # top-right
            x1, y1 = xc, max(yc - ih, 0)
            x2, y2 = min(xc + iw, canvas_size), yc
        elif quadrant == 2:  # bottom-left
            x1, y1 = max(xc - iw, 0), yc
            x2, y2 = xc, min(yc + ih, canvas_size)
        else:                # bottom-right
            x1, y1 = xc, yc
            x2, y2 = min(xc + iw, canvas_size), min(yc + ih, canvas_size)
        if x2 <= x1 or y2 <= y1:
            continue
        # Source crop keeps the corner that touches the center point.
        sx = iw - (x2 - x1) if quadrant in (0, 2) else 0
        sy = ih - (y2 - y1) if quadrant in (0, 1) else 0
        canvas[y1:y2, x1:x2] = img[sy: sy + (y2 - y1), sx: sx + (x2 - x1)]
        faces.extend(_shift_clip_faces(anns, x1 - sx, y1 - sy, canvas_size, canvas_size, 0.0))
    crop = target // 2
    image_out = np.ascontiguousarray(canvas[crop: crop + target, crop: crop + target])
    faces = _shift_clip_faces(faces, -crop, -crop, target, target, min_face)
    return image_out, faces


def random_crop(image, annotations, seed=0, min_face=MIN_FACE_DEFAULT):
    """Seeded crop to a window of 0.5..1.0 of each dimension.

    Faces whose centers fall outside the window are dropped; the rest are
    clipped, with the small-face rule applied.
    """
    h, w = image.shape[:2]
    rng = np.random.default_rng(np.random.PCG64(seed))
    cw = int(round(w * (0.5 + 0.5 * rng.random())))
    ch = int(round(h * (0.5 + 0.5 * rng.random())))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    cropped = np.ascontiguousarray(image[y0: y0 + ch, x0: x0 + cw])
    centered = [
        a for a in annotations
        if x0 <= a.box[0] + a.box[2] / 2 < x0 + cw and y0 <= a.box[1] + a.box[3] / 2 < y0 + ch
    ]
    return cropped, _shift_clip_faces(centered, -x0, -y0, cw, ch, min_face)


@dataclass(frozen=True)
class AugmentationPlan:
    """The public augmentation configuration.

    Horizontal flip, mosaic (with the small-face drop) and random crop are
    the full vocabulary; an up-down flip cannot be expressed.
    """
    hflip: bool = True
    mosaic: bool = False
    random_crop: bool = False
    min_face: float = MIN_FACE_DEFAULT
    target: int = 640

    def __post_init__(self):
        if self.min_face < 0:
            raise ConfigError("min_face must be >= 0")
        if self.target < 1:
            raise ConfigError("target must be >= 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown augmentation fields: {sorted(unknown)}")
        return cls(**d)
