"""WiderFace-protocol detection evaluation and FDDB-style discrete ROC.

Matching is greedy per image: predictions in descending score order claim
the unmatched ground-truth box of highest IoU at or above the threshold;
each GT is claimed once. Faces outside the difficulty subset under
evaluation are "ignore": they absorb matches without counting as TP or FP.
Thresholds sweep rank positions, not raw scores, so tied scores stay
deterministic.
"""
import csv as _csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

TP, FP, IGNORED = 1, 0, -1
DIFFICULTIES = ("easy", "medium", "hard")


@dataclass(frozen=True)
class EvalConfig:
    iou_thr: float = 0.5
    num_thresholds: int = 1000
    # subsets: difficulty -> image -> iterable of included face indices.
    # None means every face counts in every difficulty.
    subsets: dict = None

    def __post_init__(self):
        if not 0 < self.iou_thr < 1:
            raise ConfigError(f"iou_thr must be in (0,1), got {self.iou_thr}")
        if self.num_thresholds < 1:
            raise ConfigError("num_thresholds must be >= 1")


@dataclass
class PRCurve:
    """(recall, precision) points with their score thresholds, by rank."""
    points: list = field(default_factory=list)  # (recall, precision, score)

    def recalls(self):
        return [p[0] for p in self.points]

    def precisions(self):
        return [p[1] for p in self.points]


def _xywh_to_corners(boxes):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = b.copy()
    out[:, 2] = b[:, 0] + b[:, 2]
    out[:, 3] = b[:, 1] + b[:, 3]
    return out


def _iou_matrix(preds, gts):
    """IoU of every pred (corner) against every gt (corner): [P, G]."""
    px1, py1, px2, py2 = (preds[:, i][:, None] for i in range(4))
    gx1, gy1, gx2, gy2 = (gts[:, i][None, :] for i in range(4))
    iw = np.clip(np.minimum(px2, gx2) - np.maximum(px1, gx1), 0, None)
    ih = np.clip(np.minimum(py2, gy2) - np.maximum(py1, gy1), 0, None)
    inter = iw * ih
    pa = np.clip(px2 - px1, 0, None) * np.clip(py2 - py1, 0, None)
    ga = np.clip(gx2 - gx1, 0, None) * np.clip(gy2 - gy1, 0, None)
    union = pa + ga - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def match(pred_boxes, scores, gt_boxes, iou_thr=0.5, ignore=None):
    """Greedy TP/FP/IGNORED flags for predictions against one image's GT.

    Boxes are corner-form arrays. Predictions are processed in descending
    score order (stable for ties); the returned flags follow the input
    order of ``pred_boxes``.
    """
    preds = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if preds.shape[0] != scores.shape[0]:
        raise ConfigError("one score per prediction required")
    ignore = (np.zeros(gts.shape[0], dtype=bool) if ignore is None
              else np.asarray(ignore, dtype=bool).reshape(-1))
    flags = np.full(preds.shape[0], FP, dtype=np.int64)
    if gts.shape[0] == 0:
        return flags
    order = np.argsort(-scores, kind="stable")
    ious = _iou_matrix(preds, gts)
    claimed = np.zeros(gts.shape[0], dtype=bool)
    for i in order:
        row = np.where(claimed, -1.0, ious[i])
        g = int(np.argmax(row))
        if row[g] >= iou_thr:
            claimed[g] = True
            flags[i] = IGNORED if ignore[g] else TP
    return flags


def pr_curve(flags, total_gt, num_thresholds=1000):
    """PR points over rank-position cutoffs.

    ``flags`` are (score, flag) pairs pooled across images; IGNORED entries
    must already be dropped. ``total_gt`` counts non-ignored ground truth.
    """
    if total_gt < 0:
        raise ConfigError("total_gt must be >= 0")
    pairs = sorted(flags, key=lambda sf: -sf[0])
    if not pairs:
        return PRCurve([])
    if total_gt == 0:
        raise ConfigError("recall undefined: predictions exist but total_gt is 0")
    n = len(pairs)
    cum_tp = np.cumsum([1 if f == TP else 0 for _, f in pairs])
    ranks = sorted({min(n, max(1, round(i * n / num_thresholds)))
                    for i in range(1, num_thresholds + 1)} | {n})
    points = []
    for k in ranks:
        tp = int(cum_tp[k - 1])
        points.append((tp / total_gt, tp / k, pairs[k - 1][0]))
    return PRCurve(points)


def average_precision(curve):
    """Area under the right-monotone precision envelope over recall."""
    if not curve.points:
        return 0.0
    pts = sorted(curve.points, key=lambda p: p[0])
    recalls = [p[0] for p in pts]
    env = [p[1] for p in pts]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recalls, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def tpr_at_fp(flags, total_gt, fp_budget=1000):
    """True-positive rate when the FP budget runs out (or preds do).

    Walks (score, flag) pairs by descending score; the (budget+1)-th false
    positive stops the walk, and TPs strictly before it count.
    """
    if fp_budget < 0:
        raise ConfigError("fp_budget must be >= 0")
    if total_gt <= 0:
        return 0.0
    pairs = sorted(flags, key=lambda sf: -sf[0])
    tp = fp = 0
    for _, f in pairs:
        if f == FP:
            if fp + 1 > fp_budget:
                break
            fp += 1
        elif f == TP:
            tp += 1
    return tp / total_gt


def evaluate_widerface(predictions, ground_truth, config=EvalConfig()):
    """Per-difficulty APs.

    ``predictions``: image -> (boxes xywh, scores). ``ground_truth``:
    image -> list of FaceAnnotation (or xywh boxes). Faces outside a
    difficulty's inclusion list are ignored for that difficulty.
    """
    missing = set(predictions) - set(ground_truth)
    if missing:
        raise ConfigError(f"predictions reference images without ground truth, "
                          f"e.g. {sorted(missing)[0]!r}")
    result = {}
    curves = {}
    for diff in DIFFICULTIES:
        pooled = []
        total_gt = 0
        for image in sorted(ground_truth):
            anns = ground_truth[image]
            gt_xywh = [a.box if hasattr(a, "box") else a for a in anns]
            gts = _xywh_to_corners(gt_xywh) if gt_xywh else np.zeros((0, 4))
            if config.subsets is None:
                ignore = np.zeros(len(gt_xywh), dtype=bool)
            else:
                included = set(config.subsets.get(diff, {}).get(image, ()))
                ignore = np.array([i not in included for i in range(len(gt_xywh))], dtype=bool)
            total_gt += int((~ignore).sum())
            boxes, scores = predictions.get(image, ((), ()))
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            scores = np.asarray(scores, dtype=np.float64).reshape(-1)
            if boxes.shape[0]:
                flags = match(_xywh_to_corners(boxes), scores, gts, config.iou_thr, ignore)
                pooled.extend((float(s), int(f)) for s, f in zip(scores, flags) if f != IGNORED)
        if pooled and total_gt == 0:
            raise ConfigError(f"{diff}: predictions exist but the subset has no ground truth")
        curve = pr_curve(pooled, total_gt, config.num_thresholds) if total_gt else PRCurve([])
        curves[diff] = curve
        result[diff] = average_precision(curve)
    result["curves"] = curves
    return result


# ---------------------------------------------------------------------------
# File interfaces


def parse_prediction_text(text, path="<predictions>"):
    """One submission-layout file: name line, count line, x y w h score rows."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty prediction file", path=path)
    name = lines[0]
    try:
        count = int(float(lines[1])) if len(lines) > 1 else 0
    except ValueError:
        raise FormatError(f"malformed count {lines[1]!r}", path=path, line=2) from None
    boxes, scores = [], []
    if count != len(lines) - 2:
        raise FormatError(f"count {count} but {len(lines) - 2} detection rows",
                          path=path, line=2)
    for i, ln in enumerate(lines[2:], start=3):
        vals = ln.split()
        if len(vals) != 5:
            raise FormatError(f"expected 'x y w h score', got {ln!r}", path=path, line=i)
        try:
            x, y, w, h, s = (float(v) for v in vals)
        except ValueError:
            raise FormatError(f"non-numeric field in {ln!r}", path=path, line=i) from None
        boxes.append((x, y, w, h))
        scores.append(s)
    return name, (boxes, scores)


def load_predictions_dir(root):
    """Read every .txt under ``root`` in WiderFace submission layout."""
    from pathlib import Path

    out = {}
    for p in sorted(Path(root).rglob("*.txt")):
        name, entry = parse_prediction_text(p.read_text(encoding="utf-8"), path=str(p))
        out[name] = entry
    return out


def format_prediction_text(name, boxes, scores):
    lines = [str(name), str(len(scores))]
    for (x, y, w, h), s in zip(boxes, scores):
        lines.append(f"{x:.3f} {y:.3f} {w:.3f} {h:.3f} {s:.6f}")
    return "\n".join(lines) + "\n"


def load_subsets(path):
    """Difficulty inclusion lists: {difficulty: {image: [face indices]}}."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = set(raw) - set(DIFFICULTIES)
    if unknown:
        raise FormatError(f"unknown difficulty keys {sorted(unknown)}", path=path)
    return {d: {img: list(ids) for img, ids in raw.get(d, {}).items()} for d in DIFFICULTIES}


def report_json(result):
    payload = {d: result[d] for d in DIFFICULTIES}
    payload["curves"] = {
        d: [{"recall": r, "precision": p, "score": s} for r, p, s in result["curves"][d].points]
        for d in DIFFICULTIES
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def write_pr_csv(result, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["difficulty", "recall", "precision", "score"])
        for d in DIFFICULTIES:
            for r, p, s in result["curves"][d].points:
                writer.writerow([d, f"{r:.6f}", f"{p:.6f}", f"{s:.6f}"])
