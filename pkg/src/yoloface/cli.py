"""Command-line surface: detect, eval, info, bench.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal
invariant violation.
"""
import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import evalkit, weights_io
from .datapipe import (
    apply_letterbox,
    letterbox,
    parse_widerface,
    read_image,
    to_input_tensor,
    write_image,
)
from .errors import (
    ArchiveError,
    ConfigError,
    FormatError,
    NumericsError,
    ShapeError,
    YolofaceError,
)
from .head import postprocess
from .model import (
    PARAM_TOLERANCES,
    PRESETS,
    REFERENCE_SIZES,
    Model,
    build,
    preset_name,
    resolve_config,
)
from .ops import available_backends, set_backend

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="yoloface", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="run face detection on images")
    p.add_argument("--config", required=True, help="preset name or config JSON path")
    p.add_argument("--weights", help="YFTA archive; omitted = seeded random weights")
    p.add_argument("--input", required=True, nargs="+", help="image files or directories")
    p.add_argument("--output", required=True, help="JSON-lines file, or a directory for --format widerface")
    p.add_argument("--conf", type=float, default=0.5)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--format", choices=("json", "widerface"), default="json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, help="override config input size")
    p.add_argument("--annotate-dir", help="also write images with boxes and landmark dots")

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--input", required=True, help="predictions directory (submission layout)")
    p.add_argument("--gt", required=True, help="ground-truth annotation file")
    p.add_argument("--subsets", help="difficulty inclusion lists (JSON)")
    p.add_argument("--output", help="report JSON path (default stdout)")
    p.add_argument("--csv", help="also write PR points as CSV")
    p.add_argument("--iou", type=float, default=0.5)

    p = sub.add_parser("info", help="report model structure, params, flops")
    p.add_argument("--config", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--output", help="machine-readable JSON path")

    p = sub.add_parser("bench", help="measure forward latency")
    p.add_argument("--config", required=True)
    p.add_argument("--weights")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--backend", choices=tuple(available_backends()) + ("both",))
    return parser


def _load_model(args):
    config = resolve_config(args.config)
    if args.size:
        from dataclasses import replace
        config = replace(config, input_size=args.size)
    archive = None
    if args.weights:
        archive = weights_io.load_file(args.weights)
        if config.anchors is None and "anchors" in archive.metadata:
            from dataclasses import replace
            config = replace(config, anchors=json.loads(archive.metadata["anchors"]))
    return build(config, weights=archive, seed=getattr(args, "seed", 0)), config


def _gather_images(inputs):
    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.rglob("*") if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            paths.append(p)
    return paths


def _detect_one(model, config, image):
    h, w = image.shape[:2]
    t = letterbox(w, h, config.input_size, max(config.strides))
    tensor = to_input_tensor(apply_letterbox(image, t))
    maps = model(tensor)
    return t, maps


def _annotate(image, faces):
    out = image.copy()
    import cv2
    for f in faces:
        x1, y1, x2, y2 = (int(round(v)) for v in f.box)
        cv2.rectangle(out, (x1, y1), (x2, y2), (0, 255, 0), 2)
        for lx, ly in f.landmarks:
            cv2.circle(out, (int(round(lx)), int(round(ly))), 2, (255, 0, 0), -1)
    return out


def _cmd_detect(args):
    model, config = _load_model(args)
    paths = _gather_images(args.input)
    if not paths:
        raise FormatError("no input images found")
    records = []
    widerface_entries = {}
    failures = 0
    for path in paths:
        try:
            image = read_image(path)
        except FormatError as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        t, maps = _detect_one(model, config, image)
        faces = postprocess([m[0] for m in maps], config.anchor_set(),
                            args.conf, args.iou, t, config.num_landmarks)
        records.append({
            "image": str(path),
            "faces": [{
                "box": [round(v, 2) for v in f.box],
                "conf": round(f.conf, 6),
                "landmarks": [[round(x, 2), round(y, 2)] for x, y in f.landmarks],
            } for f in faces],
        })
        widerface_entries[Path(path).stem] = (
            [(f.box[0], f.box[1], f.box[2] - f.box[0], f.box[3] - f.box[1]) for f in faces],
            [f.conf for f in faces],
        )
        if args.annotate_dir:
            out_dir = Path(args.annotate_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            write_image(out_dir / Path(path).name, _annotate(image, faces))
    if failures == len(paths):
        raise FormatError("all input images were unreadable")
    if args.format == "widerface":
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, (boxes, scores) in widerface_entries.items():
            (out_dir / f"{name}.txt").write_text(
                evalkit.format_prediction_text(name, boxes, scores), encoding="utf-8")
    else:
        with open(args.output, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    print(f"detect: {len(records)} image(s) -> {args.output}")
    return 0


def _cmd_eval(args):
    predictions = evalkit.load_predictions_dir(args.input)
    gt_path = Path(args.gt)
    ground_truth = parse_widerface(gt_path.read_text(encoding="utf-8"), path=str(gt_path))
    # Prediction files usually carry bare stems; index GT under every alias.
    aliases = {}
    for key in ground_truth:
        for alias in (key, Path(key).stem):
            aliases.setdefault(alias, key)
    remapped = {}
    for name, entry in predictions.items():
        if name not in aliases:
            raise ConfigError(f"prediction {name!r} has no ground-truth image")
        remapped[aliases[name]] = entry
    subsets = evalkit.load_subsets(args.subsets) if args.subsets else None
    config = evalkit.EvalConfig(iou_thr=args.iou, subsets=subsets)
    result = evalkit.evaluate_widerface(remapped, ground_truth, config)
    text = evalkit.report_json(result)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        print(text)
    if args.csv:
        evalkit.write_pr_csv(result, args.csv)
    print("eval: " + "  ".join(f"{d}={result[d]:.4f}" for d in evalkit.DIFFICULTIES))
    return 0


def _cmd_info(args):
    config = resolve_config(args.config)
    model = Model(config)
    size = args.size or config.input_size
    shapes, _ = model._walk_shapes(size, size)
    rows = []
    for i, node in enumerate(model.nodes):
        rows.append((f"layers.{i}", type(node.module).__name__,
                     "x".join(str(v) for v in shapes[i][1:])))
    for k, idx in enumerate(model.level_nodes):
        rows.append((f"head.m.{k}", "HeadConv",
                     "x".join(str(v) for v in shapes[len(model.nodes) + k][1:])))
    params = model.count_params()
    flops = model.count_flops(size)
    name = preset_name(config)
    width = max(len(r[0]) for r in rows)
    print(f"{'node':<{width}}  {'type':<14} output (CxHxW)")
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:<14} {r[2]}")
    print(f"\nparams: {params:,} ({params / 1e6:.3f}M)")
    print(f"flops @ {size}px: {flops / 1e9:.3f}G (2 per MAC, single image)")
    reconciliation = None
    if name in REFERENCE_SIZES:
        ref_p, ref_f = REFERENCE_SIZES[name]
        rel = (params / 1e6 - ref_p) / ref_p
        tol = PARAM_TOLERANCES.get(name)
        if tol is not None:
            verdict = "PASS" if abs(rel) <= tol else "FAIL"
            print(f"reconciliation vs {name}: {ref_p}M params, rel {rel:+.2%} "
                  f"(tolerance {tol:.0%}) {verdict}")
        else:
            verdict = "REPORT"
            print(f"reconciliation vs {name}: {ref_p}M params, rel {rel:+.2%} (report-only)")
        print(f"reference flops: {ref_f}G (published convention unstated; report-only)")
        reconciliation = {"name": name, "ref_params_m": ref_p, "rel_params": rel,
                          "ref_flops_g": ref_f, "verdict": verdict}
    if args.output:
        payload = {
            "config": config.to_dict(),
            "params": params,
            "flops": flops,
            "input_size": size,
            "stages": [{"node": r[0], "type": r[1], "output": r[2]} for r in rows],
            "reconciliation": reconciliation,
        }
        Path(args.output).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return 0


def _bench_once(args, backend=None):
    if backend:
        set_backend(backend)
    model, config = _load_model(args)
    size = args.size or config.input_size
    rng = np.random.default_rng(args.seed)
    x = rng.random((1, 3, size, size), dtype=np.float32)
    for _ in range(args.warmup):
        model(x)
    samples = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        model(x)
        samples.append((time.perf_counter() - t0) * 1000.0)
    samples_sorted = sorted(samples)
    p50 = samples_sorted[int(0.5 * (len(samples) - 1))]
    p95 = samples_sorted[int(0.95 * (len(samples) - 1))]
    mean = statistics.fmean(samples)
    return {"backend": backend or "active", "samples": len(samples),
            "p50_ms": p50, "p95_ms": p95, "mean_ms": mean,
            "images_per_s": 1000.0 / mean}


def _cmd_bench(args):
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    backends = available_backends() if args.backend == "both" else [args.backend]
    for backend in backends:
        r = _bench_once(args, backend)
        print(f"{args.config} [{backend or 'auto'}] n={r['samples']} "
              f"p50={r['p50_ms']:.1f}ms p95={r['p95_ms']:.1f}ms "
              f"mean={r['mean_ms']:.1f}ms {r['images_per_s']:.2f} img/s")
    return 0


_COMMANDS = {"detect": _cmd_detect, "eval": _cmd_eval, "info": _cmd_info, "bench": _cmd_bench}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ArchiveError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ShapeError, NumericsError, YolofaceError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
