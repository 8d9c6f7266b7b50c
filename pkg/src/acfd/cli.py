"""Operator entry point: fuse, verify, match, detect, bench.

Exit codes are a frozen contract: 0 success, 1 I/O failure, 2 usage error,
3 verification failure. All subcommands are deterministic given their
inputs and --seed, apart from bench wall-clock numbers.
"""
from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import container, model, verify
from .augment import bilinear_resize
from .matching import dam_match
from .anchors import generate_anchors
from .postprocess import (CONF_THRESHOLD, FINAL_TOP, NMS_IOU, PER_SCALE_TOP,
                          ScaleInfo, multi_scale_sizes, pad_to_grid, postprocess)
from .ppm import read_ppm

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_VERIFY = 3


def _worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("ACFD_THREADS", "1")))
    except ValueError:
        return 1


def _parse_size(text: str) -> tuple[int, int]:
    h, _, w = text.lower().partition("x")
    return int(h), int(w)


def _param_count(m: model.DetectorModel) -> int:
    return sum(a.size for a in model.named_arrays(m).values())


# ---------------------------------------------------------------------------
# subcommands

def cmd_fuse(args) -> int:
    try:
        if container.is_fused_file(args.input):
            print("input container is already fused", file=sys.stderr)
            return EXIT_USAGE
        unfused = container.load_file(args.input)
    except OSError as exc:
        print(f"cannot read {args.input}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"bad container {args.input}: {exc}", file=sys.stderr)
        return EXIT_IO
    fused = model.fuse_model(unfused)
    rng = np.random.default_rng(args.seed)
    # probe in the normalized-image range the detector actually sees
    probe = rng.uniform(-0.5, 0.5, size=(1, 3, 128, 128)).astype(np.float32)
    out_a = model.forward(unfused, probe)
    out_b = model.forward(fused, probe)
    err = max(float(np.abs(a - b).max())
              for a, b in zip(out_a.cls + out_a.reg, out_b.cls + out_b.reg))
    try:
        container.save_file(fused, args.output)
    except OSError as exc:
        print(f"cannot write {args.output}: {exc}", file=sys.stderr)
        return EXIT_IO
    before, after = _param_count(unfused), _param_count(fused)
    print(f"parameters: {before} -> {after} ({before - after} removed)")
    print(f"probe max abs error: {err:.3e}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_all(seed=args.seed, inject_fault=args.inject_fault,
                             t1=args.t1, t2=args.t2, margin=args.margin)
    if args.json:
        print(json.dumps({
            "checks": [{"name": r.name, "passed": r.passed, "detail": r.detail}
                       for r in results],
            "passed": all(r.passed for r in results),
        }, indent=2))
    else:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<20} {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        if not args.json:
            print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_match(args) -> int:
    try:
        annotations = _load_json(args.annotations)
        predictions = _load_json(args.predictions)
    except OSError as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"malformed JSON: {exc}", file=sys.stderr)
        return EXIT_IO
    anchors = generate_anchors(_parse_size(args.image_size))
    preds_by_id = {p.get("file", p.get("image_id")): p["boxes"] for p in predictions}
    t1_values = [float(v) for v in args.t1.split(",")]
    t2_values = [float(v) for v in args.t2.split(",")]
    print(f"{'T1':>6} {'T2':>6} {'matched':>9} {'compensated':>12} {'per-face':>9}")
    for t1 in t1_values:
        for t2 in t2_values:
            n1 = n2 = faces = 0
            for entry in annotations:
                key = entry.get("file", entry.get("image_id"))
                gts = np.asarray(entry["boxes"], dtype=np.float64).reshape(-1, 4)
                regressed = preds_by_id.get(key)
                regressed = anchors.boxes if regressed is None \
                    else np.asarray(regressed, dtype=np.float64)
                result = dam_match(anchors, regressed, gts, t1, t2)
                n1 += result.n1
                n2 += result.n2
                faces += gts.shape[0]
            per_face = (n1 + n2) / faces if faces else 0.0
            print(f"{t1:>6.2f} {t2:>6.2f} {n1:>9d} {n2:>12d} {per_face:>9.2f}")
    return EXIT_OK


def _detect_one_scale(image: np.ndarray, m: model.DetectorModel,
                      scale_hw: tuple[int, int]) -> tuple:
    orig_h, orig_w = image.shape[2], image.shape[3]
    sh, sw = scale_hw
    resized = bilinear_resize(image, (sh, sw))
    ph, pw = pad_to_grid((sh, sw))
    padded = np.zeros((1, 3, ph, pw), dtype=resized.dtype)
    padded[:, :, :sh, :sw] = resized
    output = model.forward(m, padded)
    info = ScaleInfo(padded_hw=(ph, pw), valid_hw=(sh, sw),
                     scale_xy=(sw / orig_w, sh / orig_h))
    return output, info


def cmd_detect(args) -> int:
    try:
        pixels = read_ppm(args.image)
    except (OSError, ValueError) as exc:
        print(f"cannot decode {args.image}: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        m = container.load_file(args.container)
    except (OSError, ValueError) as exc:
        print(f"cannot read {args.container}: {exc}", file=sys.stderr)
        return EXIT_IO
    image = pixels.astype(np.float32).transpose(2, 0, 1)[None] / 255.0 - args.mean

    if args.single_scale:
        scales = [_parse_size(args.single_scale)]
    elif args.scales:
        scales = [_parse_size(s) for s in args.scales.split(",")]
    else:
        scales = multi_scale_sizes()

    threads = _worker_threads()
    if threads > 1 and len(scales) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_scale = list(pool.map(lambda s: _detect_one_scale(image, m, s), scales))
    else:
        per_scale = [_detect_one_scale(image, m, s) for s in scales]

    detections = postprocess(per_scale, conf=args.conf, nms_iou=args.nms_iou,
                             per_scale_top=PER_SCALE_TOP, final_top=FINAL_TOP)
    image_id = Path(args.image).stem
    lines = [
        f'{{"image_id": "{image_id}", "x1": {d.box[0]:.4f}, "y1": {d.box[1]:.4f}, '
        f'"x2": {d.box[2]:.4f}, "y2": {d.box[3]:.4f}, "score": {d.score:.4f}}}'
        for d in detections
    ]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            print(f"cannot write {args.out}: {exc}", file=sys.stderr)
            return EXIT_IO
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _time_forward(m: model.DetectorModel, probe: np.ndarray, repeats: int) -> list[float]:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.forward(m, probe)
        times.append((time.perf_counter() - t0) * 1000.0)
    return times


def cmd_bench(args) -> int:
    try:
        if container.is_fused_file(args.container):
            print("bench expects an unfused container", file=sys.stderr)
            return EXIT_USAGE
        unfused = container.load_file(args.container)
    except (OSError, ValueError) as exc:
        print(f"cannot read {args.container}: {exc}", file=sys.stderr)
        return EXIT_IO
    fused = model.fuse_model(unfused)
    rng = np.random.default_rng(args.seed)
    size = _parse_size(args.size)
    probe = rng.uniform(-1.0, 1.0, size=(1, 3, *size)).astype(np.float32)
    model.forward(fused, probe)  # warm-up both paths once
    model.forward(unfused, probe)

    rows = []
    for label, m in (("unfused", unfused), ("fused", fused)):
        times = _time_forward(m, probe, args.repeats)
        median = statistics.median(times)
        p95 = (sorted(times)[max(0, int(round(0.95 * len(times))) - 1)]
               if len(times) > 1 else None)
        macs = model.count_model_macs(m, size)
        rows.append((label, median, p95, macs))
    if args.csv:
        print("variant,median_ms,p95_ms,macs")
        for label, median, p95, macs in rows:
            p95_s = f"{p95:.3f}" if p95 is not None else ""
            print(f"{label},{median:.3f},{p95_s},{macs}")
    else:
        for label, median, p95, macs in rows:
            p95_s = f"{p95:8.3f} ms" if p95 is not None else "       -   "
            print(f"{label:<8} median {median:8.3f} ms  p95 {p95_s}  MACs {macs}")
        speedup = rows[0][1] / rows[1][1] if rows[1][1] > 0 else float("inf")
        print(f"speedup (unfused/fused median): {speedup:.2f}x")
        print(f"MAC reduction: {rows[0][3] - rows[1][3]}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acfd", description="Cartoon-face detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fold ACB branches and batch norms into plain convs")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify", help="run the property-check battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t1", type=float, default=0.35)
    p.add_argument("--t2", type=float, default=0.7)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--json", action="store_true")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("match", help="anchor-match statistics over an annotation set")
    p.add_argument("annotations")
    p.add_argument("predictions")
    p.add_argument("--t1", default="0.35", help="comma list sweeps a grid")
    p.add_argument("--t2", default="0.7", help="comma list sweeps a grid")
    p.add_argument("--image-size", default="640x640")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("detect", help="run detection on a binary PPM image")
    p.add_argument("image")
    p.add_argument("container")
    p.add_argument("--scales", help="comma list of HxW test sizes")
    p.add_argument("--single-scale", help="restrict to one HxW size")
    p.add_argument("--conf", type=float, default=CONF_THRESHOLD)
    p.add_argument("--nms-iou", type=float, default=NMS_IOU)
    p.add_argument("--mean", type=float, default=0.5,
                   help="per-channel normalization mean in [0,1]")
    p.add_argument("--out", help="write JSON lines here instead of stdout")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bench", help="time unfused vs fused forward passes")
    p.add_argument("container")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--size", default="256x256")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
