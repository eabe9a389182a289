"""Command-line interface: generate fixtures, trace, verify, count, simulate
clicks, evaluate metrics and run click-driven segmentation.

Every command is deterministic given its seed and inputs; each emitted JSON
document embeds a run manifest (command, inputs, seed, overrides, version)
and no timestamps.  Errors are reported as a JSON document on stdout with a
nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .clicksim import Click, make_bands, sample_clicks
from .errors import RFTraceError
from .execute import count_flops, verify_equivalence
from .graph import WeightStore, infer_shapes, parse_graph
from .metrics import (
    EvalRecord,
    MetricsConfig,
    miou_t,
    miou_t_mean,
    mta,
    per_band_report,
    per_category_report,
)
from .models import fixture_graphs, random_weights
from .pnm import read_mask, read_ppm, write_mask
from .segmenter import ModelBundle, PyramidConfig, Segmenter, build_model
from .tensor import Tensor
from .trace import Rect, backtrace, region_report


def _manifest(command: str, inputs: dict, seed=None, overrides=None) -> dict:
    return {
        "command": command,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "seed": seed,
        "overrides": overrides or {},
        "version": __version__,
    }


def _emit(doc: dict, out_path=None) -> None:
    text = json.dumps(doc, indent=1)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _load_graph(path):
    with open(path) as fh:
        return parse_graph(fh.read())


def _parse_click(text) -> Click:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise RFTraceError(f"click must be X,Y integers, got {text!r}") from None
    return Click(x=x, y=y)


def _parse_rect(text) -> Rect:
    try:
        t, l, b, r = (int(v) for v in text.split(","))
    except ValueError:
        raise RFTraceError(f"rect must be T,L,B,R integers, got {text!r}") from None
    return Rect(t, l, b, r)


def _out_rect_from_args(args, g) -> Rect:
    _c, h, w = infer_shapes(g)[g.output_id]
    if args.rect:
        return _parse_rect(args.rect)
    if args.click:
        c = _parse_click(args.click)
        if not (0 <= c.x < w and 0 <= c.y < h):
            raise RFTraceError(f"click ({c.x},{c.y}) outside output map {h}x{w}")
        return Rect.pixel(c.y, c.x)
    raise RFTraceError("one of --click or --rect is required")


def _default_jobs() -> int:
    return int(os.environ.get("RF_TRACE_JOBS", "1"))


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    manifest = _manifest("gen", {"out": args.out}, seed=args.seed, overrides={"model": args.model})
    if args.model == "toy-r18-fpn":
        bundle = build_model(PyramidConfig(), (3, 256, 256), seed=args.seed)
        files = bundle.save(args.out)
    else:
        graphs = fixture_graphs(args.model)
        weights = random_weights(list(graphs.values()), args.seed)
        files = []
        from .graph import graph_to_dict

        for name, g in sorted(graphs.items()):
            fname = f"{name}.graph.json"
            with open(os.path.join(args.out, fname), "w") as fh:
                json.dump(graph_to_dict(g), fh, indent=1)
                fh.write("\n")
            files.append(fname)
        weights.save(os.path.join(args.out, "weights.json"), os.path.join(args.out, "weights.bin"))
        files += ["weights.json", "weights.bin"]
    _emit({"manifest": manifest, "files": sorted(files)}, os.path.join(args.out, "gen.json"))
    return 0


def cmd_trace(args) -> int:
    g = _load_graph(args.graph)
    rect = _out_rect_from_args(args, g)
    plan = backtrace(g, rect)
    crops = [
        {
            "producer": e.producer,
            "consumer": e.consumer,
            "slot": e.slot,
            "needed": [e.needed.top, e.needed.left, e.needed.bottom, e.needed.right],
            "pad": list(e.pad),
        }
        for e in sorted(plan.crops.values(), key=lambda e: (e.consumer, e.slot))
    ]
    _emit(
        {
            "manifest": _manifest("trace", {"graph": args.graph}, overrides={"rect": [rect.top, rect.left, rect.bottom, rect.right]}),
            "regions": region_report(g, plan),
            "crop_plan": crops,
            "stats": {"nodes_visited": plan.stats.nodes_visited, "edges_traversed": plan.stats.edges_traversed},
        },
        args.out,
    )
    return 0


def cmd_verify(args) -> int:
    g = _load_graph(args.graph)
    w = WeightStore.load(args.weights, args.weights_blob or args.weights.replace(".json", ".bin"))
    shape = g.input_shape
    _c, oh, ow = infer_shapes(g)[g.output_id]

    def trial(i: int) -> dict:
        rng = np.random.default_rng(args.seed + i)
        x = Tensor(rng.normal(0, 1, shape).astype(np.float32))
        if rng.random() < 0.5:
            rect = Rect.pixel(int(rng.integers(0, oh)), int(rng.integers(0, ow)))
        else:
            rh = int(rng.integers(1, min(8, oh) + 1))
            rw = int(rng.integers(1, min(8, ow) + 1))
            top = int(rng.integers(0, oh - rh + 1))
            left = int(rng.integers(0, ow - rw + 1))
            rect = Rect(top, left, top + rh - 1, left + rw - 1)
        report = verify_equivalence(g, w, x, rect, tolerance=args.tol)
        return {
            "trial": i,
            "rect": [rect.top, rect.left, rect.bottom, rect.right],
            "max_abs_diff": report.max_abs_diff,
            "pass": report.passed,
        }

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = sorted(pool.map(trial, range(args.trials)), key=lambda r: r["trial"])
    all_pass = all(r["pass"] for r in results)
    _emit(
        {
            "manifest": _manifest(
                "verify",
                {"graph": args.graph, "weights": args.weights},
                seed=args.seed,
                overrides={"trials": args.trials, "tol": args.tol},
            ),
            "trials": results,
            "all_pass": all_pass,
        },
        args.out,
    )
    return 0 if all_pass else 1


def cmd_flops(args) -> int:
    g = _load_graph(args.graph)
    regions = None
    rect = None
    if args.click or args.rect:
        rect = _out_rect_from_args(args, g)
        regions = backtrace(g, rect).regions
    report = count_flops(g, regions)
    doc = report.to_dict()
    doc["manifest"] = _manifest(
        "flops",
        {"graph": args.graph},
        overrides={"rect": [rect.top, rect.left, rect.bottom, rect.right] if rect else None},
    )
    _emit(doc, args.out)
    return 0


def cmd_clicks(args) -> int:
    with open(os.path.join(args.masks, "index.json")) as fh:
        index = json.load(fh)
    clicks = []
    for instance_id in sorted(index):
        mask = read_mask(os.path.join(args.masks, index[instance_id]["file"]))
        bands = make_bands(mask)
        # per-instance seed keeps each instance's clicks independent of the set
        drawn = sample_clicks(bands, mask, per_band=args.per_band, seed=_instance_seed(args.seed, instance_id))
        for band, c in drawn:
            clicks.append({"instance_id": instance_id, "band": band, "x": c.x, "y": c.y})
    _emit(
        {
            "manifest": _manifest("clicks", {"masks": args.masks}, seed=args.seed, overrides={"per_band": args.per_band}),
            "clicks": clicks,
        },
        args.out,
    )
    return 0


def _instance_seed(seed: int, instance_id: str) -> int:
    # stable across processes (hash() is salted; a digest is not)
    import hashlib

    digest = hashlib.sha256(instance_id.encode()).digest()
    return (seed + int.from_bytes(digest[:4], "little")) % (2**31)


def _load_clicks(path) -> list[dict]:
    with open(path) as fh:
        doc = json.load(fh)
    return doc if isinstance(doc, list) else doc["clicks"]


def cmd_eval(args) -> int:
    with open(os.path.join(args.gts, "index.json")) as fh:
        index = json.load(fh)
    clicks = _load_clicks(args.clicks)

    per_instance_counter: dict[str, int] = {}
    jobs = []
    for entry in clicks:
        iid = entry["instance_id"]
        j = per_instance_counter.get(iid, 0)
        per_instance_counter[iid] = j + 1
        jobs.append((iid, j, entry.get("band")))

    gt_cache = {
        iid: read_mask(os.path.join(args.gts, index[iid]["file"])) for iid in sorted(per_instance_counter)
    }

    def load_record(job) -> EvalRecord:
        iid, j, band = job
        pred_path = os.path.join(args.preds, f"{iid}_{j}.pgm")
        if not os.path.exists(pred_path):
            raise RFTraceError(f"missing prediction file {pred_path}")
        return EvalRecord(
            instance_id=iid,
            click_index=j,
            pred=read_mask(pred_path),
            gt=gt_cache[iid],
            category=index[iid].get("category"),
            band=band,
        )

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        records = sorted(
            pool.map(load_record, jobs), key=lambda r: (r.instance_id, r.click_index)
        )
    cfg = MetricsConfig(beta=args.beta)
    doc = {
        "manifest": _manifest(
            "eval",
            {"preds": args.preds, "gts": args.gts, "clicks": args.clicks},
            overrides={"beta": args.beta, "mta_mode": args.mta_mode},
        ),
        "miou_t": miou_t(records),
        "miou_t_mean_variant": miou_t_mean(records),
        "mta": mta(records, cfg, sampled=(args.mta_mode == "sampled")),
        "beta": args.beta,
        "per_category": per_category_report(records),
        "per_band": per_band_report(records),
    }
    _emit(doc, args.out)
    return 0


def cmd_segment(args) -> int:
    bundle = ModelBundle.load(args.model)
    image = read_ppm(args.image)
    click = _parse_click(args.click)
    mask, diag = Segmenter(bundle).segment(image, click, level_override=args.level)
    write_mask(args.out, mask)
    diag_path = os.path.splitext(args.out)[0] + ".diag.json"
    _emit(
        {
            "manifest": _manifest(
                "segment",
                {"model": args.model, "image": args.image},
                overrides={"click": [click.x, click.y], "level": args.level},
            ),
            "diagnostics": diag.to_dict(),
            "mask_file": args.out,
            "mask_pixels": int(mask.sum()),
        },
        diag_path,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rftrace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a model fixture (graphs + weights)")
    p.add_argument("--model", required=True, help="toy-r18-fpn | r50-fpn-approx | chain-N | diamond")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("trace", help="back-trace receptive-field regions")
    p.add_argument("--graph", required=True)
    p.add_argument("--click", help="X,Y pixel in the output feature map")
    p.add_argument("--rect", help="T,L,B,R inclusive rect in the output map")
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("verify", help="randomized traced-vs-full equivalence trials")
    p.add_argument("--graph", required=True)
    p.add_argument("--weights", required=True, help="weights manifest JSON")
    p.add_argument("--weights-blob", help="weights blob (default: manifest with .bin)")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("flops", help="static FLOPs accounting (full and traced)")
    p.add_argument("--graph", required=True)
    p.add_argument("--click", help="X,Y pixel in the output feature map")
    p.add_argument("--rect", help="T,L,B,R inclusive rect in the output map")
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("clicks", help="simulate banded clicks for instance masks")
    p.add_argument("--masks", required=True, help="directory with index.json + PGM masks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-band", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_clicks)

    p = sub.add_parser("eval", help="mask-quality metrics over predictions")
    p.add_argument("--preds", required=True, help="directory of <instance>_<j>.pgm predictions")
    p.add_argument("--gts", required=True, help="directory with index.json + PGM ground truths")
    p.add_argument("--clicks", required=True)
    p.add_argument("--beta", type=float, default=0.7)
    p.add_argument("--mta-mode", choices=("sampled", "exhaustive"), default="sampled")
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="click-driven traced segmentation")
    p.add_argument("--model", required=True, help="model bundle directory")
    p.add_argument("--image", required=True, help="8-bit binary PPM (P6)")
    p.add_argument("--click", required=True, help="X,Y pixel in the image")
    p.add_argument("--level", help="force a pyramid level (e.g. P4)")
    p.add_argument("--out", required=True, help="output mask PGM path")
    p.set_defaults(func=cmd_segment)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RFTraceError as exc:
        _emit({"error": {"type": type(exc).__name__, "message": str(exc)}, "manifest": _manifest(args.command, {})})
        return 1
    except FileNotFoundError as exc:
        _emit({"error": {"type": "FileNotFoundError", "message": str(exc)}, "manifest": _manifest(args.command, {})})
        return 1


if __name__ == "__main__":
    sys.exit(main())
