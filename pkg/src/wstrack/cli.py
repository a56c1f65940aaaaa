"""Command-line entry point: ``wstrack synth|train|track|eval|render|desk``.

Exit codes: 0 success, 1 invalid input (bad flags, malformed or missing
files), 2 runtime failure. ``WSTRACK_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from fractions import Fraction

import numpy as np

from . import __version__
from .data import FirewallError, PresenceDataset
from .models import VARIANTS, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import DEFAULT_THETAS, evaluate, infer_video, run_split
from .records import RecordError, read_gt_boxes, read_scores, read_tracks, write_scores, write_tracks
from .synthcam import SceneConfig, generate, read_manifest, write_ppm
from .trainer import PRESETS, NonFiniteGradient, get_plan, train

log = logging.getLogger("wstrack")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def parse_thetas(text):
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid theta list {text!r}") from None
    if not vals or any(not 0.0 < v < 1.0 for v in vals):
        raise argparse.ArgumentTypeError("thetas must lie in (0, 1)")
    return vals


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _echo(out, command, config):
    """Write the replay record for one run."""
    os.makedirs(out, exist_ok=True)
    _dump(os.path.join(out, f"config.{command}.json"), {"command": command, "version": __version__, **config})


def _plan_from_args(args):
    overrides = {}
    plan = get_plan(args.preset)
    if getattr(args, "epochs1", None) is not None:
        overrides["phase1"] = replace(plan.phase1, epochs=args.epochs1)
    if getattr(args, "epochs2", None) is not None:
        overrides["phase2"] = replace(plan.phase2, epochs=args.epochs2)
    return replace(plan, **overrides)


def cmd_synth(args):
    cfg = SceneConfig(seed=args.seed, presence_schedule="skewed" if args.skewed else "random",
                      multi_instance=args.multi_instance)
    splits = tuple(int(s) for s in args.splits.split(",")) if args.splits else None
    generate(cfg, args.out, args.videos, args.frames, splits=splits, overwrite=args.overwrite)
    _echo(args.out, "synth", {"seed": args.seed, "videos": args.videos, "frames": args.frames,
                              "splits": args.splits, "scene": cfg.to_dict()})
    return EXIT_OK


def _train_run(dataset_root, variant, plan, seed, out, init=None):
    ds = PresenceDataset(dataset_root, "train")
    config = ModelConfig(variant, backbone=plan.backbone)
    os.makedirs(out, exist_ok=True)
    init_model = None
    if init is not None:
        init_model, _ = load_checkpoint(init)
    with open(os.path.join(out, "train_log.jsonl"), "w") as sink:
        res = train(ds, config, plan, seed=seed, init=init_model, sink=sink)
    extra = {"pixel_mean": [float(v) for v in res.pixel_mean],
             "class_weights": [float(v) for v in res.class_weights]}
    last = {1: plan.phase1.epochs, 2: plan.phase2.epochs}
    if config.has_cl and init is None:
        save_checkpoint(res.baseline, os.path.join(out, "baseline"), seed, last[1], extra)
    save_checkpoint(res.model, os.path.join(out, "checkpoint"), seed, last[2 if config.has_cl else 1], extra)
    return res


def cmd_train(args):
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; expected one of {sorted(VARIANTS)}")
    plan = _plan_from_args(args)
    _echo(args.out, "train", {"dataset": args.dataset, "variant": args.variant, "preset": args.preset,
                              "seed": args.seed, "init": args.init, "plan": plan.to_dict()})
    _train_run(args.dataset, args.variant, plan, args.seed, args.out, args.init)
    return EXIT_OK


def _load_model(path):
    model, manifest = load_checkpoint(path)
    pixel_mean = np.array(manifest.get("extra", {}).get("pixel_mean", [0.0, 0.0, 0.0]))
    return model, pixel_mean


def _track_run(dataset_root, checkpoint, split, out):
    model, pixel_mean = _load_model(checkpoint)
    records, scores = run_split(model, dataset_root, split, pixel_mean)
    os.makedirs(out, exist_ok=True)
    write_tracks(os.path.join(out, "tracks.csv"), records)
    write_scores(os.path.join(out, "scores.csv"), scores)
    return records, scores


def cmd_track(args):
    _echo(args.out, "track", {"dataset": args.dataset, "checkpoint": args.checkpoint, "split": args.split})
    _track_run(args.dataset, args.checkpoint, args.split, args.out)
    return EXIT_OK


def _eval_run(dataset_root, tracks, scores, split, thetas, exact=False):
    manifest = read_manifest(dataset_root)
    records = read_tracks(tracks)
    score_map = read_scores(scores) if scores else None
    rep = evaluate(dataset_root, manifest, records, score_map, split=split, thetas=thetas, exact=exact)
    return _fractions_as_text(rep)


def _fractions_as_text(obj):
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if isinstance(obj, dict):
        return {k: _fractions_as_text(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_fractions_as_text(v) for v in obj]
    return obj


def cmd_eval(args):
    _echo(args.out, "eval", {"dataset": args.dataset, "tracks": args.tracks, "scores": args.scores,
                             "split": args.split, "theta": list(args.theta), "exact": args.exact})
    rep = _eval_run(args.dataset, args.tracks, args.scores, args.split, args.theta, args.exact)
    _dump(os.path.join(args.out, "report.json"), rep)
    print(json.dumps({"ap": rep.get("ap", {}).get("mean"), "localization": rep["localization"]["mean"],
                      "mean_mota": rep["mean_mota"]}))
    return EXIT_OK


def _hot(v):
    v = np.clip(v, 0.0, 1.0)
    rgb = np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)
    return (rgb * 255).astype(np.uint8)


def _draw_box(img, box, color):
    x, y, w, h = box
    hh, ww = img.shape[:2]
    x1, y1 = min(x + w - 1, ww - 1), min(y + h - 1, hh - 1)
    img[y, x:x1 + 1] = color
    img[y1, x:x1 + 1] = color
    img[y:y1 + 1, x] = color
    img[y:y1 + 1, x1] = color


def cmd_render(args):
    from .localizer import extract_detection
    from .tensor import bilinear_resize

    _echo(args.out, "render", {"dataset": args.dataset, "checkpoint": args.checkpoint, "video": args.video,
                               "tool": args.tool, "frames": args.frames})
    model, pixel_mean = _load_model(args.checkpoint)
    split = next((s for s, vids in read_manifest(args.dataset)["splits"].items() if args.video in vids), None)
    if split is None:
        raise UsageError(f"video {args.video!r} not in the dataset manifest")
    v = PresenceDataset(args.dataset, split).video(args.video)
    maps, logits = infer_video(model, v.frames, pixel_mean)
    gt = read_gt_boxes(args.dataset, args.video)
    lo, hi = (int(t) for t in args.frames.split(":")) if args.frames else (0, len(v.frames))
    h, w = v.frames.shape[1:3]
    for f in range(lo, min(hi, len(v.frames))):
        frame = v.frames[f].copy()
        channel = maps[f, args.tool]
        up = bilinear_resize(channel[None, None], h, w)[0, 0]
        span = up.max() - up.min()
        heat = _hot((up - up.min()) / span if span > 0 else np.zeros_like(up))
        overlay = frame.copy()
        for c, box, _ in gt.get(f, []):
            if c == args.tool:
                _draw_box(frame, box, (255, 0, 0))
        if logits[f, args.tool] >= 0:
            d = extract_detection(channel, (h, w), 1.0, args.tool)
            if d is not None:
                _draw_box(frame, d.box.as_tuple(), (0, 255, 0))
                overlay[d.mask] = (overlay[d.mask] // 2 + np.array([0, 127, 0], dtype=np.uint8))
        write_ppm(os.path.join(args.out, f"{args.video}_{f:06d}.ppm"), np.concatenate([frame, heat, overlay], axis=1))
    return EXIT_OK


def run_desk(out, seed=0, preset="desk", thetas=DEFAULT_THETAS, videos=(10, 2, 3), frames=300):
    """Synthetic benchmark, baseline then ConvLSTM training, tracking and
    evaluation of both models on the test split. Returns the summary dict."""
    os.makedirs(out, exist_ok=True)
    plan = get_plan(preset)
    data = os.path.join(out, "data")
    cfg = SceneConfig(seed=seed)
    generate(cfg, data, sum(videos), frames, splits=videos, overwrite=True)
    _echo(out, "desk", {"seed": seed, "preset": preset, "theta": list(thetas), "videos": list(videos),
                        "frames": frames, "plan": plan.to_dict(), "scene": cfg.to_dict()})
    summary = {}
    base_dir = os.path.join(out, "R+C_M1_mask")
    _train_run(data, "R+C_M1_mask", plan, seed, base_dir)
    cl_dir = os.path.join(out, "R+CL+C")
    _train_run(data, "R+CL+C", plan, seed, cl_dir, init=os.path.join(base_dir, "checkpoint"))
    for name, d in (("R+C_M1_mask", base_dir), ("R+CL+C", cl_dir)):
        _track_run(data, os.path.join(d, "checkpoint"), "test", d)
        rep = _eval_run(data, os.path.join(d, "tracks.csv"), os.path.join(d, "scores.csv"), "test", thetas)
        _dump(os.path.join(d, "report.json"), rep)
        summary[name] = {
            "map": rep["ap"]["mean"],
            "localization": rep["localization"]["mean"],
            "mean_mota": rep["mean_mota"],
            "motp": {k: m["motp"] for k, m in rep["mot"].items()},
            "mota": {k: m["mota"] for k, m in rep["mot"].items()},
        }
    _dump(os.path.join(out, "summary.json"), summary)
    return summary


def cmd_desk(args):
    summary = run_desk(args.out, args.seed, args.preset, args.theta)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="wstrack", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--videos", type=int, default=15)
    s.add_argument("--frames", type=int, default=300)
    s.add_argument("--splits", help="train,val,test counts (default 40/10/30 proportion)")
    s.add_argument("--skewed", action="store_true", help="presence frequencies in exact 1:2:4:4:4:8:16 ratios")
    s.add_argument("--multi-instance", action="store_true")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model variant on presence labels")
    t.add_argument("--dataset", required=True)
    t.add_argument("--variant", default="R+CL+C")
    t.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init", help="trained baseline checkpoint to start phase 2 from")
    t.add_argument("--epochs1", type=int)
    t.add_argument("--epochs2", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="detect and track tools in a split")
    k.add_argument("--dataset", required=True)
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--split", default="test")
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score a tracks file against ground truth")
    e.add_argument("--dataset", required=True)
    e.add_argument("--tracks", required=True)
    e.add_argument("--scores")
    e.add_argument("--split", default="test")
    e.add_argument("--theta", type=parse_thetas, default=DEFAULT_THETAS)
    e.add_argument("--exact", action="store_true", help="every metric as an exact fraction")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="frame / heat map / mask overlay panels")
    r.add_argument("--dataset", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--video", required=True)
    r.add_argument("--tool", type=int, default=0)
    r.add_argument("--frames", help="start:stop frame range")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    d = sub.add_parser("desk", help="end-to-end desk-scale run")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    d.add_argument("--theta", type=parse_thetas, default=DEFAULT_THETAS)
    d.set_defaults(func=cmd_desk)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("WSTRACK_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(int(threads)):
                return args.func(args)
        return args.func(args)
    except (UsageError, RecordError, FirewallError, FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"wstrack: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteGradient, MemoryError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"wstrack: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
