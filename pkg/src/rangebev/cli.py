"""Command-line entry points.

Subcommands: gen-data, train, infer, eval, gradcheck, export-encodings,
report.  Errors are emitted as one JSON object on stderr and a non-zero
exit code; successful runs echo their resolved configuration into the
output directory so every artifact is reproducible from its own files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .bev import load_boxes, load_point_cloud, save_boxes
from .config import ConfigError, RunConfig
from .decode import average_precision, Detection
from .bev import OrientedBox
from .encodings import encoding_arrays
from .gradcheck import run_gradcheck
from .model import load_checkpoint
from .report import render_attention_maps, render_pr_curves, render_training_curves
from .rtns import write_pgm, write_rtns
from .train import (TrainConfig, evaluate_model, generate_dataset, infer_scene,
                    load_dataset, train)


def _fail(message, code=1):
    json.dump({"error": message}, sys.stderr)
    sys.stderr.write("\n")
    return code


def _load_config(path):
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.load(path)


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    manifest = generate_dataset(args.out, args.count, args.seed, cfg.scene,
                                force=args.force)
    cfg.dump(os.path.join(args.out, "resolved_config.json"))
    print(f"wrote {manifest['count']} scenes to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    scenes = load_dataset(args.data)
    val_scenes = load_dataset(args.val_data) if args.val_data else None
    os.makedirs(args.out, exist_ok=True)
    cfg.dump(os.path.join(args.out, "resolved_config.json"))

    def echo(rec):
        if "val_ap" in rec:
            print(f"epoch {rec['epoch']}: val mAP = {rec['val_ap']}")

    model, metrics, _ = train(
        cfg.model, cfg.train, scenes, val_scenes=val_scenes,
        voxel_cfg=cfg.voxel, out_dir=args.out, log_cb=echo,
    )
    last = [m for m in metrics if "total" in m][-1]
    print(f"finished: final total loss {last['total']:.4f}, "
          f"checkpoint in {os.path.join(args.out, 'checkpoint')}")
    return 0


def cmd_infer(args):
    model, meta = load_checkpoint(args.ckpt)
    cfg = _load_config(args.config)
    points = load_point_cloud(args.input)
    expected_c = model.config.bev_channels
    got_h, got_w = cfg.voxel.height, cfg.voxel.width
    dets, attention = infer_scene(
        model, points, cfg.voxel,
        score_threshold=cfg.score_threshold, nms_iou=cfg.nms_iou,
        raw_dims=cfg.train.raw_dims, dump_attention=args.dump_attention,
    )
    os.makedirs(args.out, exist_ok=True)
    det_path = os.path.join(args.out, "detections.json")
    with open(det_path, "w") as f:
        json.dump([d.to_dict(frame=0) for d in dets], f, indent=2)
    print(f"{len(dets)} detections -> {det_path}")
    if args.dump_attention:
        if attention is None or not attention:
            print("no attention layers in this model; nothing dumped")
        else:
            adir = os.path.join(args.out, "attention")
            os.makedirs(adir, exist_ok=True)
            for name, fa, fb in attention:
                base = os.path.join(adir, name.replace(".", "_"))
                for branch, data in (("a", fa), ("b", fb)):
                    write_rtns(f"{base}_{branch}.rtns", data)
                    write_pgm(f"{base}_{branch}.pgm", np.asarray(data)[0, 0])
            render_attention_maps(attention, adir)
            print(f"attention maps for {len(attention)} layers -> {adir}")
    return 0


def cmd_eval(args):
    with open(args.dets) as f:
        det_doc = json.load(f)
    dets = []
    for d in det_doc:
        box = OrientedBox(cx=d["cx"], cy=d["cy"], cz=d["cz"], l=d["l"], w=d["w"],
                          h=d["h"], yaw=d["yaw"], cls=d["class"])
        dets.append((d.get("frame", 0), Detection(box=box, score=d["score"],
                                                  cls=d["class"])))
    gts = [(0, b) for b in load_boxes(args.labels)]
    report = average_precision(dets, gts, iou_threshold=args.iou)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "eval_report.json")
    with open(out_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    render_pr_curves(report.to_dict(), args.out)
    print(f"mAP @ IoU {args.iou}: {report.mean_ap} -> {out_path}")
    return 0


def cmd_gradcheck(args):
    results = run_gradcheck(args.op, seeds=args.seeds, base_seed=args.seed)
    width = max(len(n) for n in results)
    ok = True
    for name, (err, passed) in sorted(results.items()):
        ok &= passed
        print(f"{name:<{width}}  max rel err {err:.3e}  "
              f"{'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_export_encodings(args):
    r, c, rho = encoding_arrays(args.height, args.width)
    os.makedirs(args.out, exist_ok=True)
    xi = np.stack([r, c])[None]
    write_rtns(os.path.join(args.out, "xi.rtns"), xi)
    write_rtns(os.path.join(args.out, "rho.rtns"), rho[None, None])
    write_pgm(os.path.join(args.out, "xi_row.pgm"), r)
    write_pgm(os.path.join(args.out, "xi_col.pgm"), c)
    write_pgm(os.path.join(args.out, "rho.pgm"), rho)
    print(f"encodings for {args.height}x{args.width} -> {args.out}")
    return 0


def cmd_report(args):
    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.metrics:
        png, csv_path = render_training_curves(args.metrics, args.out)
        wrote += [png, csv_path]
    if args.eval_report:
        with open(args.eval_report) as f:
            doc = json.load(f)
        png, csv_path = render_pr_curves(doc, args.out)
        wrote += [png, csv_path]
    if not wrote:
        raise ConfigError("report needs --metrics and/or --eval-report")
    for p in wrote:
        print(p)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="rangebev",
        description="BEV LiDAR detection desk pipeline with range-aware "
                    "attention convolutions",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="run detection on one point cloud")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--config")
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--dump-attention", action="store_true")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score detections against labels")
    e.add_argument("--dets", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--op", default="all")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--seeds", type=int, default=20)
    gc.set_defaults(fn=cmd_gradcheck)

    x = sub.add_parser("export-encodings", help="dump position/range encodings")
    x.add_argument("--h", dest="height", type=int, required=True)
    x.add_argument("--w", dest="width", type=int, required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_encodings)

    r = sub.add_parser("report", help="render figures from run artifacts")
    r.add_argument("--metrics")
    r.add_argument("--eval-report")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, FileExistsError, ValueError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
