"""Command-line entry point: synth, train, render, eval, prune-report."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import format_config, read_config, resolve_config
from .cvpm import combine, prune_mask
from .data import SyntheticSpec, load_colmap_text, synthetic_dataset, write_colmap_text
from .errors import ConfigurationError, GsfuseError
from .imageio import read_image, write_depth_pgm, write_image
from .losses import psnr, ssim
from .trainer import Trainer, evaluate, render_model

CHECKPOINT = "checkpoint.gsf"


def build_parser():
    p = argparse.ArgumentParser(prog="gsfuse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic COLMAP-text dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gaussians", type=int, default=150)
    s.add_argument("--floaters", type=int, default=0)
    s.add_argument("--outliers", type=int, default=0)
    s.add_argument("--cameras", type=int, default=12)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--rig", choices=("grid", "orbit"), default="grid")
    s.add_argument("--held-out", type=int, default=2)

    t = sub.add_parser("train", help="optimize a scene and write a checkpoint")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--views-per-step", type=int)
    t.add_argument("--no-cvpm", action="store_true")
    t.add_argument("--no-svc", action="store_true")
    t.add_argument("--no-attention", action="store_true")

    r = sub.add_parser("render", help="render the dataset cameras from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True, help="directory with cameras.txt / images.txt")
    r.add_argument("--out", required=True)
    r.add_argument("--split", choices=("train", "test", "all"), default="all")
    r.add_argument("--depth", action="store_true", help="also write 16-bit PGM depth maps")

    e = sub.add_parser("eval", help="print PSNR / SSIM on held-out views")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--renders", help="directory of images named like the dataset images")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")

    q = sub.add_parser("prune-report", help="run the pruning mask offline on a checkpoint")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--dataset", required=True)
    q.add_argument("--split", choices=("train", "test", "all"), default="train")
    return p


def _views(ds, split):
    if split == "all":
        return list(range(len(ds.cameras)))
    return list(ds.train if split == "train" else ds.test)


def cmd_synth(a):
    spec = SyntheticSpec(
        seed=a.seed, gaussians=a.gaussians, floaters=a.floaters, outliers=a.outliers,
        cameras=a.cameras, size=a.size, rig=a.rig, held_out=a.held_out,
    )
    scene, ds = synthetic_dataset(spec)
    out = Path(a.out)
    write_colmap_text(out, ds)
    labels = {
        "clean": len(scene.clean),
        "floater": [len(scene.clean) + i for i in scene.labels["floater"]],
        "outlier": [len(scene.clean) + i for i in scene.labels["outlier"]],
        "means": scene.all_gaussians.means.tolist(),
    }
    (out / "labels.json").write_text(json.dumps(labels, sort_keys=True))
    print(f"wrote {len(ds.cameras)} views ({len(ds.test)} held out) to {out}")
    return 0


def cmd_train(a):
    file_values = read_config(a.config) if a.config else {}
    overrides = {
        "total_iterations": a.iterations, "seed": a.seed, "views_per_step": a.views_per_step,
        "use_cvpm": False if a.no_cvpm else None,
        "use_svc": False if a.no_svc else None,
        "use_attention": False if a.no_attention else None,
    }
    cfg = resolve_config(file_values, overrides)
    ds = load_colmap_text(a.dataset)
    if ds.points is None or len(ds.points) == 0:
        raise ConfigurationError("dataset has no points3D.txt; anchors need a point cloud")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    trainer = Trainer(ds, cfg)
    with open(out / "train.log", "w") as log:
        def flush(tr, _res):
            for rec in tr.log_records:
                log.write(rec + "\n")
            tr.log_records.clear()

        trainer.train(cfg.total_iterations, callback=flush)
    save_checkpoint(out / CHECKPOINT, trainer.model, cfg.to_dict(), trainer.iteration)
    msg = f"trained {trainer.iteration} iterations"
    if ds.test and trainer.iteration > 0:
        m = trainer.evaluate()["mean"]
        msg += f"; held-out PSNR {m['psnr']:.2f} dB SSIM {m['ssim']:.3f}"
    print(msg)
    return 0


def _load(a):
    model, meta = load_checkpoint(a.checkpoint)
    cfg = meta["config"]
    min_scale = cfg["min_scale_factor"] * model.bounds.diagonal
    return model, min_scale


def cmd_render(a):
    model, min_scale = _load(a)
    ds = load_colmap_text(a.dataset, load_images=False)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in _views(ds, a.split):
        cam = ds.cameras[i]
        r = render_model(model, cam, min_scale)
        name = Path(ds.names[i])
        write_image(out / name.with_suffix(".ppm").name, r.color.clamp(0, 1))
        if a.depth:
            write_depth_pgm(out / name.with_suffix(".pgm").name, r.depth)
    print(f"rendered {len(_views(ds, a.split))} views to {out}")
    return 0


def _print_table(rows):
    print(f"{'view':<20} {'PSNR':>8} {'SSIM':>7}")
    for r in rows:
        print(f"{r['name']:<20} {r['psnr']:8.2f} {r['ssim']:7.3f}")
    if rows:
        mp = sum(r["psnr"] for r in rows) / len(rows)
        ms = sum(r["ssim"] for r in rows) / len(rows)
        print(f"{'mean':<20} {mp:8.2f} {ms:7.3f}")


def cmd_eval(a):
    ds = load_colmap_text(a.dataset)
    views = _views(ds, a.split)
    rows = []
    if a.checkpoint:
        model, min_scale = _load(a)
        res = evaluate(model, ds.cameras, ds.images, views, min_scale)
        for r in res["views"]:
            rows.append({"name": ds.names[r["view"]], "psnr": r["psnr"], "ssim": r["ssim"]})
    else:
        d = Path(a.renders)
        for i in views:
            name = Path(ds.names[i])
            path = d / name.name
            if not path.exists():
                path = d / name.with_suffix(".ppm").name
            img = read_image(path)
            gt = ds.images[i].to(img.dtype)
            rows.append({"name": name.name, "psnr": psnr(img, gt), "ssim": float(ssim(img, gt))})
    _print_table(rows)
    return 0


def cmd_prune_report(a):
    model, _ = _load(a)
    ds = load_colmap_text(a.dataset, load_images=False)
    means = model.spawned_means().reshape(-1, 3)
    live = model.alive.reshape(-1)
    decisions = []
    for i in _views(ds, a.split):
        dec = prune_mask(means, ds.cameras[i], model.bounds)
        decisions.append(dec)
        rec = {
            "camera": ds.names[i], "flagged": int((dec.mask & live).sum()),
            "near_camera": int((dec.near_camera & live).sum()), "outlier": int((dec.outlier & live).sum()),
        }
        print(json.dumps(rec, sort_keys=True))
    if decisions:
        mask, near, out = combine(decisions)
        print(json.dumps({
            "camera": "any", "flagged": int((mask & live).sum()), "near_camera": int((near & live).sum()),
            "outlier": int((out & live).sum()), "population": int(live.sum()),
        }, sort_keys=True))
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "render": cmd_render,
    "eval": cmd_eval, "prune-report": cmd_prune_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except (GsfuseError, OSError, KeyError, ValueError) as e:
        msg = str(e).strip().splitlines()[0] if str(e).strip() else type(e).__name__
        print(f"gsfuse {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
