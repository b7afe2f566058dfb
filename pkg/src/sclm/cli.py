"""Command-line entry point: ``sclm {train,fuse,enhance,bench,stats,verify}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import accounting, io, plotting
from .glle import FusedModel, Topology
from .local_adapt import DEFAULT_POOL_K, enhance
from .reparam import collapse
from .training import TrainConfig, train
from .verify import FUSION_TOL, fusion_discrepancy, fusion_suite, gradient_suite

log = logging.getLogger("sclm")


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 1080x1920, got {text!r}") from None
    return h, w


def _load_fused(path):
    loaded = io.load_model(path)
    if isinstance(loaded, FusedModel):
        return loaded
    model, curve, meta = loaded
    return collapse(model, curve, meta=meta)


def _emit_csv(header, rows, path=None):
    w = csv.writer(sys.stdout)
    w.writerow(header)
    w.writerows(rows)
    if path is not None:
        with open(path, "w", newline="") as fh:
            fw = csv.writer(fh)
            fw.writerow(header)
            fw.writerows(rows)


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth = io.SynthConfig(exposure_tiers=args.ev or (-1.5, -1.0), gamma_jitter=args.gamma_jitter)
    if args.data:
        images = [io.load_image(p).astype(np.float64) for p in io.list_images(args.data)]
        if not images:
            raise SystemExit(f"no images in {args.data}")
    else:
        images, _ = io.sample_photos()
    size = max(args.crop, min(96, min(min(im.shape[1:]) for im in images)))
    pairs = io.make_pairs(images, args.pairs, size, synth, seed=args.seed)
    cfg = TrainConfig(steps=args.steps, crop=args.crop, batch=args.batch, topology=args.topology,
                      pool_k=args.pool_k, seed=args.seed)
    result = train(pairs, cfg, loss_log=out / "loss.csv")
    meta = {"seed": args.seed, "steps": args.steps, "pool_k": args.pool_k}
    io.save_model(out / "model_branch.json", result.model, result.curve, meta)
    plotting.plot_loss(range(len(result.losses)), result.losses, result.lrs, out / "loss.png")
    print(f"final loss {result.losses[-1]:.5f}; wrote {out / 'model_branch.json'}, loss.csv, loss.png")
    return 0


def cmd_fuse(args):
    loaded = io.load_model(args.model)
    if isinstance(loaded, FusedModel):
        raise SystemExit("model is already fused")
    model, curve, meta = loaded
    fused = collapse(model, curve, meta=meta)
    worst = fusion_discrepancy(model, probes=args.probes, size=args.probe_size, seed=args.seed, fused=fused)
    io.save_model(args.out, fused)
    tol = FUSION_TOL[np.float32]
    print(f"params {accounting.count_params(fused)}")
    print(f"max_discrepancy {worst:.3e} over {args.probes} probes (tol {tol:.0e})")
    return 0 if worst < tol else 1


def cmd_enhance(args):
    fused = _load_fused(args.model)
    src = Path(args.input)
    files = io.list_images(src) if src.is_dir() else [src]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = accounting.default_workers()
    for f in files:
        x = io.load_image(f)[None]
        y = enhance(x, fused, pool_k=args.pool_k, workers=workers)
        target = out / (f.stem + ".png")
        io.save_image(target, y)
        if args.figures:
            plotting.plot_comparison(x[0], y[0], out / (f.stem + "_compare.png"))
        print(target)
    return 0


def cmd_bench(args):
    h, w = args.size
    branch = None
    if args.model:
        loaded = io.load_model(args.model)
        if isinstance(loaded, FusedModel):
            fused = loaded
        else:
            branch, curve, meta = loaded
            fused = collapse(branch, curve, meta=meta)
    else:
        from .verify import trained_like
        branch = trained_like(args.topology, seed=args.seed)
        fused = collapse(branch)
    params = accounting.count_params(fused)
    macs = accounting.conv_macs(fused, h, w)
    gflops = accounting.count_flops(fused, h, w, args.flops)
    print(f"# params={params} conv_gmacs={macs / 1e9:.3f} gflops({args.flops})={accounting.round_sig(gflops)}"
          f" pointwise_gops={accounting.pointwise_ops(h, w) / 1e9:.3f}")
    if args.no_timing:
        return 0
    rows = accounting.bench(fused, branch, h, w, repeats=args.repeats, threads=args.threads)
    rows = [(p, t, r, f"{m:.3f}", f"{q:.3f}") for p, t, r, m, q in rows]
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    _emit_csv(["path", "threads", "repeats", "median_ms", "p95_ms"], rows, out / "bench.csv" if out else None)
    if out:
        plotting.plot_bench([(p, t, r, float(m), float(q)) for p, t, r, m, q in rows], out / "bench.png")
    return 0


def cmd_stats(args):
    rows = io.dataset_stats(args.dirs)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    _emit_csv(["directory", "images", "mean_y"], [(d, n, f"{y:.2f}") for d, n, y in rows],
              out / "stats.csv" if out else None)
    if out:
        plotting.plot_stats([(Path(d).name, n, y) for d, n, y in rows], out / "stats.png")
    return 0


def cmd_verify(args):
    topologies = list(Topology) if args.topology == "all" else [Topology.parse(args.topology)]
    results = fusion_suite(topologies, probes=args.probes, seed=args.seed)
    grad_topology = "db" if args.topology == "all" else args.topology
    results += gradient_suite(grad_topology, points=args.points, seed=args.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="sclm", description="Single-convolution low-light enhancer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a multi-branch model on synthetic low-light pairs")
    t.add_argument("--data", help="directory of clean photos (default: bundled sample photos)")
    t.add_argument("--topology", choices=[x.value for x in Topology], default="db")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--crop", type=int, default=64)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--pairs", type=int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ev", type=float, action="append", help="exposure tier in EV (repeatable)")
    t.add_argument("--gamma-jitter", type=float, default=0.0)
    t.add_argument("--pool-k", type=int, default=DEFAULT_POOL_K)
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="collapse a branch model into the 87-parameter model")
    f.add_argument("--model", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--probes", type=int, default=16)
    f.add_argument("--probe-size", type=int, default=32)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("enhance", help="enhance an image or every image in a directory")
    e.add_argument("input")
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--pool-k", type=int, default=DEFAULT_POOL_K)
    e.add_argument("--figures", action="store_true", help="also write side-by-side comparison figures")
    e.set_defaults(func=cmd_enhance)

    b = sub.add_parser("bench", help="parameter/FLOP accounting and timing")
    b.add_argument("--model")
    b.add_argument("--topology", choices=[x.value for x in Topology], default="db")
    b.add_argument("--size", type=_parse_size, default=(1080, 1920))
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--threads", type=int, default=None)
    b.add_argument("--flops", choices=["1x", "2x"], default="1x")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-timing", action="store_true", help="print the accounting header only")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("stats", help="mean Y (0-255) per image directory")
    s.add_argument("dirs", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    v = sub.add_parser("verify", help="gradient and fusion-equivalence checks")
    v.add_argument("--topology", choices=["all"] + [x.value for x in Topology], default="all")
    v.add_argument("--points", type=int, default=20)
    v.add_argument("--probes", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
