"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""
import argparse
import csv
import hashlib
import os
from pathlib import Path
import sys

import numpy as np

from . import (config, features, invariance, matching, net, objective, pairgen,
               surrogate, synth, tensorimg, transforms)
from .errors import ExemplarError, NonFiniteLoss, ParseError

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp"}


class UsageError(Exception):
    pass


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("EXEMPLAR_THREADS", "1"))


def _load_config(args):
    cfg = config.RunConfig.load(args.config) if args.config else config.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", str(args.seed))
    return cfg


def list_images(path):
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"image directory not found: {path}")
    files = sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no images in {path}")
    return files


def load_images(cfg):
    root = cfg.int("seed")
    if cfg.get("data.images"):
        return [tensorimg.read_image(f) for f in list_images(cfg.get("data.images"))]
    count = cfg.int("data.synthetic_images")
    if count <= 0:
        raise UsageError("set data.images or data.synthetic_images")
    size = cfg.int("data.image_size")
    return synth.random_images(config.stage_rng(root, "images"), count, size, size)


def make_dataset(cfg, threads=1, n_classes=None, k=None, ranges=None):
    root = cfg.int("seed")
    images = load_images(cfg)
    seeds = surrogate.sample_seeds(
        images, n_classes or cfg.int("data.n_classes"), cfg.int("data.patch_size"),
        cfg.floats("data.seed_scale"), config.stage_rng(root, "seeds"))
    return surrogate.build_dataset(seeds, k or cfg.int("data.samples_per_class"),
                                   ranges or cfg.ranges(), config.stage_rng(root, "augment"),
                                   workers=threads)


def train_on(ds, cfg, arch=None):
    spec = net.parse_arch(arch or cfg.get("train.arch"), ds.patch_size, ds.channels)
    schedule = cfg.schedule()
    tr, val = surrogate.split_validation(ds, cfg.float("data.val_frac"),
                                         config.stage_rng(cfg.int("seed"), "split"))
    return net.train(tr, spec, schedule, val)


def sha256(path):
    return surrogate.file_hash(path)


# ---------------------------------------------------------------- commands ----

def cmd_gen(args):
    cfg = _load_config(args)
    ds = make_dataset(cfg, _threads(args))
    surrogate.save_exds(ds, args.out)
    manifest = cfg.to_text() + f"dataset_sha256 = {sha256(args.out)}\n"
    with open(str(args.out) + ".manifest", "w") as fh:
        fh.write(manifest)
    print(f"wrote {args.out}: {ds.n_classes} classes x {ds.samples_per_class} samples")
    print(f"manifest sha256 {hashlib.sha256(manifest.encode()).hexdigest()}")


def _schedule_from(args, cfg):
    sched = cfg.schedule()
    for name in ("lr0", "momentum", "lr_decay_factor", "plateau_patience", "batch_size",
                 "max_rounds"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(sched, name, v)
    return sched


def cmd_train(args):
    cfg = _load_config(args)
    ds = surrogate.load_exds(args.dataset)
    try:
        spec = net.parse_arch(args.arch or cfg.get("train.arch"), ds.patch_size, ds.channels)
    except ParseError as e:
        raise UsageError(f"bad architecture code: {e}") from None
    sched = _schedule_from(args, cfg)
    tr, val = surrogate.split_validation(ds, cfg.float("data.val_frac"),
                                         config.stage_rng(cfg.int("seed"), "split"))
    state = net.load_checkpoint(args.resume).train() if args.resume else None
    try:
        state, history = net.train(tr, spec, sched, val, state=state)
    except NonFiniteLoss as e:
        net.save_checkpoint(e.state, args.out)
        print(f"error: {e}; last good state saved to {args.out}", file=sys.stderr)
        return 3
    net.save_checkpoint(state, args.out)
    history.write_csv(str(args.out) + ".history.csv")
    shapes = spec.with_classifier(ds.n_classes).shape_chain()
    for layer, shape in zip(spec.with_classifier(ds.n_classes).layers, shapes):
        print(f"  {type(layer).__name__:15s} -> {shape[0]}x{shape[1]}x{shape[2]}")
    if history.epochs:
        last = history.epochs[-1]
        print(f"wrote {args.out}: {len(history.epochs)} epochs, val_err {last[2]:.4f}, "
              f"lr {last[3]:.3g}")
    else:
        print(f"wrote {args.out}: no epochs run")
    return 0


def _pixel_mean(args, state):
    if getattr(args, "dataset", None):
        return surrogate.load_exds(args.dataset).pixel_mean
    return np.zeros((state.spec.input_size, state.spec.input_size, state.spec.input_channels))


def cmd_extract(args):
    state = net.load_checkpoint(args.net)
    mean = _pixel_mean(args, state)
    files = []
    for item in args.images:
        files.extend(list_images(item) if Path(item).is_dir() else [Path(item)])
    for f in files:
        if not f.exists():
            raise UsageError(f"image not found: {f}")
    layer = args.layer or len(state.spec.weight_layers()) - 1
    run = features.extractor(state, layer, None if args.pooling == "none" else args.pooling, mean)
    vecs = np.array([run(tensorimg.read_image(f)) for f in files])
    features.save_exdesc(args.out, vecs, layer, args.pooling, sha256(args.net))
    print(f"wrote {args.out}: {vecs.shape[0]} x {vecs.shape[1]}")
    return 0


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_sweep(args):
    cfg = _load_config(args)
    grid = args.grid.split(",") if args.grid else [g for g in cfg.get("sweep.grid").split(",") if g]
    kind = args.kind
    rows = []
    if kind in ("classes", "samples"):
        for g in grid:
            n = int(g)
            ds = make_dataset(cfg, _threads(args), n_classes=n if kind == "classes" else None,
                              k=n if kind == "samples" else None)
            _, hist = train_on(ds, cfg)
            rows.append((n, hist.epochs[-1][2], min(hist.val_errors), hist.epochs[-1][1],
                         len(hist.epochs)))
        header = ["n_classes" if kind == "classes" else "samples_per_class", "val_err",
                  "best_val_err", "train_loss", "epochs"]
    elif kind == "ablation":
        base = cfg.ranges()
        grid = grid or ["none"] + sorted(base.enabled)
        for fam in grid:
            if fam != "none" and fam not in transforms.FAMILIES:
                raise UsageError(f"unknown transform family {fam!r}")
            ranges = base if fam == "none" else base.without(fam)
            ds = make_dataset(cfg, _threads(args), ranges=ranges)
            _, hist = train_on(ds, cfg)
            rows.append((fam, hist.epochs[-1][2], min(hist.val_errors)))
        header = ["removed_family", "val_err", "best_val_err"]
    elif kind == "magnitude":
        state, mean, patches, pca = _net_and_patches(args, cfg)
        layer = cfg.int("sweep.layer") or len(state.spec.weight_layers()) - 1
        pooling = cfg.get("sweep.pooling")
        run = features.extractor(state, layer, None if pooling == "none" else pooling, mean)
        for fam in grid or invariance.INVARIANCE_FAMILIES:
            curve = invariance.distance_curve(run, patches, fam, pca=pca)
            rows.extend((fam, m, r, n) for m, r, n in
                        zip(curve.magnitudes, curve.raw_distances, curve.normalized))
        header = ["family", "magnitude", "raw", "normalized"]
    elif kind == "patchsize":
        if not args.pairs or not args.regions:
            raise UsageError("patchsize sweep needs --pairs and --regions")
        sizes = [int(g) for g in grid] or [48, 64, 80, 96]
        for size in sizes:
            for name in args.descriptors:
                desc = make_descriptor(name, args, size)
                results = match_manifest(args.pairs, args.regions, desc, name, size)
                rows.append((size, name, float(np.mean([r[4] for r in results]))))
        header = ["patch_size", "descriptor", "mean_AP"]
    else:
        raise UsageError(f"unknown sweep kind {kind!r}")
    _write_rows(args.out, header, rows)
    print(f"wrote {args.out}: {len(rows)} rows")
    return 0


def _net_and_patches(args, cfg):
    root = cfg.int("seed")
    if args.net:
        state = net.load_checkpoint(args.net)
        if not args.dataset:
            raise UsageError("--net needs --dataset for the input normalization")
        ds = surrogate.load_exds(args.dataset)
    else:
        ds = make_dataset(cfg, _threads(args))
        state, _ = train_on(ds, cfg)
    images = load_images(cfg)
    seeds = surrogate.sample_seeds(images, cfg.int("sweep.patches"), ds.patch_size,
                                   (1.0, 1.0), config.stage_rng(root, "eval-patches"))
    return state, ds.pixel_mean, [s[0] for s in seeds], ds.pca


def make_descriptor(name, args, patch_size):
    if name == "pixel":
        fn = matching.pixel_descriptor
    elif name == "gradhist":
        fn = matching.gradient_histogram_descriptor
    elif name.startswith("net"):
        if not args.net:
            raise UsageError("net descriptors need --net")
        state = net.load_checkpoint(args.net)
        mean = _pixel_mean(args, state)
        layer = int(name.split(":")[1]) if ":" in name else 2
        run = features.extractor(state, layer, "grid4", mean)
        fn = run
    else:
        raise UsageError(f"unknown descriptor {name!r}")

    def describe(img, regions):
        return np.array([fn(matching.normalize_patch(img, r, patch_size)) for r in regions])
    return describe


def match_manifest(manifest, regions_dir, describe, name, patch_size):
    rows = []
    base_dir = Path(manifest).parent
    cache = {}
    for row in pairgen.read_manifest(manifest):
        reg_a = Path(regions_dir) / (Path(row["base"]).stem + ".reg")
        reg_b = Path(regions_dir) / (row["pair_id"] + ".reg")
        for f in (reg_a, reg_b):
            if not f.exists():
                raise UsageError(f"missing region file: {f}")
        if row["base"] not in cache:
            img_a = tensorimg.read_image(base_dir / row["base"])
            regions_a = matching.parse_regions(reg_a)
            cache[row["base"]] = (regions_a, describe(img_a, regions_a))
        regions_a, desc_a = cache[row["base"]]
        img_b = tensorimg.read_image(base_dir / row["image"])
        regions_b = matching.parse_regions(reg_b)
        mapping = pairgen.load_mapping(base_dir / row["mapping"])
        _, _, ap = matching.evaluate_pair(regions_a, regions_b, desc_a,
                                          describe(img_b, regions_b), mapping)
        rows.append((row["pair_id"], row["family"], row["magnitude"], name, ap))
    return rows


def cmd_match(args):
    describe = make_descriptor(args.descriptor, args, args.patch_size)
    rows = match_manifest(args.pairs, args.regions, describe, args.descriptor, args.patch_size)
    matching.write_results_csv(args.out, rows)
    summary = str(args.out).replace(".csv", "") + ".summary.csv"
    matching.write_summary_csv(summary, rows)
    print(f"wrote {args.out} ({len(rows)} pairs) and {summary}")
    return 0


def cmd_pairs(args):
    """Synthesize benchmark pairs, mappings, region files and a manifest."""
    out = Path(args.out)
    (out / "regions").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed or 0)
    bases = [Path(b) for b in args.bases]
    if not bases:
        size = 288
        img_rng = np.random.default_rng(config.stage_seed(args.seed or 0, "pair-bases"))
        bases_img = [synth.random_image(img_rng, size, size, 40) for _ in range(args.synthetic)]
        names = [f"base{i:02d}.png" for i in range(len(bases_img))]
    else:
        bases_img = [tensorimg.read_image(b) for b in bases]
        names = [b.name for b in bases]
    rows = []
    for name, base in zip(names, bases_img):
        tensorimg.write_image(out / name, base)
        regions = pairgen.random_regions(base, args.regions, rng)
        matching.write_regions(out / "regions" / (Path(name).stem + ".reg"), regions)
        for k, pair in enumerate(pairgen.generate_pairs(base, rng=rng)):
            pid = f"{Path(name).stem}_{pair.family}_{k % 4}"
            img_name = pid + ".png"
            tensorimg.write_image(out / img_name, pair.image)
            map_name = pid + (".hom" if isinstance(pair.mapping, pairgen.Homography) else ".grid")
            pairgen.save_mapping(out / map_name, pair.mapping)
            h, w = pair.image.shape[:2]
            target = []
            for r in regions:
                p = pair.mapping.project(r)
                # simulated detector jitter
                p = matching.EllipseRegion(p.u + rng.normal(0, 0.5), p.v + rng.normal(0, 0.5),
                                           p.a, p.b, p.c)
                if 0 <= p.u <= w - 1 and 0 <= p.v <= h - 1:
                    target.append(p)
            matching.write_regions(out / "regions" / (pid + ".reg"), target)
            rows.append((pid, pair.family, pair.magnitude, name, img_name, map_name))
    pairgen.write_manifest(out / "pairs.csv", rows)
    print(f"wrote {len(rows)} pairs to {out}")
    return 0


def cmd_objective(args):
    state = net.load_checkpoint(args.net)
    ds = surrogate.load_exds(args.dataset)
    report = objective.decompose(state, ds)
    if not report.is_finite():
        print("error: non-finite objective report", file=sys.stderr)
        return 3
    report.write_csv(args.out)
    print(f"total {report.total:.6g} = classification {report.classification_term:.6g}"
          f" + regularizer {report.regularizer_term:.6g}")
    return 0


# ------------------------------------------------------------------ parser ----

def build_parser():
    p = argparse.ArgumentParser(prog="exemplar", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--seed", type=int, help="root seed (overrides config)")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--threads", type=int, help="worker threads (default $EXEMPLAR_THREADS or 1)")

    g = sub.add_parser("gen", help="build a surrogate dataset (EXDS)")
    common(g, "output EXDS file; a .manifest sidecar is written next to it")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network (EXNET + history CSV: epoch,train_loss,val_err,lr)")
    common(t, "output EXNET checkpoint")
    t.add_argument("--dataset", required=True)
    t.add_argument("--arch", help="architecture code, e.g. 16c5-16c5-32f")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--lr0", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    t.add_argument("--plateau-patience", dest="plateau_patience", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-rounds", dest="max_rounds", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="pooled descriptors for images (EXDESC)")
    common(e, "output EXDESC file (+ .txt sidecar)")
    e.add_argument("--net", required=True)
    e.add_argument("--dataset", help="EXDS whose pixel mean normalizes inputs")
    e.add_argument("--layer", type=int, default=0, help="1-based weight layer (default: penultimate)")
    e.add_argument("--pooling", default="pyramid", choices=("quadrant", "pyramid", "grid4", "none"))
    e.add_argument("images", nargs="+", help="image files or directories")
    e.set_defaults(func=cmd_extract)

    s = sub.add_parser("sweep", help="experiment drivers; CSV columns depend on kind "
                       "(classes/samples: n,val_err,best_val_err,train_loss,epochs; "
                       "ablation: removed_family,val_err,best_val_err; "
                       "magnitude: family,magnitude,raw,normalized; "
                       "patchsize: patch_size,descriptor,mean_AP)")
    common(s, "output CSV")
    s.add_argument("kind", choices=("classes", "samples", "ablation", "magnitude", "patchsize"))
    s.add_argument("--grid", help="comma-separated grid values (overrides sweep.grid)")
    s.add_argument("--net")
    s.add_argument("--dataset")
    s.add_argument("--pairs")
    s.add_argument("--regions")
    s.add_argument("--descriptors", nargs="+", default=["gradhist"])
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("match", help="matching AP per pair (pair_id,transform,magnitude,descriptor,AP) "
                       "and per transform summary")
    common(m, "output CSV")
    m.add_argument("--pairs", required=True, help="pairs manifest CSV")
    m.add_argument("--regions", required=True, help="directory of .reg files")
    m.add_argument("--descriptor", default="gradhist", help="pixel | gradhist | net[:layer]")
    m.add_argument("--net")
    m.add_argument("--dataset")
    m.add_argument("--patch-size", dest="patch_size", type=int, default=64)
    m.set_defaults(func=cmd_match)

    pr = sub.add_parser("pairs", help="synthesize matching pairs, mappings and region files")
    pr.add_argument("--out", required=True, help="output directory")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--synthetic", type=int, default=1, help="number of synthetic base images")
    pr.add_argument("--regions", type=int, default=20, help="regions per base image")
    pr.add_argument("bases", nargs="*", help="base images (> 256x256); synthetic if omitted")
    pr.set_defaults(func=cmd_pairs)

    o = sub.add_parser("objective", help="objective decomposition CSV (class_id,regularizer_gap + totals)")
    common(o, "output CSV")
    o.add_argument("--net", required=True)
    o.add_argument("--dataset", required=True)
    o.set_defaults(func=cmd_objective)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (UsageError, config.ConfigError, FileNotFoundError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ExemplarError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
