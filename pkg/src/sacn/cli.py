"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed files), 3 numerical failure (non-finite loss, failed
gradient check, ablation below threshold).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as D
from .attention import export_attention
from .checkpoint import Checkpoint, restore
from .config import ConfigError, RunConfig, load_config, override, parse_overrides, preset
from .model import format_census
from .tensor import Rng
from .train import MetricsWriter, NumericalError, ablate, evaluate, gradcheck, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("sacn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(args, default_preset: str) -> RunConfig:
    cfg = preset(args.preset or default_preset)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise D.DataError(f"config file not found: {path}")
        cfg = load_config(path, cfg)
    updates = parse_overrides(args.set)
    if args.seed is not None:
        updates["seed"] = args.seed
    return override(cfg, updates)


def write_resolved(cfg: RunConfig, out: Path | None) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved-config.txt").write_text(cfg.to_text(), encoding="utf-8")


def load_dataset(cfg: RunConfig, args) -> D.Dataset:
    if getattr(args, "data", None):
        return D.Dataset.load(args.data)
    if getattr(args, "images", None) or getattr(args, "labels", None):
        if not (args.images and args.labels):
            raise UsageError("--images and --labels go together")
        x, y = D.load_idx_arrays(args.images, args.labels)
        return D.Dataset.from_arrays(x, y, cfg.seed)
    source = cfg.data.source
    if source.startswith("synthetic-"):
        return D.synthetic_dataset(source, cfg.data.n_samples, cfg.seed, cfg.model.height)
    raise UsageError(f"data.source = {source} needs --data DIR or --images/--labels")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args, "synthetic-simple")
    ds = load_dataset(cfg, args)
    out = Path(args.out)
    res = train(cfg, ds, out, timing=not args.no_timing)
    print(format_census(res.model.parameter_census()))
    print(f"test accuracy {res.test.accuracy:.4f}  l_t {res.test.l_t:.6g}  "
          f"steps {res.trainer.step}")
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model, _ = restore(ckpt)
    cfg = model.config
    if args.set or args.seed is not None:
        cfg = override(cfg, {**parse_overrides(args.set),
                             **({"seed": args.seed} if args.seed is not None else {})})
    ds = load_dataset(cfg, args)
    x, y = ds.subset(args.split)
    rec = evaluate(model, x, y, args.split, step=ckpt.state.get("step", 0),
                   epoch=ckpt.state.get("epoch", 0))
    if args.out:
        out = Path(args.out)
        write_resolved(cfg, out)
        sink = MetricsWriter(out / "eval-metrics.csv")
        sink(rec)
        sink.close()
    print(f"{args.split}: accuracy {rec.accuracy:.4f}  l_m {rec.l_m:.6g}  l_r {rec.l_r:.6g}  "
          f"l_t {rec.l_t:.6g}  (n={len(x)})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args, "miniature")
    out = Path(args.out) if args.out else None
    write_resolved(cfg, out)
    iters = args.routing_iters or [cfg.model.routing_iters]
    ok = True
    for it in iters:
        report = gradcheck(override(cfg, {"model.routing_iters": it}), eps=args.eps,
                           threshold=args.threshold)
        print(report.format())
        ok &= report.passed
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient check passed")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, "synthetic-complex")
    ds = load_dataset(cfg, args)
    out = Path(args.out) if args.out else None
    write_resolved(cfg, out)
    report = ablate(cfg, ds, k=args.k)
    text = report.format()
    print(text)
    if out is not None:
        (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    if report.gap < args.min_gap:
        print(f"sacn - baseline gap {report.gap:+.4f} below {args.min_gap:+.4f}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def cmd_export_attn(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model, _ = restore(ckpt)
    if model.attention is None:
        raise UsageError("checkpoint is a baseline model without an attention block")
    m = model.config.model
    path = Path(args.image)
    if not path.exists():
        raise D.DataError(f"image not found: {path}")
    img = D.to_unit(D.read_pgm(path))
    if img.shape != (m.height, m.width) or m.in_channels != 1:
        raise D.DataError(f"{path}: image {img.shape} does not match the model input "
                          f"({m.in_channels}, {m.height}, {m.width})")
    res = model.forward(img[None, None], keep_intermediates=True)
    beta = res.attention.beta[0]
    h, w = res.attention.height, res.attention.width
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for loc in args.location:
        try:
            row, col = (int(v) for v in loc.split(",")) if "," in loc else divmod(int(loc), w)
        except ValueError:
            raise UsageError(f"location {loc!r} is neither an index nor row,col") from None
        if not (0 <= row < h and 0 <= col < w):
            raise UsageError(f"location {loc} outside the {h}x{w} attention grid")
        amap = export_attention(beta, row * w + col, h, w)
        dest = out / f"attn-r{row}-c{col}.pgm"
        D.write_pgm(dest, D.to_bytes(amap))
        print(dest)
    return 0


# data subcommands ----------------------------------------------------------


def cmd_data_synth_gen(args) -> int:
    ds = D.synthetic_dataset(args.kind, args.n, args.seed, args.size)
    ds.save(args.out)
    oracle = D.mean_threshold_accuracy(ds.x, ds.y)
    print(f"{args.kind}: {len(ds.y)} samples, mean-threshold oracle accuracy {oracle:.3f}")
    _print_counts(ds.rows)
    return 0


def cmd_data_synth_annotated(args) -> int:
    images = D.synth_annotated(args.n, Rng(args.seed).child("data/annotated"), args.size)
    D.write_annotated_dir(args.out, images)
    print(f"{len(images)} annotated images in {args.out}")
    return 0


def cmd_data_extract(args) -> int:
    images = D.load_annotated_dir(args.src)
    rng = Rng(args.seed).child("data/patches")
    patches = []
    for img in images:
        patches += D.extract_patches(img, args.per_region, rng, args.size)
    ds = D.Dataset.from_patches(patches, args.seed)
    ds.save(args.out)
    print(f"{len(patches)} patches from {len(images)} images")
    _print_counts(ds.rows)
    return 0


def cmd_data_split(args) -> int:
    rows = D.split(D.read_manifest(args.manifest), args.seed)
    D.write_manifest(args.out or args.manifest, rows)
    _print_counts(rows)
    return 0


def cmd_data_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "manifest.tsv"
    if not path.exists():
        raise D.DataError(f"not found: {path}")
    if path.suffix == ".tsv":
        rows = D.read_manifest(path)
        _print_counts(rows)
        leaks = D.leaking_sources(rows)
        print(f"sources in more than one split: {len(leaks)}")
        return 0
    arr = D.read_idx(path)
    print(f"{path}: uint8 array of shape {arr.shape}")
    return 0


def _print_counts(rows) -> None:
    counts = D.split_counts(rows)
    total = sum(c["samples"] for c in counts.values()) or 1
    for name, c in counts.items():
        print(f"  {name:<5} {c['samples']:>7} samples ({100 * c['samples'] / total:5.1f}%) "
              f"from {c['sources']} sources")


# ---------------------------------------------------------------------------
# parser


def _run_flags(p, out_required=False):
    p.add_argument("--preset", help="named configuration to start from")
    p.add_argument("--config", help="key = value config file applied over the preset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", required=out_required, help="output directory")


def _data_flags(p):
    p.add_argument("--data", help="dataset directory (images.idx, labels.idx, manifest.tsv)")
    p.add_argument("--images", help="IDX image file (split 80/10/10 by the seed)")
    p.add_argument("--labels", help="IDX label file")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sacn", description="Self-attention capsule network toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    _run_flags(p, out_required=True)
    _data_flags(p)
    p.add_argument("--no-timing", action="store_true", help="write 0 in the seconds column")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=D.SPLITS)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    _run_flags(p)
    p.add_argument("--routing-iters", type=int, action="append",
                   help="routing iterations to check (repeatable; default from config)")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sacn vs baseline over k seeds")
    _run_flags(p)
    _data_flags(p)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--min-gap", type=float, default=0.0,
                   help="fail (exit 3) when sacn mean - baseline mean is below this")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-attn", help="write attention maps for query locations as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="8-bit PGM matching the model input")
    p.add_argument("--location", action="append", required=True,
                   help="flat index or row,col on the attention grid (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attn)

    data = sub.add_parser("data", help="dataset utilities")
    dsub = data.add_subparsers(dest="data_command", required=True, parser_class=_Parser)

    q = dsub.add_parser("synth-gen", help="synthetic blob dataset")
    q.add_argument("--kind", choices=("simple", "complex"), required=True)
    q.add_argument("--n", type=int, default=400)
    q.add_argument("--size", type=int, default=16)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_data_synth_gen)

    q = dsub.add_parser("synth-annotated", help="annotated whole images with lesion/normal masks")
    q.add_argument("--n", type=int, default=10)
    q.add_argument("--size", type=int, default=64)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_data_synth_annotated)

    q = dsub.add_parser("extract-patches", help="patches from annotated images, split by image")
    q.add_argument("--src", required=True)
    q.add_argument("--per-region", type=int, default=30)
    q.add_argument("--size", type=int, default=16)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_data_extract)

    q = dsub.add_parser("split", help="re-split a manifest by source image")
    q.add_argument("--manifest", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="output manifest (default: rewrite in place)")
    q.set_defaults(func=cmd_data_split)

    q = dsub.add_parser("inspect", help="split counts of a manifest, or an IDX header")
    q.add_argument("path")
    q.set_defaults(func=cmd_data_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
