"""Command line: datagen, train, index, query, eval, gradcheck and sweep.

Every run prints its resolved configuration as ``# key=value`` lines on
stdout. Failures print one line ``error category=<c> message=<m>`` on stderr
and exit with 1 (usage), 2 (data/format), 3 (numeric) or 4 (threshold).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from soenet import datagen, gradcheck, retrieval, training
from soenet.errors import DataError, SoeNetError, ThresholdError, UsageError
from soenet.geometry import Submap, read_catalog, read_cloud
from soenet.losses import LOSSES, LossConfig
from soenet.model import ModelConfig, infer_config, load_params, validate_params

log = logging.getLogger("soenet")

CONFIG_FILE = "model.cfg"
SWEEP_AXES = ("loss", "out_dim", "margin", "ablation")
ABLATIONS = ("full", "no-attention", "no-oe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _values(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _print_config(command: str, sections: dict[str, dict]) -> None:
    print(f"# command={command}")
    for section, values in sections.items():
        for k, v in values.items():
            if isinstance(v, (tuple, list)):
                v = ",".join(map(str, v))
            print(f"# {section}.{k}={v}")


# --------------------------------------------------------------------------
# shared flag groups


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--config", type=Path, help="model config file (key=value); flags below override it")
    g.add_argument("--n-points", type=int, help="points per cloud (default 256)")
    g.add_argument("--mlp-dims", type=_dims, help="per-stage widths, e.g. 16,32,64,128")
    g.add_argument("--vlad-k", type=int, help="number of visual words (default 8)")
    g.add_argument("--out-dim", type=int, help="descriptor dimension (default 32)")
    g.add_argument("--s8n-radius", type=float, help="neighbor search radius in normalized units (default 0.2)")
    g.add_argument("--precision", choices=("float32", "float64"), help="compute precision (default float32)")
    g.add_argument("--no-oe", action="store_true", help="drop the OE units (pointwise MLP stack only)")
    g.add_argument("--no-attention", action="store_true", help="feed PointOE features straight to NetVLAD")


def _model_overrides(args) -> dict:
    names = ("n_points", "mlp_dims", "vlad_k", "out_dim", "s8n_radius", "precision")
    out = {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}
    if getattr(args, "no_oe", False):
        out["use_oe"] = False
    if getattr(args, "no_attention", False):
        out["use_attention"] = False
    return out


def _model_config(args) -> ModelConfig:
    over = _model_overrides(args)
    if args.config is not None:
        return ModelConfig.from_file(_existing(args.config), **over)
    return ModelConfig(**over)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    d = training.TrainConfig()
    g.add_argument("--n-positives", type=int, default=d.n_positives, help="positives per tuple")
    g.add_argument("--n-negatives", type=int, default=d.n_negatives, help="negatives per tuple, counting the extra one")
    g.add_argument("--lr0", type=float, default=d.lr0, help="initial learning rate")
    g.add_argument("--decay-factor", type=float, default=d.decay_factor, help="step decay factor")
    g.add_argument("--decay-steps", type=int, default=d.decay_steps, help="steps between decays")
    g.add_argument("--epochs", type=int, default=d.epochs, help="passes over the eligible anchors")
    g.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    g.add_argument("--tuples-per-step", type=int, default=d.tuples_per_step, help="tuples averaged per step")
    g.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every, help="write step_XXXXXXX.sck every N steps (0: off)")
    g.add_argument("--seed", type=int, default=d.seed, help="initialization and sampling seed")
    g.add_argument("--init", type=Path, help="start from this checkpoint instead of a fresh initialization")
    m = training.MiningRule()
    g.add_argument("--positive-radius", type=float, default=m.positive_radius, help="meters")
    g.add_argument("--negative-radius", type=float, default=m.negative_radius, help="meters")
    g.add_argument("--eval-radius", type=float, default=m.eval_radius, help="meters")
    l = LossConfig()
    g.add_argument("--loss", choices=LOSSES, default=l.loss)
    g.add_argument("--margin-alpha", type=float, default=l.margin_alpha)
    g.add_argument("--margin-beta", type=float, default=l.margin_beta)
    g.add_argument("--margin-gamma", type=float, default=l.margin_gamma)


def _train_configs(args):
    tc = training.TrainConfig(
        n_positives=args.n_positives,
        n_negatives=args.n_negatives,
        lr0=args.lr0,
        decay_factor=args.decay_factor,
        decay_steps=args.decay_steps,
        epochs=args.epochs,
        max_steps=args.max_steps,
        tuples_per_step=args.tuples_per_step,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
    )
    lc = LossConfig(args.loss, args.margin_alpha, args.margin_beta, args.margin_gamma)
    rule = training.MiningRule(args.positive_radius, args.negative_radius, args.eval_radius)
    return tc, lc, rule


def _existing(path: Path) -> Path:
    if not Path(path).exists():
        raise DataError(f"file not found: {path}")
    return Path(path)


def _load_catalogs(paths, config: ModelConfig) -> list[Submap]:
    subs: list[Submap] = []
    for p in paths:
        subs.extend(read_catalog(p))
    for s in subs:
        if len(s.cloud) != config.n_points:
            raise DataError(f"submap {s.id} has {len(s.cloud)} points, config expects {config.n_points}")
    if len({s.id for s in subs}) != len(subs):
        raise DataError("submap ids repeat across catalogs")
    return subs


def _checkpoint_and_config(args):
    """Load ``--checkpoint``; the config comes from --config, a model.cfg beside it, or its shapes."""
    ckpt = _existing(args.checkpoint)
    params = load_params(ckpt)
    over = _model_overrides(args)
    if args.config is not None:
        cfg = ModelConfig.from_file(_existing(args.config), **over)
    elif (ckpt.parent / CONFIG_FILE).exists():
        cfg = ModelConfig.from_file(ckpt.parent / CONFIG_FILE, **over)
        cfg = replace(cfg, use_oe="oe0.w_x" in params, use_attention="attn.mu" in params)
    else:
        cfg = infer_config(params, **over)
    validate_params(params, cfg)
    return params, cfg


def _write_curve(path: Path, curve: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "recall"])
        for n, r in curve:
            w.writerow([n, repr(r)])


def _write_svg(path: Path, curve: list[tuple[int, float]]) -> None:
    """A bare line plot of recall against N."""
    w, h, pad = 320, 220, 30
    ns = [n for n, _ in curve]
    lo, hi = min(ns), max(ns)
    span = max(hi - lo, 1)

    def xy(n, r):
        return pad + (n - lo) / span * (w - 2 * pad), h - pad - r * (h - 2 * pad)

    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(n, r) for n, r in curve))
    Path(path).write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">\n'
        f'<rect width="{w}" height="{h}" fill="white"/>\n'
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>\n'
        f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>\n'
        f'<text x="{w / 2}" y="{h - 5}" font-size="12" text-anchor="middle">N</text>\n'
        f'<text x="5" y="{pad - 10}" font-size="12">recall@N</text>\n'
        "</svg>\n"
    )


# --------------------------------------------------------------------------
# commands


def cmd_datagen(args) -> int:
    cfg = datagen.WorldConfig(
        n_places=args.places,
        extent=args.extent,
        traversals=args.traversals,
        n_points=args.points,
        jitter_sigma=args.jitter,
        dropout_rate=args.dropout,
        shift_max=args.shift,
        min_separation=args.min_separation,
        seed=args.seed,
    )
    _print_config("datagen", {"world": asdict(cfg), "output": {"out_dir": args.out_dir}})
    paths = datagen.write_world(datagen.generate_world(cfg), args.out_dir)
    for name, path in paths.items():
        print(f"{name},{path}")
    return 0


def cmd_train(args) -> int:
    cfg = _model_config(args)
    tc, lc, rule = _train_configs(args)
    _print_config(
        "train",
        {
            "model": cfg.as_dict(),
            "train": asdict(tc),
            "loss": asdict(lc),
            "mining": asdict(rule),
            "io": {"catalog": ",".join(map(str, args.catalog)), "out_dir": args.out_dir, "init": args.init},
        },
    )
    catalog = _load_catalogs(args.catalog, cfg)
    params = load_params(_existing(args.init), cfg) if args.init is not None else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_text())
    result = training.train(catalog, cfg, tc, lc, rule, params=params, out_dir=out)
    if result.log:
        print(f"steps={len(result.log)} first_loss={result.log[0][1]!r} last_loss={result.log[-1][1]!r}")
    else:
        print("steps=0")
    print(f"checkpoint={out / 'final.sck'}")
    return 0


def cmd_index(args) -> int:
    params, cfg = _checkpoint_and_config(args)
    _print_config("index", {"model": cfg.as_dict(), "io": {"catalog": args.catalog, "checkpoint": args.checkpoint, "out": args.out}})
    subs = _load_catalogs([args.catalog], cfg)
    db = retrieval.build_index(subs, params, cfg)
    retrieval.save_index(db, args.out)
    print(f"entries={len(db)} dim={db.dim}")
    return 0


def cmd_query(args) -> int:
    params, cfg = _checkpoint_and_config(args)
    _print_config("query", {"model": cfg.as_dict(), "io": {"index": args.index, "cloud": args.cloud, "k": args.k}})
    db = retrieval.load_index(args.index, expected_dim=cfg.out_dim)
    cloud = read_cloud(_existing(args.cloud))
    print("rank,id,distance")
    for rank, (sid, dist) in enumerate(retrieval.query_topk(db, cloud, args.k, params, cfg), start=1):
        print(f"{rank},{sid},{dist!r}")
    return 0


def cmd_eval(args) -> int:
    params, cfg = _checkpoint_and_config(args)
    db = retrieval.load_index(args.index, expected_dim=cfg.out_dim)
    top_n = min(25, len(db)) if args.top_n is None else args.top_n
    if not 1 <= top_n <= len(db):
        raise DataError(f"--top-n {top_n} must be in [1, {len(db)}] for this database")
    protocol = retrieval.EvalProtocol(correct_radius=args.radius, top_n=tuple(range(1, top_n + 1)))
    _print_config(
        "eval",
        {
            "model": cfg.as_dict(),
            "protocol": asdict(protocol) | {"top_n": top_n},
            "io": {"index": args.index, "queries": args.queries, "emit_curve": args.emit_curve, "emit_svg": args.emit_svg},
            "check": {"min_recall1": args.min_recall1},
        },
    )
    queries = retrieval.embed_queries(_load_catalogs([args.queries], cfg), params, cfg)
    curve = retrieval.recall_curve(db, queries, protocol)
    r1 = curve[0][1]
    r1p = retrieval.recall_at_1pct(db, queries, protocol)
    print(f"recall@1={r1!r}")
    print(f"recall@1%={r1p!r} n={retrieval.one_percent_n(len(db), protocol.percent)}")
    print(f"recall@{top_n}={curve[-1][1]!r}")
    if args.emit_curve is not None:
        _write_curve(args.emit_curve, curve)
    if args.emit_svg is not None:
        _write_svg(args.emit_svg, curve)
    if args.min_recall1 is not None and r1 < args.min_recall1:
        raise ThresholdError(f"recall@1 {r1} below required {args.min_recall1}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _model_config(args)
    _print_config(
        "gradcheck",
        {
            "model": cfg.as_dict(),
            "check": {"trials": args.trials, "seed": args.seed, "probes": args.probes, "tolerance": gradcheck.TOLERANCE},
            "io": {"out": args.out},
        },
    )
    report = gradcheck.full_report(cfg, trials=args.trials, seed=args.seed, probes_per_tensor=args.probes)
    lines = ["check,max_relative_error,status"]
    for name, err in report.items():
        lines.append(f"{name},{err!r},{'pass' if err < gradcheck.TOLERANCE else 'fail'}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    failed = [n for n, e in report.items() if not e < gradcheck.TOLERANCE]
    if failed:
        raise ThresholdError(f"gradient error >= {gradcheck.TOLERANCE} in {','.join(failed)}")
    return 0


def _sweep_setting(axis: str, value: str, cfg: ModelConfig, lc: LossConfig):
    try:
        if axis == "loss":
            if value not in LOSSES:
                raise ValueError
            return cfg, replace(lc, loss=value)
        if axis == "out_dim":
            return replace(cfg, out_dim=int(value)), lc
        if axis == "margin":
            return cfg, replace(lc, margin_gamma=float(value))
        if value not in ABLATIONS:
            raise ValueError
        return replace(cfg, use_oe=value != "no-oe", use_attention=value != "no-attention"), lc
    except ValueError:
        raise UsageError(f"bad value {value!r} for sweep axis {axis}") from None


def cmd_sweep(args) -> int:
    cfg = _model_config(args)
    tc, lc, rule = _train_configs(args)
    values = _values(args.values)
    if not values:
        raise UsageError("--values is empty")
    settings = [(v, *_sweep_setting(args.axis, v, cfg, lc)) for v in values]
    _print_config(
        "sweep",
        {
            "sweep": {"axis": args.axis, "values": values},
            "model": cfg.as_dict(),
            "train": asdict(tc),
            "loss": asdict(lc),
            "mining": asdict(rule),
            "io": {"world": args.world, "out_dir": args.out_dir},
        },
    )
    world = Path(args.world)
    train_set = _load_catalogs([world / "train.csv"], cfg)
    reference = _load_catalogs([world / "reference.csv"], cfg)
    queries_set = _load_catalogs([world / "queries.csv"], cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    protocol = retrieval.EvalProtocol(correct_radius=rule.eval_radius, top_n=tuple(range(1, min(25, len(reference)) + 1)))
    rows = []
    for value, run_cfg, run_lc in settings:
        run_dir = out / f"{args.axis}_{value}"
        res = training.train(train_set, run_cfg, tc, run_lc, rule, out_dir=run_dir)
        (run_dir / CONFIG_FILE).write_text(run_cfg.to_text())
        db = retrieval.build_index(reference, res.params, run_cfg)
        q = retrieval.embed_queries(queries_set, res.params, run_cfg)
        curve = retrieval.recall_curve(db, q, protocol)
        _write_curve(run_dir / "curve.csv", curve)
        r1p = retrieval.recall_at_1pct(db, q, protocol)
        final = res.log[-1][1] if res.log else float("nan")
        rows.append([args.axis, value, repr(curve[0][1]), repr(r1p), repr(final), len(res.log)])
        print(f"{args.axis}={value} recall@1={curve[0][1]!r} recall@1%={r1p!r}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "recall_at_1", "recall_at_1pct", "final_loss", "steps"])
        w.writerows(rows)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="soenet", description="SOE-Net point-cloud place recognition at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate a synthetic multi-traversal world")
    w = datagen.WorldConfig()
    p.add_argument("--places", type=int, default=w.n_places)
    p.add_argument("--traversals", type=int, default=w.traversals)
    p.add_argument("--points", type=int, default=w.n_points, help="points per scan")
    p.add_argument("--seed", type=int, default=w.seed)
    p.add_argument("--extent", type=float, default=w.extent, help="map side in meters")
    p.add_argument("--jitter", type=float, default=w.jitter_sigma, help="point jitter sigma in meters")
    p.add_argument("--dropout", type=float, default=w.dropout_rate, help="fraction of points resampled per scan")
    p.add_argument("--shift", type=float, default=w.shift_max, help="max scan-center offset in meters")
    p.add_argument("--min-separation", type=float, default=w.min_separation, help="min distance between places in meters")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a model on one or more catalogs")
    p.add_argument("--catalog", type=Path, action="append", required=True, help="training catalog (repeatable)")
    p.add_argument("--out-dir", type=Path, required=True, help="metrics.csv, checkpoints and model.cfg go here")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="embed a catalog into an SDB1 descriptor database")
    p.add_argument("--catalog", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="top-k database entries for one cloud")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--cloud", type=Path, required=True, help="SPC1 cloud file")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--checkpoint", type=Path, required=True, help="model that built the index")
    _add_model_flags(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="Recall@N of a query catalog against an index")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--queries", type=Path, required=True, help="query catalog")
    p.add_argument("--checkpoint", type=Path, required=True, help="model that built the index")
    p.add_argument("--top-n", type=int, help="largest N of the recall curve (default min(25, database size))")
    p.add_argument("--radius", type=float, default=25.0, help="correct-match radius in meters")
    p.add_argument("--emit-curve", type=Path, help="write the recall curve as CSV (n,recall)")
    p.add_argument("--emit-svg", type=Path, help="write the recall curve as a simple SVG plot")
    p.add_argument("--min-recall1", type=float, help="exit 4 when Recall@1 falls below this")
    _add_model_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and model+loss")
    p.add_argument("--trials", type=int, default=10, help="random trials per primitive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=2, help="probed entries per parameter tensor")
    p.add_argument("--out", type=Path, default=Path("gradcheck_report.csv"), help="report file")
    _add_model_flags(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train and evaluate once per value of one axis")
    p.add_argument("--axis", choices=SWEEP_AXES, required=True, help="loss, out_dim, margin (gamma) or ablation")
    p.add_argument(
        "--values",
        required=True,
        help="comma-separated values; ablation takes full,no-attention,no-oe",
    )
    p.add_argument("--world", type=Path, required=True, help="datagen output directory (train/reference/queries.csv)")
    p.add_argument("--out-dir", type=Path, required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        return args.func(args)
    except SoeNetError as exc:
        return _fail(exc.category, str(exc), exc.exit_code)
    except (FloatingPointError, OverflowError) as exc:
        return _fail("numeric", str(exc), 3)
    except ValueError as exc:
        # dataclass validation of flag values
        return _fail("usage", str(exc), 1)
    except OSError as exc:
        return _fail("data", str(exc), 2)


def _fail(category: str, message: str, code: int) -> int:
    message = " ".join(message.split()) or "unknown"
    print(f"error category={category} message={message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
