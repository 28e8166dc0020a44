"""Command-line entry point: ``outfitxai <subcommand> [flags]``.

Subcommands: gen-data, train, calibrate, score, explain, flawbench, report.
Any flag can also come from a JSON file given with ``--config`` (keys are the
flag names, dashes or underscores); flags on the command line win. Every
subcommand writes its fully resolved configuration next to its outputs.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 dimension mismatch, 5 invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataIOError, InvariantError, OutfitError, UsageError

ENV_MODEL = "OUTFIT_MODEL"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIM, EXIT_INVARIANT = 0, 2, 3, 4, 5
# Options that are not run configuration and are left out of the recorded config.
_NOT_RECORDED = {"config", "command", "handler", "verbose"}

log = logging.getLogger("outfitxai")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers

def _write_config(args: argparse.Namespace, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_RECORDED}
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in cfg.items()}
    path = out_dir / f"{args.command}.config.json"
    path.write_text(json.dumps({"command": args.command, "version": __version__, "options": cfg},
                               indent=1, sort_keys=True) + "\n")
    return path


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        hint = f" (or set {ENV_MODEL})" if "model" in missing else ""
        raise UsageError(f"{args.command}: missing required option(s) {flags}{hint}")


def _dataset(args):
    from .dataset import load_dataset
    from .imagefeat import FeatureConfig

    features = FeatureConfig()
    if getattr(args, "model", None):
        features = _model(args).features
    return load_dataset(args.data, features, cache=not getattr(args, "no_cache", False))


_MODEL_CACHE: dict[str, object] = {}


def _model(args):
    from .modelio import load_model

    key = str(args.model)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = load_model(args.model)
    return _MODEL_CACHE[key]


def _split(ds, name):
    outfits = ds.outfits if name == "all" else ds.split(name)
    if not outfits:
        raise InvariantError(f"split {name!r} of {ds.root} is empty")
    return outfits


def _read_outfit(path, model, ds=None, images=None):
    """Outfit JSON: ``{"id", "parts": {part: item id | image path | {"edge", "colors"}}}``.

    Image paths that were read are recorded into ``images`` (part -> path) when given.
    """
    from .dataset import extract_item
    from .outfit import Outfit, outfit_from_dict

    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise DataIOError(f"cannot read outfit {path}: {exc}") from exc
    except ValueError as exc:
        raise DataIOError(f"outfit {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict) or not isinstance(d.get("parts"), dict):
        raise DataIOError(f"outfit {path} must be an object with a 'parts' mapping")
    known = dict(ds.items) if ds is not None else {}
    for part, ref in d["parts"].items():
        if isinstance(ref, str) and ref not in known:
            img = (path.parent / ref) if not Path(ref).is_absolute() else Path(ref)
            if not img.exists():
                raise DataIOError(f"outfit {path}: part {part} refers to unknown item or missing file {ref!r}")
            known[ref] = extract_item(img, model.features)
        if images is not None and isinstance(ref, str) and ref not in (ds.items if ds is not None else {}):
            images[part] = (path.parent / ref) if not Path(ref).is_absolute() else Path(ref)
    try:
        outfit = outfit_from_dict(d, known)
    except KeyError as exc:
        raise DataIOError(f"outfit {path}: {exc.args[0]}") from exc
    return Outfit(outfit.items, outfit.outfit_id or path.stem, outfit.label)


# --------------------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    from .flawbench.synth import SynthSpec, generate_synthetic

    _require(args, "out")
    spec = SynthSpec(seed=args.seed, items_per_part=args.items_per_part, n_hues=args.hues,
                     hue_tolerance=args.tolerance, textures=tuple(args.textures.split(",")),
                     n_positive=args.n_positive, n_negative=args.n_negative, min_items=args.min_items,
                     max_items=args.max_items, split=tuple(args.split), image_size=args.image_size)
    manifest = generate_synthetic(spec, args.out)
    _write_config(args, Path(args.out))
    print(f"wrote {len(manifest['outfits'])} outfits and {len(manifest['items'])} items to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .grader import TrainParams, preset, train
    from .imagefeat import FeatureConfig
    from .modelio import save_model

    _require(args, "data", "out")
    features = FeatureConfig(grid=args.grid)
    ds = load_dataset(args.data, features, cache=not args.no_cache)
    tr, va = _split(ds, "train"), ds.split("val")
    config = preset(args.preset, batchnorm=args.batchnorm, edge_dim=features.edge_dim)
    params = TrainParams(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                         optimizer=args.optimizer, seed=args.seed)
    result = train(tr, [o.label for o in tr], config, params, features,
                   validation=(va, [o.label for o in va]) if va else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # paths stay in train.config.json so the model bytes do not depend on where the data lives
    result.model.notes.update(train={"epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
                                     "batchnorm": args.batchnorm, "seed": args.seed})
    save_model(result.model, out)
    hist = out.with_suffix(".history.csv")
    with hist.open("w", newline="") as fh:
        cols = list(result.history[0]) if result.history else ["epoch"]
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in row.items()} for row in result.history)
    _write_config(args, out.parent)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"model": str(out), **{k: v for k, v in last.items()}}, sort_keys=True))
    return EXIT_OK


def _emit_calibration(report, out_dir: Path, svg: bool, stem: str = "") -> None:
    from .calibration import write_histogram_csv, write_reliability_csv
    from .plots import reliability_svg, score_hist_svg, write_svg

    write_reliability_csv(report, out_dir / f"{stem}reliability.csv")
    write_histogram_csv(report, out_dir / f"{stem}score_hist.csv")
    if svg:
        write_svg(reliability_svg(report), out_dir / f"{stem}reliability.svg")
        write_svg(score_hist_svg(report), out_dir / f"{stem}score_hist.svg")


def cmd_calibrate(args) -> int:
    from .calibration import fit_temperature, reliability_from_logits
    from .dataset import labels_of
    from .grader import logits
    from .modelio import save_model

    _require(args, "model", "data")
    model = _model(args)
    outfits = _split(_dataset(args), args.split)
    s = logits(model, outfits)
    y = labels_of(outfits)
    fit = fit_temperature(s, y, objective=args.objective, mode=args.mode)
    model.temperature = float(fit.temperature)
    model.notes["calibration"] = {"split": args.split, "objective": args.objective, "mode": args.mode,
                                  "before": fit.before, "after": fit.after}
    out_model = Path(args.out or args.model)
    save_model(model, out_model)
    out_dir = Path(args.out_dir or out_model.parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = reliability_from_logits(s, y, model.temperature, mode=args.mode)
    _emit_calibration(report, out_dir, args.svg)
    _write_config(args, out_dir)
    print(json.dumps({"temperature": model.temperature, "ece_before": report.ece_before,
                      "ece_after": report.ece_after, "samples": report.n_samples}, sort_keys=True))
    return EXIT_OK


def cmd_score(args) -> int:
    from .grader import logits, scores_from_logits

    _require(args, "model")
    if bool(args.data) == bool(args.outfit):
        raise UsageError("score: give exactly one of --data or --outfit")
    model = _model(args)
    T = model.temperature if args.temperature is None else args.temperature
    if args.outfit:
        outfits = [_read_outfit(p, model) for p in args.outfit]
    else:
        outfits = _split(_dataset(args), args.split)
    s = logits(model, outfits)
    scores = scores_from_logits(s, T)
    lines = ["outfit_id,label,s_pos,s_neg,score"]
    lines += [f"{o.outfit_id},{o.label or ''},{r[0]!r},{r[1]!r},{v!r}"
              for o, r, v in zip(outfits, s.tolist(), scores.tolist())]
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_config(args, out.parent)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_explain(args) -> int:
    from .ifiv import compute_ifiv, detect_flaw
    from .imagefeat import edge_image, load_image, save_gray_png
    from .plots import ifiv_bars_svg, write_svg

    _require(args, "model", "outfit")
    model = _model(args)
    ds = _dataset(args) if args.data else None
    images: dict[str, Path] = {}
    outfit = _read_outfit(args.outfit, model, ds, images)
    if args.dump_edges:
        dump = Path(args.dump_edges)
        dump.mkdir(parents=True, exist_ok=True)
        for part, img in images.items():
            save_gray_png(edge_image(load_image(img), model.features), dump / f"{outfit.outfit_id}.{part}.edge.png")
    report = compute_ifiv(model, outfit, args.target, args.temperature)
    d = report.to_dict()
    d["outfit_id"] = outfit.outfit_id
    item = detect_flaw(report, "item", args.item_rule)
    d["prediction"]["item"] = item
    d["item_rule"] = args.item_rule
    text = json.dumps(d, indent=1, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{outfit.outfit_id}.ifiv.json").write_text(text)
        if args.svg:
            write_svg(ifiv_bars_svg(report), out_dir / f"{outfit.outfit_id}.ifiv.svg")
        _write_config(args, out_dir)
    return EXIT_OK


def cmd_flawbench(args) -> int:
    from .flawbench.protocol import build_mod_samples, evaluate_detection, parse_types, write_detection_tables
    from .flawbench.protocol import write_ledger

    _require(args, "model", "data", "out_dir")
    model = _model(args)
    ds = _dataset(args)
    types = parse_types(args.types)
    run = build_mod_samples(model, ds, n_bases=args.bases, types=types, seed=args.seed,
                            n_candidates=args.candidates, keep=args.keep)
    table = evaluate_detection(model, run, target=args.target, feature_granularity=args.granularity,
                               item_rule=args.item_rule)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_ledger(run.mods, out_dir / "mod_samples.csv")
    paths = write_detection_tables(table, out_dir)
    stats = {"bases": len(run.bases.outfits), "mean_base_score": run.bases.mean_score,
             "parts": run.bases.part_counts, "n_items": {str(k): v for k, v in run.bases.size_counts.items()}}
    (out_dir / "base_samples.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    _write_config(args, out_dir)
    summary = {t: table.accuracy(t) for t in table.types}
    summary["chance_item"], summary["chance_feature"] = table.chance.item, table.chance.feature
    print(json.dumps(summary, sort_keys=True))
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_report(args) -> int:
    from .calibration import reliability_from_logits
    from .dataset import labels_of
    from .grader import logits

    _require(args, "model", "data", "out_dir")
    model = _model(args)
    outfits = _split(_dataset(args), args.split)
    s = logits(model, outfits)
    y = labels_of(outfits)
    report = reliability_from_logits(s, y, model.temperature, mode=args.mode)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _emit_calibration(report, out_dir, args.svg, stem=f"{args.split}_")
    summary = {"split": args.split, "samples": report.n_samples, "temperature": report.temperature,
               "ece_at_T1": report.ece_before, "ece": report.ece_after,
               "accuracy": float(np.mean((s[:, 0] > s[:, 1]) == y)), "config": model.config.to_dict(),
               "notes": model.notes}
    (out_dir / f"{args.split}_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    _write_config(args, out_dir)
    print(json.dumps({k: summary[k] for k in ("accuracy", "ece", "samples", "temperature")}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _model_opt(p):
    p.add_argument("--model", default=os.environ.get(ENV_MODEL),
                   help=f"model file (default: ${ENV_MODEL})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="outfitxai", description="Outfit grading with item-feature influence values.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def add(name, handler, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON file with default values for any flag of this command")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        p.set_defaults(handler=handler)
        return p

    p = add("gen-data", cmd_gen_data, "Generate the planted-rule synthetic dataset.")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-positive", type=int, default=1500)
    p.add_argument("--n-negative", type=int, default=1500)
    p.add_argument("--items-per-part", type=int, default=36)
    p.add_argument("--hues", type=int, default=6, help="number of hue classes on the color wheel")
    p.add_argument("--tolerance", type=float, default=20.0, help="hue harmony tolerance in degrees")
    p.add_argument("--textures", default="plain,dense", help="comma list from plain,sparse,dense")
    p.add_argument("--min-items", type=int, default=6)
    p.add_argument("--max-items", type=int, default=8)
    p.add_argument("--split", type=float, nargs=3, default=[0.7, 0.15, 0.15], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--image-size", type=int, default=64)

    p = add("train", cmd_train, "Train a grader on the train split of a dataset.")
    p.add_argument("--data", help="dataset directory or manifest.json")
    p.add_argument("--out", help="model file to write")
    p.add_argument("--preset", type=int, default=3, choices=range(1, 7))
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--batchnorm", action=argparse.BooleanOptionalAction, default=True,
                   help="batch normalization in the outfit encoder")
    p.add_argument("--grid", type=int, default=16, help="edge descriptor grid size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-cache", action="store_true", help="do not read or write the feature cache")

    p = add("calibrate", cmd_calibrate, "Fit the temperature on a split and store it in the model.")
    _model_opt(p)
    p.add_argument("--data")
    p.add_argument("--split", default="val")
    p.add_argument("--objective", choices=["ece", "nll"], default="ece")
    p.add_argument("--mode", choices=["positive", "max"], default="positive", help="confidence definition")
    p.add_argument("--out", help="calibrated model file (default: overwrite --model)")
    p.add_argument("--out-dir", help="directory for reliability CSV/SVG (default: next to the model)")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--no-cache", action="store_true")

    p = add("score", cmd_score, "Score outfits (CSV: outfit_id,label,s_pos,s_neg,score).")
    _model_opt(p)
    p.add_argument("--data")
    p.add_argument("--split", default="test", help="train, val, test or all")
    p.add_argument("--outfit", nargs="+", help="outfit JSON file(s) instead of a dataset")
    p.add_argument("--temperature", type=float, help="override the model's temperature")
    p.add_argument("--out", help="CSV file (default: standard output)")
    p.add_argument("--no-cache", action="store_true")

    p = add("explain", cmd_explain, "IFIV report for one outfit, as JSON on standard output.")
    _model_opt(p)
    p.add_argument("--outfit", help="outfit JSON file")
    p.add_argument("--data", help="dataset whose item ids the outfit may reference")
    p.add_argument("--target", choices=["pos", "neg"], default="pos", help="logit to differentiate")
    p.add_argument("--item-rule", choices=["pair", "sum"], default="pair")
    p.add_argument("--temperature", type=float)
    p.add_argument("--out-dir", help="also write the JSON (and SVG with --svg) here")
    p.add_argument("--dump-edges", help="write the edge_image of every image-path item as PNG into this directory")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--no-cache", action="store_true")

    p = add("flawbench", cmd_flawbench, "Run the flaw-detection benchmark on the test split.")
    _model_opt(p)
    p.add_argument("--data")
    p.add_argument("--out-dir")
    p.add_argument("--bases", type=int, default=100, help="number of base outfits (larger runs take proportionally longer)")
    p.add_argument("--types", default="item,edge,colors")
    p.add_argument("--candidates", type=int, default=500)
    p.add_argument("--keep", type=int, default=10)
    p.add_argument("--target", choices=["pos", "neg"], default="pos")
    p.add_argument("--granularity", choices=["pair", "item"], default="pair",
                   help="whether feature-typed samples must also get the feature right")
    p.add_argument("--item-rule", choices=["pair", "sum"], default="pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-cache", action="store_true")

    p = add("report", cmd_report, "Reliability and score-distribution data for a split.")
    _model_opt(p)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=["positive", "max"], default="positive")
    p.add_argument("--out-dir")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--no-cache", action="store_true")
    return parser


def _load_config_file(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise DataIOError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise UsageError(f"config {path} must be a JSON object")
    if isinstance(d.get("options"), dict):  # a recorded <command>.config.json
        d = d["options"]
    return {k.replace("-", "_"): v for k, v in d.items()}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing subcommand; see --help")
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        values = _load_config_file(args.config)
        unknown = sorted(set(values) - known - _NOT_RECORDED)
        if unknown:
            raise UsageError(f"config {args.config}: unknown option(s) {unknown}")
        sub.set_defaults(**{k: v for k, v in values.items() if k not in _NOT_RECORDED})
        args = parser.parse_args(argv)
    return args


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, OutfitError):
        return exc.exit_code
    return EXIT_IO if isinstance(exc, OSError) else 1


def run(argv=None) -> int:
    """Parse ``argv`` and execute; returns the process exit status."""
    argv = sys.argv[1:] if argv is None else list(argv)
    _MODEL_CACHE.clear()
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.handler(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (OutfitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
