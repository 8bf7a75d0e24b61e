"""Command-line entry point: gen-data, train, search, eval, infer, visualize, grad-check."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gmic")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(path):
    from .synthdata import DatasetManifest
    if path is None:
        raise CliError(EXIT_CONFIG, "--data is required")
    return DatasetManifest.load(path)


def _load_stores(model, paths):
    from .training import load_store
    stores = []
    for p in paths:
        if not Path(p).exists():
            raise CliError(EXIT_DATA, f"checkpoint not found: {p}")
        stores.append(load_store(p, model))
    return stores


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg: RunConfig, out: Path) -> dict:
    from .synthdata import generate_dataset
    m = generate_dataset(cfg.data, out, workers=args.workers)
    return {"exams": len(m.records), "manifest": str(out / "manifest.json")}


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    from .training import train_model
    state = train_model(cfg, _manifest(args.data), out)
    return {"best_epoch": state.best_epoch, "best_validation_auc": state.best_metric,
            "checkpoint": str(out / "best.ckpt")}


def cmd_search(args, cfg: RunConfig, out: Path) -> dict:
    from .training import run_search
    _manifest(args.data)  # fail early on a bad path
    summary = run_search(cfg, args.data, out, args.n_models)
    return {"top_k": summary["top_k"]}


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    from .evaluation import evaluate_model, write_metrics, write_predictions
    from .training import build_model
    model = build_model(cfg)
    stores = _load_stores(model, args.checkpoints)
    res = evaluate_model(model, stores, _manifest(args.data), args.split, args.variant, seed=cfg.training.seed,
                         localization=not args.no_localization, limit=args.limit)
    doc = write_metrics(out / "metrics.json", res, {"checkpoints": [str(p) for p in args.checkpoints]})
    write_predictions(out / "predictions.csv", res)
    return {"auc": doc["auc"]}


def _read_image(path, cfg: RunConfig) -> np.ndarray:
    from .synthdata import DataLoadError, normalize_image, read_png
    raw = read_png(Path(path), f"image {path}")
    if raw.ndim == 3:
        raw = raw[..., :3].mean(axis=-1)
    try:
        return normalize_image(raw, (cfg.data.height, cfg.data.width))
    except ValueError as e:
        raise DataLoadError(f"image {path}: {e}") from e


def cmd_infer(args, cfg: RunConfig, out: Path) -> dict:
    from .training import build_model
    model = build_model(cfg)
    (store,) = _load_stores(model, [args.checkpoint])
    results = {}
    for path in args.images:
        p = model.predict(store, _read_image(path, cfg))
        doc = {"image": str(path),
               "y_loc": p.y_loc[0].tolist(), "y_mil": p.y_mil[0].tolist(), "y": p.y[0].tolist(),
               "class_names": list(cfg.model.class_names),
               "rois": [dict(r.to_json(), alpha=float(p.alpha[0, k])) for k, r in enumerate(p.rois[0])]}
        (out / f"{Path(path).stem}.json").write_text(json.dumps(doc, indent=2))
        results[str(path)] = doc["y"]
    return {"predictions": results}


def cmd_visualize(args, cfg: RunConfig, out: Path) -> dict:
    from .synthdata import VIEWS, load_exam
    from .training import build_model
    from .visualize import render_view
    manifest = _manifest(args.data)
    recs = [r for r in manifest.records if r.exam_id == args.exam]
    if not recs:
        raise CliError(EXIT_DATA, f"exam {args.exam!r} not in {args.data}")
    model = build_model(cfg)
    (store,) = _load_stores(model, [args.checkpoint])
    images, masks = load_exam(manifest, recs[0], with_masks=True)
    written = []
    for view in VIEWS:
        p = model.predict(store, images[view])
        written += render_view(out, f"{args.exam}_{view}", images[view][0, 0], p.saliency[0],
                               cfg.model.class_names, masks[view], p.rois[0], p.alpha[0])
    return {"files": [str(w) for w in written]}


def cmd_grad_check(args, cfg: RunConfig, out: Path) -> dict:
    from .config import toy_config
    from .gradsuite import format_table, run_suite
    rows = run_suite(toy_config() if args.toy else cfg, seeds=args.seeds)
    table = format_table(rows)
    print(table)
    (out / "grad_check.txt").write_text(table + "\n")
    failed = [r.name for r in rows if not r.passed]
    if failed:
        raise CliError(EXIT_NUMERIC, f"gradient check failed: {', '.join(failed)}")
    return {"rows": len(rows), "failed": failed}


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "search": cmd_search, "eval": cmd_eval,
    "infer": cmd_infer, "visualize": cmd_visualize, "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------- parsing

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d, help="overrides the seed of the command")
    p.add_argument("--out", default=d, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmic", description=__doc__)
    _global_flags(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        _global_flags(sp, suppress=True)
        return sp

    sp = add("gen-data", "generate the synthetic screening corpus")
    sp.add_argument("--workers", type=int, default=1)
    sp = add("train", "train one model")
    sp.add_argument("--data", required=True, help="dataset directory or manifest")
    sp = add("search", "random hyperparameter search")
    sp.add_argument("--data", required=True)
    sp.add_argument("--n-models", type=int, default=None)
    sp = add("eval", "evaluate a checkpoint or an ensemble")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoints", nargs="+", required=True)
    sp.add_argument("--variant", nargs="+", default=["gmic"],
                    choices=["gmic", "loc", "mil", "noattn", "random", "loc-random"])
    sp.add_argument("--split", default="test", choices=["train", "validation", "test"])
    sp.add_argument("--limit", type=int, default=None, help="evaluate only the first N exams")
    sp.add_argument("--no-localization", action="store_true")
    sp = add("infer", "predict on image files")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("images", nargs="+")
    sp = add("visualize", "render saliency maps and patches for one exam")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--exam", required=True)
    sp = add("grad-check", "finite-difference gradient suite")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--toy", action="store_true", default=True,
                    help="use the 64x64 toy configuration (default)")
    sp.add_argument("--use-config", dest="toy", action="store_false",
                    help="check the model described by --config instead")
    return parser


def _overrides(args) -> dict:
    if args.seed is None:
        return {}
    if args.command == "gen-data":
        return {"data": {"seed": args.seed}}
    if args.command == "search":
        return {"search": {"seed": args.seed}}
    return {"training": {"seed": args.seed}}


def _write_status(out: Path | None, command: str, code: int, message: str, result: dict | None) -> None:
    if out is None:
        return
    doc = {"command": command, "exit_code": code, "message": message, "result": result,
           "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "exit_status.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .diffcore import CheckpointError, NonFiniteError
    from .synthdata import DataLoadError
    from .training import NumericFailure

    out = None
    result = None
    try:
        try:
            cfg = load_config(args.config, _overrides(args))
        except ConfigError as e:
            raise CliError(EXIT_CONFIG, f"config error at {e}") from e
        out = _out_dir(args, cfg)
        cfg.save(out / "config.resolved.json")
        result = COMMANDS[args.command](args, cfg, out)
        code, message = EXIT_OK, "ok"
    except CliError as e:
        code, message = e.code, str(e)
    except ConfigError as e:
        code, message = EXIT_CONFIG, f"config error at {e}"
    except (DataLoadError, CheckpointError, FileNotFoundError) as e:
        code, message = EXIT_DATA, str(e)
    except (NumericFailure, NonFiniteError) as e:
        code, message = EXIT_NUMERIC, str(e)
    _write_status(out, args.command, code, message, result)
    if code != EXIT_OK:
        print(f"gmic {args.command}: {message}", file=sys.stderr)
    elif result is not None:
        print(json.dumps(result, indent=2, default=str))
    return code


if __name__ == "__main__":
    sys.exit(main())
