"""Random hyperparameter search followed by a top-k ensemble evaluation on the test split.

    python scripts/search.py --data data/synth_default --out runs/search --n-models 8
"""
import argparse
import json
import logging
from pathlib import Path

from gmic.config import desk_config, load_config
from gmic.evaluation import VARIANTS, evaluate_model, write_metrics
from gmic.synthdata import DatasetManifest
from gmic.training import build_model, load_store, run_search


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", default="data/synth_default")
    ap.add_argument("--out", default="runs/search")
    ap.add_argument("--config")
    ap.add_argument("--n-models", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config) if args.config else desk_config()
    summary = run_search(cfg, args.data, args.out, args.n_models)
    model = build_model(cfg)
    stores = [load_store(p, model) for p in summary["top_k"]]
    res = evaluate_model(model, stores, DatasetManifest.load(args.data), "test", VARIANTS, seed=cfg.search.seed)
    doc = write_metrics(Path(args.out) / "ensemble_metrics.json", res, {"members": summary["top_k"]})
    print(json.dumps(doc["auc"], indent=2))


if __name__ == "__main__":
    main()
