"""Train one desk-scale model on the default synthetic corpus and report test metrics.

    python scripts/e2e_synthetic.py --data data/synth_default --out runs/e2e
"""
import argparse
import json
import logging

from gmic.config import desk_config, load_config
from gmic.experiments import run_e2e


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", default="data/synth_default")
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--config", help="override the desk preset with a full config file")
    ap.add_argument("--workers", type=int, default=1, help="processes for data generation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config) if args.config else desk_config()
    print(json.dumps(run_e2e(args.out, args.data, cfg, args.workers), indent=2))


if __name__ == "__main__":
    main()
