"""Full-configuration run on MVTec-AD with ImageNet-pretrained backbones.

Needs the dataset in its standard layout and the torchvision weight files
(wide_resnet50_2-95faca4d.pth, efficientnet_b0_rwightman-7f5810bc.pth) in
CFRG_WEIGHTS_DIR or the torch hub cache. Expect several GPU-hours; on CPU this
is impractical.

    python3 scripts/reproduce_mvtec.py --root /data/mvtec --out runs/mvtec
"""
import argparse
import csv
import logging
from pathlib import Path

from cfrg.config import Config, load_config
from cfrg.metrics import MetricsReport
from cfrg.train import MVTEC_CATEGORIES, MVTEC_TARGET_MEAN, MVTEC_TOLERANCE, reproduce_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", required=True)
    ap.add_argument("--out", type=Path, default=Path("runs/mvtec"))
    ap.add_argument("--config", help="optional TOML/JSON config; defaults to the full configuration")
    ap.add_argument("--categories", nargs="+", default=list(MVTEC_CATEGORIES))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config) if args.config else Config()
    cfg = cfg.replace(train__data_root=args.root, train__seed=args.seed)
    reports = reproduce_benchmark(cfg, args.categories, args.out)

    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "metrics.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(reports[0].as_row()))
        w.writeheader()
        w.writerows(r.as_row() for r in reports)
    mean = reports[-1]
    for m in MetricsReport.METRICS:
        target = MVTEC_TARGET_MEAN[m]
        got = getattr(mean, m)
        flag = "ok" if abs(got - target) <= MVTEC_TOLERANCE else "OUT OF TOLERANCE"
        print(f"{m:8s} {got:.4f}  target {target:.3f} +/- {MVTEC_TOLERANCE}  {flag}")


if __name__ == "__main__":
    main()
