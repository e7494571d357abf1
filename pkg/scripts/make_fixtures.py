"""Regenerate the committed test fixtures from the brute-force oracles in tests/oracles.py.

    python3 scripts/make_fixtures.py
"""
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from oracles import ap_thresholds, auroc_pairs, perlin_reference, pro_exhaustive, random_metric_instance  # noqa: E402

from cfrg.dataset import scan_layout  # noqa: E402
from cfrg.toydata import make_mini_dataset, make_textures  # noqa: E402

FIX = ROOT / "tests" / "fixtures"

PERLIN_SEED = 7
PERLIN_SIZE = 64
PERLIN_PERIOD = 8


def perlin_golden():
    field = perlin_reference(PERLIN_SIZE, PERLIN_SIZE, (PERLIN_PERIOD, PERLIN_PERIOD), np.random.default_rng(PERLIN_SEED))
    norm = (field - field.min()) / (field.max() - field.min())
    mask = (norm > 0.5).astype(np.uint8)
    np.save(FIX / "perlin_golden_64_p8_seed7.npy", mask)


def metric_oracles(n=24, seed=2024):
    rng = np.random.default_rng(seed)
    cases = []
    while len(cases) < n:
        maps, masks = random_metric_instance(rng, max_side=12, levels=10 if len(cases) % 2 else None)
        flat_s = np.concatenate([m.ravel() for m in maps])
        flat_y = np.concatenate([g.ravel() for g in masks])
        if flat_y.sum() == 0 or flat_y.sum() == flat_y.size:
            continue
        cases.append(
            {
                "maps": [m.tolist() for m in maps],
                "masks": [g.tolist() for g in masks],
                "auroc": auroc_pairs(flat_s, flat_y),
                "ap": ap_thresholds(flat_s, flat_y),
                "pro": pro_exhaustive(maps, masks, 0.3),
            }
        )
    (FIX / "metrics_oracle.json").write_text(json.dumps(cases))


def mini_manifest():
    with tempfile.TemporaryDirectory() as tmp:
        make_mini_dataset(tmp)
        index = scan_layout(tmp, "plate")
        (FIX / "mini_manifest.json").write_text(json.dumps(index.manifest(), indent=1))


if __name__ == "__main__":
    FIX.mkdir(parents=True, exist_ok=True)
    perlin_golden()
    metric_oracles()
    mini_manifest()
    make_textures(FIX / "textures")
    print("fixtures written to", FIX)
