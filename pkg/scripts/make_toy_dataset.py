"""Write the synthetic mini-dataset (MVTec layout) used by the desk-scale runs.

    python3 scripts/make_toy_dataset.py --root data/toy
"""
import argparse

from cfrg.dataset import scan_layout
from cfrg.toydata import make_mini_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", required=True)
    ap.add_argument("--category", default="plate")
    ap.add_argument("--n-train", type=int, default=60)
    ap.add_argument("--n-test-good", type=int, default=20)
    ap.add_argument("--n-test-bad", type=int, default=20)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    make_mini_dataset(args.root, args.category, args.n_train, args.n_test_good, args.n_test_bad, args.size, args.seed)
    index = scan_layout(args.root, args.category)
    print(f"{len(index.split('train'))} train / {len(index.split('test'))} test images under {args.root}")


if __name__ == "__main__":
    main()
