"""Mean generated LVEDV over a sweep of the height condition.

    python3 scripts/height_sweep.py runs/toy/model/checkpoint_final
"""
import argparse

import numpy as np
import torch
from scipy.stats import spearmanr

from cardiac_meshgen.evaluation import sequence_phenotypes
from cardiac_meshgen.mesh import ClinicalConditions
from cardiac_meshgen.model import load_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--heights", default="150,160,170,180,190")
    ap.add_argument("--n", type=int, default=50, help="samples per height")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--age", type=float, default=60.0)
    ap.add_argument("--sex", type=int, default=1)
    ap.add_argument("--weight", type=float, default=75.0)
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint)
    heights = [float(h) for h in args.heights.split(",")]
    means = []
    for h in heights:
        c = ClinicalConditions(args.age, args.sex, args.weight, h)
        v = model.generate_vertices(c, args.n, torch.Generator().manual_seed(args.seed))
        lvedv = sequence_phenotypes(v, model.faces, model.labels)[:, 0]
        means.append(float(np.nanmean(lvedv)))
        print(f"height {h:6.1f} cm  mean LVEDV {means[-1]:8.2f} ml")
    print(f"Spearman rho = {spearmanr(heights, means)[0]:.3f}")


if __name__ == "__main__":
    main()
