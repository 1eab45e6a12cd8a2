"""Run the full toy pipeline through the CLI.

    python3 scripts/run_pipeline.py --out runs/toy --epochs 200

Stages: synth-data (healthy training population), train, eval-recon,
eval-gen with and without the shuffled-condition control, then delta and
classify on a separate healthy/lowEF cohort.
"""
import argparse
import sys
from pathlib import Path

from cardiac_meshgen.cli import run


def stage(*argv) -> None:
    argv = [str(a) for a in argv]
    print("+ cardiac-meshgen " + " ".join(argv), flush=True)
    code = run(argv)
    if code != 0:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=88, help="healthy subjects, split 64/8/16 by default")
    ap.add_argument("--n-cohort", type=int, default=200, help="healthy + lowEF subjects for delta/classify")
    ap.add_argument("--n-synth", type=int, default=100)
    ap.add_argument("--config")
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--seed", args.seed] + (["--config", args.config] if args.config else [])
    n_val = max(1, round(args.n_train * 8 / 88))
    n_test = max(1, round(args.n_train * 16 / 88))
    splits = f"train={args.n_train - n_val - n_test},val={n_val},test={n_test}"

    stage("synth-data", *common, "--n", args.n_train, "--mix", "healthy=1.0", "--splits", splits,
          "--out", out / "data")
    stage("synth-data", "--seed", args.seed + 1, *common[2:], "--n", args.n_cohort,
          "--mix", "healthy=0.5,lowEF=0.5", "--splits", f"test={args.n_cohort}", "--out", out / "cohort")
    stage("train", *common, "--data", out / "data", "--epochs", args.epochs, "--out", out / "model")
    ckpt = ["--checkpoint", out / "model" / "checkpoint_final"]
    stage("eval-recon", *common, *ckpt, "--data", out / "data", "--split", "test", "--out", out / "eval_recon")
    for control in ("none", "shuffled"):
        stage("eval-gen", *common, *ckpt, "--data", out / "data", "--split", "test", "--control", control,
              "--out", out / f"eval_gen_{control}")
    stage("delta", *common, *ckpt, "--data", out / "cohort", "--n-synth", args.n_synth, "--out", out / "delta")
    stage("classify", *common, *ckpt, "--data", out / "cohort", "--out", out / "classify")


if __name__ == "__main__":
    main()
