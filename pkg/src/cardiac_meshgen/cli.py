"""Command-line entry point: ``cardiac-meshgen <subcommand> ...``.

Every subcommand writes ``resolved_config.json`` into its ``--out``
directory and nothing outside it. Exit status is 0 on success, 1 on a
runtime or data error and 2 on a usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evaluation import GEN_COLUMNS, RECON_COLUMNS, generation_report, recon_report, write_report
from .latent import (CLASSIFIERS, EXTRACTION_MODES, LatentVector, classify, confounder_matrix,
                     latent_vector, population_deltas, write_auc_csv, write_deltas_csv,
                     write_latents_csv)
from .mesh import ClinicalConditions, MeshSequence, extract_phenotypes
from .model import ConfigError, ModelConfig, load_checkpoint
from .toy import (DISEASE_LABELS, SPLITS, ConditionRanges, Dataset, SubjectRecord, ToyGeneratorParams,
                  largest_remainder_counts, mix64, read_bundle, synth_population, write_bundle,
                  write_dataset)
from .training import TrainConfig, train

log = logging.getLogger("cardiac_meshgen")

DATA_ENV = "CARDIAC_MESHGEN_DATA"
RESOLVED_CONFIG = "resolved_config.json"
CONFIG_VERSION = 1


@dataclass
class DataConfig:
    n: int = 80
    disease_mix: dict = field(default_factory=lambda: {"healthy": 0.8, "lowEF": 0.1, "thickWall": 0.1})
    split_fractions: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1})
    ranges: ConditionRanges = field(default_factory=ConditionRanges)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranges"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["ranges"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        if "ranges" in d:
            d["ranges"] = ConditionRanges.from_dict(d["ranges"])
        return cls(**d)


@dataclass
class EvalConfig:
    split: str = "test"
    n_samples: int = 20  # generated sequences per subject for fidelity tables
    bins: int = 20
    control: str = "none"
    n_synth: int = 100  # generated sequences per subject for the latent delta
    latent_mode: str = "frames"
    folds: int = 5
    classifiers: tuple[str, ...] = CLASSIFIERS
    positive_label: str = "lowEF"

    def __post_init__(self):
        self.classifiers = tuple(self.classifiers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classifiers"] = list(self.classifiers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**d)


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    toy: ToyGeneratorParams = field(default_factory=ToyGeneratorParams)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = {"model": ModelConfig, "train": TrainConfig, "toy": ToyGeneratorParams,
                "data": DataConfig, "eval": EvalConfig}

    def to_dict(self) -> dict:
        d = {"config_version": CONFIG_VERSION, "seed": self.seed, "workers": self.workers}
        for name in self.SECTIONS:
            d[name] = getattr(self, name).to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, source: str = "config") -> "RunConfig":
        d = dict(d)
        d.pop("config_version", None)
        # the resolved snapshot also records inputs; they are not configuration
        d.pop("command", None)
        d.pop("inputs", None)
        kwargs = {}
        for key, value in d.items():
            if key in ("seed", "workers"):
                kwargs[key] = int(value)
            elif key in cls.SECTIONS:
                kwargs[key] = _section(cls.SECTIONS[key], value, f"{source}: {key}")
            else:
                raise ConfigError(f"{source}: unknown field {key!r}")
        return cls(**kwargs)


def _section(cls, value, where: str):
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(value) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    try:
        return cls.from_dict(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    return RunConfig.from_dict(raw, source=str(path))


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.field=value`` overrides; values are parsed as JSON when possible."""
    d = cfg.to_dict()
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected section.field=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        target = d
        for p in parts[:-1]:
            if not isinstance(target.get(p), dict):
                raise ConfigError(f"--set {item!r}: unknown section {p!r}")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(f"--set {item!r}: unknown field {key!r}")
        target[parts[-1]] = value
    return RunConfig.from_dict(d, source="--set")


# ---------------------------------------------------------------- helpers

def _parse_mapping(text: str, flag: str, cast=float) -> dict:
    out = {}
    for part in text.split(","):
        name, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"{flag}: expected name=value pairs, got {part!r}")
        try:
            out[name.strip()] = cast(value)
        except ValueError as exc:
            raise ConfigError(f"{flag}: bad value for {name.strip()!r}: {value!r}") from exc
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _snapshot(out: Path, cfg: RunConfig, command: str, inputs: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / RESOLVED_CONFIG, {**cfg.to_dict(), "command": command,
                                        "inputs": {k: str(v) for k, v in inputs.items() if v is not None}})


def _data_dir(args) -> Path:
    data = args.data or os.environ.get(DATA_ENV)
    if not data:
        raise ConfigError(f"--data is required (or set {DATA_ENV})")
    return Path(data)


def _items(ds: Dataset, split: str):
    return ds.split(split)


def split_sizes(n: int, fractions: dict) -> dict[str, int]:
    unknown = set(fractions) - set(SPLITS)
    if unknown:
        raise ConfigError(f"data.split_fractions: unknown split(s) {sorted(unknown)}")
    return largest_remainder_counts(n, fractions)


# ------------------------------------------------------------ subcommands

def cmd_synth_data(args, cfg: RunConfig) -> None:
    data = cfg.data
    if args.n is not None:
        data = replace(data, n=args.n)
    if args.mix is not None:
        data = replace(data, disease_mix=_parse_mapping(args.mix, "--mix"))
    if args.splits is not None:
        sizes = _parse_mapping(args.splits, "--splits", int)
        if sum(sizes.values()) != data.n:
            raise ConfigError(f"--splits: sizes {sizes} do not sum to n={data.n}")
        data = replace(data, split_fractions={k: v / data.n for k, v in sizes.items()})
    unknown = set(data.disease_mix) - set(DISEASE_LABELS)
    if unknown:
        raise ConfigError(f"disease mix: unknown label(s) {sorted(unknown)}; expected {DISEASE_LABELS}")
    cfg = replace(cfg, data=data)
    sizes = split_sizes(data.n, data.split_fractions)
    out = Path(args.out)
    _snapshot(out, cfg, "synth-data", {})
    items = synth_population(data.n, cfg.seed, data.disease_mix, cfg.toy, data.ranges, cfg.workers)
    splits = [name for name in SPLITS for _ in range(sizes.get(name, 0))]
    write_dataset(out, items, splits, extra={"generator": {"params": cfg.toy.to_dict(), "master_seed": cfg.seed,
                                                           "disease_mix": data.disease_mix}})
    print(f"wrote {data.n} subjects to {out}")


def cmd_train(args, cfg: RunConfig) -> None:
    tc = replace(cfg.train, seed=cfg.seed)
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    if args.lr is not None:
        tc = replace(tc, learning_rate=args.lr)
    cfg = replace(cfg, train=tc)
    data = _data_dir(args)
    out = Path(args.out)
    _snapshot(out, cfg, "train", {"data": data})

    def progress(epoch, tr, val):
        msg = f"epoch {epoch}/{tc.epochs} train total={tr.total:.4f} rec={tr.reconstruction:.4f}"
        if val is not None:
            msg += f" val total={val['total']:.4f}"
        log.info(msg)

    result = train(data, cfg.model, tc, out, progress=progress)
    print(f"final checkpoint: {result.final_checkpoint}")


def _load(args):
    return load_checkpoint(args.checkpoint)


def cmd_reconstruct(args, cfg: RunConfig) -> None:
    model = _load(args)
    out = Path(args.out)
    inputs = {"checkpoint": args.checkpoint, "bundle": args.bundle}
    if args.bundle:
        items = [read_bundle(args.bundle)]
    else:
        data = _data_dir(args)
        inputs["data"] = data
        items = _items(Dataset.open(data), args.split or cfg.eval.split)
    _snapshot(out, cfg, "reconstruct", inputs)
    rows = []
    for record, seq in items:
        rec = MeshSequence(model.reconstruct(seq), seq.faces, seq.labels, seq.conditions, seq.subject_id)
        write_bundle(rec, record, out)
        rows.append({"id": record.id, "split": "reconstruction"})
    _write_json(out / "manifest.json", {"subjects": rows, "source_checkpoint": str(args.checkpoint)})
    print(f"reconstructed {len(rows)} sequences into {out}")


def cmd_generate(args, cfg: RunConfig) -> None:
    model = _load(args)
    try:
        conditions = ClinicalConditions(args.age, args.sex, args.weight, args.height)
    except ValueError as exc:
        raise ConfigError(f"conditions: {exc}") from exc
    out = Path(args.out)
    _snapshot(out, cfg, "generate", {"checkpoint": args.checkpoint})
    gen = torch.Generator().manual_seed(cfg.seed & ((1 << 63) - 1))
    rows = []
    for i, seq in enumerate(model.generate(conditions, args.n, gen)):
        record = SubjectRecord(seq.subject_id, conditions, "synthetic", mix64(cfg.seed, i))
        write_bundle(seq, record, out)
        rows.append({"id": seq.subject_id, "split": "synthetic"})
    _write_json(out / "manifest.json", {"subjects": rows, "conditions": conditions.to_dict(),
                                        "source_checkpoint": str(args.checkpoint)})
    print(f"generated {args.n} sequences into {out}")


def cmd_eval_recon(args, cfg: RunConfig) -> None:
    model = _load(args)
    data = _data_dir(args)
    split = args.split or cfg.eval.split
    out = Path(args.out)
    _snapshot(out, cfg, "eval-recon", {"checkpoint": args.checkpoint, "data": data})
    report = recon_report(model, data, split)
    write_report(out, "recon_table", report.table, RECON_COLUMNS, report.metadata)
    row = report.entry("all", "allFrames")
    print(f"all/allFrames HD={row['hd_mean']:.3f} mm ASSD={row['assd_mean']:.3f} mm")


def cmd_eval_gen(args, cfg: RunConfig) -> None:
    ec = cfg.eval
    if args.n_samples is not None:
        ec = replace(ec, n_samples=args.n_samples)
    if args.control is not None:
        ec = replace(ec, control=args.control)
    cfg = replace(cfg, eval=ec)
    model = _load(args)
    data = _data_dir(args)
    out = Path(args.out)
    _snapshot(out, cfg, "eval-gen", {"checkpoint": args.checkpoint, "data": data})
    report = generation_report(model, data, args.split or ec.split, ec.n_samples, cfg.seed, ec.bins, ec.control)
    write_report(out, "gen_table", report.table, GEN_COLUMNS, report.metadata)
    print(f"wrote {out / 'gen_table.csv'}")


def cmd_latent(args, cfg: RunConfig) -> None:
    mode = args.mode or cfg.eval.latent_mode
    cfg = replace(cfg, eval=replace(cfg.eval, latent_mode=mode))
    model = _load(args)
    data = _data_dir(args)
    out = Path(args.out)
    _snapshot(out, cfg, "latent", {"checkpoint": args.checkpoint, "data": data})
    items = _items(Dataset.open(data), args.split or "all")
    vectors = [latent_vector(model, seq, mode) for _, seq in items]
    write_latents_csv(out / "latents.csv", vectors)
    print(f"wrote {len(vectors)} latent vectors to {out / 'latents.csv'}")


def cmd_delta(args, cfg: RunConfig) -> None:
    ec = cfg.eval
    if args.n_synth is not None:
        ec = replace(ec, n_synth=args.n_synth)
    if args.mode is not None:
        ec = replace(ec, latent_mode=args.mode)
    cfg = replace(cfg, eval=ec)
    model = _load(args)
    data = _data_dir(args)
    out = Path(args.out)
    _snapshot(out, cfg, "delta", {"checkpoint": args.checkpoint, "data": data})
    items = _items(Dataset.open(data), args.split or "all")
    scores = population_deltas(model, [seq for _, seq in items], ec.n_synth, cfg.seed, ec.latent_mode)
    write_deltas_csv(out / "deltas.csv", scores, {"disease_label": [r.disease_label for r, _ in items]})
    print(f"wrote {len(scores)} latent deltas to {out / 'deltas.csv'}")


def feature_table(model, items, mode: str = "frames") -> dict[str, np.ndarray]:
    """Confounder, ground-truth phenotype and latent feature groups per subject."""
    return {
        "confounders": confounder_matrix([r.conditions for r, _ in items]),
        "phenotypes": np.stack([extract_phenotypes(seq).as_array() for _, seq in items]),
        "latent": np.stack([latent_vector(model, seq, mode).z for _, seq in items]),
    }


def cmd_classify(args, cfg: RunConfig) -> None:
    ec = cfg.eval
    if args.positive is not None:
        ec = replace(ec, positive_label=args.positive)
    if args.classifiers is not None:
        ec = replace(ec, classifiers=tuple(args.classifiers.split(",")))
    bad = set(ec.classifiers) - set(CLASSIFIERS)
    if bad:
        raise ConfigError(f"eval.classifiers: unknown classifier(s) {sorted(bad)}; expected {CLASSIFIERS}")
    cfg = replace(cfg, eval=ec)
    model = _load(args)
    data = _data_dir(args)
    out = Path(args.out)
    _snapshot(out, cfg, "classify", {"checkpoint": args.checkpoint, "data": data})
    items = [(r, s) for r, s in _items(Dataset.open(data), args.split or "all")
             if r.disease_label in ("healthy", ec.positive_label)]
    y = np.array([int(r.disease_label == ec.positive_label) for r, _ in items])
    if y.sum() < ec.folds or (len(y) - y.sum()) < ec.folds:
        raise ValueError(f"classify: need at least {ec.folds} subjects per class in {data}; "
                         f"found {int(y.sum())} {ec.positive_label} and {int(len(y) - y.sum())} healthy")
    table = feature_table(model, items, ec.latent_mode)
    results = {clf: classify(table, y, clf, ec.folds, cfg.seed) for clf in ec.classifiers}
    write_auc_csv(out / "auc.csv", results)
    _write_json(out / "auc.json", results)
    print(f"wrote {out / 'auc.csv'}")


# ------------------------------------------------------------------ parser

COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "generate": cmd_generate,
    "eval-recon": cmd_eval_recon,
    "eval-gen": cmd_eval_gen,
    "latent": cmd_latent,
    "delta": cmd_delta,
    "classify": cmd_classify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override one configuration field (repeatable)")
    common.add_argument("--seed", type=int, help="master seed for all randomness")
    common.add_argument("--workers", type=int, help="worker processes where a stage can fan out")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", required=True, help="checkpoint directory")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    data.add_argument("--split", help="manifest split, or 'all'")

    parser = argparse.ArgumentParser(prog="cardiac-meshgen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", parents=[common], help="write a toy bundle dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--mix", help="disease mix, e.g. healthy=0.8,lowEF=0.2")
    p.add_argument("--splits", help="split sizes, e.g. train=64,val=8,test=16")

    p = sub.add_parser("train", parents=[common, data], help="train a model")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("reconstruct", parents=[common, ckpt, data], help="reconstruct bundles")
    p.add_argument("--bundle", help="single subject bundle directory instead of --data")

    p = sub.add_parser("generate", parents=[common, ckpt], help="sample sequences for given conditions")
    p.add_argument("--age", type=float, required=True)
    p.add_argument("--sex", type=int, choices=(0, 1), required=True, help="0 female, 1 male")
    p.add_argument("--weight", type=float, required=True)
    p.add_argument("--height", type=float, required=True)
    p.add_argument("--n", type=int, default=1)

    sub.add_parser("eval-recon", parents=[common, ckpt, data], help="HD/ASSD reconstruction table")

    p = sub.add_parser("eval-gen", parents=[common, ckpt, data], help="phenotype fidelity table")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--control", choices=("none", "shuffled"))

    p = sub.add_parser("latent", parents=[common, ckpt, data], help="latent vectors CSV")
    p.add_argument("--mode", choices=EXTRACTION_MODES)

    p = sub.add_parser("delta", parents=[common, ckpt, data], help="latent delta CSV")
    p.add_argument("--n-synth", type=int)
    p.add_argument("--mode", choices=EXTRACTION_MODES)

    p = sub.add_parser("classify", parents=[common, ckpt, data], help="cross-validated AUC CSV")
    p.add_argument("--positive", choices=[d for d in DISEASE_LABELS if d != "healthy"])
    p.add_argument("--classifiers", help=f"comma separated subset of {','.join(CLASSIFIERS)}")
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = apply_overrides(load_config(args.config), args.set)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            cfg = replace(cfg, workers=args.workers)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
