"""Optimisation loop, loss evaluation and checkpoint handling."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .losses import (DEFAULT_BETA, DEFAULT_LAMBDA_S, LossBreakdown, kl_loss, laplacian_loss,
                     mean_breakdown, neighbor_index, reconstruction_loss, total_loss)
from .mesh import MeshSequence, build_adjacency, topology_hash
from .model import MeshVAE, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .toy import Dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "split", "reconstruction", "kl", "smoothing", "total")


class DatasetError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 300
    beta: float = DEFAULT_BETA
    lambda_s: float = DEFAULT_LAMBDA_S
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    checkpoint_every: int = 0  # epochs; 0 keeps only final and best
    grad_clip: float | None = None
    structure_chamfer: bool = True  # nearest neighbours searched within each labelled structure

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    history: list[dict]


class LossFunction:
    """Chamfer + beta * KL + lambda_s * Laplacian objective bound to one template topology."""

    def __init__(self, faces: np.ndarray, labels: np.ndarray, beta: float = DEFAULT_BETA,
                 lambda_s: float = DEFAULT_LAMBDA_S, structure_chamfer: bool = True):
        self.labels = np.asarray(labels) if structure_chamfer else None
        self.adjacency = neighbor_index(build_adjacency(faces, len(labels)))
        self.beta = beta
        self.lambda_s = lambda_s

    def __call__(self, recon: torch.Tensor, target: torch.Tensor, mu: torch.Tensor,
                 logvar: torch.Tensor) -> tuple[torch.Tensor, LossBreakdown]:
        rec = reconstruction_loss(recon, target, self.labels)
        kl = kl_loss(mu, logvar, self.beta)
        smooth = laplacian_loss(recon, self.adjacency)
        total = rec + kl + self.lambda_s * smooth
        br = total_loss(rec.item(), kl.item(), smooth.item(), self.lambda_s, self.beta)
        return total, br


def _seq_tensor(seq: MeshSequence) -> torch.Tensor:
    return torch.as_tensor(np.asarray(seq.vertices, dtype=np.float32))[None]


def condition_stats(seqs: list[MeshSequence]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    arr = np.array([[s.conditions.age, s.conditions.weight, s.conditions.height] for s in seqs])
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return tuple(float(x) for x in mean), tuple(float(x) for x in std)


def check_topology(items, root) -> str:
    hashes = {topology_hash(seq.faces, seq.labels) for _, seq in items}
    if len(hashes) != 1:
        raise DatasetError(f"bundles in {root} do not share one mesh topology ({len(hashes)} variants)")
    return hashes.pop()


def directory_digest(root: str | os.PathLike) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@torch.no_grad()
def evaluate_items(model: MeshVAE, items, loss_fn: LossFunction) -> list[LossBreakdown]:
    """Per-subject evaluation-mode losses (z_a = mu, no dropout)."""
    was_training = model.training
    model.eval()
    out = []
    for _, seq in items:
        x = _seq_tensor(seq)
        recon, st = model(x, seq.conditions, sample=False)
        out.append(loss_fn(recon[0], x[0], st.mu, st.logvar)[1])
    model.train(was_training)
    return out


def evaluate_loss(checkpoint, dataset, split: str, beta: float | None = None,
                  lambda_s: float | None = None, structure_chamfer: bool | None = None) -> LossBreakdown:
    """Mean evaluation-mode LossBreakdown of ``checkpoint`` over a dataset split.

    ``checkpoint`` is a path or a loaded model; loss weights default to the
    values recorded in the checkpoint sidecar (or the standard defaults).
    """
    from .model import read_sidecar

    sidecar = {}
    if isinstance(checkpoint, (str, os.PathLike)):
        sidecar = read_sidecar(checkpoint).get("training", {})
        model = load_checkpoint(checkpoint)
    else:
        model = checkpoint
    ds = dataset if isinstance(dataset, Dataset) else Dataset.open(dataset)
    items = ds.split(split)
    if not items:
        raise DatasetError(f"split {split!r} of {ds.root} is empty")
    for _, seq in items:
        model.check_sequence(seq)
    loss_fn = LossFunction(model.faces, model.labels,
                           beta=sidecar.get("beta", DEFAULT_BETA) if beta is None else beta,
                           lambda_s=sidecar.get("lambda_s", DEFAULT_LAMBDA_S) if lambda_s is None else lambda_s,
                           structure_chamfer=sidecar.get("structure_chamfer", True)
                           if structure_chamfer is None else structure_chamfer)
    return mean_breakdown(evaluate_items(model, items, loss_fn))


def init_model(train_items, model_config: ModelConfig, seed: int) -> MeshVAE:
    """Model at epoch 0: T, V and condition statistics taken from the training
    split, seeded weights, and the output bias set to the shrunken mean mesh."""
    seqs = [s for _, s in train_items]
    mean, std = condition_stats(seqs)
    mc = replace(model_config, T=seqs[0].T, V=seqs[0].V, condition_mean=mean, condition_std=std)
    model = build_model(mc, seqs[0].faces, seqs[0].labels, seed=seed)
    model.init_output_template(np.mean([s.vertices.mean(axis=0) for s in seqs], axis=0))
    return model


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["split"]] + [repr(float(r[k])) for k in LOG_COLUMNS[2:]])


def read_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in LOG_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows


def train(dataset_dir: str | os.PathLike, model_config: ModelConfig, train_config: TrainConfig,
          out_dir: str | os.PathLike, progress=None) -> TrainResult:
    """Train on the ``train`` split, logging train/val losses per epoch.

    Row ``epoch=0`` holds evaluation-mode losses of the initial model on both
    splits; later ``train`` rows are running means of the optimisation steps
    of that epoch and ``val`` rows are evaluation-mode losses after it.
    """
    cfg = train_config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = Dataset.open(dataset_dir)
    train_items = ds.split("train")
    if not train_items:
        raise DatasetError(f"dataset {ds.root} has no train subjects")
    val_items = ds.split("val") if "val" in ds.splits else []
    topo = check_topology(train_items + val_items, ds.root)
    seq0 = train_items[0][1]
    model = init_model(train_items, model_config, cfg.seed)
    loss_fn = LossFunction(seq0.faces, seq0.labels, cfg.beta, cfg.lambda_s, cfg.structure_chamfer)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas,
                           weight_decay=cfg.weight_decay)
    torch.manual_seed(cfg.seed + 1)  # dropout stream
    eps_gen = torch.Generator().manual_seed(cfg.seed + 2)
    data = [(_seq_tensor(s), s.conditions) for _, s in train_items]

    sidecar = {
        "training": {**cfg.to_dict(), "optimizer": "Adam", "epochs_completed": 0},
        "dataset": {"manifest_sha256": hashlib.sha256((ds.root / "manifest.json").read_bytes()).hexdigest(),
                    "topology_hash": topo},
    }

    def save(name: str, epoch: int) -> Path:
        sidecar["training"]["epochs_completed"] = epoch
        return save_checkpoint(model, out / name, sidecar)

    rows: list[dict] = []

    def add_rows(epoch: int, split: str, br: LossBreakdown):
        rows.append({"epoch": epoch, "split": split, **br.to_dict()})

    add_rows(0, "train", mean_breakdown(evaluate_items(model, train_items, loss_fn)))
    best_val = math.inf
    if val_items:
        val0 = mean_breakdown(evaluate_items(model, val_items, loss_fn))
        add_rows(0, "val", val0)
        best_val = val0.total
    best_dir = save("checkpoint_best", 0)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
        epoch_losses = []
        for i in order:
            x, cond = data[i]
            recon, st = model(x, cond, generator=eps_gen)
            total, br = loss_fn(recon[0], x[0], st.mu, st.logvar)
            if not math.isfinite(br.total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, subject {train_items[i][0].id}): "
                    f"reconstruction={br.reconstruction} kl={br.kl} smoothing={br.smoothing}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip is not None:
                norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                if norm > cfg.grad_clip:
                    log.info("step %d: gradient norm %.4g clipped to %.4g", step, float(norm), cfg.grad_clip)
            opt.step()
            epoch_losses.append(br)
            step += 1
        model.eval()
        train_br = mean_breakdown(epoch_losses)
        add_rows(epoch, "train", train_br)
        if val_items:
            val_br = mean_breakdown(evaluate_items(model, val_items, loss_fn))
            add_rows(epoch, "val", val_br)
            score = val_br.total
        else:
            score = train_br.total
        if score < best_val:
            best_val = score
            best_dir = save("checkpoint_best", epoch)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save(f"checkpoint_epoch_{epoch:04d}", epoch)
        _write_log(out / "training_log.csv", rows)
        if progress is not None:
            progress(epoch, train_br, rows[-1] if val_items else None)

    model.eval()
    final_dir = save("checkpoint_final", cfg.epochs)
    log_path = out / "training_log.csv"
    _write_log(log_path, rows)
    return TrainResult(final_dir, best_dir, log_path, rows)
