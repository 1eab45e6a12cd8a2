"""Latent vectors, personalised-norm latent delta, correlation and
classification analyses."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.ensemble import AdaBoostClassifier
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .mesh import ClinicalConditions, MeshSequence
from .toy import mix64

EXTRACTION_MODES = ("frames", "mu")
CLASSIFIERS = ("adaboost", "lda", "svm")
FEATURE_SETS = {
    "confounders": ("confounders",),
    "phenotypes+confounders": ("phenotypes", "confounders"),
    "latent+confounders": ("latent", "confounders"),
    "phenotypes+latent+confounders": ("phenotypes", "latent", "confounders"),
}


@dataclass(frozen=True)
class LatentVector:
    z: np.ndarray
    source: str  # "real" or "synthetic"
    subject_id: str = ""


@dataclass(frozen=True)
class DeltaScore:
    delta_z: float
    n_synth: int
    seed: int
    subject_id: str = ""


def latents_from_vertices(model, vertices: np.ndarray, conditions: ClinicalConditions,
                          mode: str = "frames", chunk: int = 10) -> np.ndarray:
    """(N, T, V, 3) sequences sharing one condition -> (N, d) latent vectors."""
    if mode not in EXTRACTION_MODES:
        raise ValueError(f"unknown extraction mode {mode!r}; expected one of {EXTRACTION_MODES}")
    out = []
    for i in range(0, len(vertices), chunk):
        mu, _, frames = model.encode_latents(torch.as_tensor(vertices[i:i + chunk]), conditions)
        out.append((frames.mean(dim=1) if mode == "frames" else mu).numpy())
    return np.concatenate(out).astype(np.float64)


def latent_vector(model, seq: MeshSequence, mode: str = "frames") -> LatentVector:
    """Mean of the Transformer-encoder outputs at the frame positions
    (``mode="frames"``), or the posterior mean (``mode="mu"``)."""
    model.check_sequence(seq)
    z = latents_from_vertices(model, np.asarray(seq.vertices)[None], seq.conditions, mode)[0]
    return LatentVector(z, "real", seq.subject_id)


def delta_from_latents(z_real: np.ndarray, z_synth: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(z_real) - np.asarray(z_synth).mean(axis=0)))


def synthetic_latents(model, conditions: ClinicalConditions, n_synth: int, seed: int,
                      mode: str = "frames") -> np.ndarray:
    gen = torch.Generator().manual_seed(seed & ((1 << 63) - 1))
    verts = model.generate_vertices(conditions, n_synth, gen)
    return latents_from_vertices(model, verts, conditions, mode)


def latent_delta(model, seq: MeshSequence, conditions: ClinicalConditions | None = None,
                 n_synth: int = 100, seed: int = 0, mode: str = "frames") -> DeltaScore:
    """Distance of the subject's latent vector from the mean latent vector of
    ``n_synth`` sequences generated under the same conditions."""
    conditions = seq.conditions if conditions is None else conditions
    z_real = latent_vector(model, seq, mode).z
    z_synth = synthetic_latents(model, conditions, n_synth, seed, mode)
    return DeltaScore(delta_from_latents(z_real, z_synth), n_synth, seed, seq.subject_id)


def population_deltas(model, seqs: list[MeshSequence], n_synth: int = 100, seed: int = 0,
                      mode: str = "frames") -> list[DeltaScore]:
    """Latent delta per subject; subject i uses the derived seed mix64(seed, i)."""
    return [latent_delta(model, s, s.conditions, n_synth, mix64(seed, i), mode) for i, s in enumerate(seqs)]


def pearson_correlation(latents: np.ndarray, phenotypes: np.ndarray) -> np.ndarray:
    """(d, k) Pearson r between latent dims and phenotype columns; NaN where
    either column is constant."""
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(phenotypes, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row mismatch: {x.shape[0]} latents vs {y.shape[0]} phenotypes")
    if x.shape[0] < 3:
        raise ValueError("pearson_correlation needs at least 3 subjects")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sx = np.sqrt((xc ** 2).sum(axis=0))
    sy = np.sqrt((yc ** 2).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (xc.T @ yc) / np.outer(sx, sy)
    const = (sx <= 1e-12 * (np.abs(x).max(axis=0) + 1e-300))[:, None] | \
            (sy <= 1e-12 * (np.abs(y).max(axis=0) + 1e-300))[None, :]
    r = np.clip(r, -1.0, 1.0)
    r[const] = np.nan
    return r


def make_classifier(name: str, seed: int = 0):
    if name == "adaboost":
        clf = AdaBoostClassifier(n_estimators=100, random_state=seed)
    elif name == "lda":
        clf = LinearDiscriminantAnalysis(solver="lsqr", shrinkage="auto")
    elif name == "svm":
        clf = SVC(kernel="linear", C=1.0, random_state=seed)
    else:
        raise ValueError(f"unknown classifier {name!r}; expected one of {CLASSIFIERS}")
    return make_pipeline(StandardScaler(), clf)


def cross_val_auc(x: np.ndarray, y: np.ndarray, classifier: str, folds: int = 5,
                  seed: int = 0) -> np.ndarray:
    """Fold AUCs of stratified k-fold CV; features standardised per training fold."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y).astype(int)
    if len(np.unique(y)) != 2:
        raise ValueError("classification needs exactly two classes")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    aucs = []
    for train_idx, test_idx in skf.split(x, y):
        model = make_classifier(classifier, seed)
        model.fit(x[train_idx], y[train_idx])
        score = model.decision_function(x[test_idx])
        aucs.append(roc_auc_score(y[test_idx], score))
    return np.array(aucs)


def classify(feature_table: dict[str, np.ndarray], labels, classifier: str, folds: int = 5,
             seed: int = 0, feature_sets: dict | None = None) -> dict[str, dict]:
    """Cross-validated AUC for each feature set built from ``feature_table``
    groups (``confounders``, ``phenotypes``, ``latent``)."""
    feature_sets = FEATURE_SETS if feature_sets is None else feature_sets
    out = {}
    for name, groups in feature_sets.items():
        missing = [g for g in groups if g not in feature_table]
        if missing:
            raise KeyError(f"feature set {name!r} needs groups {missing} missing from the feature table")
        x = np.concatenate([np.asarray(feature_table[g], dtype=np.float64).reshape(len(labels), -1)
                            for g in groups], axis=1)
        aucs = cross_val_auc(x, labels, classifier, folds, seed)
        out[name] = {"auc_mean": float(aucs.mean()), "auc_sd": float(aucs.std()),
                     "fold_aucs": [float(a) for a in aucs]}
    return out


def confounder_matrix(conditions: list[ClinicalConditions]) -> np.ndarray:
    return np.stack([c.as_array() for c in conditions])


# ---------------------------------------------------------------- writers

def write_latents_csv(path: str | os.PathLike, vectors: list[LatentVector]) -> None:
    d = len(vectors[0].z) if vectors else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "source"] + [f"z{i}" for i in range(d)])
        for v in vectors:
            w.writerow([v.subject_id, v.source] + [repr(float(x)) for x in v.z])


def write_deltas_csv(path: str | os.PathLike, scores: list[DeltaScore], extra: dict | None = None) -> None:
    extra = extra or {}
    cols = ["subject_id", "delta_z", "n_synth", "seed"] + list(extra)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i, s in enumerate(scores):
            w.writerow([s.subject_id, repr(s.delta_z), s.n_synth, s.seed] + [extra[k][i] for k in extra])


def write_auc_csv(path: str | os.PathLike, results: dict[str, dict[str, dict]]) -> None:
    """``results`` maps classifier -> feature set -> AUC summary."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["classifier", "feature_set", "auc_mean", "auc_sd"])
        for clf, sets in results.items():
            for name, r in sets.items():
                w.writerow([clf, name, repr(r["auc_mean"]), repr(r["auc_sd"])])
