"""Procedural beating-heart population and the on-disk bundle format.

Each subject is three labelled structures built from one calibrated
geodesic sphere template:

* LV cavity: ellipsoid, all radii scaled by ``s(t) = 1 - a_eff sin^2(pi t / T)``.
* Myo: outer ellipsoid plus an inward-facing copy of the LV surface, so the
  signed sub-mesh volume is the shell volume. The outer radii follow the
  cavity such that the shell volume is constant over the cycle.
* RV: laterally offset half-ellipsoid (sphere template flattened onto its
  septal plane).
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .mesh import (LABEL_NAMES, LV, MYO, RV, ClinicalConditions, MeshSequence,
                   closed_surface_volume, geodesic_sphere)

DISEASE_LABELS = ("healthy", "lowEF", "thickWall")
SPLITS = ("train", "val", "test")

# Condition coupling of the linear size factor, relative to the reference
# subject (male, 60 y, 75 kg, 170 cm).
SIZE_PER_CM_HEIGHT = 0.005
SIZE_PER_KG_WEIGHT = 0.002
SIZE_FEMALE = -0.06
SIZE_PER_YEAR_AGE = -0.002
REF_AGE, REF_WEIGHT, REF_HEIGHT = 60.0, 75.0, 170.0

# Contraction coupling: a_eff = a * (1 + 0.1 (1 - sex) - 0.01 (age - 60)),
# i.e. an absolute reduction of 0.004 per year at the default a = 0.4.
AMPLITUDE_FEMALE = 0.1
AMPLITUDE_PER_YEAR_AGE = -0.01
AMPLITUDE_MAX = 0.9
THICK_WALL_FACTOR = 1.5
LOW_EF_FACTOR = 0.5

MASK64 = (1 << 64) - 1


class BundleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ToyGeneratorParams:
    frequency: int = 4  # geodesic sphere frequency; 10 f^2 + 2 vertices per surface
    T: int = 20
    base_lv_radii: tuple[float, float, float] = (25.0, 25.0, 46.0)
    myo_thickness_mm: float = 8.0
    rv_offset_mm: float = 4.0  # gap between LV epicardium and RV septal plane
    base_rv_radii: tuple[float, float, float] = (26.0, 34.0, 42.0)
    rv_amplitude_ratio: float = 0.9
    contraction_amplitude: float = 0.4
    size_jitter: float = 0.03  # std of log size factor, per subject
    elongation_jitter: float = 0.03  # std of log long-axis factor
    amplitude_jitter: float = 0.05  # std of relative amplitude change
    noise_std: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.contraction_amplitude < 1.0:
            raise ValueError("contraction_amplitude must lie in [0, 1)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.frequency < 1:
            raise ValueError("frequency must be >= 1")

    @property
    def vertices_per_surface(self) -> int:
        return 10 * self.frequency ** 2 + 2

    @property
    def base_lv_volume_ml(self) -> float:
        a, b, c = self.base_lv_radii
        return 4.0 / 3.0 * np.pi * a * b * c / 1000.0

    @classmethod
    def from_dict(cls, d: dict) -> "ToyGeneratorParams":
        d = dict(d)
        for key in ("base_lv_radii", "base_rv_radii"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_lv_radii"] = list(self.base_lv_radii)
        d["base_rv_radii"] = list(self.base_rv_radii)
        return d


@dataclass(frozen=True)
class ConditionRanges:
    age: tuple[float, float] = (40.0, 80.0)
    weight: tuple[float, float] = (50.0, 110.0)
    height: tuple[float, float] = (150.0, 195.0)
    p_male: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionRanges":
        d = dict(d)
        for key in ("age", "weight", "height"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    conditions: ClinicalConditions
    disease_label: str
    seed: int


def mix64(master_seed: int, index: int) -> int:
    """SplitMix64 finaliser applied to ``master_seed + (index + 1) * golden``."""
    z = (int(master_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def size_factor(c: ClinicalConditions) -> float:
    return (1.0 + SIZE_PER_CM_HEIGHT * (c.height - REF_HEIGHT)
            + SIZE_PER_KG_WEIGHT * (c.weight - REF_WEIGHT)
            + SIZE_FEMALE * (1 - c.sex)
            + SIZE_PER_YEAR_AGE * (c.age - REF_AGE))


def effective_amplitude(a: float, c: ClinicalConditions, disease_label: str) -> float:
    a_eff = a * (1.0 + AMPLITUDE_FEMALE * (1 - c.sex) + AMPLITUDE_PER_YEAR_AGE * (c.age - REF_AGE))
    if disease_label == "lowEF":
        a_eff *= LOW_EF_FACTOR
    return float(np.clip(a_eff, 0.0, AMPLITUDE_MAX))


def contraction_profile(T: int, a_eff: float) -> np.ndarray:
    t = np.arange(T)
    return 1.0 - a_eff * np.sin(np.pi * t / T) ** 2


def analytic_ef(a_eff: float) -> float:
    return 100.0 * (1.0 - (1.0 - a_eff) ** 3)


@lru_cache(maxsize=8)
def template(frequency: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(unit_sphere, sphere_faces, faces, labels) of the full heart template.

    The unit sphere is radially calibrated so its polyhedral volume equals
    4/3 pi, which makes mesh volumes match the ellipsoid formulas.
    """
    u, f = geodesic_sphere(frequency)
    u = u * (4.0 / 3.0 * np.pi / closed_surface_volume(u, f)) ** (1.0 / 3.0)
    n = len(u)
    faces = np.concatenate([f, f + n, f[:, ::-1] + 2 * n, f + 3 * n]).astype(np.int64)
    labels = np.concatenate([np.full(n, LV), np.full(2 * n, MYO), np.full(n, RV)]).astype(np.uint8)
    u.setflags(write=False)
    faces.setflags(write=False)
    labels.setflags(write=False)
    return u, f, faces, labels


def synth_subject(conditions: ClinicalConditions, disease_label: str,
                  params: ToyGeneratorParams, subject_id: str = "") -> MeshSequence:
    if disease_label not in DISEASE_LABELS:
        raise ValueError(f"unknown disease label {disease_label!r}")
    rng = np.random.default_rng(params.seed)
    jit_size, jit_long, jit_amp = rng.standard_normal(3)
    u, _, faces, labels = template(params.frequency)
    n = len(u)

    g = size_factor(conditions) * float(np.exp(params.size_jitter * jit_size))
    if g <= 0:
        raise ValueError(f"conditions {conditions} give a non-positive size factor")
    r = np.array(params.base_lv_radii) * g
    r[2] *= float(np.exp(params.elongation_jitter * jit_long))
    thickness = params.myo_thickness_mm * g * (THICK_WALL_FACTOR if disease_label == "thickWall" else 1.0)
    if thickness >= r.min():
        raise ValueError(f"myocardial thickness {thickness:.3g} mm >= LV radius {r.min():.3g} mm")

    a_eff = effective_amplitude(params.contraction_amplitude, conditions, disease_label)
    a_eff = float(np.clip(a_eff * (1.0 + params.amplitude_jitter * jit_amp), 0.0, AMPLITUDE_MAX))
    s = contraction_profile(params.T, a_eff)
    a_rv = float(np.clip(a_eff * params.rv_amplitude_ratio, 0.0, AMPLITUDE_MAX))
    s_rv = contraction_profile(params.T, a_rv)

    r_out = r + thickness
    shell = np.prod(r_out) - np.prod(r)
    q = ((np.prod(r) * s ** 3 + shell) / np.prod(r_out)) ** (1.0 / 3.0)

    rv_r = np.array(params.base_rv_radii) * g
    rv_center = np.array([r_out[0] + params.rv_offset_mm, 0.0, 0.0])
    u_half = u.copy()
    u_half[:, 0] = np.maximum(u_half[:, 0], 0.0)

    T = params.T
    verts = np.empty((T, 4 * n, 3))
    lv = u[None] * (r[None, :] * s[:, None])[:, None, :]
    verts[:, :n] = lv
    verts[:, n:2 * n] = u[None] * (r_out[None, :] * q[:, None])[:, None, :]
    verts[:, 2 * n:3 * n] = lv
    verts[:, 3 * n:] = rv_center + u_half[None] * (rv_r[None, :] * s_rv[:, None])[:, None, :]
    if params.noise_std > 0:
        verts += rng.normal(0.0, params.noise_std, size=(4 * n, 3))[None]

    meta = {"a_eff": a_eff, "size_factor": g, "lv_radii_ed": r.tolist(),
            "myo_thickness": float(thickness), "disease_label": disease_label}
    return MeshSequence(verts.astype(np.float32), np.array(faces), np.array(labels),
                        conditions=conditions, subject_id=subject_id, meta=meta)


def largest_remainder_counts(n: int, mix: dict[str, float]) -> dict[str, int]:
    names = list(mix)
    p = np.array([mix[k] for k in names], dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"disease mix proportions must be >= 0 and sum to 1, got {mix}")
    raw = n * p
    counts = np.floor(raw).astype(int)
    remainder = raw - counts
    order = sorted(range(len(names)), key=lambda i: (-remainder[i], i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return {k: int(c) for k, c in zip(names, counts)}


def sample_conditions(seed: int, ranges: ConditionRanges) -> ClinicalConditions:
    rng = np.random.default_rng([seed, 1])
    age = rng.uniform(*ranges.age)
    sex = int(rng.random() < ranges.p_male)
    weight = rng.uniform(*ranges.weight)
    height = rng.uniform(*ranges.height)
    return ClinicalConditions(age=float(age), sex=sex, weight=float(weight), height=float(height))


def population_records(n: int, master_seed: int, disease_mix: dict[str, float],
                       ranges: ConditionRanges = ConditionRanges()) -> list[SubjectRecord]:
    if n < 0:
        raise ValueError("n must be >= 0")
    counts = largest_remainder_counts(n, disease_mix)
    labels = [name for name, c in counts.items() for _ in range(c)]
    perm = np.random.default_rng(master_seed & MASK64).permutation(n)
    labels = [labels[i] for i in perm]
    records = []
    for i in range(n):
        seed = mix64(master_seed, i)
        records.append(SubjectRecord(id=f"{i:05d}", conditions=sample_conditions(seed, ranges),
                                     disease_label=labels[i], seed=seed))
    return records


def _synth_record(args):
    record, params = args
    return synth_subject(record.conditions, record.disease_label,
                         replace(params, seed=record.seed), subject_id=record.id)


def synth_population(n: int, master_seed: int, disease_mix: dict[str, float],
                     params: ToyGeneratorParams = ToyGeneratorParams(),
                     ranges: ConditionRanges = ConditionRanges(),
                     workers: int = 1) -> list[tuple[SubjectRecord, MeshSequence]]:
    records = population_records(n, master_seed, disease_mix, ranges)
    jobs = [(r, params) for r in records]
    if workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            seqs = list(ex.map(_synth_record, jobs))
    else:
        seqs = [_synth_record(j) for j in jobs]
    return list(zip(records, seqs))


# ---------------------------------------------------------------- bundles

def bundle_dir(root: str | os.PathLike, subject_id: str) -> Path:
    return Path(root) / f"subject_{subject_id}"


def write_bundle(seq: MeshSequence, record: SubjectRecord, root: str | os.PathLike) -> Path:
    """Write ``subject_<id>/`` under ``root`` and return its path."""
    out = bundle_dir(root, record.id)
    out.mkdir(parents=True, exist_ok=True)
    T, V, _ = seq.vertices.shape
    meta = {
        "id": record.id,
        "conditions": record.conditions.to_dict(),
        "disease_label": record.disease_label,
        "T": int(T),
        "V": int(V),
        "F": int(len(seq.faces)),
        "label_names": list(LABEL_NAMES),
        "seed": int(record.seed),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "vertices.f32le").write_bytes(np.ascontiguousarray(seq.vertices, dtype="<f4").tobytes())
    (out / "faces.u32le").write_bytes(np.ascontiguousarray(seq.faces, dtype="<u4").tobytes())
    (out / "vertex_labels.u8").write_bytes(np.ascontiguousarray(seq.labels, dtype="u1").tobytes())
    return out


def _read_array(path: Path, dtype: str, count: int, shape: tuple) -> np.ndarray:
    if not path.exists():
        raise BundleFormatError(f"missing file {path.name} in {path.parent}")
    data = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(data) != count * itemsize:
        raise BundleFormatError(
            f"{path.name}: expected {count} values ({count * itemsize} bytes) per meta.json, "
            f"found {len(data)} bytes")
    return np.frombuffer(data, dtype=dtype).reshape(shape)


def read_bundle(path: str | os.PathLike) -> tuple[SubjectRecord, MeshSequence]:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise BundleFormatError(f"missing file meta.json in {path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        T, V, F = int(meta["T"]), int(meta["V"]), int(meta["F"])
        conditions = ClinicalConditions.from_dict(meta["conditions"])
        record = SubjectRecord(id=str(meta["id"]), conditions=conditions,
                               disease_label=str(meta["disease_label"]), seed=int(meta.get("seed", 0)))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"meta.json in {path}: {exc}") from exc
    vertices = _read_array(path / "vertices.f32le", "<f4", T * V * 3, (T, V, 3))
    faces = _read_array(path / "faces.u32le", "<u4", F * 3, (F, 3))
    labels = _read_array(path / "vertex_labels.u8", "u1", V, (V,))
    if not np.all(np.isfinite(vertices)):
        raise BundleFormatError(f"vertices.f32le in {path} contains non-finite values")
    if F and int(faces.max()) >= V:
        raise BundleFormatError(f"faces.u32le in {path} references vertex >= V={V}")
    if np.any(labels > 2):
        raise BundleFormatError(f"vertex_labels.u8 in {path} has labels outside {{0, 1, 2}}")
    seq = MeshSequence(vertices.astype(np.float32), faces.astype(np.int64), labels.astype(np.uint8),
                       conditions=conditions, subject_id=record.id,
                       meta={"disease_label": record.disease_label})
    return record, seq


def assign_splits(n: int, split_sizes: dict[str, int]) -> list[str]:
    """Consecutive split blocks in manifest order (train, val, test)."""
    if sum(split_sizes.values()) != n:
        raise ValueError(f"split sizes {split_sizes} do not sum to n={n}")
    out = []
    for name in SPLITS:
        out += [name] * split_sizes.get(name, 0)
    return out


def write_dataset(root: str | os.PathLike, items: list[tuple[SubjectRecord, MeshSequence]],
                  splits: list[str], extra: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for record, seq in items:
        write_bundle(seq, record, root)
    manifest = {"subjects": [{"id": r.id, "split": s} for (r, _), s in zip(items, splits)]}
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return root


@dataclass
class Dataset:
    root: Path
    manifest: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root: str | os.PathLike) -> "Dataset":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise BundleFormatError(f"missing manifest.json in {root}")
        return cls(root, json.loads(path.read_text(encoding="utf-8")))

    def ids(self, split: str | None = None) -> list[str]:
        """Subject ids of one manifest split; ``None`` or ``"all"`` selects every subject."""
        subjects = self.manifest["subjects"]
        if split is None or split == "all":
            return [s["id"] for s in subjects]
        if split not in self.splits:
            raise KeyError(f"split {split!r} not in manifest {self.root / 'manifest.json'}")
        return [s["id"] for s in subjects if s["split"] == split]

    @property
    def splits(self) -> set[str]:
        return {s["split"] for s in self.manifest["subjects"]}

    def load(self, subject_id: str) -> tuple[SubjectRecord, MeshSequence]:
        if subject_id not in self._cache:
            self._cache[subject_id] = read_bundle(bundle_dir(self.root, subject_id))
        return self._cache[subject_id]

    def split(self, split: str) -> list[tuple[SubjectRecord, MeshSequence]]:
        return [self.load(i) for i in self.ids(split)]
