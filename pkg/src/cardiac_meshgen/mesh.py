"""Mesh and sequence data model, topology helpers, volumes and phenotypes.

Coordinates are in millimetres. Volumes are computed in mm^3 and reported
in millilitres in :class:`PhenotypeSet`.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

LV, MYO, RV = 0, 1, 2
LABEL_NAMES = ("LV", "Myo", "RV")
PHENOTYPE_NAMES = ("lvedv", "lvesv", "lvef", "lvm", "rvedv", "rvesv", "rvef")
DEFAULT_MYO_DENSITY = 1.05  # g/mL


class TopologyError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class ClinicalConditions:
    age: float
    sex: int  # 0 = female, 1 = male
    weight: float
    height: float

    def __post_init__(self):
        for name in ("age", "weight", "height"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ValueError(f"condition {name!r} must be finite and > 0, got {value!r}")
        if self.sex not in (0, 1):
            raise ValueError(f"condition 'sex' must be 0 or 1, got {self.sex!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.age, self.sex, self.weight, self.height], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"age": float(self.age), "sex": int(self.sex),
                "weight": float(self.weight), "height": float(self.height)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicalConditions":
        return cls(age=float(d["age"]), sex=int(d["sex"]),
                   weight=float(d["weight"]), height=float(d["height"]))


@dataclass
class CardiacMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3)
    labels: np.ndarray  # (V,)

    def validate(self) -> None:
        validate_faces(self.faces, len(self.vertices))
        if not np.all(np.isfinite(self.vertices)):
            raise TopologyError("mesh vertices contain non-finite coordinates")
        if self.labels.shape != (len(self.vertices),):
            raise TopologyError(f"labels shape {self.labels.shape} != ({len(self.vertices)},)")
        for s in range(len(LABEL_NAMES)):
            check_closed(structure_faces(self.faces, self.labels, s), name=LABEL_NAMES[s])


@dataclass
class MeshSequence:
    """Fixed-topology mesh sequence; ``vertices`` has shape (T, V, 3)."""

    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray
    conditions: ClinicalConditions | None = None
    subject_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.vertices.shape[0]

    @property
    def V(self) -> int:
        return self.vertices.shape[1]

    def frame(self, t: int) -> CardiacMesh:
        return CardiacMesh(self.vertices[t], self.faces, self.labels)

    @property
    def frames(self) -> list[CardiacMesh]:
        return [self.frame(t) for t in range(self.T)]

    def validate(self) -> None:
        if self.vertices.ndim != 3 or self.vertices.shape[2] != 3:
            raise TopologyError(f"vertices must be (T, V, 3), got {self.vertices.shape}")
        if self.T < 2:
            raise TopologyError(f"a sequence needs at least 2 frames, got {self.T}")
        for t in range(self.T):
            self.frame(t).validate()


@dataclass(frozen=True)
class PhenotypeSet:
    lvedv: float
    lvesv: float
    lvef: float
    lvm: float
    rvedv: float
    rvesv: float
    rvef: float
    ed_frame: int
    es_frame: int

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PHENOTYPE_NAMES])

    def to_dict(self) -> dict:
        d = {name: float(getattr(self, name)) for name in PHENOTYPE_NAMES}
        d["ed_frame"] = int(self.ed_frame)
        d["es_frame"] = int(self.es_frame)
        return d


def validate_faces(faces: np.ndarray, n_vertices: int) -> None:
    faces = np.asarray(faces)
    if faces.size == 0:
        return
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise TopologyError(f"faces must be (F, 3), got {faces.shape}")
    bad = np.flatnonzero(np.any((faces < 0) | (faces >= n_vertices), axis=1))
    if bad.size:
        f = int(bad[0])
        raise TopologyError(f"face {f} {tuple(int(i) for i in faces[f])} has an index outside [0, {n_vertices})")
    repeated = np.flatnonzero((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2])
                              | (faces[:, 0] == faces[:, 2]))
    if repeated.size:
        f = int(repeated[0])
        raise TopologyError(f"face {f} {tuple(int(i) for i in faces[f])} repeats a vertex")


def build_adjacency(faces: np.ndarray, n_vertices: int) -> list[list[int]]:
    """Sorted neighbour lists of the edge graph induced by ``faces``."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    validate_faces(faces, n_vertices)
    neighbors: list[set[int]] = [set() for _ in range(n_vertices)]
    for a, b, c in faces.tolist():
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    return [sorted(n) for n in neighbors]


def edge_index(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    """Directed edges (2, E) in both directions, no self loops, deduplicated."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    validate_faces(faces, n_vertices)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    e = np.unique(e, axis=0)
    return e.T.copy()


def structure_faces(faces: np.ndarray, labels: np.ndarray, structure: int) -> np.ndarray:
    faces = np.asarray(faces)
    fl = np.asarray(labels)[faces]
    return faces[np.all(fl == structure, axis=1)]


def check_closed(faces: np.ndarray, name: str = "surface") -> None:
    """Raise TopologyError unless every edge is shared by exactly two
    oppositely oriented faces."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    uniq, counts = np.unique(directed, axis=0, return_counts=True)
    if np.any(counts > 1):
        a, b = uniq[np.argmax(counts > 1)]
        raise TopologyError(f"{name}: directed edge ({a}, {b}) used by more than one face "
                            "(non-manifold or inconsistent orientation)")
    key = uniq[:, 0] * (int(uniq.max()) + 1) + uniq[:, 1]
    rkey = uniq[:, 1] * (int(uniq.max()) + 1) + uniq[:, 0]
    missing = ~np.isin(rkey, key)
    if np.any(missing):
        a, b = uniq[np.argmax(missing)]
        raise TopologyError(f"{name}: open surface, boundary edge ({a}, {b})")


def closed_surface_volume(vertices: np.ndarray, faces: np.ndarray, check: bool = True) -> float:
    """Signed volume enclosed by an oriented closed triangle surface (mm^3)."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if check:
        check_closed(faces)
    if len(faces) == 0:
        return 0.0
    v = np.asarray(vertices, dtype=np.float64)
    used = np.unique(faces)
    v = v - v[used].mean(axis=0)
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    return float(np.einsum("ij,ij->", a, np.cross(b, c)) / 6.0)


def batched_volumes(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Signed volumes of one closed surface over leading batch axes.

    ``vertices`` has shape (..., V, 3); returns shape (...).
    """
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return np.zeros(vertices.shape[:-2])
    v = np.asarray(vertices, dtype=np.float64)
    used = np.unique(faces)
    v = v - v[..., used, :].mean(axis=-2, keepdims=True)
    a, b, c = v[..., faces[:, 0], :], v[..., faces[:, 1], :], v[..., faces[:, 2], :]
    return np.einsum("...ij,...ij->...", a, np.cross(b, c)) / 6.0


def structure_volume_curves(vertices: np.ndarray, faces: np.ndarray, labels: np.ndarray,
                            check: bool = True) -> np.ndarray:
    """Per-structure volumes (mm^3): shape (..., 3) for (LV, Myo, RV)."""
    out = []
    for s in range(len(LABEL_NAMES)):
        sf = structure_faces(faces, labels, s)
        if check:
            check_closed(sf, name=LABEL_NAMES[s])
        out.append(batched_volumes(vertices, sf))
    return np.stack(out, axis=-1)


def phenotypes_from_volumes(volumes: np.ndarray, myo_density: float = DEFAULT_MYO_DENSITY) -> PhenotypeSet:
    """Phenotypes from a (T, 3) table of LV/Myo/RV volumes in mm^3."""
    vols = np.asarray(volumes, dtype=np.float64) / 1000.0
    lv, myo, rv = vols[:, LV], vols[:, MYO], vols[:, RV]
    ed = int(np.argmax(lv))
    es = int(np.argmin(lv))
    lvedv, lvesv = float(lv[ed]), float(lv[es])
    if not lvedv > 0:
        raise DegenerateGeometryError(f"non-positive LV end-diastolic volume {lvedv:.4g} mL")
    rvedv, rvesv = float(rv[ed]), float(rv[es])
    rvef = 100.0 * (rvedv - rvesv) / rvedv if rvedv > 0 else float("nan")
    return PhenotypeSet(
        lvedv=lvedv, lvesv=lvesv, lvef=100.0 * (lvedv - lvesv) / lvedv,
        lvm=float(myo[ed]) * myo_density, rvedv=rvedv, rvesv=rvesv, rvef=rvef,
        ed_frame=ed, es_frame=es,
    )


def extract_phenotypes(seq: MeshSequence, myo_density: float = DEFAULT_MYO_DENSITY) -> PhenotypeSet:
    vols = structure_volume_curves(seq.vertices, seq.faces, seq.labels)
    return phenotypes_from_volumes(vols, myo_density)


def ed_es_frames(seq: MeshSequence) -> tuple[int, int]:
    lv = batched_volumes(seq.vertices, structure_faces(seq.faces, seq.labels, LV))
    return int(np.argmax(lv)), int(np.argmin(lv))


def topology_hash(faces: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(faces, dtype="<u4").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="u1").tobytes())
    return h.hexdigest()


def bbox_diagonal(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))


def geodesic_sphere(frequency: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit sphere from an icosahedron whose faces are split into
    ``frequency**2`` triangles; 10 f^2 + 2 vertices, outward faces."""
    if frequency < 1:
        raise ValueError("frequency must be >= 1")
    phi = (1 + 5 ** 0.5) / 2
    base = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    base_faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    n = frequency
    index: dict[tuple, int] = {}
    verts: list[np.ndarray] = []

    def vid(key: tuple, p: np.ndarray) -> int:
        # key = sorted corner ids with integer weights, shared across faces
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    faces = []
    for a, b, c in base_faces:
        grid = {}
        for i in range(n + 1):
            for j in range(n + 1 - i):
                k = n - i - j
                p = (i * base[a] + j * base[b] + k * base[c]) / n
                key = tuple(sorted(((a, i), (b, j), (c, k))))
                key = tuple(x for x in key if x[1] > 0)
                grid[i, j] = vid(key, p)
        for i in range(n):
            for j in range(n - i):
                # weight i on a, j on b; keep orientation of (a, b, c)
                faces.append((grid[i + 1, j], grid[i, j + 1], grid[i, j]))
                if i + j + 1 < n:
                    faces.append((grid[i + 1, j], grid[i + 1, j + 1], grid[i, j + 1]))
    v = np.array(verts)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    if closed_surface_volume(v, f) < 0:
        f = f[:, ::-1].copy()
    return v, f
