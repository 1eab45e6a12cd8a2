"""Training loss terms: Chamfer reconstruction, beta-weighted KL, Laplacian
smoothing, and their weighted total."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

DEFAULT_BETA = 0.01
DEFAULT_LAMBDA_S = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    reconstruction: float
    kl: float
    smoothing: float
    total: float
    beta: float = DEFAULT_BETA
    lambda_s: float = DEFAULT_LAMBDA_S

    def to_dict(self) -> dict:
        return asdict(self)


def safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm with a zero (not NaN) gradient at the origin."""
    sq = (x * x).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def nearest_distances(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Distances from each point of ``a`` to its nearest point in ``b`` and back.

    Works on leading batch dimensions: ``a`` (..., n, 3), ``b`` (..., m, 3).
    The neighbour is selected on squared distances, then the distance is
    recomputed from the coordinate difference so values and gradients are
    exact.
    """
    with torch.no_grad():
        ones_a = torch.ones_like(a[..., :1])
        ones_b = torch.ones_like(b[..., :1])
        pa = torch.cat([a, (a * a).sum(-1, keepdim=True), ones_a], -1)
        pb = torch.cat([-2.0 * b, ones_b, (b * b).sum(-1, keepdim=True)], -1)
        sq = pa @ pb.transpose(-1, -2)
        ab = sq.min(-1).indices
        ba = sq.transpose(-1, -2).contiguous().min(-1).indices
    nn_b = torch.gather(b, -2, ab[..., None].expand(*ab.shape, 3))
    nn_a = torch.gather(a, -2, ba[..., None].expand(*ba.shape, 3))
    return safe_norm(a - nn_b), safe_norm(b - nn_a)


def chamfer_distance(a, b) -> torch.Tensor:
    """Sum of the two directed mean nearest-neighbour distances (not halved)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ValueError("chamfer_distance needs non-empty point sets")
    d_ab, d_ba = nearest_distances(a, b)
    return d_ab.mean(-1) + d_ba.mean(-1)


def reconstruction_loss(recon, target, labels=None) -> torch.Tensor:
    """Mean over frames of the per-frame Chamfer distance.

    With ``labels`` the nearest neighbours are searched within each labelled
    structure only, and the per-frame value is the vertex-count weighted
    mean of the per-structure Chamfer distances.
    """
    recon, target = _as_tensor(recon), _as_tensor(target)
    if recon.shape[0] != target.shape[0]:
        raise ValueError(f"frame count mismatch: {recon.shape[0]} vs {target.shape[0]}")
    if labels is None:
        return chamfer_distance(recon, target).mean()
    labels = np.asarray(labels)
    n = len(labels)
    total = 0.0
    for s in np.unique(labels):
        idx = np.flatnonzero(labels == s)
        if idx[-1] - idx[0] + 1 == len(idx):
            sel = slice(int(idx[0]), int(idx[-1]) + 1)
        else:
            sel = torch.as_tensor(idx)
        total = total + chamfer_distance(recon[:, sel], target[:, sel]) * (len(idx) / n)
    return total.mean()


def kl_loss(mu, logvar, beta: float = DEFAULT_BETA) -> torch.Tensor:
    """beta * KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims."""
    mu, logvar = _as_tensor(mu), _as_tensor(logvar)
    kl = -0.5 * (1.0 + logvar - mu * mu - torch.exp(logvar)).sum(-1)
    return beta * kl.mean()


def neighbor_index(adjacency) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(src, dst, degree) tensors from neighbour lists or a (2, E) edge array."""
    if isinstance(adjacency, (list, tuple)):
        src = [i for i, nbrs in enumerate(adjacency) for _ in nbrs]
        dst = [j for nbrs in adjacency for j in nbrs]
        n = len(adjacency)
        src_t = torch.as_tensor(src, dtype=torch.long)
        dst_t = torch.as_tensor(dst, dtype=torch.long)
    else:
        e = torch.as_tensor(np.asarray(adjacency), dtype=torch.long)
        src_t, dst_t = e[0], e[1]
        n = int(e.max()) + 1 if e.numel() else 0
    deg = torch.bincount(src_t, minlength=n)
    return src_t, dst_t, deg


def laplacian_loss(vertices, adjacency, n_vertices: int | None = None) -> torch.Tensor:
    """Mean over vertices of the norm of the umbrella vector, averaged over frames.

    ``vertices`` is (V, 3) or (T, V, 3); ``adjacency`` is neighbour lists or
    the (src, dst, degree) triple from :func:`neighbor_index`.
    """
    v = _as_tensor(vertices)
    if v.ndim == 2:
        v = v[None]
    src, dst, deg = adjacency if isinstance(adjacency, tuple) and len(adjacency) == 3 \
        and isinstance(adjacency[0], torch.Tensor) else neighbor_index(adjacency)
    V = v.shape[-2] if n_vertices is None else n_vertices
    if deg.numel() < V:
        deg = torch.cat([deg, deg.new_zeros(V - deg.numel())])
    acc = torch.zeros_like(v).index_add_(-2, src, v[..., dst, :])
    safe_deg = deg.clamp_min(1).to(v.dtype)[:, None]
    umbrella = acc / safe_deg - v
    umbrella = torch.where((deg > 0)[:, None], umbrella, torch.zeros_like(umbrella))
    return safe_norm(umbrella).mean(-1).mean()


def correspondence_mse(recon, target) -> torch.Tensor:
    """Per-vertex squared error; diagnostic only, never part of the objective."""
    recon, target = _as_tensor(recon), _as_tensor(target)
    return ((recon - target) ** 2).sum(-1).mean()


def total_loss(recon: float, kl: float, smoothing: float, lambda_s: float = DEFAULT_LAMBDA_S,
               beta: float = DEFAULT_BETA) -> LossBreakdown:
    """Combine already computed terms; ``kl`` is the beta-scaled KL term."""
    recon, kl, smoothing = float(recon), float(kl), float(smoothing)
    return LossBreakdown(reconstruction=recon, kl=kl, smoothing=smoothing,
                         total=recon + kl + lambda_s * smoothing, beta=beta, lambda_s=lambda_s)


def mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    if not items:
        raise ValueError("no loss values to average")
    n = len(items)
    return LossBreakdown(
        reconstruction=sum(x.reconstruction for x in items) / n,
        kl=sum(x.kl for x in items) / n,
        smoothing=sum(x.smoothing for x in items) / n,
        total=sum(x.total for x in items) / n,
        beta=items[0].beta, lambda_s=items[0].lambda_s,
    )
