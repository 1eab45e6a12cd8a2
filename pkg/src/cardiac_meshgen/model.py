"""Conditional spatio-temporal mesh VAE.

Data flow for one sequence::

    conditions --MLP--> z_c
    frames --GCN + mean pool + FC--> z_0..z_{T-1}
    [mu_tok; logvar_tok; proj(z_t ++ z_c)] --Transformer encoder--> mu, logvar, frame outputs
    z_a = mu + eps * exp(logvar / 2)
    queries p_0..p_{T-1}, memory proj(z_a ++ z_c) --Transformer decoder--> h_t
    h_t --5 FC layers--> V x 3 vertices
"""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import nn

from .mesh import ClinicalConditions, MeshSequence, edge_index, topology_hash


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_latent: int = 64
    d_condition: int = 32
    condition_hidden: int = 64
    gcn_hidden: tuple[int, ...] = (32, 64, 64)
    transformer_layers: int = 2
    attention_heads: int = 4
    feed_forward: int = 1024
    dropout: float = 0.1
    decoder_hidden: tuple[int, ...] = (128, 256, 512, 1024)  # + output layer = 5 FC layers
    T: int = 20
    V: int = 648
    coord_scale: float = 50.0  # mm; network-internal coordinate unit
    # output bias starts at the training mean mesh shrunk by this factor about
    # its centroid (0 keeps the plain random initialisation)
    template_init_scale: float = 0.5
    positional_convention: str = "pair"  # or "literal", see positional_encoding
    # [age, weight, height] training statistics; sex enters unnormalised
    condition_mean: tuple[float, float, float] = (60.0, 80.0, 172.5)
    condition_std: tuple[float, float, float] = (11.5, 17.3, 13.0)

    def __post_init__(self):
        self.gcn_hidden = tuple(int(x) for x in self.gcn_hidden)
        self.decoder_hidden = tuple(int(x) for x in self.decoder_hidden)
        self.condition_mean = tuple(float(x) for x in self.condition_mean)
        self.condition_std = tuple(float(x) for x in self.condition_std)
        if self.d_latent % 2:
            raise ConfigError(f"d_latent must be even, got {self.d_latent}")
        if self.d_latent % self.attention_heads:
            raise ConfigError(f"attention_heads={self.attention_heads} must divide d_latent={self.d_latent}")
        counts = [self.d_latent, self.d_condition, self.transformer_layers, self.attention_heads,
                  self.feed_forward, self.T, self.V, len(self.gcn_hidden), *self.gcn_hidden,
                  *self.decoder_hidden]
        if min(counts) < 1:
            raise ConfigError("all ModelConfig sizes must be >= 1")
        if self.positional_convention not in ("pair", "literal"):
            raise ConfigError(f"unknown positional_convention {self.positional_convention!r}")
        if min(self.condition_std) <= 0:
            raise ConfigError("condition_std entries must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentState:
    mu: torch.Tensor  # (B, d)
    logvar: torch.Tensor  # (B, d)
    z_a: torch.Tensor  # (B, d)
    eps: torch.Tensor  # (B, d)
    frame_outputs: torch.Tensor  # (B, T, d)


def positional_encoding(t, d: int, convention: str = "pair") -> np.ndarray:
    """Sinusoidal encoding of integer time ``t`` (scalar or array) in ``d`` dims.

    ``pair``: entries 2k, 2k+1 are sin/cos of t / 10000^(2k/d).
    ``literal``: entry i uses exponent 2i/d with i the raw dimension index.
    """
    if d % 2:
        raise ConfigError(f"positional encoding dimension must be even, got {d}")
    t = np.asarray(t, dtype=np.float64)
    i = np.arange(d)
    if convention == "pair":
        expo = 2 * (i // 2) / d
    elif convention == "literal":
        expo = 2 * i / d
    else:
        raise ConfigError(f"unknown positional encoding convention {convention!r}")
    angle = t[..., None] / np.power(10000.0, expo)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None = None,
                   eps: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + eps * torch.exp(0.5 * logvar), eps


def normalized_adjacency(faces: np.ndarray, n_vertices: int) -> torch.Tensor:
    """D^-1/2 (A + I) D^-1/2 as a sparse CSR tensor."""
    e = edge_index(faces, n_vertices)
    loops = np.arange(n_vertices)
    rows = np.concatenate([e[0], loops])
    cols = np.concatenate([e[1], loops])
    deg = np.bincount(rows, minlength=n_vertices).astype(np.float64)
    w = 1.0 / np.sqrt(deg[rows] * deg[cols])
    a = torch.sparse_coo_tensor(torch.as_tensor(np.stack([rows, cols])),
                                torch.as_tensor(w, dtype=torch.float32),
                                (n_vertices, n_vertices), check_invariants=True)
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Sparse CSR tensor support is in beta")
        return a.coalesce().to_sparse_csr()


class GraphConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.linear = nn.Linear(c_in, c_out)

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        # x: (N, V, C)
        n, v, _ = x.shape
        h = self.linear(x)
        c = h.shape[-1]
        h = h.permute(1, 0, 2).reshape(v, n * c)
        h = torch.sparse.mm(adj, h)
        return h.reshape(v, n, c).permute(1, 0, 2)


class MeshEncoder(nn.Module):
    def __init__(self, hidden: tuple[int, ...], d_out: int):
        super().__init__()
        widths = (3, *hidden)
        self.convs = nn.ModuleList(GraphConv(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.fc = nn.Linear(widths[-1], d_out)

    def forward(self, x: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = torch.relu(conv(x, adj))
        return self.fc(x.mean(dim=1))


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, h, need_weights=False)[0])
        return x + self.drop(self.mlp(self.ln2(x)))


class DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.ln3 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, q: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        h = self.ln1(q)
        q = q + self.drop(self.self_attn(h, h, h, need_weights=False)[0])
        h = self.ln2(q)
        q = q + self.drop(self.cross_attn(h, memory, memory, need_weights=False)[0])
        return q + self.drop(self.mlp(self.ln3(q)))


class MeshVAE(nn.Module):
    def __init__(self, config: ModelConfig, faces: np.ndarray, labels: np.ndarray):
        super().__init__()
        self.config = config
        c = config
        faces = np.asarray(faces, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.uint8)
        if labels.shape != (c.V,):
            raise ConfigError(f"template labels length {labels.shape} != V={c.V}")
        self.faces = faces
        self.labels = labels
        self.topology_hash = topology_hash(faces, labels)
        self.adj = normalized_adjacency(faces, c.V)
        d = c.d_latent

        self.register_buffer("cond_mean", torch.tensor(c.condition_mean, dtype=torch.float32))
        self.register_buffer("cond_std", torch.tensor(c.condition_std, dtype=torch.float32))
        self.condition_encoder = nn.Sequential(
            nn.Linear(4, c.condition_hidden), nn.ReLU(), nn.Linear(c.condition_hidden, c.d_condition))
        self.mesh_encoder = MeshEncoder(c.gcn_hidden, d)

        self.token_proj = nn.Linear(d + c.d_condition, d)
        self.mu_token = nn.Parameter(torch.randn(d) * 0.02)
        self.logvar_token = nn.Parameter(torch.randn(d) * 0.02)
        self.encoder = nn.ModuleList(
            EncoderBlock(d, c.attention_heads, c.feed_forward, c.dropout) for _ in range(c.transformer_layers))

        self.memory_proj = nn.Linear(d + c.d_condition, d)
        pe = positional_encoding(np.arange(c.T), d, c.positional_convention)
        self.register_buffer("queries", torch.tensor(pe, dtype=torch.float32))
        self.decoder = nn.ModuleList(
            DecoderBlock(d, c.attention_heads, c.feed_forward, c.dropout) for _ in range(c.transformer_layers))
        self.decoder_norm = nn.LayerNorm(d)

        widths = (d, *c.decoder_hidden)
        layers: list[nn.Module] = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(a, b), nn.LeakyReLU(0.2)]
        layers.append(nn.Linear(widths[-1], c.V * 3))
        self.mesh_decoder = nn.Sequential(*layers)

    @torch.no_grad()
    def init_output_template(self, mean_vertices: np.ndarray) -> None:
        """Set the last decoder bias to a shrunken copy of ``mean_vertices`` (V, 3)."""
        scale = self.config.template_init_scale
        if scale <= 0:
            return
        m = np.asarray(mean_vertices, dtype=np.float64)
        centroid = m.mean(axis=0)
        target = (centroid + scale * (m - centroid)) / self.config.coord_scale
        self.mesh_decoder[-1].bias.copy_(torch.as_tensor(target.reshape(-1), dtype=torch.float32))

    # -- components -------------------------------------------------------

    def condition_vector(self, conditions) -> torch.Tensor:
        """(B, 4) raw [age, sex, weight, height] from conditions objects or arrays."""
        if isinstance(conditions, ClinicalConditions):
            conditions = [conditions]
        if isinstance(conditions, (list, tuple)) and conditions and isinstance(conditions[0], ClinicalConditions):
            arr = np.stack([c.as_array() for c in conditions])
        else:
            arr = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise ValueError("conditions contain non-finite values")
        return torch.as_tensor(arr, dtype=torch.float32)

    def normalize_conditions(self, raw: torch.Tensor) -> torch.Tensor:
        cont = (raw[:, [0, 2, 3]] - self.cond_mean) / self.cond_std
        return torch.stack([cont[:, 0], raw[:, 1], cont[:, 1], cont[:, 2]], dim=1)

    def encode_conditions(self, conditions) -> torch.Tensor:
        raw = conditions if isinstance(conditions, torch.Tensor) else self.condition_vector(conditions)
        return self.condition_encoder(self.normalize_conditions(raw))

    def encode_frames(self, vertices: torch.Tensor) -> torch.Tensor:
        """(B, T, V, 3) mm -> (B, T, d)."""
        vertices = torch.as_tensor(vertices, dtype=torch.float32)
        if vertices.shape[-2:] != (self.config.V, 3):
            raise ValueError(f"mesh has shape {tuple(vertices.shape[-2:])}, template expects ({self.config.V}, 3)")
        lead = vertices.shape[:-2]
        x = vertices.reshape(-1, self.config.V, 3) / self.config.coord_scale
        return self.mesh_encoder(x, self.adj).reshape(*lead, -1)

    def temporal_encode(self, frame_latents: torch.Tensor, z_c: torch.Tensor):
        """Returns (mu, logvar, frame_outputs)."""
        B, T, d = frame_latents.shape
        if T != self.config.T or d != self.config.d_latent:
            raise ValueError(f"frame latents {tuple(frame_latents.shape[1:])} != ({self.config.T}, {self.config.d_latent})")
        tokens = self.token_proj(torch.cat([frame_latents, z_c[:, None].expand(B, T, -1)], dim=-1))
        dist = torch.stack([self.mu_token, self.logvar_token])[None].expand(B, 2, d)
        x = torch.cat([dist, tokens], dim=1)
        for block in self.encoder:
            x = block(x)
        return x[:, 0], x[:, 1], x[:, 2:]

    def decode(self, z_a: torch.Tensor, z_c: torch.Tensor) -> torch.Tensor:
        """(B, d), (B, dc) -> (B, T, V, 3) in mm."""
        B = z_a.shape[0]
        memory = self.memory_proj(torch.cat([z_a, z_c], dim=-1))[:, None]
        q = self.queries[None].expand(B, -1, -1)
        for block in self.decoder:
            q = block(q, memory)
        out = self.mesh_decoder(self.decoder_norm(q))
        return out.reshape(B, self.config.T, self.config.V, 3) * self.config.coord_scale

    def forward(self, vertices: torch.Tensor, conditions, generator: torch.Generator | None = None,
                sample: bool = True, logvar_override: float | None = None):
        z_c = self.encode_conditions(conditions)
        frames = self.encode_frames(vertices)
        mu, logvar, frame_out = self.temporal_encode(frames, z_c)
        if logvar_override is not None:
            logvar = torch.full_like(logvar, logvar_override)
        if sample:
            z_a, eps = reparameterize(mu, logvar, generator)
        else:
            z_a, eps = mu, torch.zeros_like(mu)
        recon = self.decode(z_a, z_c)
        return recon, LatentState(mu, logvar, z_a, eps, frame_out)

    # -- inference helpers --------------------------------------------------

    @torch.no_grad()
    def reconstruct(self, seq: MeshSequence) -> np.ndarray:
        """Posterior-mean reconstruction (z_a = mu), (T, V, 3) float32."""
        self.check_sequence(seq)
        recon, _ = self(torch.as_tensor(seq.vertices[None]), seq.conditions, sample=False)
        return recon[0].numpy()

    @torch.no_grad()
    def generate_vertices(self, conditions: ClinicalConditions, n: int,
                          generator: torch.Generator | None = None, batch: int = 50) -> np.ndarray:
        """``n`` samples with z_a ~ N(0, I); returns (n, T, V, 3)."""
        z_c = self.encode_conditions(conditions)
        z = torch.randn((n, self.config.d_latent), generator=generator)
        out = [self.decode(z[i:i + batch], z_c.expand(len(z[i:i + batch]), -1)) for i in range(0, n, batch)]
        return torch.cat(out).numpy() if out else np.zeros((0, self.config.T, self.config.V, 3), np.float32)

    def generate(self, conditions: ClinicalConditions, n: int, generator: torch.Generator | None = None,
                 subject_prefix: str = "synth") -> list[MeshSequence]:
        verts = self.generate_vertices(conditions, n, generator)
        return [MeshSequence(v, self.faces.copy(), self.labels.copy(), conditions=conditions,
                             subject_id=f"{subject_prefix}_{i:04d}") for i, v in enumerate(verts)]

    @torch.no_grad()
    def encode_latents(self, vertices, conditions) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(mu, logvar, frame_outputs) for a batch (B, T, V, 3)."""
        z_c = self.encode_conditions(conditions)
        if z_c.shape[0] == 1 and len(vertices) > 1:
            z_c = z_c.expand(len(vertices), -1)
        return self.temporal_encode(self.encode_frames(vertices), z_c)

    def check_sequence(self, seq: MeshSequence) -> None:
        if seq.T != self.config.T:
            raise ValueError(f"sequence {seq.subject_id!r} has T={seq.T}, model expects {self.config.T}")
        if topology_hash(seq.faces, seq.labels) != self.topology_hash:
            raise ValueError(f"sequence {seq.subject_id!r} topology does not match the model template")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, faces: np.ndarray, labels: np.ndarray, seed: int = 0) -> MeshVAE:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = MeshVAE(config, faces, labels)
    model.eval()
    return model


# ------------------------------------------------------------- checkpoints

WEIGHTS_FILE = "weights.safetensors"
SIDECAR_FILE = "model.json"


def save_checkpoint(model: MeshVAE, path: str | os.PathLike, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    tensors["template.faces"] = torch.as_tensor(model.faces.astype(np.int64))
    tensors["template.labels"] = torch.as_tensor(model.labels.astype(np.uint8))
    save_file(tensors, str(path / WEIGHTS_FILE))
    sidecar = {
        "model_config": model.config.to_dict(),
        "condition_normalization": {
            "fields": ["age", "weight", "height"],
            "mean": list(model.config.condition_mean),
            "std": list(model.config.condition_std),
        },
        "topology_hash": model.topology_hash,
        "parameter_count": model.parameter_count(),
    }
    sidecar.update(extra or {})
    (path / SIDECAR_FILE).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | os.PathLike) -> MeshVAE:
    path = Path(path)
    for name in (WEIGHTS_FILE, SIDECAR_FILE):
        if not (path / name).exists():
            raise FileNotFoundError(f"checkpoint {path} is missing {name}")
    sidecar = json.loads((path / SIDECAR_FILE).read_text(encoding="utf-8"))
    tensors = load_file(str(path / WEIGHTS_FILE))
    faces = tensors.pop("template.faces").numpy()
    labels = tensors.pop("template.labels").numpy()
    model = MeshVAE(ModelConfig.from_dict(sidecar["model_config"]), faces, labels)
    if model.topology_hash != sidecar["topology_hash"]:
        raise ValueError(f"checkpoint {path}: template topology hash does not match model.json")
    model.load_state_dict(tensors)
    model.eval()
    return model


def read_sidecar(path: str | os.PathLike) -> dict:
    return json.loads((Path(path) / SIDECAR_FILE).read_text(encoding="utf-8"))
