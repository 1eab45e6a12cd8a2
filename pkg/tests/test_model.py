import math

import numpy as np
import pytest
import torch

from cardiac_meshgen.mesh import ClinicalConditions
from cardiac_meshgen.model import (ConfigError, MeshVAE, ModelConfig, build_model, load_checkpoint,
                                   positional_encoding, read_sidecar, reparameterize, save_checkpoint)
from cardiac_meshgen.toy import template

from conftest import REFERENCE, small_model_config


def test_config_validation():
    with pytest.raises(ConfigError, match="even"):
        ModelConfig(d_latent=63, attention_heads=3)
    with pytest.raises(ConfigError, match="divide"):
        ModelConfig(attention_heads=5)
    with pytest.raises(ConfigError, match=">= 1"):
        ModelConfig(transformer_layers=0)
    with pytest.raises(ConfigError, match="positional_convention"):
        ModelConfig(positional_convention="rotary")


def test_config_round_trip():
    c = ModelConfig(gcn_hidden=(4, 5, 6))
    assert ModelConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- conditions

def test_condition_embedding_dims_and_determinism(small_model):
    full = build_model(ModelConfig(), *template(4)[2:], seed=0)
    assert full.encode_conditions(REFERENCE).shape == (1, 32)
    a = small_model.encode_conditions(REFERENCE)
    b = small_model.encode_conditions(REFERENCE)
    assert torch.equal(a, b)


def test_condition_normalisation_at_training_mean(small_model):
    c = small_model.config
    mean = ClinicalConditions(age=c.condition_mean[0], sex=0, weight=c.condition_mean[1], height=c.condition_mean[2])
    x = small_model.normalize_conditions(small_model.condition_vector(mean))
    assert torch.allclose(x, torch.zeros(1, 4), atol=1e-6)


def test_non_finite_condition_rejected(small_model):
    with pytest.raises(ValueError, match="non-finite"):
        small_model.encode_conditions(np.array([[np.nan, 1, 70, 170]]))


# --------------------------------------------------------------- mesh encoder

def test_mesh_embedding_dims():
    faces, labels = template(4)[2:]
    model = build_model(ModelConfig(), faces, labels)
    v = torch.randn(1, 1, len(labels), 3) * 30
    assert model.encode_frames(v).shape == (1, 1, 64)


def test_mesh_embedding_permutation_invariant(small_model, small_seq):
    rng = np.random.default_rng(0)
    V = small_seq.V
    perm = rng.permutation(V)  # new index i holds old vertex perm[i]
    inverse = np.argsort(perm)
    faces = inverse[small_seq.faces]
    labels = small_seq.labels[perm]
    other = MeshVAE(small_model.config, faces, labels)
    other.load_state_dict(small_model.state_dict())
    other.eval()
    x = torch.as_tensor(small_seq.vertices[:1])
    a = small_model.encode_frames(x[None])
    b = other.encode_frames(x[:, perm][None])
    assert float((a - b).abs().max().detach() / a.abs().max().detach()) <= 1e-5


def test_mesh_embedding_bitwise_repeatable(small_model, small_seq):
    x = torch.as_tensor(small_seq.vertices[None])
    assert torch.equal(small_model.encode_frames(x), small_model.encode_frames(x.clone()))


def test_mesh_shape_mismatch(small_model):
    with pytest.raises(ValueError, match="template expects"):
        small_model.encode_frames(torch.zeros(1, 4, 10, 3))


# ----------------------------------------------------------- temporal encoder

def test_temporal_encode_shapes(small_model, small_seq):
    c = small_model.config
    frames = small_model.encode_frames(torch.as_tensor(small_seq.vertices[None]))
    mu, logvar, out = small_model.temporal_encode(frames, small_model.encode_conditions(REFERENCE))
    assert mu.shape == logvar.shape == (1, c.d_latent)
    assert out.shape == (1, c.T, c.d_latent)
    mu2, logvar2, _ = small_model.temporal_encode(frames, small_model.encode_conditions(REFERENCE))
    assert torch.equal(mu, mu2) and torch.equal(logvar, logvar2)


def test_temporal_encode_full_dims():
    faces, labels = template(4)[2:]
    model = build_model(ModelConfig(), faces, labels)
    mu, logvar, out = model.temporal_encode(torch.randn(1, 20, 64), model.encode_conditions(REFERENCE))
    assert mu.shape == (1, 64) and logvar.shape == (1, 64) and out.shape == (1, 20, 64)


def test_temporal_encode_finite_on_random_inputs(small_model):
    g = torch.Generator().manual_seed(0)
    c = small_model.config
    for _ in range(100):
        frames = torch.randn(1, c.T, c.d_latent, generator=g)
        zc = torch.randn(1, c.d_condition, generator=g)
        mu, logvar, out = small_model.temporal_encode(frames, zc)
        assert torch.isfinite(mu).all() and torch.isfinite(logvar).all() and torch.isfinite(out).all()


def test_temporal_encode_wrong_length(small_model):
    with pytest.raises(ValueError, match="frame latents"):
        small_model.temporal_encode(torch.zeros(1, 3, 16), torch.zeros(1, 8))


# --------------------------------------------------------- reparameterisation

def test_reparameterize_vanishing_noise():
    mu = torch.randn(64, dtype=torch.float64)
    z, _ = reparameterize(mu, torch.full_like(mu, -1000.0), torch.Generator().manual_seed(1))
    assert torch.allclose(z, mu, atol=1e-9, rtol=0)


def test_reparameterize_identity_scaling():
    mu = torch.zeros(64, dtype=torch.float64)
    z, eps = reparameterize(mu, torch.zeros_like(mu), torch.Generator().manual_seed(2))
    assert torch.equal(z, eps)
    assert torch.equal(eps, torch.randn(64, generator=torch.Generator().manual_seed(2), dtype=torch.float64))


def test_reparameterize_statistics():
    n = 100_000
    mu = torch.tensor([3.0, -1.0], dtype=torch.float64).expand(n, 2)
    logvar = torch.tensor([0.0, math.log(4.0)], dtype=torch.float64).expand(n, 2)
    z, _ = reparameterize(mu, logvar, torch.Generator().manual_seed(3))
    sigma = torch.tensor([1.0, 2.0], dtype=torch.float64)
    se_mean = sigma / math.sqrt(n)
    se_std = sigma / math.sqrt(2 * n)
    assert torch.all((z.mean(0) - mu[0]).abs() <= 4 * se_mean)
    assert torch.all((z.std(0) - sigma).abs() <= 4 * se_std)


# ----------------------------------------------------- positional encoding

def test_positional_encoding_zero():
    assert np.array_equal(positional_encoding(0, 8), np.array([0, 1] * 4, dtype=float))


def test_positional_encoding_t1_d4():
    expected = [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)]
    assert np.allclose(positional_encoding(1, 4), expected, rtol=0, atol=1e-15)


def test_positional_encoding_literal_differs():
    # literal exponent 2i/d: entry 1 uses 10000^(2/4) = 100, entry 2 uses 10000
    lit = positional_encoding(1, 4, "literal")
    assert np.allclose(lit, [math.sin(1), math.cos(0.01), math.sin(1e-4), math.cos(1e-6)], atol=1e-15)


def test_positional_encoding_range_and_distinct():
    t = np.arange(10_000)
    pe = positional_encoding(t, 64)
    assert np.all(np.abs(pe) <= 1)
    assert len(np.unique(pe, axis=0)) == len(t)
    big = positional_encoding(np.array([999_999, 123_456, 500_000]), 64)
    assert np.all(np.abs(big) <= 1)


def test_positional_encoding_odd_dimension():
    with pytest.raises(ConfigError, match="even"):
        positional_encoding(0, 5)


# -------------------------------------------------------------------- decoder

def test_decoder_shape_and_topology(small_model):
    c = small_model.config
    seqs = small_model.generate(REFERENCE, 2, torch.Generator().manual_seed(0))
    assert seqs[0].vertices.shape == (c.T, c.V, 3)
    assert np.array_equal(seqs[0].faces, small_model.faces)


def test_decoder_deterministic_and_non_constant(small_model):
    zc = small_model.encode_conditions(REFERENCE)
    z = torch.randn(2, small_model.config.d_latent, generator=torch.Generator().manual_seed(4))
    a = small_model.decode(z[:1], zc)
    assert torch.equal(a, small_model.decode(z[:1], zc))
    b = small_model.decode(z[1:], zc)
    assert (a - b).abs().max() > 0


def test_forward_shapes_and_degenerate_noise(small_model, small_seq):
    x = torch.as_tensor(small_seq.vertices[None])
    recon, st = small_model(x, REFERENCE, generator=torch.Generator().manual_seed(0), logvar_override=-1000.0)
    recon2, _ = small_model(x, REFERENCE, generator=torch.Generator().manual_seed(99), logvar_override=-1000.0)
    assert recon.shape == x.shape
    assert st.mu.shape == (1, small_model.config.d_latent)
    assert torch.allclose(recon, recon2, atol=1e-6)
    assert torch.allclose(st.z_a, st.mu + st.eps * torch.exp(0.5 * st.logvar))


def test_generate_counts_and_seed(small_model):
    twenty = small_model.generate_vertices(REFERENCE, 20, torch.Generator().manual_seed(5))
    again = small_model.generate_vertices(REFERENCE, 20, torch.Generator().manual_seed(5))
    assert twenty.shape[0] == 20
    assert np.array_equal(twenty, again)
    assert small_model.generate_vertices(REFERENCE, 100, torch.Generator().manual_seed(5)).shape[0] == 100


def test_parameter_count_regression():
    faces, labels = template(4)[2:]
    a = build_model(ModelConfig(), faces, labels, seed=0)
    b = build_model(ModelConfig(), faces, labels, seed=1)
    assert a.parameter_count() == b.parameter_count() == 3_346_232


def test_build_model_seeded(small_seq):
    a = build_model(small_model_config(), small_seq.faces, small_seq.labels, seed=7)
    b = build_model(small_model_config(), small_seq.faces, small_seq.labels, seed=7)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_output_template_init(small_model, small_seq):
    small_model.init_output_template(small_seq.vertices[0])
    bias = small_model.mesh_decoder[-1].bias.detach().numpy().reshape(-1, 3) * small_model.config.coord_scale
    m = small_seq.vertices[0].astype(np.float64)
    expected = m.mean(0) + small_model.config.template_init_scale * (m - m.mean(0))
    assert np.allclose(bias, expected, atol=1e-4)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, small_model, small_seq):
    path = save_checkpoint(small_model, tmp_path / "ckpt", {"training": {"seed": 3}})
    loaded = load_checkpoint(path)
    assert np.array_equal(loaded.reconstruct(small_seq), small_model.reconstruct(small_seq))
    side = read_sidecar(path)
    assert side["topology_hash"] == small_model.topology_hash
    assert side["training"]["seed"] == 3
    assert side["model_config"]["d_latent"] == small_model.config.d_latent


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="weights.safetensors"):
        load_checkpoint(tmp_path)


def test_topology_mismatch_rejected(small_model, small_seq):
    from dataclasses import replace
    bad = replace(small_seq, faces=small_seq.faces[:, ::-1].copy())
    with pytest.raises(ValueError, match="topology"):
        small_model.reconstruct(bad)
