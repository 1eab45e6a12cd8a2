import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cardiac_meshgen.mesh import ClinicalConditions
from cardiac_meshgen.model import ModelConfig, build_model
from cardiac_meshgen.toy import ToyGeneratorParams, assign_splits, synth_population, synth_subject, write_dataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REFERENCE = ClinicalConditions(age=60.0, sex=1, weight=75.0, height=170.0)

# small geometry and network so unit tests run in seconds
SMALL_TOY = ToyGeneratorParams(frequency=1, T=4)


def small_model_config(**kw) -> ModelConfig:
    base = dict(d_latent=16, d_condition=8, condition_hidden=16, gcn_hidden=(8, 8, 8),
                transformer_layers=1, attention_heads=2, feed_forward=32, dropout=0.1,
                decoder_hidden=(16, 16, 16, 16), T=4, V=48)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_seq():
    return synth_subject(REFERENCE, "healthy", SMALL_TOY, subject_id="ref")


@pytest.fixture
def small_model(small_seq):
    return build_model(small_model_config(), small_seq.faces, small_seq.labels, seed=0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    items = synth_population(6, 3, {"healthy": 1.0}, SMALL_TOY)
    write_dataset(root, items, assign_splits(6, {"train": 3, "val": 2, "test": 1}))
    return root


def rng_points(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.normal(size=(n, 3))


# acceptance criteria record their verdict here; printed in the terminal summary
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k:2d} {name}: {detail}")
