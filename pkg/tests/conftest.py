from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from prescribe import data, network, training  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])


@pytest.fixture
def report_criterion():
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


TOY_SPEC = dict(n_genes=30, embed_dim=6, n_programs=3, n_clusters=2, effect_magnitude=(2.0, 3.0),
                n_seen_genes=8, n_null_genes=1, n_train_combos=4, n_val_per_tier=3, n_test_per_tier=2,
                cells_per_perturbation=12, n_control_cells=40, seed=3)


def toy_spec(**over) -> data.SynthSpec:
    return data.SynthSpec(**{**TOY_SPEC, **over})


@pytest.fixture(scope="session")
def toy_dataset():
    """Small prepared dataset (N = 2 PCA dimensions)."""
    return data.prepare(data.generate(toy_spec()), 2)


@pytest.fixture
def toy_model(toy_dataset):
    cfg = network.ModelConfig(n_dim=2, latent_dim=4, hidden_dim=6, flow_layers=2, seed=1)
    return network.build_model(toy_dataset, cfg)


@pytest.fixture(scope="session")
def benchmark():
    """The fixed desk benchmark (seed 42, N = 10) trained with the desk settings."""
    ds = data.prepare(data.generate(data.SynthSpec(seed=42)), 10)
    cfg = training.TrainConfig(**training.DESK_CONFIG)
    result = training.train(ds, cfg)
    return ds, result


@pytest.fixture(scope="session")
def benchmark_records(benchmark):
    from prescribe import evaluation

    ds, result = benchmark
    return evaluation.make_records(result.model, ds, "test")


def random_niw(rng: np.random.Generator, n: int, nu_min: float | None = None):
    from prescribe.math_niw import NIWParams

    A = rng.standard_normal((n, n))
    L = np.linalg.cholesky(A @ A.T + n * np.eye(n)) * rng.uniform(0.3, 2.0)
    nu = rng.uniform(n if nu_min is None else nu_min, n + 20)
    return NIWParams(rng.standard_normal(n), 2 * nu, nu, L)
