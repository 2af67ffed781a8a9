"""Session-wide fixtures for artifacts that are slow to build.

Everything here is deterministic (fixed seeds), so sharing one instance
across test modules changes runtime, not outcomes.
"""

import pytest

from twinbelt import calibration, estimator


@pytest.fixture(scope="session")
def force_map():
    """Control-force map calibrated the standard way (~400 transitions)."""
    fmap, _ = calibration.run_calibration(n_transitions=400, seed=3)
    return fmap


@pytest.fixture(scope="session")
def estimator_bundle():
    """500-trajectory dataset and the estimator trained on it."""
    dataset = estimator.generate_dataset(500, seed=0)
    config = estimator.TrainingConfig(epochs=150, seed=0)
    model, report = estimator.train(dataset, config)
    return dataset, model, report
