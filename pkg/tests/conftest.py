import json

import pytest

from icurisk.cohort import SynthConfig, generate_synthetic_cohort, write_observations, write_outcomes


@pytest.fixture(scope="session")
def small_cohort():
    """Cohort with enough events that no CV fold risks quasi-separation."""
    cfg = SynthConfig(
        n_patients=600,
        n_variables=5,
        prevalence_target=0.35,
        missing_rate=0.1,
        sampling_rate_per_hour=1.0,
        seed=424242,
    )
    return generate_synthetic_cohort(cfg)


def write_cohort_files(cohort, directory):
    obs = directory / "observations.csv"
    out = directory / "outcomes.csv"
    write_observations(cohort, obs)
    write_outcomes(cohort, out)
    return obs, out


def write_config(directory, **overrides):
    cfg = {
        "paths": {
            "observations": str(directory / "observations.csv"),
            "outcomes": str(directory / "outcomes.csv"),
            "out_dir": str(directory / "out"),
        },
        "target_days": [2, 3, 4, 5],
        "cv": {"folds": 3, "repeats": 2},
        "seed": 11,
        "synth": {
            "n_patients": 600,
            "n_variables": 5,
            "prevalence_target": 0.35,
            "missing_rate": 0.1,
            "sampling_rate_per_hour": 1.0,
            "seed": 424242,
        },
    }
    for key, value in overrides.items():
        cfg[key] = value
    path = directory / "config.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path
