import numpy as np
import pytest

from guardedml.tabular import Dataset, Role, categorical_from_strings, numeric_column


@pytest.fixture
def small_numeric_ds():
    return Dataset((numeric_column("x", [1.0, 2.0, 3.0]),))


def make_classification_ds(rng, n=200, missing_rate=0.0):
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    if missing_rate:
        x2[rng.uniform(size=n) < missing_rate] = np.nan
    color = np.array(["red", "green", "blue"])[rng.integers(0, 3, size=n)]
    eta = 1.5 * x1 - (color == "red")
    y = np.where(rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-eta)), "pos", "neg")
    return Dataset((
        numeric_column("x1", x1),
        numeric_column("x2", x2),
        categorical_from_strings("color", color),
        categorical_from_strings("y", y, role=Role.OUTCOME),
    ))


def make_survival_arrays(rng, n=200, scale=200.0, cens_scale=400.0):
    age = rng.normal(60, 10, n)
    sev = rng.normal(0, 1, n)
    eta = 0.03 * (age - 60) + 0.7 * sev
    t_event = rng.exponential(1.0, n) / np.exp(eta) * scale
    t_cens = rng.exponential(cens_scale, n)
    time = np.minimum(t_event, t_cens)
    status = (t_event <= t_cens).astype(float)
    return age, sev, time, status


def make_survival_ds(rng, n=200):
    age, sev, time, status = make_survival_arrays(rng, n)
    return Dataset((
        numeric_column("age", age),
        numeric_column("sev", sev),
        numeric_column("time", time, role=Role.TIME),
        numeric_column("status", status, role=Role.STATUS),
    ))
