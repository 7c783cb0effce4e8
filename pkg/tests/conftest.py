"""Shared data-generating designs and oracle helpers for the test suite."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from multitreat import Dataset, SimConfig, simulate

settings.register_profile(
    "ci", derandomize=True, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def three_arm_config(n, **overrides):
    """Three-arm confounded design: five covariates, parallel nonlinear
    response surfaces, moderate overlap, prevalence rising with the arm."""
    fields = dict(
        sample_size=n,
        n_trt=3,
        x=["rnorm(300, 0, 0.5)", "rbeta(300, 2, .4)", "runif(300, 0, 0.5)",
           "rweibull(300, 1, 2)", "rbinom(300, 1, .4)"],
        lp_y=[".2*x1 + .3*x2 - .1*x3 - .1*x4 - .2*x5"] * 3,
        nlp_y=[".7*x1*x1 - .1*x2*x3"] * 3,
        align=False,
        lp_w=[".4*x1 + .1*x2 - .1*x4 + .1*x5",
              ".2*x1 + .2*x2 - .2*x4 - .3*x5"],
        nlp_w=["-.5*x1*x4 - .1*x2*x5", "-.3*x1*x4 + .2*x2*x5"],
        tau=[-1.5, 0.0, 1.5],
        delta=[0.5, 0.5],
        psi=1.0,
    )
    fields.update(overrides)
    return SimConfig(**fields)


def randomized_config(n, tau=(-1.0, 0.0, 1.0), **overrides):
    """Covariate-independent assignment (psi = 0): effects identified by
    raw group contrasts."""
    fields = dict(
        sample_size=n,
        n_trt=3,
        x=["rnorm(1, 3, 1)", "rbinom(1, 1, .7)"],
        lp_y=[".3*x1 - .4*x2"] * 3,
        tau=list(tau),
        delta=[0.0, 0.0],
        psi=0.0,
        lp_w=["0", "0"],
        nlp_w=None,
    )
    fields.update(overrides)
    return SimConfig(**fields)


def oracle_rds(config, seed=2026, pairs=((1, 2), (1, 3), (2, 3))):
    """ATE risk differences from the full potential-outcome matrix."""
    out = simulate(config, seed)
    means = out.y_truth.mean(axis=0)
    return {f"ATE{a}{b}": float(means[a - 1] - means[b - 1]) for a, b in pairs}


def toy_dataset(n=120, t=3, seed=0):
    """Small valid dataset with two informative covariates."""
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.normal(1.0, 1.0, n), rng.binomial(1, 0.6, n)])
    w = rng.integers(1, t + 1, n)
    for a in range(1, t + 1):           # guarantee every arm is populated
        w[a - 1] = a
    p = 1 / (1 + np.exp(-(0.3 * x[:, 0] - 0.5 * x[:, 1] + 0.4 * (w - 2))))
    y = (rng.random(n) < p).astype(int)
    y[:2] = [0, 1]                      # guarantee both outcome values
    return Dataset(x=x, w=w, y=y, covariate_names=["x1", "x2"])


@pytest.fixture
def small_dataset():
    return toy_dataset()
