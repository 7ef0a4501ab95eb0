"""Dispatch a test configuration onto a dataset with a given seed."""

from dataclasses import replace

from .covariates import CovariateConfig, run_covariate_test
from .finite_sample import FiniteConfig, run_finite_sample_test
from .sharp import SharpConfig, run_sharp_test


def run_configured_test(ds, config, seed: int):
    """Return ``(reject, p_value, error)`` with ``error`` always None here.

    Replications in a Monte Carlo run execute single-threaded; parallelism
    lives at the replication level.
    """
    if isinstance(config, SharpConfig):
        res = run_sharp_test(ds, replace(config, seed=seed, threads=None))
        return res.reject, res.p_value, None
    if isinstance(config, CovariateConfig):
        sharp = replace(config.sharp, seed=seed, threads=None)
        res = run_covariate_test(ds, replace(config, sharp=sharp))
        return res.reject, res.p_value, None
    if isinstance(config, FiniteConfig):
        # widths depend on the count pair only, so the seed is kept fixed to reuse the cache
        res = run_finite_sample_test(ds, replace(config, threads=None))
        return res.reject, None, None
    raise TypeError(f"unsupported test configuration {type(config).__name__}")
