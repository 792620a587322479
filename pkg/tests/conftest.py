import numpy as np
import pytest

from chandb import ShadowingSampler, benchmark_instance
from chandb.pipeline import reference_benchmark


@pytest.fixture(scope="session")
def benchmark_env():
    """Reference benchmark params/spec plus a sampler with its Cholesky
    factor already computed, shared across the whole session."""
    params, spec = reference_benchmark()
    return params, spec, ShadowingSampler(params, spec)


@pytest.fixture(scope="session")
def benchmark_instances(benchmark_env):
    params, spec, sampler = benchmark_env
    return {
        seed: benchmark_instance(seed, params, spec, sampler=sampler)
        for seed in (1, 2, 3, 4, 5)
    }


@pytest.fixture(scope="session")
def noiseless_benchmark_env():
    params, spec = reference_benchmark(sigma_zeta=0.0)
    return params, spec, ShadowingSampler(params, spec)
