import numpy as np
import pytest

from patchlab.policy import PolicySpec, build_policy


TINY_SPEC = PolicySpec(
    seed=5,
    height=8,
    width=8,
    grid=4,
    branch_dims=(6, 6),
    vision_depth=1,
    token_dim=8,
    depth=2,
    heads=2,
)


@pytest.fixture(scope="session")
def tiny_policy():
    return build_policy(TINY_SPEC, "tiny")


@pytest.fixture(scope="session")
def surrogate():
    return build_policy(PolicySpec(seed=0), "surrogate")


@pytest.fixture(scope="session")
def victim():
    return build_policy(
        PolicySpec(seed=1000, branch_dims=(24, 8), vision_depth=3, token_dim=48, depth=3, heads=6),
        "victim",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
