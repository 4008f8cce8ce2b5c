"""Finite-difference oracle over every differentiable op, the soft-prompt adapters and a tiny model."""

import pytest

from gradcases import ALL_CASES, worst_error


@pytest.mark.parametrize("name", sorted(ALL_CASES))
def test_gradient_matches_central_differences(name):
    err = worst_error(name, n_instances=20)
    assert err < 1e-4, f"{name}: max relative error {err:.3g}"
