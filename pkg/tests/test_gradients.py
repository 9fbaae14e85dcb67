import pytest

from gradcheck_cases import CASES, REL_TOL, worst_error


@pytest.mark.parametrize("name", sorted(CASES))
def test_analytic_gradient_matches_central_difference(name):
    assert worst_error(name, trials=20) <= REL_TOL
