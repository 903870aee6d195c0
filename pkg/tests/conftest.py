import pytest

from helpers import make_factset


@pytest.fixture
def capital_facts():
    return make_factset(
        "R_capital",
        [
            ("Q1", "Alpha", "O_fr", "France"),
            ("Q2", "Beta", "O_it", "Italy"),
            ("Q3", "Gamma", "O_fr", "France"),
            ("Q4", "Delta", "O_es", "Spain"),
            ("Q5", "Epsilon", "O_it", "Italy"),
            ("Q6", "Zeta", "O_fr", "France"),
        ],
    )
