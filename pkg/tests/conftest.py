from fractions import Fraction

import pytest

from madlab.ledger import MinerPopulation


@pytest.fixture
def pop3():
    return MinerPopulation.of([Fraction(1, 4), Fraction(1, 4), Fraction(1, 2)])
