"""
Tests for the bayesplat error hierarchy.
"""

import sys

import pytest

sys.path.append("src")

from bayesplat.errors import (
    AngleNearPi,
    BayesplatError,
    ConfigError,
    DatasetError,
    Diverged,
    DimensionMismatch,
    EmptyBatch,
    MissingIndexFile,
    NoAssociation,
    NonPsdScale,
    SingularInformation,
    TooFewPairs,
    TrajectoryFormatError,
)


@pytest.mark.parametrize(
    "error, builtin",
    [
        (AngleNearPi(3.14159), ValueError),
        (EmptyBatch("empty"), ValueError),
        (DimensionMismatch("shape"), ValueError),
        (NonPsdScale(3, -1e-4), ArithmeticError),
        (SingularInformation("singular"), ArithmeticError),
        (Diverged([1.0, 2.0]), RuntimeError),
        (MissingIndexFile("rgb.txt", "/data"), OSError),
        (NoAssociation("none"), OSError),
        (TooFewPairs(1), ValueError),
        (TrajectoryFormatError(4, "bad"), ValueError),
        (ConfigError("window", "bad"), ValueError),
    ],
)
def test_hierarchy(error, builtin):
    assert isinstance(error, BayesplatError)
    assert isinstance(error, builtin)


def test_messages_carry_context():
    assert "component 3" in str(NonPsdScale(3, -1e-4))
    assert Diverged([1.0, 2.0, 4.0]).residuals == [1.0, 2.0, 4.0]
    missing = MissingIndexFile("depth.txt", "/data/fr1")
    assert str(missing) == "MissingIndexFile: depth.txt not found in /data/fr1"
    assert isinstance(missing, DatasetError)
    assert str(TrajectoryFormatError(7, "zero quaternion", "gt.txt")) == "gt.txt:7: zero quaternion"
    assert str(ConfigError("window", "unknown key", 2)) == "config key 'window' (line 2): unknown key"
    pairs = TooFewPairs(2)
    assert (pairs.count, pairs.required) == (2, 3)
