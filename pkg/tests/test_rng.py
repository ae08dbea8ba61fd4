import pytest

from src.rng import make_rng


def test_same_path_repeats_the_stream() -> None:
    a = make_rng(7, "epoch", 0, "pair", 5).normal(size=5)
    b = make_rng(7, "epoch", 0, "pair", 5).normal(size=5)
    assert a.tolist() == b.tolist()


def test_streams_are_separated_by_path_and_seed() -> None:
    base = make_rng(7, "epoch", 0).normal(size=5).tolist()
    assert make_rng(7, "epoch", 1).normal(size=5).tolist() != base
    assert make_rng(8, "epoch", 0).normal(size=5).tolist() != base
    assert make_rng(7, "plan", 0).normal(size=5).tolist() != base


def test_negative_path_component_is_rejected() -> None:
    with pytest.raises(ValueError, match="non-negative"):
        make_rng(0, -1)
