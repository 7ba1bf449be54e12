import itertools

import pytest

from errors import ConstraintError
from paths import (default_path, enumerate_valid_paths, labels_to_path, path_to_labels, require_valid,
                   validate_path)


def brute_force_valid(path, num_layers, count_edges=True):
    """Rule checker written independently of paths.validate_path."""
    if any(not 1 <= i <= num_layers for i in path):
        return False
    if list(path) != sorted(path):
        return False
    if any(path.count(i) > 2 for i in set(path)):
        return False
    executed = "".join("x" if i in path else "." for i in range(1, num_layers + 1))
    if not count_edges and "x" in executed:
        executed = executed.strip(".")
    if "..." in executed:
        return False
    return len(path) <= 2 * num_layers


def test_default_path_is_valid():
    assert validate_path(default_path(6), 6) is None


def test_three_missing_layers_is_a_skip_gap():
    assert validate_path((1, 5, 6), 6) == "skip_gap"


def test_triple_execution_breaks_repeat_limit():
    assert validate_path((2, 2, 2, 3, 4), 4) == "repeat_limit"


def test_order_and_range_rules():
    assert validate_path((2, 1, 3), 3) == "order"
    assert validate_path((0, 1, 2), 3) == "index_range"
    assert validate_path((1, 2, 4), 3) == "index_range"


def test_require_valid_raises_with_rule():
    with pytest.raises(ConstraintError) as exc:
        require_valid((1, 5, 6), 6)
    assert exc.value.rule == "skip_gap"


def test_edge_gaps_follow_the_flag():
    assert validate_path((4, 5), 5) == "skip_gap"
    assert validate_path((4, 5), 5, count_edges=False) is None
    assert validate_path((1, 5), 5, count_edges=False) == "skip_gap"


def test_empty_path_only_for_short_models():
    assert validate_path((), 2) is None
    assert validate_path((), 3) == "skip_gap"


@pytest.mark.parametrize("count_edges", [True, False])
def test_validate_agrees_with_brute_force_on_multisets(count_edges):
    num_layers = 5
    # every sorted multiset with multiplicities 0..3 over [1..5]
    for counts in itertools.product(range(4), repeat=num_layers):
        path = tuple(layer for layer, c in enumerate(counts, start=1) for _ in range(c))
        assert (validate_path(path, num_layers, count_edges) is None) == \
            brute_force_valid(path, num_layers, count_edges), path
    # short unsorted sequences, including out-of-range indices
    for length in range(5):
        for path in itertools.product(range(7), repeat=length):
            assert (validate_path(path, num_layers, count_edges) is None) == \
                brute_force_valid(path, num_layers, count_edges), path


def test_path_to_labels_examples():
    assert path_to_labels(default_path(5), 5) == (1, 1, 1, 1, 1)
    assert path_to_labels((1, 2, 2, 4), 4) == (1, 2, 0, 1)


def test_labels_to_path_examples():
    assert labels_to_path((1, 1, 1, 1)) == (1, 2, 3, 4)
    assert labels_to_path((1, 2, 0, 1)) == (1, 2, 2, 4)
    with pytest.raises(ConstraintError):
        labels_to_path((0, 0, 0, 1))
    with pytest.raises(ConstraintError):
        labels_to_path((1, 3, 1))


@pytest.mark.parametrize("num_layers", range(1, 7))
def test_label_roundtrip_is_identity(num_layers):
    for path in enumerate_valid_paths(num_layers):
        assert labels_to_path(path_to_labels(path, num_layers)) == path


def test_enumeration_matches_brute_force():
    expected = set()
    for counts in itertools.product(range(3), repeat=4):
        path = tuple(layer for layer, c in enumerate(counts, start=1) for _ in range(c))
        if brute_force_valid(path, 4):
            expected.add(path)
    assert set(enumerate_valid_paths(4)) == expected
