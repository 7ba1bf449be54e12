#!/usr/bin/env python3
"""
Execution paths: the ordered layer sequences a backbone can run.

A path over layers [1..L] is valid when
  - indices are non-decreasing,
  - each index appears at most twice (so repeats are adjacent),
  - no run of three or more consecutive layers is missing
    (prefix and suffix runs count unless edge counting is turned off),
  - its length is at most 2L.

Paths convert losslessly to per-layer labels in {0, 1, 2}: the label of a
layer is its multiplicity in the path.
"""

import itertools
from typing import Iterator, Optional, Sequence, Tuple

from errors import ConstraintError

ExecutionPath = Tuple[int, ...]
RoutingLabels = Tuple[int, ...]

SKIP, EXECUTE, REPEAT = 0, 1, 2
ACTION_NAMES = ("skip", "execute", "repeat")

MAX_SKIP_RUN = 2          # longest run of consecutive omitted layers
MAX_MULTIPLICITY = 2      # a layer runs at most twice

RULE_INDEX_RANGE = "index_range"
RULE_ORDER = "order"
RULE_REPEAT_LIMIT = "repeat_limit"
RULE_SKIP_GAP = "skip_gap"
RULE_LENGTH_CAP = "length_cap"


def default_path(num_layers: int) -> ExecutionPath:
    return tuple(range(1, num_layers + 1))


def _longest_missing_run(present, num_layers, count_edges):
    longest = run = 0
    first = last = None
    for layer in range(1, num_layers + 1):
        if layer in present:
            if first is None:
                first = layer
            last = layer
            run = 0
        else:
            run += 1
            longest = max(longest, run)
    if count_edges or first is None:
        return longest
    # only interior runs, between the first and last executed layers
    longest = run = 0
    for layer in range(first, last + 1):
        run = 0 if layer in present else run + 1
        longest = max(longest, run)
    return longest


def validate_path(path: Sequence[int], num_layers: int, count_edges: bool = True) -> Optional[str]:
    """
    Check a path against the path rules.

    Args:
        path: Layer indices
        num_layers: L
        count_edges: Whether missing prefix/suffix layers count as a skip run

    Returns:
        None when the path is valid, otherwise the name of the first violated rule
        (index_range, order, repeat_limit, skip_gap, length_cap)

    Example:
        >>> validate_path((1, 5, 6), 6)
        'skip_gap'
    """
    path = tuple(int(i) for i in path)
    if any(i < 1 or i > num_layers for i in path):
        return RULE_INDEX_RANGE
    if any(b < a for a, b in zip(path, path[1:])):
        return RULE_ORDER
    counts = {}
    for i in path:
        counts[i] = counts.get(i, 0) + 1
    if any(c > MAX_MULTIPLICITY for c in counts.values()):
        return RULE_REPEAT_LIMIT
    if _longest_missing_run(counts, num_layers, count_edges) > MAX_SKIP_RUN:
        return RULE_SKIP_GAP
    if len(path) > 2 * num_layers:
        return RULE_LENGTH_CAP
    return None


def require_valid(path: Sequence[int], num_layers: int, count_edges: bool = True) -> ExecutionPath:
    """Return the path as a tuple, raising ConstraintError when it is invalid."""
    rule = validate_path(path, num_layers, count_edges)
    if rule is not None:
        raise ConstraintError(rule, f"path {list(path)} violates rule '{rule}' for L={num_layers}")
    return tuple(int(i) for i in path)


def path_to_labels(path: Sequence[int], num_layers: int) -> RoutingLabels:
    """Per-layer multiplicities: label of layer l = count of l in the path."""
    labels = [0] * num_layers
    for i in path:
        labels[int(i) - 1] += 1
    return tuple(labels)


def labels_to_path(labels: Sequence[int], count_edges: bool = True) -> ExecutionPath:
    """
    Inverse of path_to_labels: emit layer l labels[l] times in ascending order.

    Raises:
        ConstraintError: labels outside {0,1,2} or a reconstruction that breaks a path rule
    """
    if any(int(y) not in (SKIP, EXECUTE, REPEAT) for y in labels):
        raise ConstraintError(RULE_REPEAT_LIMIT, f"labels {list(labels)} must lie in {{0, 1, 2}}")
    path = tuple(layer for layer, y in enumerate(labels, start=1) for _ in range(int(y)))
    return require_valid(path, len(labels), count_edges)


def enumerate_valid_paths(num_layers: int, count_edges: bool = True) -> Iterator[ExecutionPath]:
    """Every valid path for L layers, in lexicographic order of label vectors."""
    for labels in itertools.product((SKIP, EXECUTE, REPEAT), repeat=num_layers):
        path = tuple(layer for layer, y in enumerate(labels, start=1) for _ in range(y))
        if validate_path(path, num_layers, count_edges) is None:
            yield path
