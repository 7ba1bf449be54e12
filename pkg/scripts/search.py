#!/usr/bin/env python3
"""
Length-aware Monte Carlo tree search over edited execution paths.

The tree starts at the default path. Each expansion applies one edit
(skip one layer that runs once, or repeat one layer that runs once);
selection scores children with UCB minus a length penalty, and every
evaluated path is memoized per search. The shortest correct path found
becomes the supervision target for the routers; when the default path is
already correct only strictly shorter paths qualify.

Path rules and label conversion live in paths.py and are re-exported here.
"""

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from backbone import Backbone, forward_with_path
from config import ALL_STRATA, SearchConfig, derive_seed
from errors import InputError
from logger import get_logger
from paths import (EXECUTE, REPEAT, SKIP, ExecutionPath, RoutingLabels, default_path,  # noqa: F401
                   enumerate_valid_paths, labels_to_path, path_to_labels, validate_path)
from tasks import TaskInstance, grade

logger = get_logger(__name__)

RewardFn = Callable[[TaskInstance, np.ndarray], float]

EXHAUSTIVE_MAX_LAYERS = 6     # 3^L label vectors; L=8 is already 6561 forwards

# ============================================================================
# ACTIONS
# ============================================================================

SKIP_LAYER = "skip_layer"
REPEAT_LAYER = "repeat_layer"


@dataclass(frozen=True)
class EditAction:
    kind: str
    layer: int

    def apply(self, path: Sequence[int]) -> ExecutionPath:
        path = list(path)
        if self.kind == SKIP_LAYER:
            path.remove(self.layer)
        else:
            at = path.index(self.layer)
            path.insert(at, self.layer)
        return tuple(path)


def legal_actions(path: Sequence[int], num_layers: int, count_edges: bool = True) -> List[EditAction]:
    """
    Single edits that turn a valid path into a different valid path.

    Only layers executed exactly once can be skipped or repeated. Actions come
    back in expansion order: repeats by descending layer, then skips by
    descending layer.

    Example:
        >>> len(legal_actions((1, 2, 3, 4), 4))
        8
    """
    counts = {}
    for layer in path:
        counts[layer] = counts.get(layer, 0) + 1
    singles = sorted((layer for layer, c in counts.items() if c == 1), reverse=True)
    actions = [EditAction(REPEAT_LAYER, layer) for layer in singles]
    actions += [EditAction(SKIP_LAYER, layer) for layer in singles]
    return [a for a in actions if validate_path(a.apply(path), num_layers, count_edges) is None]


def ucb_score(q: float, v: int, parent_visits: int, path_len: int, num_layers: int,
              exploration: float, length_penalty: float) -> float:
    """
    Q/v + c * sqrt(ln V / v) - lambda * |path| / L; unvisited nodes score +inf.

    Example:
        >>> round(ucb_score(2, 4, 16, 24, 32, 1.8, 3.0), 3)
        -0.251
    """
    if v == 0:
        return math.inf
    return (q / v + exploration * math.sqrt(math.log(parent_visits) / v)
            - length_penalty * path_len / num_layers)


# ============================================================================
# TREE
# ============================================================================

class SearchNode:
    """A path in the search tree with its visit count and cumulative reward."""

    __slots__ = ("path", "parent", "children", "untried", "visits", "value")

    def __init__(self, path: ExecutionPath, parent: Optional["SearchNode"], untried: List[EditAction]):
        self.path = path
        self.parent = parent
        self.children: List[SearchNode] = []
        # popped from the end, so stored reversed
        self.untried = list(reversed(untried))
        self.visits = 0
        self.value = 0.0

    def expandable(self) -> bool:
        return bool(self.untried)

    def __repr__(self):
        return f"SearchNode({list(self.path)}, v={self.visits}, Q={self.value:g})"


@dataclass
class SearchStats:
    visited: int = 0
    inferences: int = 0
    simulations: int = 0
    reward_default: float = 0.0
    reward_best: float = 0.0


class PathEvaluator:
    """Memoized reward of execution paths for one example."""

    def __init__(self, example: TaskInstance, backbone: Backbone, reward_fn: RewardFn, count_edges: bool):
        self.example = example
        self.backbone = backbone
        self.reward_fn = reward_fn
        self.count_edges = count_edges
        self.cache: Dict[ExecutionPath, float] = {}
        self.inferences = 0

    def __call__(self, path: ExecutionPath) -> float:
        if path in self.cache:
            return self.cache[path]
        _, logits = forward_with_path(self.backbone, self.example.tokens, path, self.count_edges)
        self.inferences += 1
        value = float(self.reward_fn(self.example, logits))
        self.cache[path] = value
        return value


def _select_child(node: SearchNode, config: SearchConfig, num_layers: int, rng: np.random.Generator) -> SearchNode:
    if rng.random() < config.random_child_prob:
        return node.children[int(rng.integers(len(node.children)))]
    best, best_score = node.children[0], -math.inf
    for child in node.children:
        score = ucb_score(child.value, child.visits, node.visits, len(child.path), num_layers,
                          config.exploration, config.length_penalty)
        if score > best_score:
            best, best_score = child, score
    return best


def mcts_search(example: TaskInstance, backbone: Backbone, reward_fn: Optional[RewardFn] = None,
                config: Optional[SearchConfig] = None,
                rng: Optional[np.random.Generator] = None) -> Tuple[Optional[ExecutionPath], SearchStats]:
    """
    Search for the shortest correct execution path of one example.

    The default path is evaluated first and seeds the root. Each simulation
    descends through fully expanded nodes (a random child with probability
    p_rand, else the UCB maximum), expands one untried edit, evaluates the
    new path through the memo cache and adds the raw reward to every node on
    the trail. When the default path is wrong the search stops at the first
    correct path.

    Args:
        example: Task instance with prompt tokens and gold answer
        backbone: Frozen backbone
        reward_fn: (instance, answer logits) -> reward in [0, 1]; defaults to tasks.grade
        config: Search constants
        rng: Generator for the random-child draws; defaults to one seeded from
            config.seed and the example id

    Returns:
        (best path or None, stats). A correct default path is never returned.
    """
    config = config or SearchConfig()
    reward_fn = reward_fn or grade
    if rng is None:
        rng = np.random.default_rng(derive_seed(config.seed, example.id))
    num_layers = backbone.num_layers
    evaluate = PathEvaluator(example, backbone, reward_fn, config.count_edge_skips)

    start = default_path(num_layers)
    root = SearchNode(start, None, legal_actions(start, num_layers, config.count_edge_skips))
    reward_default = evaluate(start)
    root.visits, root.value = 1, reward_default

    best: Optional[ExecutionPath] = None
    incumbent_len = num_layers if reward_default >= 1.0 else math.inf
    stats = SearchStats(reward_default=reward_default)

    for _ in range(config.simulations):
        stats.simulations += 1
        node = root
        trail = [root]
        while not node.expandable() and node.children:
            node = _select_child(node, config, num_layers, rng)
            trail.append(node)
        if node.expandable():
            action = node.untried.pop()
            path = action.apply(node.path)
            child = SearchNode(path, node, legal_actions(path, num_layers, config.count_edge_skips))
            node.children.append(child)
            trail.append(child)
            node = child

        reward_value = evaluate(node.path)
        for visited in trail:
            visited.visits += 1
            visited.value += reward_value

        if reward_value >= 1.0 and len(node.path) < incumbent_len:
            best, incumbent_len = node.path, len(node.path)
            if reward_default == 0.0:
                break

    stats.visited = len(evaluate.cache)
    stats.inferences = evaluate.inferences
    stats.reward_best = 1.0 if best is not None else reward_default
    return best, stats


def exhaustive_search(example: TaskInstance, backbone: Backbone, reward_fn: Optional[RewardFn] = None,
                      count_edges: bool = True) -> Tuple[List[ExecutionPath], Optional[int]]:
    """
    Evaluate every valid path once.

    Returns:
        (correct paths in enumeration order, shortest correct length or None)

    Raises:
        InputError: L above EXHAUSTIVE_MAX_LAYERS
    """
    if backbone.num_layers > EXHAUSTIVE_MAX_LAYERS:
        raise InputError(f"exhaustive search is limited to L <= {EXHAUSTIVE_MAX_LAYERS}, got {backbone.num_layers}")
    evaluate = PathEvaluator(example, backbone, reward_fn or grade, count_edges)
    correct = [p for p in enumerate_valid_paths(backbone.num_layers, count_edges) if evaluate(p) >= 1.0]
    shortest = min((len(p) for p in correct), default=None)
    return correct, shortest


# ============================================================================
# DATASET GENERATION
# ============================================================================

@dataclass(frozen=True)
class SupervisionExample:
    id: str
    stratum: str
    tokens: Tuple[int, ...]
    labels: RoutingLabels
    gold: str
    reward_default: float
    reward_best: float
    path_len: int

    @property
    def path(self) -> ExecutionPath:
        return labels_to_path(self.labels, count_edges=False)


@dataclass
class StratumStats:
    stratum: str
    original: int = 0
    sampled: int = 0
    visited: int = 0
    inferences: int = 0
    layers_saved: float = 0.0
    _saved_total: int = field(default=0, repr=False)


STATS_COLUMNS = ("stratum", "original", "sampled", "visited", "inferences", "layers_saved")


def _search_one(instance: TaskInstance, backbone: Backbone, config: SearchConfig, seed: int):
    rng = np.random.default_rng(derive_seed(seed, instance.id))
    best, stats = mcts_search(instance, backbone, grade, config, rng)
    example = None
    if best is not None and stats.reward_best >= stats.reward_default:
        example = SupervisionExample(instance.id, instance.stratum, tuple(instance.tokens),
                                     path_to_labels(best, backbone.num_layers), instance.gold,
                                     stats.reward_default, stats.reward_best, len(best))
    return example, stats


def generate_dataset(corpus: Sequence[TaskInstance], backbone: Backbone, config: SearchConfig,
                     seed: Optional[int] = None, workers: int = 1,
                     show_progress: bool = False) -> Tuple[List[SupervisionExample], List[StratumStats]]:
    """
    Run the search over a corpus and keep accuracy-preserving paths.

    Every example gets its own generator seeded from (seed, example id), so
    results do not depend on the worker count. Examples whose search found
    no path are dropped.

    Returns:
        (retained supervision examples in corpus order, one stats row per stratum)
    """
    seed = config.seed if seed is None else seed
    results = [None] * len(corpus)
    with tqdm(total=len(corpus), desc="[SEARCH]", disable=not show_progress) as bar:
        if workers <= 1:
            for i, instance in enumerate(corpus):
                results[i] = _search_one(instance, backbone, config, seed)
                bar.update(1)
        else:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                future_to_index = {
                    executor.submit(_search_one, instance, backbone, config, seed): i
                    for i, instance in enumerate(corpus)
                }
                for future in as_completed(future_to_index):
                    results[future_to_index[future]] = future.result()
                    bar.update(1)

    by_stratum: Dict[str, StratumStats] = {}
    examples = []
    for instance, (example, stats) in zip(corpus, results):
        row = by_stratum.setdefault(instance.stratum, StratumStats(instance.stratum))
        row.original += 1
        row.visited += stats.visited
        row.inferences += stats.inferences
        if example is not None:
            examples.append(example)
            row.sampled += 1
            row._saved_total += backbone.num_layers - example.path_len
    for row in by_stratum.values():
        row.layers_saved = row._saved_total / row.sampled if row.sampled else 0.0

    order = {s: i for i, s in enumerate(ALL_STRATA)}
    rows = sorted(by_stratum.values(), key=lambda r: (order.get(r.stratum, len(order)), r.stratum))
    kept = len(examples)
    logger.info(f"[SEARCH] retained {kept}/{len(corpus)} examples")
    return examples, rows


# ============================================================================
# FILES
# ============================================================================

def write_dataset(examples: Sequence[SupervisionExample], path) -> Path:
    """JSON-lines: {id, stratum, tokens, labels, gold, reward_default, reward_best, path_len}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for example in examples:
            record = asdict(example)
            record["tokens"] = list(example.tokens)
            record["labels"] = list(example.labels)
            f.write(json.dumps(record) + "\n")
    return path


def read_dataset(path) -> List[SupervisionExample]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset file not found: {path}")
    examples = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                examples.append(SupervisionExample(
                    r["id"], r["stratum"], tuple(r["tokens"]), tuple(int(y) for y in r["labels"]),
                    str(r["gold"]), float(r["reward_default"]), float(r["reward_best"]), int(r["path_len"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{line_no}: malformed dataset record ({exc})") from None
    return examples


def write_stats(rows: Sequence[StratumStats], path) -> Path:
    """Per-stratum CSV: stratum,original,sampled,visited,inferences,layers_saved."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(STATS_COLUMNS)
        for row in rows:
            writer.writerow([row.stratum, row.original, row.sampled, row.visited, row.inferences,
                             f"{row.layers_saved:.4f}"])
    return path
