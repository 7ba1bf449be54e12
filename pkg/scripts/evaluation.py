#!/usr/bin/env python3
"""
Routed evaluation and routing-pattern analytics.

Reports accuracy and executed layers against the static default path,
per-class F1 of router decisions against oracle labels, mean layer usage
per stratum, early/middle/late depth summaries, label distributions and
the control-knob sweep. Every table here has a CSV writer; charts are
drawn by visualization_framework from the same data.
"""

import csv
import json
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from backbone import Backbone, forward_default
from config import ALL_STRATA
from errors import InputError
from logger import get_logger
from paths import EXECUTE, REPEAT, SKIP
from routing import routed_forward
from tasks import TaskInstance, grade

logger = get_logger(__name__)

CLASS_NAMES = ("skip", "execute", "repeat")
DEPTH_GROUPS = ("early", "middle", "late")


# ============================================================================
# F1
# ============================================================================

@dataclass(frozen=True)
class F1Scores:
    skip: float
    execute: float
    repeat: float
    macro: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.skip, self.execute, self.repeat, self.macro)


def per_class_f1(pred: Sequence[int], gold: Sequence[int]) -> F1Scores:
    """
    Per-class F1 for skip/execute/repeat plus their macro average.

    Precision or recall with a zero denominator counts as 0. A class absent
    from both sequences scores 0.0 and is left out of the macro average.

    Example:
        >>> per_class_f1([1, 1, 1, 2], [1, 1, 0, 2]).as_tuple()
        (0.0, 0.8, 1.0, 0.6)
    """
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape:
        raise InputError(f"prediction and gold lengths differ: {pred.size} vs {gold.size}")
    scores, present = [], []
    for c in (SKIP, EXECUTE, REPEAT):
        tp = int(np.sum((pred == c) & (gold == c)))
        fp = int(np.sum((pred == c) & (gold != c)))
        fn = int(np.sum((pred != c) & (gold == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(round(f1, 12))
        if np.any(pred == c) or np.any(gold == c):
            present.append(f1)
    macro = round(float(np.mean(present)), 12) if present else 0.0
    return F1Scores(scores[0], scores[1], scores[2], macro)


# ============================================================================
# ROUTED EVALUATION
# ============================================================================

@dataclass(frozen=True)
class RoutedRecord:
    id: str
    stratum: str
    decisions: Tuple[int, ...]
    executed_layers: int
    reward: float
    default_reward: float


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> List:
    """Apply fn to every item, results in input order whatever the worker count."""
    if workers <= 1:
        return [fn(item) for item in items]
    results = [None] * len(items)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_index = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return results


def default_solve_rate(backbone: Backbone, corpus: Sequence[TaskInstance], workers: int = 1) -> float:
    """Fraction of instances the all-execute path answers correctly."""
    if not corpus:
        raise InputError("cannot measure the default path on an empty corpus")
    scores = parallel_map(lambda inst: grade(inst, forward_default(backbone, inst.tokens)[1]), corpus, workers)
    return float(np.mean(scores))


def route_corpus(backbone: Backbone, stack, corpus: Sequence[TaskInstance],
                 control: Optional[float] = None, workers: int = 1) -> List[RoutedRecord]:
    """Routed and default-path outcome of every instance."""

    def run(instance: TaskInstance) -> RoutedRecord:
        out = routed_forward(backbone, stack, instance.tokens, control)
        _, default_logits = forward_default(backbone, instance.tokens)
        return RoutedRecord(instance.id, instance.stratum, out.decisions, out.executed_layers,
                            grade(instance, out.logits), grade(instance, default_logits))

    return parallel_map(run, list(corpus), workers)


@dataclass
class StratumReport:
    count: int
    accuracy: float
    avg_executed_layers: float
    default_accuracy: float


@dataclass
class EvalReport:
    accuracy: float
    avg_executed_layers: float
    default_accuracy: float
    default_layers: int
    count: int
    f1: Optional[F1Scores] = None
    per_stratum: Dict[str, StratumReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["f1"] = None if self.f1 is None else dict(zip(("skip", "execute", "repeat", "macro"),
                                                           self.f1.as_tuple()))
        return data


def _stratum_order(names):
    order = {s: i for i, s in enumerate(ALL_STRATA)}
    return sorted(names, key=lambda s: (order.get(s, len(order)), s))


def summarize(records: Sequence[RoutedRecord], num_layers: int,
              oracle_labels: Optional[Mapping[str, Sequence[int]]] = None) -> EvalReport:
    """Aggregate routed records into an EvalReport."""
    if not records:
        raise InputError("cannot evaluate an empty corpus")
    report = EvalReport(
        accuracy=float(np.mean([r.reward for r in records])),
        avg_executed_layers=float(np.mean([r.executed_layers for r in records])),
        default_accuracy=float(np.mean([r.default_reward for r in records])),
        default_layers=num_layers,
        count=len(records),
    )
    groups: Dict[str, List[RoutedRecord]] = {}
    for r in records:
        groups.setdefault(r.stratum, []).append(r)
    for stratum in _stratum_order(groups):
        rows = groups[stratum]
        report.per_stratum[stratum] = StratumReport(
            len(rows), float(np.mean([r.reward for r in rows])),
            float(np.mean([r.executed_layers for r in rows])),
            float(np.mean([r.default_reward for r in rows])))
    if oracle_labels:
        pred, gold = [], []
        for r in records:
            if r.id in oracle_labels:
                pred.extend(r.decisions)
                gold.extend(oracle_labels[r.id])
        if gold:
            report.f1 = per_class_f1(pred, gold)
    return report


def evaluate(backbone: Backbone, stack, corpus: Sequence[TaskInstance],
             oracle_labels: Optional[Mapping[str, Sequence[int]]] = None,
             control: Optional[float] = None, workers: int = 1) -> EvalReport:
    """
    Accuracy and executed layers of routed inference over a corpus.

    Args:
        backbone: Frozen backbone
        stack: Router stack
        corpus: Task instances
        oracle_labels: Optional id -> routing labels; when given, per-class F1 of
            the router decisions is reported on the instances that have labels
        control: Optional control parameter p in [-1, 1]
        workers: Thread count; results do not depend on it

    Raises:
        InputError: empty corpus
    """
    if not corpus:
        raise InputError("cannot evaluate an empty corpus")
    records = route_corpus(backbone, stack, corpus, control, workers)
    report = summarize(records, backbone.num_layers, oracle_labels)
    logger.info(f"[EVAL] accuracy {report.accuracy:.4f} (default {report.default_accuracy:.4f}), "
                f"avg layers {report.avg_executed_layers:.3f} of {backbone.num_layers}")
    return report


def write_report(report: EvalReport, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    if extra:
        data.update(extra)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ============================================================================
# ROUTING PATTERNS
# ============================================================================

@dataclass
class UsageMatrix:
    strata: List[str]
    values: np.ndarray

    @property
    def num_layers(self) -> int:
        return int(self.values.shape[1])

    def write_csv(self, path) -> Path:
        """Rows stratum,layer,mean_usage."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["stratum", "layer", "mean_usage"])
            for stratum, row in zip(self.strata, self.values):
                for layer, value in enumerate(row, start=1):
                    writer.writerow([stratum, layer, f"{value:.6f}"])
        return path


def decisions_by_stratum(records: Sequence[RoutedRecord]) -> Dict[str, List[Tuple[int, ...]]]:
    grouped: Dict[str, List[Tuple[int, ...]]] = {}
    for r in records:
        grouped.setdefault(r.stratum, []).append(r.decisions)
    return {s: grouped[s] for s in _stratum_order(grouped)}


def usage_heatmap(decisions: Mapping[str, Sequence[Sequence[int]]]) -> UsageMatrix:
    """Mean decision value (0 skip, 1 execute, 2 repeat) per stratum and layer."""
    strata = [s for s in decisions if len(decisions[s])]
    if not strata:
        raise InputError("usage heatmap needs at least one decision sequence")
    values = np.stack([np.asarray(decisions[s], dtype=np.float64).mean(axis=0) for s in strata])
    return UsageMatrix(strata, values)


def depth_groups(num_layers: int) -> Dict[str, Tuple[int, ...]]:
    """
    Split layers 1..L into early/middle/late terciles, remainder to later groups.

    Example:
        >>> [len(g) for g in depth_groups(8).values()]
        [2, 3, 3]
    """
    if num_layers < 3:
        raise InputError(f"depth grouping needs L >= 3, got {num_layers}")
    base, rem = divmod(num_layers, 3)
    sizes = (base, base + (1 if rem >= 2 else 0), base + (1 if rem >= 1 else 0))
    groups, start = {}, 1
    for name, size in zip(DEPTH_GROUPS, sizes):
        groups[name] = tuple(range(start, start + size))
        start += size
    return groups


@dataclass(frozen=True)
class GroupSummary:
    layers: Tuple[int, ...]
    mean: float
    q1: float
    median: float
    q3: float
    minimum: float
    maximum: float


def depth_group_stats(decisions: Sequence[Sequence[int]]) -> Dict[str, GroupSummary]:
    """Quartiles of per-example mean usage within each depth group."""
    usage = np.asarray(decisions, dtype=np.float64)
    if usage.ndim != 2 or usage.shape[0] == 0:
        raise InputError("depth group stats need at least one decision sequence")
    summaries = {}
    for name, layers in depth_groups(usage.shape[1]).items():
        per_example = usage[:, [l - 1 for l in layers]].mean(axis=1)
        q1, median, q3 = np.percentile(per_example, [25, 50, 75])
        summaries[name] = GroupSummary(layers, float(per_example.mean()), float(q1), float(median),
                                       float(q3), float(per_example.min()), float(per_example.max()))
    return summaries


def write_depth_groups(stats: Mapping[str, Mapping[str, GroupSummary]], path) -> Path:
    """JSON {stratum: {group: summary}}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {s: {g: asdict(summary) for g, summary in groups.items()} for s, groups in stats.items()}
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    return path


def label_distribution(dataset) -> Dict[str, Tuple[float, float, float]]:
    """Skip/execute/repeat label fractions per stratum of a supervision dataset."""
    if not dataset:
        raise InputError("label distribution needs a non-empty dataset")
    counts: Dict[str, np.ndarray] = {}
    for ex in dataset:
        row = counts.setdefault(ex.stratum, np.zeros(3, dtype=np.int64))
        for y in ex.labels:
            row[int(y)] += 1
    return {s: tuple(float(v) for v in counts[s] / counts[s].sum()) for s in _stratum_order(counts)}


def write_label_distribution(distribution: Mapping[str, Tuple[float, float, float]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["stratum", *CLASS_NAMES])
        for stratum, fractions in distribution.items():
            writer.writerow([stratum, *(f"{v:.6f}" for v in fractions)])
    return path


# ============================================================================
# CONTROL SWEEP
# ============================================================================

@dataclass(frozen=True)
class ControlRow:
    p: float
    accuracy: float
    avg_layers: float
    n_skip: int
    n_execute: int
    n_repeat: int


def control_sweep(backbone: Backbone, stack, corpus: Sequence[TaskInstance],
                  p_grid: Sequence[float], workers: int = 1) -> List[ControlRow]:
    """
    Routed accuracy, executed layers and decision histogram for each control value.

    p = -1 executes nothing, p = +1 repeats every layer and p = -0.5 is the
    plain router.
    """
    if not corpus:
        raise InputError("control sweep needs a non-empty corpus")
    rows = []
    for p in p_grid:
        records = route_corpus(backbone, stack, corpus, float(p), workers)
        hist = np.bincount(np.concatenate([r.decisions for r in records]), minlength=3)
        rows.append(ControlRow(float(p), float(np.mean([r.reward for r in records])),
                               float(np.mean([r.executed_layers for r in records])),
                               int(hist[SKIP]), int(hist[EXECUTE]), int(hist[REPEAT])))
        logger.debug(f"[SWEEP] p={p:+.2f} accuracy {rows[-1].accuracy:.4f} layers {rows[-1].avg_layers:.3f}")
    return rows


def write_control_rows(rows: Sequence[ControlRow], curve_path, histogram_path) -> Tuple[Path, Path]:
    """control.csv (p,accuracy,avg_layers) and histogram.csv (p,skip,execute,repeat)."""
    curve_path, histogram_path = Path(curve_path), Path(histogram_path)
    curve_path.parent.mkdir(parents=True, exist_ok=True)
    with open(curve_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["p", "accuracy", "avg_layers"])
        for r in rows:
            writer.writerow([f"{r.p:.4f}", f"{r.accuracy:.6f}", f"{r.avg_layers:.6f}"])
    with open(histogram_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["p", *CLASS_NAMES])
        for r in rows:
            writer.writerow([f"{r.p:.4f}", r.n_skip, r.n_execute, r.n_repeat])
    return curve_path, histogram_path
