#!/usr/bin/env python3
"""
Router training ablations and the out-of-distribution check.

Each run trains a fresh stack on the same split and scores held-out
routing labels, so only the ablated setting differs between rows:

- window count W of the pooled router input
- loss mode (focal, weighted cross-entropy, plain cross-entropy)
- router input source (state entering the layer vs. the embedding)

ood_evaluate trains on one stratum family and evaluates on the other.
"""

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence

from backbone import Backbone
from config import LossConfig, RouterConfig, TrainConfig
from errors import InputError
from evaluation import EvalReport, F1Scores, evaluate
from logger import get_logger
from routing import INPUT_MODES, RouterStack, init_router_stack
from search import SupervisionExample
from supervision import class_counts, label_f1, train_routers
from tasks import TaskInstance

logger = get_logger(__name__)

LOSS_MODES = ("focal", "weighted-ce", "plain-ce")


def fit_stack(train: Sequence[SupervisionExample], backbone: Backbone, router_config: RouterConfig,
              loss_config: LossConfig, train_config: TrainConfig, seed: int) -> RouterStack:
    """Fresh router stack trained on `train`."""
    counts = class_counts(train).as_tuple() if router_config.frequency_bias_init else None
    stack = init_router_stack(backbone.num_layers, backbone.hidden_dim, router_config, seed, counts)
    stack, _ = train_routers(train, backbone, stack, loss_config, train_config)
    return stack


def _heldout_f1(train, heldout, backbone, router_config, loss_config, train_config, seed) -> F1Scores:
    if not heldout:
        raise InputError("ablations need a non-empty held-out split")
    stack = fit_stack(train, backbone, router_config, loss_config, train_config, seed)
    return label_f1(stack, backbone, heldout)


def window_ablation(train: Sequence[SupervisionExample], heldout: Sequence[SupervisionExample],
                    backbone: Backbone, windows: Sequence[int], router_config: RouterConfig,
                    loss_config: LossConfig, train_config: TrainConfig, seed: int) -> Dict[int, F1Scores]:
    """Held-out F1 per window count."""
    results = {}
    for w in windows:
        cfg = dataclasses.replace(router_config, windows=int(w))
        results[int(w)] = _heldout_f1(train, heldout, backbone, cfg, loss_config, train_config, seed)
        logger.info(f"[ANALYZE] W={w}: macro-F1 {results[int(w)].macro:.3f}")
    return results


def loss_ablation(train: Sequence[SupervisionExample], heldout: Sequence[SupervisionExample],
                  backbone: Backbone, router_config: RouterConfig, loss_config: LossConfig,
                  train_config: TrainConfig, seed: int,
                  modes: Sequence[str] = LOSS_MODES) -> Dict[str, F1Scores]:
    """Held-out per-class F1 per loss mode."""
    results = {}
    for mode in modes:
        cfg = dataclasses.replace(loss_config, mode=mode)
        results[mode] = _heldout_f1(train, heldout, backbone, router_config, cfg, train_config, seed)
        logger.info(f"[ANALYZE] loss={mode}: repeat-F1 {results[mode].repeat:.3f} "
                    f"macro-F1 {results[mode].macro:.3f}")
    return results


def input_mode_ablation(train: Sequence[SupervisionExample], heldout: Sequence[SupervisionExample],
                        backbone: Backbone, router_config: RouterConfig, loss_config: LossConfig,
                        train_config: TrainConfig, seed: int) -> Dict[str, F1Scores]:
    """Held-out F1 with routers reading the entering state vs. the embedding."""
    results = {}
    for mode in INPUT_MODES:
        cfg = dataclasses.replace(router_config, input_mode=mode)
        results[mode] = _heldout_f1(train, heldout, backbone, cfg, loss_config, train_config, seed)
    return results


def write_ablation(results: Dict, key: str, path) -> Path:
    """CSV rows key,skip_f1,exec_f1,repeat_f1,macro_f1."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([key, "skip_f1", "exec_f1", "repeat_f1", "macro_f1"])
        for name, scores in results.items():
            writer.writerow([name, *(f"{v:.4f}" for v in scores.as_tuple())])
    return path


# ============================================================================
# OUT OF DISTRIBUTION
# ============================================================================

@dataclass
class OodResult:
    train_family: str
    eval_family: str
    train_examples: int
    in_domain: EvalReport
    out_of_domain: EvalReport

    @property
    def in_domain_delta(self) -> float:
        return self.in_domain.accuracy - self.in_domain.default_accuracy

    @property
    def delta(self) -> float:
        """Routed minus default-path accuracy on the unseen family."""
        return self.out_of_domain.accuracy - self.out_of_domain.default_accuracy

    def to_dict(self) -> dict:
        return {
            "train_family": self.train_family,
            "eval_family": self.eval_family,
            "train_examples": self.train_examples,
            "in_domain": self.in_domain.to_dict(),
            "out_of_domain": self.out_of_domain.to_dict(),
            "in_domain_delta": self.in_domain_delta,
            "delta": self.delta,
        }


def _family(items, family):
    return [x for x in items if x.stratum.startswith(family)]


def ood_evaluate(dataset: Sequence[SupervisionExample], backbone: Backbone, eval_corpus: Sequence[TaskInstance],
                 router_config: RouterConfig, loss_config: LossConfig, train_config: TrainConfig,
                 train_family: str = "D", seed: int = 0, workers: int = 1) -> OodResult:
    """
    Train on one stratum family (A or D) and evaluate on both.

    Raises:
        InputError: no supervision for the training family or no evaluation
            instances for either family
    """
    if train_family not in ("A", "D"):
        raise InputError(f"train family must be 'A' or 'D', got {train_family!r}")
    eval_family = "A" if train_family == "D" else "D"
    train = _family(dataset, train_family)
    if not train:
        raise InputError(f"no supervision examples in family {train_family}")
    seen, unseen = _family(eval_corpus, train_family), _family(eval_corpus, eval_family)
    if not seen or not unseen:
        raise InputError("evaluation corpus must cover both stratum families")

    stack = fit_stack(train, backbone, router_config, loss_config, train_config, seed)
    result = OodResult(train_family, eval_family, len(train),
                       evaluate(backbone, stack, seen, workers=workers),
                       evaluate(backbone, stack, unseen, workers=workers))
    logger.info(f"[EVAL] trained on {train_family}: in-domain delta {result.in_domain_delta:+.4f}, "
                f"{eval_family} delta {result.delta:+.4f}")
    return result
