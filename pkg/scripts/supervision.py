#!/usr/bin/env python3
"""
Router training from searched supervision.

Routers are trained with teacher forcing: every example's hidden states
follow its labeled path exactly, and router l is scored on the state that
enters layer l along that path (a skipped layer's router reads the state
that bypassed it). The loss is focal loss with effective-number class
weights; plain and weighted cross-entropy are available for the imbalance
study. Only router parameters change.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import numerics as nx
import optim
from backbone import Backbone, apply_action
from config import LossConfig, TrainConfig
from errors import InputError, TrainingError
from evaluation import F1Scores, per_class_f1
from logger import get_logger
from routing import INPUT_FIRST, RouterStack, choose_action, window_pool
from search import SupervisionExample

logger = get_logger(__name__)

ROUTER_NO_DECAY = ("b_in", "b_out")      # biases are not weight-decayed
TRAIN_LOG_COLUMNS = ("epoch", "loss", "skip_f1", "exec_f1", "repeat_f1", "macro_f1", "lr")


# ============================================================================
# CLASS WEIGHTS AND LOSS
# ============================================================================

@dataclass(frozen=True)
class ClassCounts:
    n_skip: int
    n_execute: int
    n_repeat: int

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.n_skip, self.n_execute, self.n_repeat)

    @property
    def total(self) -> int:
        return sum(self.as_tuple())


def class_counts(dataset) -> ClassCounts:
    """Skip/execute/repeat label counts over all layers of all examples."""
    counts = [0, 0, 0]
    for item in dataset:
        labels = item.labels if hasattr(item, "labels") else item
        for y in labels:
            counts[int(y)] += 1
    return ClassCounts(*counts)


def effective_number_weights(counts: ClassCounts, beta: float = 0.999) -> np.ndarray:
    """
    Class weights alpha_c = w_c / mean(w), w_c = (1 - beta) / (1 - beta^n_c).

    A class with no samples gets weight 0 and is left out of the mean.

    Example:
        >>> np.round(effective_number_weights(ClassCounts(10, 80, 10)), 3)
        array([1.409, 0.182, 1.409])
    """
    if not 0.0 < beta < 1.0:
        raise InputError(f"beta must lie in (0, 1), got {beta}")
    n = np.asarray(counts.as_tuple(), dtype=np.float64)
    if not n.any():
        raise InputError("effective-number weights need at least one nonzero class count")
    present = n > 0
    w = np.zeros(3, dtype=np.float64)
    w[present] = (1.0 - beta) / (1.0 - np.power(beta, n[present]))
    return w / w[present].mean()


def loss_weights(counts: ClassCounts, config: LossConfig) -> Tuple[np.ndarray, float]:
    """(alpha, gamma) for the configured loss mode."""
    if config.mode == "plain-ce":
        return np.ones(3), 0.0
    alpha = effective_number_weights(counts, config.beta)
    gamma = config.gamma if config.mode == "focal" else 0.0
    return alpha, gamma


def focal_loss(probs, labels: Sequence[int], alpha: Sequence[float], gamma: float = 2.0,
               floor: float = 1e-12) -> nx.Tensor:
    """
    -mean_l alpha[y_l] * (1 - p_{l,y_l})^gamma * log p_{l,y_l}

    Probabilities below `floor` are clamped inside the log. With gamma = 0
    and unit alpha this is the mean cross-entropy.
    """
    probs = nx.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise InputError(f"focal_loss needs (n, 3) probabilities, got {probs.shape}")
    p_label = nx.pick(probs, labels)
    weight = nx.Tensor(np.asarray(alpha, dtype=np.float64)[labels], dtype=probs.dtype)
    term = nx.mul(nx.log(p_label, floor), weight)
    if gamma != 0.0:
        term = nx.mul(term, nx.power(nx.sub(1.0, p_label), gamma))
    return nx.neg(nx.mean(term))


def lr_schedule(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warmup to config.lr_max, then cosine to 0 at total_steps."""
    warmup = optim.effective_warmup(config.warmup_steps, total_steps)
    return optim.lr_schedule(step, config.lr_max, warmup, total_steps)


# ============================================================================
# ROUTER INPUTS
# ============================================================================

def teacher_forced_states(backbone: Backbone, tokens: Sequence[int],
                          labels: Sequence[int]) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    States entering each layer when the labeled path is executed.

    Returns:
        (L states, one per layer position, final state)
    """
    states = backbone.embed(tokens)
    entering = []
    for layer, y in enumerate(labels, start=1):
        entering.append(states)
        states = apply_action(backbone, layer, states, int(y))
    return entering, states


def router_inputs(backbone: Backbone, stack: RouterStack, tokens: Sequence[int],
                  labels: Optional[Sequence[int]] = None) -> List[np.ndarray]:
    """
    Window-pooled router inputs for every layer position.

    With labels the states follow the labeled path (teacher forcing);
    without, they follow the stack's own decisions.
    """
    if labels is not None:
        entering, _ = teacher_forced_states(backbone, tokens, labels)
    else:
        states = backbone.embed(tokens)
        entering = []
        for layer in range(1, backbone.num_layers + 1):
            entering.append(states)
            source = entering[0] if stack.input_mode == INPUT_FIRST else states
            states = apply_action(backbone, layer, states, stack.route(layer, source).action)
    if stack.input_mode == INPUT_FIRST:
        entering = [entering[0]] * len(entering)
    return [window_pool(s, stack.windows) for s in entering]


def predict_labels(stack: RouterStack, pooled: Sequence[np.ndarray]) -> Tuple[int, ...]:
    """Router decisions on precomputed pooled inputs."""
    decisions = []
    with nx.no_grad():
        for router, x in zip(stack.routers, pooled):
            z = nx.mean(router.logits(nx.Tensor(x, dtype=x.dtype)), axis=0)
            decisions.append(choose_action(nx.softmax(z).data))
    return tuple(decisions)


def _batch_loss(stack: RouterStack, pooled_batch, labels_batch, alpha, gamma, floor) -> nx.Tensor:
    rows, targets = [], []
    for layer, router in enumerate(stack.routers):
        xs = [pooled[layer] for pooled in pooled_batch]
        x = nx.Tensor(np.concatenate(xs, axis=0), dtype=xs[0].dtype)
        z = nx.segment_mean(router.logits(x), [len(p) for p in xs])
        rows.append(nx.softmax(z, axis=-1))
        targets.extend(int(labels[layer]) for labels in labels_batch)
    probs = nx.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    return focal_loss(probs, targets, alpha, gamma, floor)


# ============================================================================
# TRAINING
# ============================================================================

@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    f1: F1Scores
    lr: float


def split_dataset(dataset: Sequence[SupervisionExample], heldout_fraction: float,
                  seed: int) -> Tuple[List[SupervisionExample], List[SupervisionExample]]:
    """Seeded train / held-out split; both parts keep dataset order."""
    n = len(dataset)
    if n < 2:
        return list(dataset), []
    n_heldout = min(n - 1, max(1, int(round(n * heldout_fraction))))
    heldout_idx = set(np.random.default_rng(seed).permutation(n)[:n_heldout].tolist())
    train = [ex for i, ex in enumerate(dataset) if i not in heldout_idx]
    heldout = [ex for i, ex in enumerate(dataset) if i in heldout_idx]
    return train, heldout


def label_f1(stack: RouterStack, backbone: Backbone, examples: Sequence[SupervisionExample]) -> F1Scores:
    """F1 of router decisions on teacher-forced inputs against the examples' labels."""
    pred, gold = [], []
    for ex in examples:
        pred.extend(predict_labels(stack, router_inputs(backbone, stack, ex.tokens, ex.labels)))
        gold.extend(ex.labels)
    return per_class_f1(pred, gold)


def train_routers(dataset: Sequence[SupervisionExample], backbone: Backbone, stack: RouterStack,
                  loss_config: Optional[LossConfig] = None, train_config: Optional[TrainConfig] = None,
                  heldout: Optional[Sequence[SupervisionExample]] = None,
                  show_progress: bool = False) -> Tuple[RouterStack, List[EpochMetrics]]:
    """
    Train the router stack in place on supervision examples.

    Each optimizer step covers `batch_size` examples, accumulated over
    micro-batches of `micro_batch_size`; the loss is averaged over examples
    and layer positions. AdamW with decoupled weight decay (none on biases)
    follows the warmup + cosine schedule over all steps.

    Args:
        dataset: Training examples
        backbone: Frozen backbone
        stack: Router stack to train
        loss_config: Loss mode and constants
        train_config: Optimizer, schedule and teacher-forcing settings
        heldout: Examples for per-epoch F1; the training set is used when absent

    Returns:
        (the trained stack, one EpochMetrics per epoch)

    Raises:
        InputError: empty dataset or labels that do not fit the backbone
        TrainingError: non-finite loss (the optimizer step is on .step)
    """
    loss_config = loss_config or LossConfig()
    train_config = train_config or TrainConfig()
    if not dataset:
        raise InputError("router training needs at least one supervision example")
    if stack.num_layers != backbone.num_layers:
        raise InputError(f"stack has {stack.num_layers} routers for {backbone.num_layers} layers")
    if any(len(ex.labels) != backbone.num_layers for ex in dataset):
        raise InputError("every example needs one label per backbone layer")

    alpha, gamma = loss_weights(class_counts(dataset), loss_config)
    logger.info(f"[TRAIN] {len(dataset)} examples, alpha={np.round(alpha, 3).tolist()}, gamma={gamma}")
    monitor = list(heldout) if heldout else list(dataset)

    rng = np.random.default_rng(train_config.seed)
    steps_per_epoch = math.ceil(len(dataset) / train_config.batch_size)
    total = steps_per_epoch * train_config.epochs
    labels = [ex.labels for ex in dataset]

    stack.set_trainable(True)
    optimizer = optim.AdamW(stack.parameters(), weight_decay=train_config.weight_decay,
                            betas=(train_config.adam_beta1, train_config.adam_beta2),
                            eps=train_config.adam_eps, no_decay_suffixes=ROUTER_NO_DECAY)
    history = []
    pooled = None
    step = 0
    for epoch in tqdm(range(1, train_config.epochs + 1), desc="[TRAIN]", disable=not show_progress):
        if pooled is None or not train_config.teacher_forcing:
            with nx.no_grad():
                pooled = [router_inputs(backbone, stack, ex.tokens, ex.labels if train_config.teacher_forcing else None)
                          for ex in dataset]
        order = rng.permutation(len(dataset))
        epoch_loss, lr = 0.0, 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start:start + train_config.batch_size]
            lr = lr_schedule(step, train_config, total)
            optimizer.zero_grad()
            batch_loss = 0.0
            for m in range(0, len(batch), train_config.micro_batch_size):
                micro = batch[m:m + train_config.micro_batch_size]
                loss = _batch_loss(stack, [pooled[i] for i in micro], [labels[i] for i in micro],
                                   alpha, gamma, loss_config.prob_floor)
                if not np.isfinite(loss.data):
                    raise TrainingError(step)
                nx.mul(loss, len(micro) / len(batch)).backward()
                batch_loss += float(loss.data) * len(micro)
            optimizer.step(lr)
            epoch_loss += batch_loss
            step += 1

        scores = label_f1(stack, backbone, monitor)
        metrics = EpochMetrics(epoch, epoch_loss / len(dataset), scores, lr)
        history.append(metrics)
        logger.debug(f"[TRAIN] epoch {epoch} loss {metrics.loss:.4f} macro-F1 {scores.macro:.3f} lr {lr:.2e}")

    stack.set_trainable(False)
    if history:
        last = history[-1].f1
        logger.info(f"[TRAIN] final F1 skip={last.skip:.3f} exec={last.execute:.3f} "
                    f"repeat={last.repeat:.3f} macro={last.macro:.3f}")
    return stack, history


# ============================================================================
# FILES
# ============================================================================

def write_training_log(history: Sequence[EpochMetrics], path) -> Path:
    """CSV per epoch: epoch,loss,skip_f1,exec_f1,repeat_f1,macro_f1,lr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAIN_LOG_COLUMNS)
        for m in history:
            writer.writerow([m.epoch, f"{m.loss:.6f}", f"{m.f1.skip:.4f}", f"{m.f1.execute:.4f}",
                             f"{m.f1.repeat:.4f}", f"{m.f1.macro:.4f}", f"{m.lr:.6e}"])
    return path


def read_training_log(path) -> List[Dict[str, float]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"training log not found: {path}")
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def write_heldout_ids(heldout: Sequence[SupervisionExample], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump([ex.id for ex in heldout], f, indent=2)
    return path
