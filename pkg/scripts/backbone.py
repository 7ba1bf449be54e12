#!/usr/bin/env python3
"""
Frozen layered backbones that can run arbitrary execution paths.

Two implementations share the Backbone interface:

- CounterBackbone: an exact integer simulator whose layers are tagged
  necessary / redundant / refine, so the set of correct paths for any
  prompt is known in closed form.
- TinyTransformer: a pre-norm decoder-only transformer with learned
  absolute positions, built on the numerics module and pretrained on
  copy sequences plus task prompts.

States are plain (T, d) numpy arrays; every layer application returns a
new array, so backbones can be shared by concurrent readers.
"""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import numerics as nx
from config import CounterConfig, PretrainConfig, TransformerConfig
from errors import InputError, TrainingError
from logger import get_logger
from optim import AdamW, effective_warmup, lr_schedule
from paths import REPEAT, SKIP, default_path, require_valid
from vocabulary import (MULTICHOICE, UNKNOWN, VOCAB_SIZE, check_tokens,
                        decode_prompt, letter_token, LETTERS, number_token, PromptFields)

logger = get_logger(__name__)


class Backbone(ABC):
    """A stack of L state transforms between an embedding and an answer head."""

    num_layers: int
    hidden_dim: int
    vocab_size: int
    max_seq_len: int

    @abstractmethod
    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        """Initial states H(1), shape (T, d)."""

    @abstractmethod
    def apply_layer(self, layer: int, states: np.ndarray) -> np.ndarray:
        """Apply block `layer` (1-based) once."""

    @abstractmethod
    def head(self, states: np.ndarray) -> np.ndarray:
        """Answer logits over the vocabulary, read at the last position."""

    @abstractmethod
    def parameters(self) -> Dict[str, np.ndarray]:
        """Named arrays that fully determine the backbone."""

    def check_tokens(self, tokens: Sequence[int]):
        check_tokens(tokens, self.vocab_size)
        if len(tokens) > self.max_seq_len:
            raise InputError(f"sequence of {len(tokens)} tokens exceeds max length {self.max_seq_len}")

    def _check_layer(self, layer: int):
        if not 1 <= layer <= self.num_layers:
            raise InputError(f"layer {layer} outside [1, {self.num_layers}]")


# ============================================================================
# PATH EXECUTION
# ============================================================================

def apply_action(backbone: Backbone, layer: int, states: np.ndarray, action: int) -> np.ndarray:
    """Skip (0), execute (1) or repeat (2) one layer."""
    if action == SKIP:
        return states
    states = backbone.apply_layer(layer, states)
    if action == REPEAT:
        states = backbone.apply_layer(layer, states)
    return states


def run_path(backbone: Backbone, tokens: Sequence[int], path: Sequence[int]) -> Tuple[List[np.ndarray], np.ndarray]:
    """Execute layers in path order without validating the path."""
    backbone.check_tokens(tokens)
    states = backbone.embed(tokens)
    visited = [states]
    for layer in path:
        states = backbone.apply_layer(int(layer), states)
        visited.append(states)
    return visited, backbone.head(states)


def forward_default(backbone: Backbone, tokens: Sequence[int]) -> Tuple[List[np.ndarray], np.ndarray]:
    """States H(1)..H(L+1) of the default path and the answer logits."""
    return run_path(backbone, tokens, default_path(backbone.num_layers))


def forward_with_path(backbone: Backbone, tokens: Sequence[int], path: Sequence[int],
                      count_edges: bool = True) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Run a validated execution path.

    Returns:
        (visited states: embedding followed by the state after every applied
        step, answer logits)

    Raises:
        ConstraintError: the path breaks a path rule (the rule name is on .rule)
        InputError: tokens outside the vocabulary
    """
    path = require_valid(path, backbone.num_layers, count_edges)
    return run_path(backbone, tokens, path)


def answer_token(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


# ============================================================================
# COUNTER BACKBONE
# ============================================================================

NECESSARY = "N"     # must run exactly once or the head answers "?"
REDUNDANT = "R"     # adds the prompt flag; only ever harmful
REFINE = "F"        # +1 per application; repeats fix undercounts
ROLE_CODES = {NECESSARY: 0, REDUNDANT: 1, REFINE: 2}     # counter.roles block values
ROLE_NAMES = {NECESSARY: "necessary", REDUNDANT: "redundant", REFINE: "refine"}


def default_roles(num_layers: int) -> str:
    """
    Role layout for L layers: necessary layers first, one refine layer,
    a redundant block, then refine layers to the end.

    Example:
        >>> default_roles(8)
        'NNFRRFFF'
    """
    n_necessary = min(num_layers, max(1, num_layers // 4))
    n_redundant = 2 if num_layers >= 7 else (1 if num_layers >= 3 else 0)
    n_refine = num_layers - n_necessary - n_redundant
    head_refine = 1 if n_refine > 0 else 0
    return (NECESSARY * n_necessary + REFINE * head_refine + REDUNDANT * n_redundant
            + REFINE * (n_refine - head_refine))


@dataclass(frozen=True)
class CounterModelSpec:
    num_layers: int
    hidden_dim: int
    modulus: int
    roles: str
    distractor_scale: float = 1.0
    seed: int = 0
    max_seq_len: int = 64

    @classmethod
    def from_config(cls, config: CounterConfig, seed: int) -> "CounterModelSpec":
        roles = config.roles or default_roles(config.num_layers)
        return cls(config.num_layers, config.hidden_dim, config.modulus, roles,
                   config.distractor_scale, seed)

    @property
    def n_necessary(self) -> int:
        return self.roles.count(NECESSARY)

    @property
    def n_refine(self) -> int:
        return self.roles.count(REFINE)

    @property
    def base_count(self) -> int:
        """Counter value of the default path on a prompt with no flags set."""
        return self.n_necessary + self.n_refine

    def layers_with_role(self, role: str) -> Tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles, start=1) if r == role)


class CounterLayout:
    """Reserved coordinates of the counter model state."""

    COUNTER = 0         # running count read by the head
    TARGET = 1          # flags follow at 1 + layer

    def __init__(self, num_layers: int):
        self.num_layers = num_layers
        self.integrity = num_layers + 2
        self.kind = num_layers + 3
        self.options = slice(num_layers + 4, num_layers + 8)
        self.distractors = num_layers + 8

    def flag(self, layer: int) -> int:
        return 1 + layer


class CounterBackbone(Backbone):
    """
    Integer simulator of a layered model.

    One application of a necessary layer adds 1 to the counter and to the
    integrity coordinate, a refine layer adds 1 to the counter, and a
    redundant layer adds its per-prompt flag. The head answers only when
    every necessary layer ran exactly once.
    """

    def __init__(self, spec: CounterModelSpec, distractors: Optional[np.ndarray] = None):
        if len(spec.roles) != spec.num_layers:
            raise InputError("roles must name one role per layer")
        if spec.hidden_dim < spec.num_layers + 8:
            raise InputError("counter model needs hidden_dim >= num_layers + 8")
        self.spec = spec
        self.num_layers = spec.num_layers
        self.hidden_dim = spec.hidden_dim
        self.vocab_size = VOCAB_SIZE
        self.max_seq_len = spec.max_seq_len
        self.layout = CounterLayout(spec.num_layers)
        n_noise = spec.hidden_dim - self.layout.distractors
        if distractors is None:
            rng = np.random.default_rng(spec.seed)
            distractors = rng.normal(0.0, 1.0, size=(spec.max_seq_len, VOCAB_SIZE, n_noise)) * spec.distractor_scale
        self.distractors = np.asarray(distractors, dtype=np.float32)
        if self.distractors.shape != (spec.max_seq_len, VOCAB_SIZE, n_noise):
            raise InputError(f"distractor table has shape {self.distractors.shape}")

    def embed(self, tokens):
        self.check_tokens(tokens)
        fields = decode_prompt(tokens, self.num_layers)
        lay = self.layout
        dtype = nx.get_default_dtype()
        states = np.zeros((len(tokens), self.hidden_dim), dtype=dtype)
        states[:, lay.TARGET] = fields.target
        for layer, flag in enumerate(fields.flags, start=1):
            states[:, lay.flag(layer)] = flag
        states[:, lay.kind] = 1.0 if fields.kind == MULTICHOICE else 0.0
        if fields.options:
            states[:, lay.options] = np.asarray(fields.options, dtype=dtype)
        positions = np.arange(len(tokens))
        states[:, lay.distractors:] = self.distractors[positions, np.asarray(tokens, dtype=np.int64)]
        return states

    def apply_layer(self, layer, states):
        self._check_layer(layer)
        out = states.copy()
        role = self.spec.roles[layer - 1]
        lay = self.layout
        if role == NECESSARY:
            out[:, lay.COUNTER] += 1
            out[:, lay.integrity] += 1
        elif role == REFINE:
            out[:, lay.COUNTER] += 1
        else:
            out[:, lay.COUNTER] += states[:, lay.flag(layer)]
        return out

    def head(self, states):
        last = states[-1]
        lay = self.layout
        token = self._decode(int(round(float(last[lay.COUNTER]))),
                             int(round(float(last[lay.integrity]))),
                             last[lay.kind] > 0.5,
                             [int(round(float(v))) for v in last[lay.options]])
        logits = np.zeros(self.vocab_size, dtype=states.dtype)
        logits[token] = 1.0
        return logits

    def _decode(self, count, integrity, multichoice, options):
        if integrity != self.spec.n_necessary:
            return UNKNOWN
        if multichoice:
            for letter, value in zip(LETTERS, options):
                if value == count:
                    return letter_token(letter)
            return UNKNOWN
        return number_token(count % self.spec.modulus)

    def closed_form_answer(self, fields: PromptFields, path: Sequence[int]) -> int:
        """Answer token of a path computed from role counts alone."""
        count = integrity = 0
        for layer in path:
            role = self.spec.roles[layer - 1]
            if role == NECESSARY:
                count += 1
                integrity += 1
            elif role == REFINE:
                count += 1
            else:
                count += fields.flags[layer - 1]
        return self._decode(count, integrity, fields.kind == MULTICHOICE, list(fields.options))

    def parameters(self):
        return {
            "counter.roles": np.asarray([ROLE_CODES[r] for r in self.spec.roles], dtype=np.float32),
            "counter.modulus": np.asarray([self.spec.modulus], dtype=np.float32),
            "counter.distractors": self.distractors,
        }


def build_counter_backbone(config: CounterConfig, seed: int) -> CounterBackbone:
    return CounterBackbone(CounterModelSpec.from_config(config, seed))


# ============================================================================
# TINY TRANSFORMER
# ============================================================================

def causal_mask(lengths: Sequence[int]) -> np.ndarray:
    """Block-diagonal causal mask for sequences stacked along the row axis."""
    total = int(np.sum(lengths))
    mask = np.zeros((total, total), dtype=bool)
    start = 0
    for n in lengths:
        mask[start:start + n, start:start + n] = np.tril(np.ones((n, n), dtype=bool))
        start += n
    return mask


class TinyTransformer(Backbone):
    """Pre-norm residual decoder: B_l(H) = H + Attn(LN(H)) + MLP(LN(.))."""

    def __init__(self, config: TransformerConfig, seed: int = 0, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.num_layers = config.num_layers
        self.hidden_dim = config.hidden_dim
        self.vocab_size = config.vocab_size
        self.max_seq_len = config.max_seq_len
        self.heads = config.heads
        self.ffn_dim = config.ffn_dim
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {name: nx.Tensor(value) for name, value in params.items()}

    def _init_params(self, rng):
        c = self.config
        d, f, s = c.hidden_dim, c.ffn_dim, c.init_scale
        params = {
            "embed.token": rng.normal(0.0, s, (c.vocab_size, d)),
            "embed.position": rng.normal(0.0, s, (c.max_seq_len, d)),
        }
        for i in range(c.num_layers):
            p = f"block.{i + 1}."
            params[p + "ln1.gamma"] = np.ones(d)
            params[p + "ln1.beta"] = np.zeros(d)
            params[p + "attn.qkv"] = rng.normal(0.0, s, (d, 3 * d))
            params[p + "attn.qkv_bias"] = np.zeros(3 * d)
            params[p + "attn.out"] = rng.normal(0.0, s / math.sqrt(2 * c.num_layers), (d, d))
            params[p + "attn.out_bias"] = np.zeros(d)
            params[p + "ln2.gamma"] = np.ones(d)
            params[p + "ln2.beta"] = np.zeros(d)
            params[p + "mlp.in"] = rng.normal(0.0, s, (d, f))
            params[p + "mlp.in_bias"] = np.zeros(f)
            params[p + "mlp.out"] = rng.normal(0.0, s / math.sqrt(2 * c.num_layers), (f, d))
            params[p + "mlp.out_bias"] = np.zeros(d)
        params["final.gamma"] = np.ones(d)
        params["final.beta"] = np.zeros(d)
        params["head.weight"] = rng.normal(0.0, s, (d, c.vocab_size))
        return params

    def parameters(self):
        return {name: t.data for name, t in self.params.items()}

    def zero_blocks(self) -> "TinyTransformer":
        """Zero every block-internal weight so each block is the identity."""
        for name, t in self.params.items():
            if name.startswith("block."):
                t.data = np.zeros_like(t.data)
        return self

    def set_trainable(self, trainable: bool):
        for t in self.params.values():
            t.requires_grad = trainable
            t.grad = None

    # -- graph pieces -------------------------------------------------------

    def _embed_tensor(self, sequences: Sequence[Sequence[int]]) -> nx.Tensor:
        ids = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
        positions = np.concatenate([np.arange(len(s)) for s in sequences])
        return nx.add(nx.take_rows(self.params["embed.token"], ids),
                      nx.take_rows(self.params["embed.position"], positions))

    def _block(self, layer: int, x: nx.Tensor, mask: np.ndarray) -> nx.Tensor:
        p = self.params
        pre = f"block.{layer}."
        d, dh = self.hidden_dim, self.hidden_dim // self.heads

        h = nx.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        qkv = nx.add(nx.matmul(h, p[pre + "attn.qkv"]), p[pre + "attn.qkv_bias"])
        outputs = []
        for k in range(self.heads):
            q = nx.columns(qkv, k * dh, (k + 1) * dh)
            key = nx.columns(qkv, d + k * dh, d + (k + 1) * dh)
            value = nx.columns(qkv, 2 * d + k * dh, 2 * d + (k + 1) * dh)
            scores = nx.mul(nx.matmul(q, nx.transpose(key)), 1.0 / math.sqrt(dh))
            outputs.append(nx.matmul(nx.softmax(scores, axis=-1, mask=mask), value))
        attended = nx.concat(outputs, axis=1) if self.heads > 1 else outputs[0]
        x = nx.add(x, nx.add(nx.matmul(attended, p[pre + "attn.out"]), p[pre + "attn.out_bias"]))

        h = nx.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        inner = nx.gelu(nx.add(nx.matmul(h, p[pre + "mlp.in"]), p[pre + "mlp.in_bias"]))
        return nx.add(x, nx.add(nx.matmul(inner, p[pre + "mlp.out"]), p[pre + "mlp.out_bias"]))

    def _logits(self, x: nx.Tensor) -> nx.Tensor:
        h = nx.layer_norm(x, self.params["final.gamma"], self.params["final.beta"])
        return nx.matmul(h, self.params["head.weight"])

    def sequence_logits(self, sequences: Sequence[Sequence[int]]) -> nx.Tensor:
        """Next-token logits for every position of every sequence, rows stacked."""
        for s in sequences:
            self.check_tokens(s)
        lengths = [len(s) for s in sequences]
        mask = causal_mask(lengths)
        x = self._embed_tensor(sequences)
        for layer in range(1, self.num_layers + 1):
            x = self._block(layer, x, mask)
        return self._logits(x)

    def token_loss(self, sequences: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> nx.Tensor:
        """Mean cross-entropy over positions whose target is >= 0."""
        logits = self.sequence_logits(sequences)
        flat = np.concatenate([np.asarray(t, dtype=np.int64) for t in targets])
        rows = np.flatnonzero(flat >= 0)
        if rows.size == 0:
            raise InputError("no scored positions in batch")
        scored = nx.take_rows(logits, rows) if rows.size != flat.size else logits
        return nx.cross_entropy(scored, flat[rows])

    # -- Backbone interface -------------------------------------------------

    def embed(self, tokens):
        self.check_tokens(tokens)
        with nx.no_grad():
            return self._embed_tensor([tokens]).data

    def apply_layer(self, layer, states):
        self._check_layer(layer)
        with nx.no_grad():
            mask = causal_mask([states.shape[0]])
            return self._block(layer, nx.Tensor(states, dtype=states.dtype), mask).data

    def head(self, states):
        with nx.no_grad():
            last = nx.Tensor(states[-1:], dtype=states.dtype)
            return self._logits(last).data[0]


# ============================================================================
# PRETRAINING
# ============================================================================

def _split(count, heldout_fraction, rng):
    order = rng.permutation(count)
    n_heldout = max(1, int(round(count * heldout_fraction)))
    return order[n_heldout:], order[:n_heldout]


def evaluate_token_model(model: TinyTransformer, corpus, indices, chunk: int = 32) -> Tuple[float, float]:
    """Mean cross-entropy and token accuracy over scored positions."""
    total_loss, total_correct, total_count = 0.0, 0, 0
    with nx.no_grad():
        for start in range(0, len(indices), chunk):
            batch = [corpus[i] for i in indices[start:start + chunk]]
            logits = model.sequence_logits([b[0] for b in batch]).data
            flat = np.concatenate([np.asarray(b[1], dtype=np.int64) for b in batch])
            rows = np.flatnonzero(flat >= 0)
            if rows.size == 0:
                continue
            z = logits[rows].astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            total_loss += float(-logp[np.arange(rows.size), flat[rows]].sum())
            total_correct += int((z.argmax(axis=1) == flat[rows]).sum())
            total_count += rows.size
    if total_count == 0:
        raise InputError("held-out split has no scored positions")
    return total_loss / total_count, total_correct / total_count


def pretrain_backbone(corpus: Sequence[Tuple[Sequence[int], Sequence[int]]],
                      model_config: TransformerConfig, train_config: PretrainConfig,
                      seed: int, show_progress: bool = False,
                      model: Optional[TinyTransformer] = None) -> Tuple[TinyTransformer, Dict[str, float]]:
    """
    Train a TinyTransformer on (tokens, next-token targets) pairs.

    Targets of -1 are not scored. A held-out split is carved from the corpus
    with the same seed; its loss and accuracy are returned as metrics. The
    returned model is frozen. Passing `model` continues training that
    instance instead of a fresh one.

    Raises:
        TrainingError: non-finite loss (the step index is on .step)
    """
    if not corpus:
        raise InputError("pretraining corpus is empty")
    rng = np.random.default_rng(seed)
    init_seed = int(rng.integers(2 ** 31))
    if model is None:
        model = TinyTransformer(model_config, seed=init_seed)
    train_idx, heldout_idx = _split(len(corpus), train_config.heldout_fraction, rng)
    if len(train_idx) == 0:
        raise InputError("pretraining corpus too small for a held-out split")

    model.set_trainable(True)
    optimizer = AdamW(model.params, weight_decay=train_config.weight_decay)
    total = train_config.steps
    warmup = effective_warmup(train_config.warmup_steps, total)
    batch_size = min(train_config.batch_size, len(train_idx))

    order = rng.permutation(train_idx)
    cursor = 0
    for step in tqdm(range(total), desc="[PRETRAIN]", disable=not show_progress):
        if cursor + batch_size > len(order):
            order = rng.permutation(train_idx)
            cursor = 0
        batch = [corpus[i] for i in order[cursor:cursor + batch_size]]
        cursor += batch_size

        optimizer.zero_grad()
        loss = model.token_loss([b[0] for b in batch], [b[1] for b in batch])
        if not np.isfinite(loss.data):
            raise TrainingError(step)
        loss.backward()
        optimizer.step(lr_schedule(step, train_config.lr_max, warmup, total))
        if step % 200 == 0:
            logger.debug(f"[PRETRAIN] step {step} loss {float(loss.data):.4f}")

    model.set_trainable(False)
    heldout_loss, heldout_accuracy = evaluate_token_model(model, corpus, heldout_idx)
    if not math.isfinite(heldout_loss):
        raise TrainingError(total, "held-out loss is not finite")
    logger.info(f"[PRETRAIN] held-out loss {heldout_loss:.4f}, token accuracy {heldout_accuracy:.3f}")
    return model, {"heldout_loss": heldout_loss, "heldout_accuracy": heldout_accuracy, "steps": total}
