#!/usr/bin/env python3
"""
Per-layer routers over windowed mean-pooled states, and routed inference.

Each router is a Linear-GELU-Linear classifier with three outputs ordered
(skip, execute, repeat). A layer's decision averages router logits over W
windows of the state entering that layer, takes the softmax and picks the
argmax; ties go to execute when it is among the maxima, otherwise to the
lowest tied index.

The control knob maps a scalar p in [-1, 1] onto the router probabilities:
p = -1 forces skip everywhere, p = -0.5 leaves the router untouched,
p = 0.5 forces execute and p = +1 forces repeat, with linear blends in
between.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

import numerics as nx
from backbone import Backbone, apply_action
from config import RouterConfig
from errors import FormatError, InputError
from paths import EXECUTE, REPEAT, SKIP

INPUT_PREVIOUS = "previous"
INPUT_FIRST = "first"
INPUT_MODES = (INPUT_PREVIOUS, INPUT_FIRST)

NUM_ACTIONS = 3
ROUTER_PARAMS = ("w_in", "b_in", "w_out", "b_out")     # block order in checkpoints


def window_pool(states: np.ndarray, windows: int) -> np.ndarray:
    """
    Mean-pool the leading tokens into contiguous windows.

    W is clamped to min(W, T); the first W * floor(T / W) rows are split into
    W equal windows and trailing rows are dropped.

    Example:
        >>> window_pool(np.array([[1, 1], [3, 3], [5, 5], [7, 7]], float), 2)
        array([[2., 2.],
               [5., 5.]])
    """
    states = np.asarray(states)
    if states.ndim != 2 or states.shape[0] == 0:
        raise InputError("window_pool needs a non-empty (T, d) state")
    if windows < 1:
        raise InputError("window count must be >= 1")
    n_windows = min(windows, states.shape[0])
    size = states.shape[0] // n_windows
    used = states[:n_windows * size]
    return used.reshape(n_windows, size, states.shape[1]).mean(axis=1)


def choose_action(probs: Sequence[float]) -> int:
    """Argmax with ties to execute, else to the lowest tied index."""
    probs = np.asarray(probs)
    top = probs.max()
    tied = [i for i in range(NUM_ACTIONS) if probs[i] == top]
    return EXECUTE if EXECUTE in tied else tied[0]


_ONE_HOT = np.eye(NUM_ACTIONS)


def control_interpolate(p_router: Sequence[float], p: float) -> np.ndarray:
    """
    Blend router probabilities toward skip, execute or repeat.

      p in [-1, -0.5]:  t = (p + 1) / 0.5    (1 - t) skip + t router
      p in (-0.5, 0.5]: t = p + 0.5          (1 - t) router + t execute
      p in (0.5, 1]:    t = (p - 0.5) / 0.5  (1 - t) execute + t repeat
    """
    p = float(p)
    if not -1.0 <= p <= 1.0:
        raise InputError(f"control parameter {p} outside [-1, 1]")
    router = np.asarray(p_router, dtype=np.float64)
    if p <= -0.5:
        t = (p + 1.0) / 0.5
        return (1.0 - t) * _ONE_HOT[SKIP] + t * router
    if p <= 0.5:
        t = (p + 0.5) / 1.0
        return (1.0 - t) * router + t * _ONE_HOT[EXECUTE]
    t = (p - 0.5) / 0.5
    return (1.0 - t) * _ONE_HOT[EXECUTE] + t * _ONE_HOT[REPEAT]


@dataclass
class Router:
    w_in: nx.Tensor
    b_in: nx.Tensor
    w_out: nx.Tensor
    b_out: nx.Tensor

    def logits(self, pooled: nx.Tensor) -> nx.Tensor:
        """Per-window logits, shape (W, 3)."""
        hidden = nx.gelu(nx.add(nx.matmul(pooled, self.w_in), self.b_in))
        return nx.add(nx.matmul(hidden, self.w_out), self.b_out)

    def parameters(self) -> Dict[str, nx.Tensor]:
        return {name: getattr(self, name) for name in ROUTER_PARAMS}


@dataclass(frozen=True)
class Decision:
    action: int
    probs: np.ndarray
    logits: np.ndarray


def route_layer(router: Router, pooled: np.ndarray, control: Optional[float] = None) -> Decision:
    """Average router logits over windows, softmax, then argmax with the tie rule."""
    pooled = np.asarray(pooled)
    if pooled.ndim != 2 or pooled.shape[0] == 0:
        raise InputError("route_layer needs at least one pooled vector")
    with nx.no_grad():
        z = nx.mean(router.logits(nx.Tensor(pooled, dtype=pooled.dtype)), axis=0)
        probs = nx.softmax(z).data
    if control is not None:
        probs = control_interpolate(probs, control)
    return Decision(choose_action(probs), probs, z.data)


class RouterStack:
    """One router per backbone layer plus the pooling configuration."""

    def __init__(self, routers: List[Router], windows: int = 8, input_mode: str = INPUT_PREVIOUS):
        if not routers:
            raise InputError("a router stack needs at least one router")
        if windows < 1:
            raise InputError("window count must be >= 1")
        if input_mode not in INPUT_MODES:
            raise InputError(f"unknown router input mode {input_mode!r}")
        self.routers = list(routers)
        self.windows = int(windows)
        self.input_mode = input_mode

    @property
    def num_layers(self) -> int:
        return len(self.routers)

    def route(self, layer: int, states: np.ndarray, control: Optional[float] = None) -> Decision:
        return route_layer(self.routers[layer - 1], window_pool(states, self.windows), control)

    def parameters(self) -> Dict[str, nx.Tensor]:
        params = {}
        for layer, router in enumerate(self.routers, start=1):
            for name, tensor in router.parameters().items():
                params[f"router.{layer}.{name}"] = tensor
        return params

    def set_trainable(self, trainable: bool):
        for t in self.parameters().values():
            t.requires_grad = trainable
            t.grad = None

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {
            "routing.windows": np.asarray([self.windows], dtype=np.float32),
            "routing.input_mode": np.asarray([INPUT_MODES.index(self.input_mode)], dtype=np.float32),
        }
        arrays.update({name: t.data for name, t in self.parameters().items()})
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "RouterStack":
        try:
            windows = int(arrays["routing.windows"][0])
            input_mode = INPUT_MODES[int(arrays["routing.input_mode"][0])]
        except (KeyError, IndexError) as exc:
            raise FormatError(f"router blocks incomplete: {exc}") from None
        layers = sorted({int(name.split(".")[1]) for name in arrays if name.startswith("router.")})
        if layers != list(range(1, len(layers) + 1)):
            raise FormatError(f"router layers are not contiguous: {layers}")
        routers = []
        for layer in layers:
            try:
                parts = [nx.Tensor(arrays[f"router.{layer}.{name}"]) for name in ROUTER_PARAMS]
            except KeyError as exc:
                raise FormatError(f"router {layer} is missing {exc}") from None
            routers.append(Router(*parts))
        return cls(routers, windows, input_mode)

    def copy(self) -> "RouterStack":
        return RouterStack.from_arrays({k: np.array(v) for k, v in self.to_arrays().items()})


def init_router_stack(num_layers: int, hidden_dim: int, config: RouterConfig, seed: int,
                      class_counts: Optional[Sequence[int]] = None) -> RouterStack:
    """
    Xavier-uniform weights, zero biases.

    With `config.frequency_bias_init` and class counts, each output bias is
    the log of the add-one smoothed class prior.
    """
    rng = np.random.default_rng(seed)
    b_out = np.zeros(NUM_ACTIONS)
    if config.frequency_bias_init and class_counts is not None:
        counts = np.asarray(class_counts, dtype=np.float64) + 1.0
        b_out = np.log(counts / counts.sum())
    routers = []
    for _ in range(num_layers):
        routers.append(Router(
            nx.Tensor(nx.xavier_uniform(hidden_dim, config.hidden, rng), requires_grad=True),
            nx.Tensor(np.zeros(config.hidden), requires_grad=True),
            nx.Tensor(nx.xavier_uniform(config.hidden, NUM_ACTIONS, rng), requires_grad=True),
            nx.Tensor(b_out, requires_grad=True),
        ))
    return RouterStack(routers, config.windows, config.input_mode)


def constant_router_stack(num_layers: int, hidden_dim: int, action: int, windows: int = 8,
                          input_mode: str = INPUT_PREVIOUS, margin: float = 10.0) -> RouterStack:
    """Routers that always choose `action` (all-skip / all-execute / all-repeat baselines)."""
    b_out = np.zeros(NUM_ACTIONS)
    b_out[action] = margin
    routers = [Router(nx.Tensor(np.zeros((hidden_dim, 1))), nx.Tensor(np.zeros(1)),
                      nx.Tensor(np.zeros((1, NUM_ACTIONS))), nx.Tensor(b_out))
               for _ in range(num_layers)]
    return RouterStack(routers, windows, input_mode)


@dataclass(frozen=True)
class RoutedOutput:
    logits: np.ndarray
    decisions: tuple
    executed_layers: int
    probabilities: np.ndarray


def routed_forward(backbone: Backbone, stack, tokens: Sequence[int],
                   control: Optional[float] = None) -> RoutedOutput:
    """
    Greedy routed inference.

    Router l reads window_pool of the state entering layer l (or of the
    embedding in first-layer mode); skip keeps the state, execute applies
    the layer once, repeat applies it twice. Decisions are not validated
    against the path rules.
    """
    if stack.num_layers != backbone.num_layers:
        raise InputError(f"stack has {stack.num_layers} routers for {backbone.num_layers} layers")
    backbone.check_tokens(tokens)
    states = backbone.embed(tokens)
    first = states
    actions, probs = [], []
    for layer in range(1, backbone.num_layers + 1):
        source = first if stack.input_mode == INPUT_FIRST else states
        decision = stack.route(layer, source, control)
        actions.append(decision.action)
        probs.append(decision.probs)
        states = apply_action(backbone, layer, states, decision.action)
    return RoutedOutput(backbone.head(states), tuple(actions), int(np.sum(actions)), np.stack(probs))
