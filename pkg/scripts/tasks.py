#!/usr/bin/env python3
"""
Synthetic stratified task corpora and answer grading.

Strata:
    A1, A2   four-option multiple choice: pick the option equal to the target
    D1..D5   numeric: answer the target count

Every prompt encodes a target count g = (#necessary + #refine layers) + deficit
and one flag per layer. On the counter backbone a flagged redundant layer
overcounts by one, and a deficit needs that many extra refine applications,
so each stratum's difficulty is set by its deficit and flag profile:

    stratum  P(deficit = 0)  deficit otherwise   P(flag) per redundant layer
    A1       1.0             -                   0.05
    A2       0.8             1                   0.15
    Dk       1 - 0.1 (k-1)   uniform 1..k-1      0

Generators are pure functions of (stratum, seed, index).
"""

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from backbone import REDUNDANT, REFINE, default_roles
from config import ALL_STRATA, MULTICHOICE_STRATA, NUMERIC_STRATA, TaskConfig, derive_seed
from errors import InputError
from vocabulary import (LETTERS, MULTICHOICE, NUM_NUMBERS, NUMERIC, answer_text, encode_copy,
                        encode_prompt, letter_token, number_token)

# ============================================================================
# STRATUM PROFILES
# ============================================================================


@dataclass(frozen=True)
class StratumProfile:
    kind: str
    zero_deficit_prob: float
    max_deficit: int
    flag_prob: float


STRATUM_PROFILES = {
    "A1": StratumProfile(MULTICHOICE, 1.0, 0, 0.02),    # ~96% flag-free at L=8
    "A2": StratumProfile(MULTICHOICE, 0.8, 1, 0.15),
    **{f"D{k}": StratumProfile(NUMERIC, round(1.0 - 0.1 * (k - 1), 2), k - 1, 0.0) for k in range(1, 6)},
}

OPTION_SPREAD = 4       # distractor options lie within +-4 of the target


@dataclass(frozen=True)
class RewardSpec:
    kind: str
    gold: str


@dataclass(frozen=True)
class TaskInstance:
    id: str
    stratum: str
    tokens: Tuple[int, ...]
    gold: str
    kind: str
    seed: int

    @property
    def reward_spec(self) -> RewardSpec:
        return RewardSpec(self.kind, self.gold)

    @property
    def family(self) -> str:
        return self.stratum[0]


def _instance_rng(stratum: str, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), ALL_STRATA.index(stratum), int(index)])


def _draw_layout(profile: StratumProfile, roles: str, rng: np.random.Generator):
    if rng.random() < profile.zero_deficit_prob:
        deficit = 0
    else:
        deficit = int(rng.integers(1, profile.max_deficit + 1))
    deficit = min(deficit, roles.count(REFINE))
    flags = [int(rng.random() < profile.flag_prob) if role == REDUNDANT else 0 for role in roles]
    target = roles.count("N") + roles.count(REFINE) + deficit
    if target >= NUM_NUMBERS:
        raise InputError(f"target {target} does not fit the number vocabulary")
    return flags, target


def _instance_id(stratum: str, seed: int, index: int) -> str:
    return f"{stratum}-{seed % 100000:05d}-{index:05d}"


def gen_multichoice(stratum: str, seed: int, count: int, roles: Optional[str] = None) -> List[TaskInstance]:
    """
    Four-option prompts whose correct option holds the target count.

    Distractor options are drawn from values within OPTION_SPREAD of the
    target, so an off-by-one count usually lands on a wrong letter.
    """
    if stratum not in MULTICHOICE_STRATA:
        raise InputError(f"gen_multichoice needs one of {MULTICHOICE_STRATA}, got {stratum!r}")
    roles = roles or default_roles(8)
    profile = STRATUM_PROFILES[stratum]
    instances = []
    for index in range(count):
        rng = _instance_rng(stratum, seed, index)
        flags, target = _draw_layout(profile, roles, rng)
        candidates = [v for v in range(max(0, target - OPTION_SPREAD), min(NUM_NUMBERS, target + OPTION_SPREAD + 1))
                      if v != target]
        options = [int(v) for v in rng.choice(candidates, size=3, replace=False)] + [target]
        options = [options[i] for i in rng.permutation(4)]
        gold = LETTERS[options.index(target)]
        tokens = encode_prompt(MULTICHOICE, flags, target, options)
        instances.append(TaskInstance(_instance_id(stratum, seed, index), stratum, tokens, gold, MULTICHOICE, int(seed)))
    return instances


def gen_numeric(stratum: str, seed: int, count: int, roles: Optional[str] = None) -> List[TaskInstance]:
    """Numeric prompts asking for the target count; harder strata carry larger deficits."""
    if stratum not in NUMERIC_STRATA:
        raise InputError(f"gen_numeric needs one of {NUMERIC_STRATA}, got {stratum!r}")
    roles = roles or default_roles(8)
    profile = STRATUM_PROFILES[stratum]
    instances = []
    for index in range(count):
        rng = _instance_rng(stratum, seed, index)
        flags, target = _draw_layout(profile, roles, rng)
        tokens = encode_prompt(NUMERIC, flags, target)
        instances.append(TaskInstance(_instance_id(stratum, seed, index), stratum, tokens, str(target), NUMERIC, int(seed)))
    return instances


def generate_stratum(stratum: str, seed: int, count: int, roles: Optional[str] = None) -> List[TaskInstance]:
    if stratum in MULTICHOICE_STRATA:
        return gen_multichoice(stratum, seed, count, roles)
    return gen_numeric(stratum, seed, count, roles)


def generate_corpus(config: TaskConfig, roles: str, root_seed: int, evaluation: bool = False) -> Dict[str, List[TaskInstance]]:
    """All configured strata, seeded per stratum from the root seed."""
    purpose = "eval" if evaluation else "tasks"
    corpus = {}
    for stratum in ALL_STRATA:
        count = config.count_for(stratum, evaluation)
        if count:
            corpus[stratum] = generate_stratum(stratum, derive_seed(root_seed, purpose, stratum), count, roles)
    return corpus


def gen_copy(seed: int, count: int, length: int) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    """Copy-task sequences with next-token targets for backbone pretraining."""
    rng = np.random.default_rng([int(seed), len(ALL_STRATA)])
    return [encode_copy(rng.integers(0, NUM_NUMBERS, size=length).tolist()) for _ in range(count)]


def gold_token(instance: TaskInstance) -> int:
    if instance.kind == MULTICHOICE:
        return letter_token(instance.gold)
    return number_token(int(instance.gold))


def pretraining_corpus(instances: Sequence[TaskInstance], copy_count: int, copy_length: int,
                       seed: int) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    """Task prompts scored only at the answer slot, mixed with copy sequences."""
    examples = []
    for inst in instances:
        targets = [-1] * len(inst.tokens)
        targets[-1] = gold_token(inst)
        examples.append((inst.tokens, tuple(targets)))
    examples.extend(gen_copy(seed, copy_count, copy_length))
    order = np.random.default_rng(seed).permutation(len(examples))
    return [examples[i] for i in order]


# ============================================================================
# ANSWER EXTRACTION AND REWARD
# ============================================================================

_LETTER_RE = re.compile(r"(?<![A-Za-z0-9_])(?:Answer:\s*)?([A-D])(?![A-Za-z0-9_])")
_INTEGER_RE = re.compile(r"([+-]?)0*(\d+)")


def extract_letter(text: str) -> Optional[str]:
    """
    First standalone A-D, optionally written as "Answer: X".

    Example:
        >>> extract_letter("Answer: B")
        'B'
        >>> extract_letter("cab") is None
        True
    """
    match = _LETTER_RE.search(text or "")
    return match.group(1) if match else None


def extract_boxed(text: str) -> Optional[str]:
    """Contents of the first boxed{...} group; None if absent or unbalanced."""
    text = text or ""
    start = text.find("boxed{")
    if start < 0:
        return None
    depth = 1
    begin = start + len("boxed{")
    for i in range(begin, len(text)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                return text[begin:i]
    return None


def normalize_numeric(text: str) -> str:
    """Strip whitespace and leading zeros of an integer string."""
    text = text.strip()
    match = _INTEGER_RE.fullmatch(text)
    if not match:
        return text
    sign, digits = match.groups()
    if digits == "0":
        return "0"
    return ("-" if sign == "-" else "") + digits


def reward(spec: RewardSpec, predicted_text: str) -> float:
    """Binary reward: 1.0 for a correct answer, 0.0 otherwise."""
    if spec.kind == MULTICHOICE:
        return 1.0 if extract_letter(predicted_text) == spec.gold else 0.0
    boxed = extract_boxed(predicted_text)
    candidate = boxed if boxed is not None else (predicted_text or "")
    return 1.0 if normalize_numeric(candidate) == normalize_numeric(spec.gold) else 0.0


def grade(instance: TaskInstance, logits: np.ndarray) -> float:
    """Reward of the greedy answer token decoded from answer logits."""
    return reward(instance.reward_spec, answer_text(int(np.argmax(logits))))


# ============================================================================
# FILES
# ============================================================================

def write_corpus(instances: Sequence[TaskInstance], path) -> Path:
    """JSON-lines corpus: {id, stratum, tokens, gold, kind, seed} per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for inst in instances:
            record = asdict(inst)
            record["tokens"] = list(inst.tokens)
            f.write(json.dumps(record) + "\n")
    return path


def read_corpus(path) -> List[TaskInstance]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"corpus file not found: {path}")
    instances = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                instances.append(TaskInstance(record["id"], record["stratum"], tuple(record["tokens"]),
                                              str(record["gold"]), record["kind"], int(record.get("seed", 0))))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{line_no}: malformed corpus record ({exc})") from None
    return instances
