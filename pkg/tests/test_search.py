import math

import numpy as np
import pytest

from backbone import build_counter_backbone, forward_default, forward_with_path
from config import CounterConfig, SearchConfig
from errors import InputError
from paths import validate_path
from search import (REPEAT_LAYER, SKIP_LAYER, EditAction, exhaustive_search, generate_dataset,
                    legal_actions, mcts_search, read_dataset, ucb_score, write_dataset, write_stats)
from tasks import TaskInstance, gen_multichoice, gen_numeric, grade
from vocabulary import NUMERIC, encode_prompt


def numeric_instance(flags, target, name="probe"):
    return TaskInstance(name, "D1", encode_prompt(NUMERIC, flags, target), str(target), NUMERIC, 0)


def test_legal_actions_on_default_path():
    actions = legal_actions((1, 2, 3, 4), 4)
    assert len(actions) == 8
    assert all(validate_path(a.apply((1, 2, 3, 4)), 4) is None for a in actions)
    assert actions[0] == EditAction(REPEAT_LAYER, 4)
    assert actions[4] == EditAction(SKIP_LAYER, 4)


def test_no_actions_on_fully_repeated_path():
    assert legal_actions((1, 1, 2, 2), 2) == []


def test_actions_that_open_a_long_gap_are_excluded():
    skips = {a.layer for a in legal_actions((1, 4, 5), 5) if a.kind == SKIP_LAYER}
    assert 1 not in skips and 4 not in skips
    assert 5 in skips


def test_edit_actions_apply():
    assert EditAction(SKIP_LAYER, 2).apply((1, 2, 3)) == (1, 3)
    assert EditAction(REPEAT_LAYER, 2).apply((1, 2, 3)) == (1, 2, 2, 3)


def test_ucb_score_values():
    assert ucb_score(1, 1, 1, 6, 6, 1.8, 3.0) == pytest.approx(-2.0)
    assert round(ucb_score(2, 4, 16, 24, 32, 1.8, 3.0), 3) == -0.251
    assert ucb_score(0, 0, 5, 3, 3, 1.8, 3.0) == math.inf
    assert ucb_score(3, 4, 10, 8, 8, 1.8, 0.0) == pytest.approx(0.75 + 1.8 * math.sqrt(math.log(10) / 4))


def test_search_shortens_a_correct_default_path(counter6):
    instance = numeric_instance([0] * 6, 5)
    best, stats = mcts_search(instance, counter6, config=SearchConfig(simulations=50))
    assert stats.reward_default == 1.0
    assert best is not None and len(best) < 6
    assert grade(instance, forward_with_path(counter6, instance.tokens, best)[1]) == 1.0


def test_search_repairs_an_undercount_and_stops(counter6):
    instance = numeric_instance([0] * 6, 6)
    best, stats = mcts_search(instance, counter6, config=SearchConfig(simulations=50))
    assert stats.reward_default == 0.0
    assert best == (1, 2, 3, 4, 5, 6, 6)
    assert stats.simulations == 1
    assert stats.visited == 2 and stats.inferences == 2


def test_search_on_unsolvable_instance_returns_none(counter6):
    instance = numeric_instance([0] * 6, 30)
    best, stats = mcts_search(instance, counter6, config=SearchConfig(simulations=40))
    assert best is None
    assert stats.visited <= 41
    assert stats.reward_best == 0.0


def test_search_is_seeded(counter8):
    instance = gen_numeric("D5", seed=11, count=3)[2]
    config = SearchConfig(simulations=60, random_child_prob=0.5)
    a = mcts_search(instance, counter8, config=config)
    b = mcts_search(instance, counter8, config=config)
    assert a == b


def test_exhaustive_single_refine_layer():
    backbone = build_counter_backbone(CounterConfig(num_layers=3, hidden_dim=11, roles="NNF"), seed=0)
    instance = numeric_instance([0, 0, 0], 4)
    correct, shortest = exhaustive_search(instance, backbone)
    assert shortest == 4
    assert [p for p in correct if len(p) == shortest] == [(1, 2, 3, 3)]


def test_exhaustive_limit(counter8):
    with pytest.raises(InputError):
        exhaustive_search(gen_numeric("D1", seed=0, count=1)[0], counter8)


def _harness_instances():
    roles = "NFRFFF"
    instances = []
    for stratum in ("A1", "A2"):
        instances += gen_multichoice(stratum, seed=101, count=20, roles=roles)
    for stratum in ("D1", "D2", "D3"):
        instances += gen_numeric(stratum, seed=101, count=20, roles=roles)
    return instances


def test_search_agrees_with_exhaustive_oracle(counter6):
    config = SearchConfig(simulations=200)
    exists = found = 0
    for instance in _harness_instances():
        _, shortest = exhaustive_search(instance, counter6)
        default_correct = grade(instance, forward_default(counter6, instance.tokens)[1]) == 1.0
        has_target = shortest is not None and (shortest < 6 or not default_correct)
        best, _ = mcts_search(instance, counter6, config=config)
        if best is not None:
            assert grade(instance, forward_with_path(counter6, instance.tokens, best)[1]) == 1.0
            assert shortest <= len(best) <= shortest + 1
        if has_target:
            exists += 1
            found += best is not None
    assert exists >= 50
    assert found >= 0.95 * exists


def test_generate_dataset_retention_and_stats(counter8, tmp_path):
    corpus = gen_multichoice("A1", seed=3, count=6) + gen_numeric("D4", seed=3, count=6)
    examples, rows = generate_dataset(corpus, counter8, SearchConfig(simulations=30), seed=5)
    assert examples
    assert all(ex.reward_best >= ex.reward_default for ex in examples)
    assert all(validate_path(ex.path, 8, count_edges=True) is None for ex in examples)
    assert [r.stratum for r in rows] == ["A1", "D4"]
    assert sum(r.original for r in rows) == 12
    assert sum(r.sampled for r in rows) == len(examples)
    assert np.mean([8 - ex.path_len for ex in examples]) > 0

    stats_path = write_stats(rows, tmp_path / "stats.csv")
    header = stats_path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "stratum,original,sampled,visited,inferences,layers_saved"

    write_dataset(examples, tmp_path / "dataset.jsonl")
    assert read_dataset(tmp_path / "dataset.jsonl") == examples


def test_generate_dataset_is_independent_of_workers(counter8, tmp_path):
    corpus = gen_numeric("D5", seed=8, count=8)
    config = SearchConfig(simulations=25)
    one, _ = generate_dataset(corpus, counter8, config, seed=1, workers=1)
    many, _ = generate_dataset(corpus, counter8, config, seed=1, workers=3)
    a = write_dataset(one, tmp_path / "one.jsonl").read_bytes()
    b = write_dataset(many, tmp_path / "many.jsonl").read_bytes()
    assert a == b


def test_read_dataset_rejects_bad_records(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "x"}\n', encoding="utf-8")
    with pytest.raises(InputError):
        read_dataset(path)
    with pytest.raises(InputError):
        read_dataset(tmp_path / "missing.jsonl")
