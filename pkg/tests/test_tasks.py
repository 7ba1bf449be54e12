import pytest

from backbone import forward_default
from config import ALL_STRATA, TaskConfig
from errors import InputError
from evaluation import default_solve_rate
from search import exhaustive_search
from tasks import (RewardSpec, extract_boxed, extract_letter, gen_copy, gen_multichoice, gen_numeric,
                   generate_corpus, generate_stratum, grade, normalize_numeric, pretraining_corpus,
                   read_corpus, reward, write_corpus)
from vocabulary import LETTERS, MULTICHOICE, NUMERIC, decode_prompt


def test_generators_are_deterministic():
    assert gen_multichoice("A2", seed=5, count=10) == gen_multichoice("A2", seed=5, count=10)
    assert gen_numeric("D3", seed=5, count=10) == gen_numeric("D3", seed=5, count=10)
    assert gen_numeric("D3", seed=5, count=10) != gen_numeric("D3", seed=6, count=10)


def test_prefix_does_not_depend_on_count():
    assert gen_numeric("D4", seed=1, count=3) == gen_numeric("D4", seed=1, count=8)[:3]


def test_multichoice_instances_have_four_distinct_options():
    for inst in gen_multichoice("A1", seed=2, count=30):
        fields = decode_prompt(inst.tokens, 8)
        assert inst.kind == MULTICHOICE and inst.gold in LETTERS
        assert len(set(fields.options)) == 4
        assert fields.options[LETTERS.index(inst.gold)] == fields.target


def test_d1_is_solved_by_the_default_path(counter8):
    for inst in gen_numeric("D1", seed=0, count=30):
        assert grade(inst, forward_default(counter8, inst.tokens)[1]) == 1.0


def test_d5_deficits_are_solvable_with_repeats(counter6):
    instances = gen_numeric("D5", seed=4, count=40, roles="NFRFFF")
    hard = [inst for inst in instances if int(inst.gold) > 5]
    assert hard
    for inst in hard:
        _, shortest = exhaustive_search(inst, counter6)
        assert shortest is not None
        assert shortest <= 6 + 4


def test_unknown_strata_are_rejected():
    with pytest.raises(InputError):
        gen_multichoice("D1", seed=0, count=1)
    with pytest.raises(InputError):
        gen_numeric("A1", seed=0, count=1)


def test_generate_stratum_dispatches_on_family():
    assert generate_stratum("A2", 0, 2)[0].kind == MULTICHOICE
    assert generate_stratum("D2", 0, 2)[0].kind == NUMERIC


def test_corpus_sizes_follow_scale():
    config = TaskConfig(scale=0.01, eval_scale=0.005)
    corpus = generate_corpus(config, "NNFRRFFF", root_seed=7)
    assert list(corpus) == list(ALL_STRATA)
    assert len(corpus["D5"]) == 10 and len(corpus["A1"]) == 4
    held = generate_corpus(config, "NNFRRFFF", root_seed=7, evaluation=True)
    assert len(held["D5"]) == 5
    assert held["D5"][0].id != corpus["D5"][0].id


@pytest.mark.parametrize("text, expected", [
    ("Answer: B", "B"),
    ("answer is C.", "C"),
    ("(D)", "D"),
    ("cab", None),
    ("ABBA", None),
    ("", None),
])
def test_extract_letter(text, expected):
    assert extract_letter(text) == expected


def test_extract_boxed():
    assert extract_boxed("so \\boxed{42}.") == "42"
    assert extract_boxed("\\boxed{{1}+2}") == "{1}+2"
    assert extract_boxed("\\boxed{7") is None
    assert extract_boxed("no box") is None


def test_normalize_numeric():
    assert normalize_numeric(" 042 ") == "42"
    assert normalize_numeric("000") == "0"
    assert normalize_numeric("-07") == "-7"
    assert normalize_numeric("x1") == "x1"


def test_reward_cases():
    assert reward(RewardSpec(MULTICHOICE, "B"), "Answer: B") == 1.0
    assert reward(RewardSpec(MULTICHOICE, "B"), "Answer: C") == 0.0
    assert reward(RewardSpec(NUMERIC, "42"), "\\boxed{042}") == 1.0
    assert reward(RewardSpec(NUMERIC, "42"), "042") == 1.0
    assert reward(RewardSpec(NUMERIC, "42"), "\\boxed{41}") == 0.0
    assert reward(RewardSpec(NUMERIC, "42"), "?") == 0.0


def test_corpus_files_roundtrip(tmp_path):
    instances = gen_multichoice("A1", seed=1, count=3) + gen_numeric("D2", seed=1, count=3)
    path = write_corpus(instances, tmp_path / "corpus" / "mixed.jsonl")
    assert read_corpus(path) == instances


def test_malformed_corpus_is_an_input_error(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json}\n", encoding="utf-8")
    with pytest.raises(InputError):
        read_corpus(path)
    with pytest.raises(InputError):
        read_corpus(tmp_path / "absent.jsonl")


def test_copy_sequences():
    pairs = gen_copy(seed=0, count=5, length=3)
    assert len(pairs) == 5
    for tokens, targets in pairs:
        assert len(tokens) == len(targets) == 9
        assert tokens[2:5] == tokens[6:9]
        assert sum(t >= 0 for t in targets) == 3


def test_pretraining_corpus_scores_only_the_answer_slot():
    instances = gen_numeric("D1", seed=0, count=4)
    corpus = pretraining_corpus(instances, copy_count=2, copy_length=3, seed=1)
    assert len(corpus) == 6
    prompts = {inst.tokens for inst in instances}
    for tokens, targets in corpus:
        if tokens in prompts:
            assert all(t == -1 for t in targets[:-1]) and targets[-1] >= 0


@pytest.mark.parametrize("seed", range(5))
def test_a1_default_path_solve_rate_clears_the_floor(counter8, seed):
    rate = default_solve_rate(counter8, gen_multichoice("A1", seed=seed, count=1000))
    assert rate >= TaskConfig().min_default_solve_rate
