import pytest

from ablations import input_mode_ablation, loss_ablation, ood_evaluate, window_ablation, write_ablation
from config import LossConfig, RouterConfig, TrainConfig
from errors import InputError
from evaluation import F1Scores
from supervision import split_dataset
from tasks import gen_multichoice, gen_numeric
from test_supervision import oracle_dataset

QUICK = TrainConfig(epochs=2, batch_size=8, micro_batch_size=8, lr_max=1e-2, warmup_steps=0)
ROUTER = RouterConfig(hidden=8)


@pytest.fixture
def split():
    return split_dataset(oracle_dataset(6), 0.2, seed=0)


def test_window_ablation_rows(counter8, split, tmp_path):
    train, heldout = split
    results = window_ablation(train, heldout, counter8, [1, 4], ROUTER, LossConfig(), QUICK, seed=0)
    assert list(results) == [1, 4]
    assert all(isinstance(v, F1Scores) for v in results.values())
    lines = write_ablation(results, "windows", tmp_path / "w.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "windows,skip_f1,exec_f1,repeat_f1,macro_f1"
    assert lines[1].startswith("1,")


def test_loss_and_input_ablations_cover_every_mode(counter8, split):
    train, heldout = split
    assert list(loss_ablation(train, heldout, counter8, ROUTER, LossConfig(), QUICK, 0)) == \
        ["focal", "weighted-ce", "plain-ce"]
    assert list(input_mode_ablation(train, heldout, counter8, ROUTER, LossConfig(), QUICK, 0)) == \
        ["previous", "first"]


def test_ablation_needs_heldout(counter8, split):
    train, _ = split
    with pytest.raises(InputError):
        window_ablation(train, [], counter8, [1], ROUTER, LossConfig(), QUICK, seed=0)


def test_ood_evaluation_reports_both_families(counter8):
    corpus = gen_multichoice("A1", seed=9, count=4) + gen_numeric("D2", seed=9, count=4)
    result = ood_evaluate(oracle_dataset(4), counter8, corpus, ROUTER, LossConfig(), QUICK, "D")
    assert (result.train_family, result.eval_family) == ("D", "A")
    assert result.in_domain.count == 4 and result.out_of_domain.count == 4
    assert result.to_dict()["delta"] == pytest.approx(result.delta)
    with pytest.raises(InputError):
        ood_evaluate(oracle_dataset(2), counter8, corpus, ROUTER, LossConfig(), QUICK, "A")


@pytest.mark.slow
def test_more_windows_do_not_hurt(counter8):
    train, heldout = split_dataset(oracle_dataset(120), 0.1, seed=1)
    settings = TrainConfig(epochs=25, lr_max=3e-3, warmup_steps=50)
    results = window_ablation(train, heldout, counter8, [1, 8], RouterConfig(hidden=32), LossConfig(),
                              settings, seed=1)
    assert results[8].macro >= results[1].macro
