#!/usr/bin/env python3
"""
layerpath command-line pipeline.

Subcommands, in pipeline order:

    tasks     generate the training and evaluation corpora (or one stratum)
    pretrain  build the counter backbone or pretrain the tiny transformer
    search    run the length-aware tree search and write the supervision set
    train     train the router stack on the supervision set
    eval      routed accuracy / executed layers (--ood: cross-family check)
    analyze   usage heatmap, depth groups, label distribution, ablations
    sweep     control-parameter sweep
    all       every step above, in order

Every subcommand reads and writes artifacts inside one run directory
(--out, default runs/desk) and echoes the merged configuration into it.
Logs go to logs/, never into the run directory.

Exit codes: 0 ok, 2 config or usage error, 3 input error, 4 training failure.

USAGE:
    python scripts/pipeline.py all --config configs/desk.yaml --seed 7
    python scripts/pipeline.py tasks gen --stratum D3 --seed 7 --count 600 --out d3.jsonl
    python scripts/pipeline.py eval --ood --workers 4
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

import ablations
import evaluation
from backbone import build_counter_backbone, default_roles, pretrain_backbone
from checkpoint import load_checkpoint, load_router_stack, save_checkpoint
from config import (ALL_STRATA, ANALYSIS_DIR, BACKBONE_FILE, DATASET_FILE, HELDOUT_FILE,
                    OOD_REPORT_FILE, REPORT_FILE, ROUTERS_FILE, STATS_FILE, SWEEP_DIR,
                    TRAIN_LOG_FILE, corpus_path, derive_seed, load_config, resolve_out_dir,
                    write_effective_config)
from errors import ConfigError, InputError, LayerpathError, TrainingError
from logger import get_logger, init_script_logging
from routing import init_router_stack
from search import generate_dataset, read_dataset, write_dataset, write_stats
from supervision import (class_counts, read_training_log, split_dataset, train_routers,
                         write_heldout_ids, write_training_log)
from tasks import generate_corpus, generate_stratum, pretraining_corpus, read_corpus, write_corpus
from visualization_framework import create_chart

SUBCOMMANDS = ("tasks", "pretrain", "search", "train", "eval", "analyze", "sweep", "all")
ANCHOR_STRATUM = "A1"        # easy stratum the default path must already solve

logger = get_logger(__name__)


# ============================================================================
# HELPERS
# ============================================================================

def _show_progress():
    return sys.stdout.isatty()


def _file_target(args):
    """--out naming a .jsonl file instead of a run directory."""
    out = getattr(args, 'out', None)
    if out and Path(out).suffix == '.jsonl':
        return Path(out).absolute()
    return None


def task_roles(config):
    """Layer roles the task generators encode flags for."""
    if config.backbone.kind == "counter":
        return config.counter.roles or default_roles(config.counter.num_layers)
    return default_roles(config.transformer.num_layers)


def train_settings(config):
    """Router training config with its seed split from the root seed."""
    return dataclasses.replace(config.train, seed=derive_seed(config.seed, "supervision", config.train.seed))


def check_default_solve_rate(config, backbone, corpus):
    """
    Gate search on the backbone answering the easy stratum without edits.

    Raises:
        TrainingError: the A1 solve rate of the default path is below
            tasks.min_default_solve_rate
    """
    anchors = [inst for inst in corpus if inst.stratum == ANCHOR_STRATUM]
    if not anchors:
        return
    rate = evaluation.default_solve_rate(backbone, anchors, config.workers)
    logger.info(f"[SEARCH] {ANCHOR_STRATUM} default-path solve rate {rate:.3f} over {len(anchors)} instances")
    if rate < config.tasks.min_default_solve_rate:
        raise TrainingError(None, f"{ANCHOR_STRATUM} default-path solve rate {rate:.3f} is below "
                                  f"tasks.min_default_solve_rate={config.tasks.min_default_solve_rate}")


def load_corpus(out_dir, evaluation=False, strata=None):
    """Concatenated corpus files of a run directory, in stratum order."""
    instances = []
    for stratum in strata or ALL_STRATA:
        path = corpus_path(out_dir, stratum, evaluation)
        if path.exists():
            instances.extend(read_corpus(path))
        elif strata:
            raise InputError(f"corpus file not found: {path}")
    if not instances:
        which = "evaluation" if evaluation else "training"
        raise InputError(f"no {which} corpus under {out_dir}; run the tasks subcommand first")
    return instances


def load_routed(out_dir):
    """Backbone and trained router stack from the routers checkpoint."""
    path = out_dir / ROUTERS_FILE
    backbone = load_checkpoint(path)
    stack = load_router_stack(path)
    if stack is None:
        raise InputError(f"{path} holds no router stack; run the train subcommand first")
    return backbone, stack


def parse_p_grid(text):
    try:
        return [float(p) for p in text.split(',') if p.strip()]
    except ValueError:
        raise ConfigError(f"--p-grid must be comma-separated numbers, got {text!r}") from None


def _write_json(data, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def run_tasks(config, out_dir, args):
    roles = task_roles(config)
    stratum = getattr(args, 'stratum', None)
    count = getattr(args, 'count', None)
    if count is not None and stratum is None:
        raise ConfigError("--count needs --stratum")

    if stratum:
        if stratum not in ALL_STRATA:
            raise ConfigError(f"unknown stratum {stratum!r}; choose from {', '.join(ALL_STRATA)}")
        count = config.tasks.count_for(stratum) if count is None else count
        if count < 1:
            raise ConfigError("--count must be >= 1")
        instances = generate_stratum(stratum, derive_seed(config.seed, "tasks", stratum), count, roles)
        target = _file_target(args) or corpus_path(out_dir, stratum)
        write_corpus(instances, target)
        logger.info(f"[TASKS] {stratum}: {len(instances)} instances -> {target}")
        return

    for is_eval in (False, True):
        corpus = generate_corpus(config.tasks, roles, config.seed, evaluation=is_eval)
        for name, instances in corpus.items():
            write_corpus(instances, corpus_path(out_dir, name, is_eval))
        total = sum(len(v) for v in corpus.values())
        logger.info(f"[TASKS] {'evaluation' if is_eval else 'training'} corpus: {total} instances "
                    f"over {len(corpus)} strata")


def run_pretrain(config, out_dir, args):
    target = out_dir / BACKBONE_FILE
    if config.backbone.kind == "counter":
        backbone = build_counter_backbone(config.counter, derive_seed(config.seed, "backbone"))
        save_checkpoint(backbone, target)
        logger.info(f"[PRETRAIN] counter backbone L={backbone.num_layers} roles={backbone.spec.roles} -> {target}")
        return

    settings = config.pretrain
    seed = derive_seed(config.seed, "pretrain")
    instances = load_corpus(out_dir)
    copy_count = int(round(settings.corpus_size * settings.copy_fraction))
    task_count = min(len(instances), settings.corpus_size - copy_count)
    order = np.random.default_rng(seed).permutation(len(instances))
    selected = [instances[i] for i in order[:task_count]]
    corpus = pretraining_corpus(selected, copy_count, settings.copy_length, seed)
    logger.info(f"[PRETRAIN] {task_count} task prompts + {copy_count} copy sequences, {settings.steps} steps")

    backbone, metrics = pretrain_backbone(corpus, config.transformer, settings, seed,
                                          show_progress=_show_progress())
    if metrics["heldout_loss"] > settings.max_heldout_loss:
        raise TrainingError(settings.steps, f"held-out loss {metrics['heldout_loss']:.4f} is above "
                                            f"pretrain.max_heldout_loss={settings.max_heldout_loss}")
    save_checkpoint(backbone, target)
    logger.info(f"[OK] transformer backbone -> {target}")


def run_search(config, out_dir, args):
    backbone = load_checkpoint(out_dir / BACKBONE_FILE)
    stratum = getattr(args, 'stratum', None)
    corpus = load_corpus(out_dir, strata=[stratum] if stratum else None)
    check_default_solve_rate(config, backbone, corpus)
    logger.info(f"[SEARCH] {len(corpus)} instances, {config.search.simulations} simulations each")

    examples, rows = generate_dataset(corpus, backbone, config.search,
                                      seed=derive_seed(config.seed, "search", config.search.seed),
                                      workers=config.workers, show_progress=_show_progress())
    target = _file_target(args)
    dataset_path = target or out_dir / DATASET_FILE
    stats_path = target.with_name(f"{target.stem}_stats.csv") if target else out_dir / STATS_FILE
    write_dataset(examples, dataset_path)
    write_stats(rows, stats_path)
    for row in rows:
        logger.info(f"[SEARCH] {row.stratum}: {row.sampled}/{row.original} kept, "
                    f"{row.layers_saved:.2f} layers saved")
    logger.info(f"[OK] dataset -> {dataset_path}")


def run_train(config, out_dir, args):
    backbone = load_checkpoint(out_dir / BACKBONE_FILE)
    dataset = read_dataset(out_dir / DATASET_FILE)
    if not dataset:
        raise InputError("supervision dataset is empty; the search kept no examples")
    settings = train_settings(config)
    train, heldout = split_dataset(dataset, settings.heldout_fraction,
                                   derive_seed(config.seed, "supervision", "split"))
    write_heldout_ids(heldout, out_dir / HELDOUT_FILE)

    counts = class_counts(train)
    logger.info(f"[TRAIN] {len(train)} train / {len(heldout)} held-out, labels "
                f"skip={counts.n_skip} exec={counts.n_execute} repeat={counts.n_repeat}")
    stack = init_router_stack(backbone.num_layers, backbone.hidden_dim, config.routing,
                              derive_seed(config.seed, "routing"), counts.as_tuple())
    stack, history = train_routers(train, backbone, stack, config.loss, settings, heldout or None,
                                   show_progress=_show_progress())
    save_checkpoint(backbone, out_dir / ROUTERS_FILE, stack)
    write_training_log(history, out_dir / TRAIN_LOG_FILE)
    logger.info(f"[OK] routers -> {out_dir / ROUTERS_FILE}")


def _heldout_split(config, out_dir):
    dataset = read_dataset(out_dir / DATASET_FILE)
    return dataset, split_dataset(dataset, config.train.heldout_fraction,
                                  derive_seed(config.seed, "supervision", "split"))


def run_eval(config, out_dir, args):
    backbone, stack = load_routed(out_dir)
    corpus = load_corpus(out_dir, evaluation=True)
    report = evaluation.evaluate(backbone, stack, corpus, workers=config.workers)

    extra = {}
    dataset_path = out_dir / DATASET_FILE
    if dataset_path.exists():
        _, (_, heldout) = _heldout_split(config, out_dir)
        if heldout:
            labels = {ex.id: ex.labels for ex in heldout}
            train_instances = {inst.id: inst for inst in load_corpus(out_dir)}
            instances = [train_instances[i] for i in labels if i in train_instances]
            if instances:
                heldout_report = evaluation.evaluate(backbone, stack, instances, oracle_labels=labels,
                                                     workers=config.workers)
                extra["heldout"] = heldout_report.to_dict()
    evaluation.write_report(report, out_dir / REPORT_FILE, extra)
    logger.info(f"[OK] report -> {out_dir / REPORT_FILE}")

    if getattr(args, 'ood', False):
        dataset = read_dataset(dataset_path)
        result = ablations.ood_evaluate(dataset, backbone, corpus, config.routing, config.loss,
                                        train_settings(config), config.eval.ood_train_family,
                                        seed=derive_seed(config.seed, "routing", "ood"),
                                        workers=config.workers)
        _write_json(result.to_dict(), out_dir / OOD_REPORT_FILE)
        logger.info(f"[OK] cross-family report -> {out_dir / OOD_REPORT_FILE}")


def run_analyze(config, out_dir, args):
    backbone, stack = load_routed(out_dir)
    analysis = out_dir / ANALYSIS_DIR
    write_effective_config(config, analysis)
    corpus = load_corpus(out_dir, evaluation=True)

    records = evaluation.route_corpus(backbone, stack, corpus, workers=config.workers)
    decisions = evaluation.decisions_by_stratum(records)
    usage = evaluation.usage_heatmap(decisions)
    usage.write_csv(analysis / "usage_heatmap.csv")
    create_chart('usage_heatmap').generate(usage, analysis / "usage_heatmap.svg")

    if backbone.num_layers >= 3:
        groups = {s: evaluation.depth_group_stats(d) for s, d in decisions.items()}
        evaluation.write_depth_groups(groups, analysis / "depth_groups.json")
        create_chart('depth_groups').generate(groups, analysis / "depth_groups.svg")
    else:
        logger.warning(f"[WARN] depth groups need L >= 3, skipping for L={backbone.num_layers}")

    dataset, (train, heldout) = _heldout_split(config, out_dir)
    if dataset:
        distribution = evaluation.label_distribution(dataset)
        evaluation.write_label_distribution(distribution, analysis / "label_distribution.csv")
        create_chart('label_distribution').generate(distribution, analysis / "label_distribution.svg")

    log_path = out_dir / TRAIN_LOG_FILE
    if log_path.exists():
        rows = read_training_log(log_path)
        if rows:
            create_chart('training_curves').generate(rows, analysis / "training_curves.svg")

    if not heldout:
        logger.warning("[WARN] no held-out split, skipping ablations")
        return
    settings = train_settings(config)
    seed = derive_seed(config.seed, "routing", "ablation")
    shared = dict(router_config=config.routing, loss_config=config.loss, train_config=settings, seed=seed)
    if config.eval.ablation_windows:
        results = ablations.window_ablation(train, heldout, backbone, config.eval.ablation_windows, **shared)
        ablations.write_ablation(results, "windows", analysis / "ablation_windows.csv")
    results = ablations.loss_ablation(train, heldout, backbone, **shared)
    ablations.write_ablation(results, "loss", analysis / "ablation_loss.csv")
    results = ablations.input_mode_ablation(train, heldout, backbone, **shared)
    ablations.write_ablation(results, "input_mode", analysis / "ablation_input.csv")
    logger.info(f"[OK] analysis -> {analysis}")


def run_sweep(config, out_dir, args):
    backbone, stack = load_routed(out_dir)
    sweep_dir = out_dir / SWEEP_DIR
    write_effective_config(config, sweep_dir)
    corpus = load_corpus(out_dir, evaluation=True)
    rows = evaluation.control_sweep(backbone, stack, corpus, config.eval.p_grid, workers=config.workers)
    evaluation.write_control_rows(rows, sweep_dir / "control.csv", sweep_dir / "histogram.csv")
    create_chart('control_curve').generate(rows, sweep_dir / "control.svg")
    logger.info(f"[OK] sweep over {len(rows)} control values -> {sweep_dir}")


def run_all(config, out_dir, args):
    for step in (run_tasks, run_pretrain, run_search, run_train, run_eval, run_analyze, run_sweep):
        step(config, out_dir, args)


RUNNERS = {
    "tasks": run_tasks,
    "pretrain": run_pretrain,
    "search": run_search,
    "train": run_train,
    "eval": run_eval,
    "analyze": run_analyze,
    "sweep": run_sweep,
    "all": run_all,
}


# ============================================================================
# ENTRY POINT
# ============================================================================

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML config file (default: built-in defaults)')
    common.add_argument('--seed', type=int, help='Root seed, overrides the config file')
    common.add_argument('--workers', type=int, help='Worker threads for search and evaluation')
    common.add_argument('--out', help='Run directory (tasks/search also accept a .jsonl file)')
    common.add_argument('--verbose', '-v', action='store_true', help='Show DEBUG output on the console')

    parser = argparse.ArgumentParser(prog='layerpath', description='Supervised dynamic layer routing pipeline')
    sub = parser.add_subparsers(dest='command', required=True)

    tasks = sub.add_parser('tasks', parents=[common], help='Generate task corpora')
    tasks.add_argument('action', nargs='?', choices=['gen'], default='gen', help=argparse.SUPPRESS)
    tasks.add_argument('--stratum', help='Generate a single stratum')
    tasks.add_argument('--count', type=int, help='Instance count for --stratum')

    sub.add_parser('pretrain', parents=[common], help='Build or pretrain the backbone')
    search = sub.add_parser('search', parents=[common], help='Generate the supervision dataset')
    search.add_argument('--stratum', help='Search a single stratum')
    sub.add_parser('train', parents=[common], help='Train the router stack')
    ev = sub.add_parser('eval', parents=[common], help='Evaluate routed inference')
    ev.add_argument('--ood', action='store_true', help='Also train on one stratum family and test on the other')
    sub.add_parser('analyze', parents=[common], help='Routing-pattern analyses and ablations')
    sweep = sub.add_parser('sweep', parents=[common], help='Control-parameter sweep')
    sweep.add_argument('--p-grid', help='Comma-separated control values in [-1, 1]')
    full = sub.add_parser('all', parents=[common], help='Run the whole pipeline')
    full.add_argument('--ood', action='store_true', help='Include the cross-family check')
    full.add_argument('--p-grid', help='Comma-separated control values in [-1, 1]')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    init_script_logging(args.command, verbose=args.verbose)

    try:
        out_override = None if _file_target(args) else args.out
        config = load_config(args.config, {"seed": args.seed, "workers": args.workers, "out": out_override})
        if getattr(args, 'p_grid', None):
            config = dataclasses.replace(
                config, eval=dataclasses.replace(config.eval, p_grid=parse_p_grid(args.p_grid)))
        out_dir = resolve_out_dir(config)
        target = _file_target(args)
        write_effective_config(config, target.parent if target else out_dir)

        logger.info(f"[{args.command.upper()}] seed={config.seed} workers={config.workers} out={out_dir}")
        RUNNERS[args.command](config, out_dir, args)
        return 0
    except LayerpathError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        logger.error(f"[ERROR] numeric failure: {type(exc).__name__}: {exc}")
        return TrainingError.exit_code
    except (OSError, UnicodeError) as exc:
        logger.error(f"[ERROR] cannot read or write an artifact: {type(exc).__name__}: {exc}")
        return InputError.exit_code


if __name__ == '__main__':
    sys.exit(main())
