"""Command-line entry point: ``mcmd <command> [--config ...] [--seed ...] ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("mcmd")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fold_arg(value: str):
    if value == "all":
        return None
    try:
        i = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'all', got {value!r}")
    if i < 0:
        raise argparse.ArgumentTypeError("fold index must be >= 0")
    return [i]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", help="YAML experiment config, or a preset name (default, desk, tiny)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--run-dir", help="run directory (default runs/<config name>)")
    g.add_argument("--fold", type=_fold_arg, default="all", help="fold index or 'all' (default)")
    g.add_argument("--deterministic", action="store_true", help="force deterministic kernels and one thread")
    g.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mcmd", description="Multi-channel to single-channel sleep staging via distillation.")
    p.add_argument("--version", action="version", version=f"mcmd {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", parents=[common], help="generate synthetic source and target corpora")
    s.add_argument("--out", help="data root (overrides data.root)")
    s = sub.add_parser("prepare", parents=[common], help="build time-frequency caches from corpora")
    s.add_argument("--domain", choices=["source", "target", "both"], default="both")
    sub.add_parser("pretrain", parents=[common], help="train M0 on the source domain")
    s = sub.add_parser("distill", parents=[common], help="joint teacher/student training on the target domain")
    s.add_argument("--init", help="M0 parameter file (overrides config 'pretrained')")
    s.add_argument("--checkpoint-every", type=int, default=None, metavar="STEPS")
    s.add_argument("--resume", action="store_true", help="continue folds from fold_<i>/state.ckpt")
    s = sub.add_parser("evaluate", parents=[common], help="score saved fold models on a split")
    s.add_argument("--split", choices=["test", "valid"], default="test")
    s.add_argument("--role", choices=["student", "teacher"], default="student")
    s = sub.add_parser("ablate", parents=[common], help="run a row grid of transfer ablations")
    s.add_argument("--grid", help="grid name (overrides ablation.grid)")
    s.add_argument("--seeds", help="comma-separated seeds (overrides ablation.seeds)")
    return p


def _run_dir(args, cfg: ExperimentConfig) -> str:
    return args.run_dir or os.path.join("runs", cfg.name)


def _load_cache(cfg: ExperimentConfig, domain: str):
    from .dataset import load_cache

    path = cfg.data.cache(domain)
    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise FileNotFoundError(f"no {domain} cache at {path}; run 'mcmd prepare' first")
    return load_cache(path, cfg.stft)


def _with_folds(train_cfg, folds):
    from dataclasses import replace

    return train_cfg if folds is None else replace(train_cfg, folds=folds)


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    from .corpus import write_corpus
    from .signal_io import synth_generate

    if args.out:
        cfg.data.root = args.out
    source, target = synth_generate(cfg.synth, cfg.seed)
    for ds, which in ((source, "source"), (target, "target")):
        h = write_corpus(ds, cfg.data.dir(which))
        print(f"{which} {h} ({len(ds.recordings)} recordings) -> {cfg.data.dir(which)}")
    return EXIT_OK


def cmd_prepare(args, cfg: ExperimentConfig) -> int:
    from .corpus import read_corpus
    from .dataset import build_dataset, dataset_hash, save_cache

    domains = ["source", "target"] if args.domain == "both" else [args.domain]
    for domain in domains:
        d = cfg.data.dir(domain)
        if args.domain == "both" and not os.path.isdir(d):
            log.warning("skipping %s: %s does not exist", domain, d)
            continue
        recs, hyps, groups = read_corpus(d, cfg.data.hypnogram_drop)
        layouts = cfg.data.source_layouts if domain == "source" else cfg.data.target_layouts
        ds = build_dataset(domain, recs, hyps, layouts, cfg.stft, cfg.data.channel_map or None,
                           cfg.data.trim_minutes, groups)
        save_cache(ds, cfg.data.cache(domain))
        print(f"{domain} {dataset_hash(ds)} ({len(ds.subjects)} subjects, {ds.n_epochs()} epochs) "
              f"-> {cfg.data.cache(domain)}")
    return EXIT_OK


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    from .model import save_params
    from .training import pretrain_source

    ds = _load_cache(cfg, "source")
    out = os.path.join(_run_dir(args, cfg), "pretrain")
    os.makedirs(out, exist_ok=True)
    cfg.dump(os.path.join(out, "config.yaml"))
    res = pretrain_source(ds, _with_folds(cfg.pretrain, args.fold), view="source", run_dir=out)
    h = save_params(res.model, os.path.join(out, "m0.params"))
    for rec in res.records:
        with open(os.path.join(out, f"fold_{rec.fold_index}", "record.json"), "w") as f:
            json.dump({"config_hash": cfg.hash(), **rec.to_dict()}, f, indent=1, sort_keys=True)
    best = next(r for r in res.records if r.fold_index == res.best_fold)
    print(f"M0 from fold {res.best_fold} (validation ACC {best.best_valid_acc():.4f}) -> "
          f"{os.path.join(out, 'm0.params')} [{h[:16]}]")
    return EXIT_OK


def cmd_distill(args, cfg: ExperimentConfig) -> int:
    from .model import load_params, save_params
    from .report import FoldMetrics, emit_report
    from .training import FoldTrainer, resume

    ds = _load_cache(cfg, "target")
    run = _run_dir(args, cfg)
    os.makedirs(run, exist_ok=True)
    cfg.dump(os.path.join(run, "config.yaml"))
    init = args.init or cfg.pretrained
    m0 = load_params(init, cfg.train.dims) if init else None
    if m0 is None:
        log.warning("no pretrained M0 given: teacher and student start from random initialisation")
    tc = _with_folds(cfg.train, args.fold)
    folds = tc.make_folds(ds.subject_ids)
    wanted = tc.folds if tc.folds is not None else [f.fold_index for f in folds]
    by_idx = {f.fold_index: f for f in folds}
    bad = [i for i in wanted if i not in by_idx]
    if bad:
        raise UsageError(f"fold {bad[0]} out of range (0..{len(folds) - 1})")

    results = []
    for i in wanted:
        d = os.path.join(run, f"fold_{i}")
        os.makedirs(d, exist_ok=True)
        ckpt, steps_log = os.path.join(d, "state.ckpt"), os.path.join(d, "steps.jsonl")
        if args.resume and os.path.exists(ckpt):
            trainer = resume(ckpt, ds, tc, m0, log_path=steps_log)
        else:
            if os.path.exists(steps_log):
                os.remove(steps_log)
            trainer = FoldTrainer(ds, by_idx[i], tc, m0, "distill", log_path=steps_log)
        while not trainer.finished:
            trainer.run(stop_at_step=trainer.step + args.checkpoint_every if args.checkpoint_every else None)
            if args.checkpoint_every:
                trainer.checkpoint(ckpt)
        test = trainer.evaluate_test()
        for role in trainer.models:
            save_params(trainer.best_model(role), os.path.join(d, f"{role}.params"))
        rec = trainer.record
        rec.best_checkpoint = os.path.join(d, "student.params")
        with open(os.path.join(d, "record.json"), "w") as f:
            json.dump({"config_hash": cfg.hash(), **rec.to_dict()}, f, indent=1, sort_keys=True)
        cfg.dump(os.path.join(d, "config.yaml"))
        m = test.get("student")
        if m is None:
            log.warning("fold %d has no test data", i)
            continue
        results.append(FoldMetrics(i, m["acc"], m["mf1"], m["kappa"], np.asarray(m["confusion"]),
                                   tuple(rec.test_subjects)))
        print(f"fold {i}: student ACC {m['acc']:.4f} MF1 {m['mf1']:.4f} kappa {m['kappa']:.4f} "
              f"(teacher ACC {test['teacher']['acc']:.4f})")
    if results:
        emit_report(results, run)
        print(f"results -> {os.path.join(run, 'results.csv')}")
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    from .evaluation import evaluate_model
    from .model import load_params
    from .training import build_fold_sets

    ds = _load_cache(cfg, "target")
    run = _run_dir(args, cfg)
    folds = {f.fold_index: f for f in cfg.train.make_folds(ds.subject_ids)}
    wanted = args.fold if args.fold is not None else sorted(
        i for i in folds if os.path.exists(os.path.join(run, f"fold_{i}", f"{args.role}.params")))
    if not wanted:
        raise FileNotFoundError(f"no trained folds under {run}")
    view = args.role  # the teacher/student views are named after the roles
    for i in wanted:
        if i not in folds:
            raise UsageError(f"fold {i} out of range (0..{len(folds) - 1})")
        path = os.path.join(run, f"fold_{i}", f"{args.role}.params")
        if not os.path.exists(path):
            raise FileNotFoundError(f"no {args.role} parameters at {path}")
        model = load_params(path, cfg.train.dims)
        sets = build_fold_sets(ds, folds[i], cfg.train, [view])
        seqset = sets.test if args.split == "test" else sets.valid
        if seqset is None:
            raise ValueError(f"fold {i} has no {args.split} data")
        rep = evaluate_model(model, seqset, view, cfg.train.batch_size * 2)
        print(f"fold {i} {args.split} {args.role}: ACC {rep.accuracy!r} MF1 {rep.macro_f1!r} kappa {rep.kappa!r} "
              f"(n={rep.n_epochs_scored})")
    return EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    from .ablation import GRIDS, emit_grid_report, format_grid, run_ablation

    grid = args.grid or cfg.ablation["grid"]
    if grid not in GRIDS:
        raise UsageError(f"unknown grid {grid!r}; choose from {', '.join(GRIDS)}")
    seeds = [int(x) for x in args.seeds.split(",")] if args.seeds else list(cfg.ablation["seeds"])
    target = _load_cache(cfg, "target")
    try:
        source = _load_cache(cfg, "source")
    except FileNotFoundError:
        source = None
        log.warning("no source cache: rows with pre-training will fail")
    tc, pc = _with_folds(cfg.train, args.fold), _with_folds(cfg.pretrain, args.fold)
    g = run_ablation(grid, source, target, tc, seeds, pretrain_cfg=pc)
    out = os.path.join(_run_dir(args, cfg), "ablation")
    emit_grid_report(g, out)
    cfg.dump(os.path.join(out, "config.yaml"))
    print(format_grid(g), end="")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}
NEEDS_CONFIG = {"distill", "evaluate", "ablate"}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in NEEDS_CONFIG and not args.config:
        parser.print_usage(sys.stderr)
        print(f"mcmd {args.command}: error: --config is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config or "default", args.seed)
    except ConfigError as exc:
        print(f"mcmd: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.deterministic or cfg.train.deterministic:
        from .training import set_deterministic

        set_deterministic(True)
    try:
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"mcmd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report and exit 2
        log.debug("failure", exc_info=True)
        print(f"mcmd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
