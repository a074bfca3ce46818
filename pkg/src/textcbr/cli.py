"""argparse front end: gen, pretrain, train, eval, report, selfcheck."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench
from .agent import Agent
from .config import Config, load_config
from .memory import SnapshotError
from .trainer import TrainingAborted, collect_instances, pretrain_retriever, template_separation
from .world import GenerationError, save_catalog, write_manifest

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, variant: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int, help="single seed (default: the config's seed list)")
    p.add_argument("--difficulty", choices=("easy", "medium", "hard"))
    p.add_argument("--out", type=Path, default=Path("runs"))
    if variant:
        p.add_argument("--variant", default="text+cbr", help="random, text, graph, with optional +cbr; or cbr-only")
        p.add_argument("--backend", choices=("vq", "none", "rp", "srp", "lsh"), default="vq")
        p.add_argument("--retain", choices=("lastk", "rewarded", "td"), default="lastk")
        p.add_argument("--context", choices=("gat", "entity"), default="gat")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="textcbr", description="Case-based reasoning agents on synthetic text games.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write the entity catalog and game manifests")
    _common(p, variant=False)

    p = sub.add_parser("pretrain", help="contrastive retriever pretraining")
    _common(p)
    p.add_argument("--episodes", type=int, default=40, help="random-agent episodes to harvest")

    p = sub.add_parser("train", help="train one variant over the seeds")
    _common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--retriever", type=Path, help="pretrained retriever parameters")

    p = sub.add_parser("eval", help="evaluate a trained run directory")
    _common(p)
    p.add_argument("--run", type=Path, required=True, help="directory written by train")
    p.add_argument("--split", choices=("in", "ood"), default="in")
    p.add_argument("--retain-at-test", action="store_true")

    p = sub.add_parser("report", help="summarize run directories")
    p.add_argument("runs", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--audit", action="store_true", help="recompute every number from raw CSVs")

    p = sub.add_parser("selfcheck", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    return ap


def resolve_config(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    changes = {}
    if getattr(args, "difficulty", None):
        changes["difficulty"] = args.difficulty
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "episodes", None) is not None and args.command == "train":
        changes["episodes"] = args.episodes
    return cfg.replace(**changes)


def resolve_spec(args, cfg: Config) -> bench.RunSpec:
    try:
        variant, cbr = bench.parse_variant(args.variant)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return bench.RunSpec(variant, cbr, args.backend, args.retain, args.context,
                         difficulty=cfg.difficulty, seeds=cfg.seeds)


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    save_catalog(bench.build_catalog(cfg), args.out / "catalog.json")
    write_manifest(bench.train_games(cfg), args.out / f"train_{cfg.difficulty}.tsv")
    for split in ("in", "ood"):
        write_manifest(bench.test_games(cfg, split), args.out / f"test_{split}_{cfg.difficulty}.tsv")
    print(f"wrote catalog and manifests to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    spec = resolve_spec(args, cfg)
    if not spec.cbr:
        raise UsageError("pretraining needs a CBR variant")
    cfg = spec.config(cfg)
    catalog = bench.build_catalog(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        instances = collect_instances(catalog, bench.train_games(cfg), args.episodes, seed, cfg.max_steps)
        order = np.random.default_rng(seed).permutation(len(instances))
        cut = int(round(0.8 * len(instances)))
        fit, held = [instances[i] for i in order[:cut]], [instances[i] for i in order[cut:]]
        agent = Agent(cfg, catalog, seed)
        losses = pretrain_retriever(agent.retriever, fit, cfg, seed=seed)
        same, cross = template_separation(agent.retriever, held)
        path = args.out / f"retriever_seed{seed}.params"
        agent.retriever.params.save(path)
        print(f"seed {seed}: loss {losses[0]:.4f} -> {losses[-1]:.4f}; held-out same {same:.3f} "
              f"cross {cross:.3f} margin {same - cross:.3f}; saved {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    spec = resolve_spec(args, cfg)
    cfg_run = spec.config(cfg)
    run_dir = args.out / f"{spec.name}_{spec.difficulty}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(f"# run {spec.name}\n" + cfg_run.to_text(), encoding="utf-8")
    catalog = bench.build_catalog(cfg_run)
    games = bench.train_games(cfg_run)
    for seed in cfg_run.seeds:
        agent = Agent(cfg_run, catalog, seed)
        if args.retriever is not None:
            if agent.retriever is None:
                raise UsageError("--retriever given for a variant without CBR")
            agent.retriever.params.load(args.retriever)
            agent.retriever.invalidate()
        rows = bench.train(agent, games, catalog, cfg_run, run_dir / f"train_seed{seed}.csv")
        bench.save_agent(agent, run_dir, seed)
        tail = rows[-10:]
        print(f"seed {seed}: {len(rows)} episodes, trailing-10 norm score "
              f"{np.mean([r.norm_score for r in tail]):.3f}, memory {rows[-1].mem_entries}")
    print(f"run directory {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = args.run
    if not (run_dir / "config.txt").exists():
        raise UsageError(f"{run_dir} has no config.txt; is it a train output directory?")
    cfg = load_config(run_dir / "config.txt")
    if args.seed is not None:
        cfg = cfg.replace(seeds=(args.seed,))
    catalog = bench.build_catalog(cfg)
    games = bench.test_games(cfg, args.split)
    per_seed = []
    for seed in cfg.seeds:
        agent = bench.load_agent(cfg, catalog, run_dir, seed)
        results = bench.evaluate(agent, games, catalog, args.retain_at_test)
        (run_dir / f"eval_{args.split}_seed{seed}.csv").write_text(bench.results_to_csv(results), encoding="utf-8")
        per_seed.append(results)
    row = bench.summarize(run_dir.name.rsplit("_", 1)[0], args.split, cfg.difficulty, per_seed)
    marker = " (1 seed)" if row.single_seed else ""
    print(f"{row.variant} {row.split} {row.difficulty}: steps {row.steps_mean:.2f} ± {row.steps_std:.2f}, "
          f"norm {row.norm_mean:.3f} ± {row.norm_std:.3f}{marker}, reuse {row.reuse_frac:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    files = bench.report(args.runs, args.out)
    out = args.out or args.runs / "report"
    print(f"wrote {len(files)} files to {out}")
    if args.audit:
        issues = bench.audit_report(args.runs, files)
        for issue in issues:
            print(f"audit: {issue}")
        if issues:
            return EXIT_CHECK
        print("audit: every summary number matches the raw CSVs")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .checks import run_all

    results = run_all(args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train,
    "eval": cmd_eval, "report": cmd_report, "selfcheck": cmd_selfcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"textcbr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (bench.BenchError, SnapshotError, TrainingAborted, GenerationError,
            ValueError, KeyError, OSError) as exc:
        print(f"textcbr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
