"""Experiment harness: run specs, evaluation protocol, OOD gaps and report emission."""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import Agent
from .config import Config, load_config
from .memory import restore, snapshot
from .trainer import METRIC_COLUMNS, fmt, rows_to_csv, train
from .world import EntityCatalog, Game, GameRecord, generate_catalog, make_game_set

TEST_SEED_OFFSET = 100_000
SPLIT_ALIASES = {"in": "train", "train": "train", "ood": "ood"}
EVAL_COLUMNS = ("game_id", "split", "steps", "raw_score", "norm_score", "reuse_frac", "cf_neural_frac")


class BenchError(RuntimeError):
    pass


def parse_variant(name: str) -> tuple[str, bool]:
    """'text' -> (text, no CBR); 'text+cbr' -> (text, CBR); 'cbr-only' -> (random, CBR)."""
    name = name.strip().lower()
    if name == "cbr-only":
        return "random", True
    base, _, suffix = name.partition("+")
    if suffix not in ("", "cbr") or base not in ("random", "text", "graph"):
        raise ValueError(f"unknown variant {name!r}")
    return base, suffix == "cbr"


def variant_name(variant: str, cbr: bool) -> str:
    if variant == "random" and cbr:
        return "cbr-only"
    return f"{variant}+cbr" if cbr else variant


@dataclass(frozen=True)
class RunSpec:
    variant: str = "text"
    cbr: bool = True
    backend: str = "vq"
    retain: str = "lastk"
    context: str = "gat"
    splits: tuple[str, ...] = ("in", "ood")
    difficulty: str = "easy"
    seeds: tuple[int, ...] = (0,)
    overrides: tuple[tuple[str, object], ...] = ()

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("run spec needs at least one seed")
        for s in self.splits:
            if s not in SPLIT_ALIASES:
                raise ValueError(f"unknown split {s!r}")
        self.config(Config())

    @property
    def name(self) -> str:
        parts = [variant_name(self.variant, self.cbr)]
        if self.cbr:
            if self.context != "gat":
                parts.append(self.context)
            elif self.backend != "vq":
                parts.append(self.backend)
            if self.retain != "lastk":
                parts.append(self.retain)
        return "-".join(parts)

    def config(self, base: Config) -> Config:
        return base.replace(
            variant=self.variant, cbr=self.cbr, backend=self.backend, retain=self.retain,
            context=self.context, difficulty=self.difficulty, seeds=tuple(self.seeds),
            **dict(self.overrides),
        )


def build_catalog(cfg: Config) -> EntityCatalog:
    return generate_catalog(cfg.catalog_seed, cfg.n_types, cfg.n_train, cfg.n_ood, cfg.d_emb, cfg.sigma)


def train_games(cfg: Config) -> list[GameRecord]:
    return make_game_set("train", cfg.difficulty, "train", range(cfg.train_games))


def test_games(cfg: Config, split: str) -> list[GameRecord]:
    world_split = SPLIT_ALIASES[split]
    seeds = range(TEST_SEED_OFFSET, TEST_SEED_OFFSET + cfg.test_games)
    return make_game_set("test", cfg.difficulty, world_split, seeds)


# ------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class GameResult:
    game_id: str
    split: str
    steps: int
    raw_score: float
    norm_score: float
    reuse_frac: float
    cf_neural_frac: float


def memory_digest(agent: Agent) -> str:
    if agent.memory is None:
        return ""
    h = hashlib.sha256()
    for e in agent.memory.entries:
        h.update(repr((e.template, e.signature, e.step, e.hits, e.slots)).encode())
        key = e.key
        h.update(key.encode() if isinstance(key, str) else np.asarray(getattr(key, "codes", key)).tobytes())
    return h.hexdigest()


def evaluate(
    agent: Agent,
    games: Sequence[GameRecord],
    catalog: EntityCatalog,
    retain_at_test: bool = False,
    max_steps: int | None = None,
) -> list[GameResult]:
    """Argmax play over the test games; parameters (and memory unless retaining) stay frozen."""
    max_steps = max_steps or agent.config.max_steps
    for rec in games:
        if rec.split not in catalog.splits:
            raise BenchError(f"game {rec.game_id} wants split {rec.split!r}, catalog has {sorted(catalog.splits)}")
    before = (agent.fingerprint(), memory_digest(agent))
    results = []
    for rec in games:
        game = Game(rec.spec(max_steps), catalog, rec.split)
        _, m = agent.run_episode(game, training=False, retain_cases=retain_at_test)
        results.append(GameResult(rec.game_id, rec.split, m.steps, m.raw_score, m.norm_score,
                                  m.reuse_frac, m.cf_neural_frac))
    after = (agent.fingerprint(), memory_digest(agent))
    if before[0] != after[0]:
        raise BenchError("evaluation changed agent parameters")
    if not retain_at_test and before[1] != after[1]:
        raise BenchError("evaluation changed the case memory")
    return results


def results_to_csv(results: Sequence[GameResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in results:
        w.writerow([r.game_id, r.split, r.steps, fmt(r.raw_score), fmt(r.norm_score),
                    fmt(r.reuse_frac), fmt(r.cf_neural_frac)])
    return buf.getvalue()


# ------------------------------------------------------------- summaries


@dataclass(frozen=True)
class SummaryRow:
    variant: str
    split: str
    difficulty: str
    steps_mean: float
    steps_std: float
    norm_mean: float
    norm_std: float
    reuse_frac: float
    n_seeds: int

    @property
    def single_seed(self) -> bool:
        return self.n_seeds < 2


def summarize(variant: str, split: str, difficulty: str, per_seed: Sequence[Sequence[GameResult]]) -> SummaryRow:
    """Mean and std over seeds of the per-seed game averages."""
    if not per_seed:
        raise ValueError("no seeds to summarize")
    steps = [float(np.mean([r.steps for r in rs])) for rs in per_seed]
    norms = [float(np.mean([r.norm_score for r in rs])) for rs in per_seed]
    reuse = [float(np.mean([r.reuse_frac for r in rs])) for rs in per_seed]
    n = len(per_seed)
    std = (lambda xs: float(np.std(xs, ddof=1))) if n > 1 else (lambda xs: 0.0)
    return SummaryRow(variant, split, difficulty, float(np.mean(steps)), std(steps),
                      float(np.mean(norms)), std(norms), float(np.mean(reuse)), n)


@dataclass(frozen=True)
class GapRecord:
    variant: str
    difficulty: str
    steps_gap: float
    norm_gap: float


def ood_gap(in_row: SummaryRow, out_row: SummaryRow) -> GapRecord:
    if in_row.variant != out_row.variant or in_row.difficulty != out_row.difficulty:
        raise ValueError("OOD gap needs rows of the same variant and difficulty")
    return GapRecord(in_row.variant, in_row.difficulty,
                     abs(in_row.steps_mean - out_row.steps_mean), abs(in_row.norm_mean - out_row.norm_mean))


# ----------------------------------------------------------------- runs


def run_seed(
    spec: RunSpec,
    seed: int,
    base: Config,
    out_dir: Path | None = None,
    catalog: EntityCatalog | None = None,
) -> tuple[Agent, list, dict[str, list[GameResult]]]:
    """Train one seed of a run spec and evaluate it on each requested split."""
    cfg = spec.config(base)
    catalog = catalog or build_catalog(cfg)
    agent = Agent(cfg, catalog, seed)
    rows = train(agent, train_games(cfg), catalog, cfg)
    evals = {split: evaluate(agent, test_games(cfg, split), catalog, cfg.retain_at_test) for split in spec.splits}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"train_seed{seed}.csv").write_text(rows_to_csv(rows), encoding="utf-8")
        for split, res in evals.items():
            (out_dir / f"eval_{split}_seed{seed}.csv").write_text(results_to_csv(res), encoding="utf-8")
        save_agent(agent, out_dir, seed)
    return agent, rows, evals


def save_agent(agent: Agent, out_dir: Path, seed: int) -> None:
    if agent.policy.params is not None:
        agent.policy.params.save(out_dir / f"policy_seed{seed}.params")
    if agent.retriever is not None:
        agent.retriever.params.save(out_dir / f"retriever_seed{seed}.params")
        snapshot(agent.memory, out_dir / f"memory_seed{seed}.mem")


def load_agent(cfg: Config, catalog: EntityCatalog, run_dir: Path, seed: int) -> Agent:
    agent = Agent(cfg, catalog, seed)
    if agent.policy.params is not None:
        agent.policy.params.load(run_dir / f"policy_seed{seed}.params")
    if agent.retriever is not None:
        agent.retriever.params.load(run_dir / f"retriever_seed{seed}.params")
        agent.retriever.invalidate()
        agent.memory = restore(run_dir / f"memory_seed{seed}.mem", agent.retriever.backend)
    return agent


def run_spec(spec: RunSpec, base: Config, out_root: Path) -> Path:
    cfg = spec.config(base)
    run_dir = out_root / f"{spec.name}_{spec.difficulty}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(f"# run {spec.name}\n" + cfg.to_text(), encoding="utf-8")
    catalog = build_catalog(cfg)
    for seed in spec.seeds:
        run_seed(spec, seed, base, run_dir, catalog)
    return run_dir


def _run_spec_job(args: tuple[RunSpec, Config, Path]) -> Path:
    return run_spec(*args)


def run_matrix(specs: Sequence[RunSpec], base: Config, out_root: Path, workers: int = 1) -> list[Path]:
    """Run independent specs, at most ``workers`` processes at a time; each owns its directory."""
    names = [f"{s.name}_{s.difficulty}" for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("run specs must map to distinct output directories")
    jobs = [(s, base, Path(out_root)) for s in specs]
    if workers <= 1:
        return [_run_spec_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_spec_job, jobs))


# --------------------------------------------------------------- report


def _read_csv(path: Path, columns: Sequence[str]) -> list[dict[str, str]]:
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(columns):
            raise ValueError(f"unexpected header {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise ValueError("no data rows")
    return rows


def _seed_of(path: Path) -> int:
    return int(path.stem.rsplit("seed", 1)[1])


@dataclass
class RunData:
    name: str
    difficulty: str
    train: dict[int, list[dict[str, str]]] = field(default_factory=dict)
    evals: dict[str, dict[int, list[GameResult]]] = field(default_factory=dict)


def load_runs(root: Path) -> tuple[list[RunData], list[str]]:
    runs, problems = [], []
    for run_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cfg_path = run_dir / "config.txt"
        if not cfg_path.exists():
            problems.append(f"{run_dir.name}: missing config.txt")
            continue
        try:
            cfg = load_config(cfg_path)
        except (ValueError, KeyError) as exc:
            problems.append(f"{run_dir.name}/config.txt: {exc}")
            continue
        name = run_dir.name.rsplit("_", 1)[0]
        data = RunData(name, cfg.difficulty)
        for path in sorted(run_dir.glob("train_seed*.csv")):
            try:
                rows = _read_csv(path, METRIC_COLUMNS)
                for r in rows:
                    for c in METRIC_COLUMNS:
                        if not math.isfinite(float(r[c])):
                            raise ValueError(f"non-finite {c}")
                data.train[_seed_of(path)] = rows
            except (ValueError, KeyError, IndexError) as exc:
                problems.append(f"{run_dir.name}/{path.name}: {exc}")
        for path in sorted(run_dir.glob("eval_*_seed*.csv")):
            split = path.stem.split("_")[1]
            try:
                rows = _read_csv(path, EVAL_COLUMNS)
                res = [GameResult(r["game_id"], r["split"], int(r["steps"]), float(r["raw_score"]),
                                  float(r["norm_score"]), float(r["reuse_frac"]), float(r["cf_neural_frac"]))
                       for r in rows]
                data.evals.setdefault(split, {})[_seed_of(path)] = res
            except (ValueError, KeyError, IndexError) as exc:
                problems.append(f"{run_dir.name}/{path.name}: {exc}")
        if data.train or data.evals:
            runs.append(data)
        else:
            problems.append(f"{run_dir.name}: no valid metric files")
    return runs, problems


def _table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines)


def _pm(mean: float, std: float, single: bool) -> str:
    return f"{mean:.3f} ± {std:.3f}" + (" (1 seed)" if single else "")


def _curve(rows_by_seed: dict[int, list[dict[str, str]]], column: str) -> list[tuple[int, float, float]]:
    seeds = sorted(rows_by_seed)
    n = min(len(rows_by_seed[s]) for s in seeds)
    out = []
    for ep in range(n):
        vals = [float(rows_by_seed[s][ep][column]) for s in seeds]
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append((ep, float(np.mean(vals)), std))
    return out


def summary_rows(runs: Sequence[RunData]) -> list[SummaryRow]:
    rows = []
    for run in runs:
        for split in sorted(run.evals):
            per_seed = [run.evals[split][s] for s in sorted(run.evals[split])]
            rows.append(summarize(run.name, split, run.difficulty, per_seed))
    return rows


def report(root: str | Path, out_dir: str | Path | None = None) -> dict[str, str]:
    """Write summary.md, summary.csv and curve files; returns {filename: content}."""
    root = Path(root)
    if not root.is_dir() or not any(root.iterdir()):
        raise BenchError(f"run directory {root} is empty or missing")
    runs, problems = load_runs(root)
    if not runs:
        raise BenchError("no valid runs found:\n" + "\n".join(problems))
    out_dir = Path(out_dir) if out_dir else root / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(runs)
    files: dict[str, str] = {}

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "split", "difficulty", "steps_mean", "steps_std", "norm_mean", "norm_std",
                "reuse_frac", "n_seeds"])
    for r in rows:
        w.writerow([r.variant, r.split, r.difficulty, fmt(r.steps_mean), fmt(r.steps_std),
                    fmt(r.norm_mean), fmt(r.norm_std), fmt(r.reuse_frac), r.n_seeds])
    files["summary.csv"] = buf.getvalue()

    md = ["# Benchmark report", ""]
    md.append(_table(
        ["variant", "split", "difficulty", "#Steps", "Norm. Score", "reuse frac"],
        [(r.variant, r.split, r.difficulty, _pm(r.steps_mean, r.steps_std, r.single_seed),
          _pm(r.norm_mean, r.norm_std, r.single_seed), f"{r.reuse_frac:.3f}") for r in rows],
    ))
    gaps = []
    by_key = {(r.variant, r.difficulty, r.split): r for r in rows}
    for (variant, diff, split), r in sorted(by_key.items()):
        if split == "in" and (variant, diff, "ood") in by_key:
            gaps.append(ood_gap(r, by_key[(variant, diff, "ood")]))
    if gaps:
        md += ["", "## OOD gap", ""]
        md.append(_table(["variant", "difficulty", "#Steps gap", "Norm. Score gap"],
                         [(g.variant, g.difficulty, f"{g.steps_gap:.3f}", f"{g.norm_gap:.3f}") for g in gaps]))
    if problems:
        md += ["", "## Skipped files", ""] + [f"- {p}" for p in problems]
    files["summary.md"] = "\n".join(md) + "\n"

    for run in runs:
        if not run.train:
            continue
        tag = f"{run.name}_{run.difficulty}"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "norm_mean", "norm_std", "steps_mean", "steps_std",
                    "mem_mean", "mem_std", "reuse_mean", "reuse_std"])
        curves = [_curve(run.train, c) for c in ("norm_score", "steps", "mem_entries", "reuse_frac")]
        for parts in zip(*curves):
            w.writerow([parts[0][0]] + [fmt(x) for p in parts for x in p[1:]])
        files[f"curve_{tag}.csv"] = buf.getvalue()

    for name, content in files.items():
        (out_dir / name).write_text(content, encoding="utf-8")
    return files


def audit_report(root: str | Path, files: dict[str, str]) -> list[str]:
    """Recompute every summary number straight from the raw CSVs; returns mismatches."""
    root = Path(root)
    issues = []
    raw: dict[tuple[str, str], dict[int, list[float]]] = {}
    names = {}
    for run_dir in sorted(p for p in root.iterdir() if p.is_dir() and (p / "config.txt").exists()):
        diff = load_config(run_dir / "config.txt").difficulty
        name = run_dir.name.rsplit("_", 1)[0]
        names[run_dir.name] = (name, diff)
        for path in sorted(run_dir.glob("eval_*_seed*.csv")):
            split = path.stem.split("_")[1]
            with path.open(encoding="utf-8") as fh:
                lines = fh.read().splitlines()[1:]
            try:
                norms = [float(line.split(",")[4]) for line in lines]
                steps = [float(line.split(",")[2]) for line in lines]
            except (IndexError, ValueError):
                continue
            raw.setdefault((name, diff, split), {})[_seed_of(path)] = [sum(steps) / len(steps), sum(norms) / len(norms)]
    reader = csv.DictReader(io.StringIO(files["summary.csv"]))
    for row in reader:
        per_seed = raw.get((row["variant"], row["difficulty"], row["split"]))
        if per_seed is None:
            issues.append(f"summary row {row['variant']}/{row['split']} has no raw data")
            continue
        steps = [v[0] for v in per_seed.values()]
        norms = [v[1] for v in per_seed.values()]
        expect = {"steps_mean": sum(steps) / len(steps), "norm_mean": sum(norms) / len(norms)}
        for key, value in expect.items():
            if abs(float(row[key]) - value) > 1e-8:
                issues.append(f"{row['variant']}/{row['split']} {key}: report {row[key]}, raw {value:.10g}")
        if int(row["n_seeds"]) != len(per_seed):
            issues.append(f"{row['variant']}/{row['split']} n_seeds mismatch")
    return issues
