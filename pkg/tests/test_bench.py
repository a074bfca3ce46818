from __future__ import annotations

import shutil

import numpy as np
import pytest

from textcbr import bench
from textcbr.agent import Agent
from textcbr.bench import BenchError, GameResult, RunSpec, SummaryRow, ood_gap, summarize
from textcbr.config import Config
from textcbr.world import Game, generate_catalog

BASE = Config(d=8, heads=2, layers=2, dropout=0.0, hidden=8, text_d=8, K=8, D=4,
              max_steps=15, episodes=3, train_games=3, test_games=2)


def row(variant="text+cbr", split="in", norm=0.95, steps=10.0, difficulty="easy"):
    return SummaryRow(variant, split, difficulty, steps, 0.0, norm, 0.0, 0.5, 5)


def test_ood_gap_example():
    gap = ood_gap(row(norm=0.95), row(split="ood", norm=0.93))
    assert gap.norm_gap == pytest.approx(0.02)


def test_ood_gap_symmetric_and_zero():
    a, b = row(norm=0.4, steps=20), row(split="ood", norm=0.7, steps=12)
    assert ood_gap(a, b) == ood_gap(b, a)
    same = ood_gap(a, a)
    assert same.norm_gap == 0.0 and same.steps_gap == 0.0


def test_ood_gap_mismatch():
    with pytest.raises(ValueError):
        ood_gap(row(), row(variant="text", split="ood"))
    with pytest.raises(ValueError):
        ood_gap(row(), row(split="ood", difficulty="hard"))


def _results(norms, steps=5):
    return [GameResult(f"g{i}", "train", steps, n, n, 0.0, 0.0) for i, n in enumerate(norms)]


def test_summarize_single_seed_marker():
    r = summarize("text", "in", "easy", [_results([1.0, 0.5])])
    assert r.single_seed and r.norm_std == 0.0 and r.norm_mean == 0.75


def test_summarize_sample_std():
    r = summarize("text", "in", "easy", [_results([1.0]), _results([0.0])])
    assert not r.single_seed and r.norm_std == pytest.approx(np.std([1.0, 0.0], ddof=1))
    with pytest.raises(ValueError):
        summarize("text", "in", "easy", [])


def test_solving_agent_scores_one():
    r = summarize("oracle", "in", "easy", [_results([1.0, 1.0], steps=2)] * 3)
    assert r.steps_mean == 2 and r.norm_mean == 1.0


@pytest.mark.parametrize("name,expected", [
    ("text", ("text", False)), ("text+cbr", ("text", True)), ("cbr-only", ("random", True)),
    ("graph+cbr", ("graph", True)), ("random", ("random", False)),
])
def test_variant_names(name, expected):
    assert bench.parse_variant(name) == expected
    assert bench.variant_name(*expected) == name


def test_bad_specs():
    with pytest.raises(ValueError):
        bench.parse_variant("bike+cbr")
    with pytest.raises(ValueError):
        RunSpec(seeds=())
    with pytest.raises(ValueError):
        RunSpec(splits=("test",))
    with pytest.raises(ValueError):
        RunSpec(context="bert")


def test_run_spec_names():
    assert RunSpec().name == "text+cbr"
    assert RunSpec(backend="none").name == "text+cbr-none"
    assert RunSpec(context="entity", retain="td").name == "text+cbr-entity-td"
    assert RunSpec(cbr=False, backend="none").name == "text"


def test_test_games_disjoint_from_training():
    train_ids = {r.seed for r in bench.train_games(BASE)}
    for split in ("in", "ood"):
        recs = bench.test_games(BASE, split)
        assert not train_ids & {r.seed for r in recs}
    assert {r.split for r in bench.test_games(BASE, "ood")} == {"ood"}


@pytest.fixture(scope="module")
def trained():
    cfg = RunSpec(seeds=(0,)).config(BASE)
    catalog = bench.build_catalog(cfg)
    agent = Agent(cfg, catalog, 0)
    bench.train(agent, bench.train_games(cfg), catalog, cfg)
    return cfg, catalog, agent


def test_evaluate_is_repeatable_and_read_only(trained):
    cfg, catalog, agent = trained
    games = bench.test_games(cfg, "in") + bench.test_games(cfg, "ood")
    before = (agent.fingerprint(), bench.memory_digest(agent))
    first = bench.evaluate(agent, games, catalog)
    second = bench.evaluate(agent, games, catalog)
    assert first == second
    assert (agent.fingerprint(), bench.memory_digest(agent)) == before


def test_evaluate_split_mismatch(trained):
    cfg, _, agent = trained
    no_ood = generate_catalog(0, 6, 24, 0)
    with pytest.raises(BenchError, match="split"):
        bench.evaluate(agent, bench.test_games(cfg, "ood"), no_ood)


def test_random_agent_on_hard_split_below_one():
    cfg = BASE.replace(difficulty="hard", max_steps=50, test_games=10, variant="random", cbr=False)
    catalog = bench.build_catalog(cfg)
    games = bench.test_games(cfg, "in")
    # Monte-Carlo success rate of a uniform walker on these games
    rng = np.random.default_rng(0)
    solved = 0
    trials = 200
    for i in range(trials):
        rec = games[i % len(games)]
        game = Game(rec.spec(50), catalog, rec.split)
        while not game.done:
            acts = game.valid_actions()
            game.step(acts[int(rng.integers(len(acts)))])
        solved += len(game.placed) == len(game.objects)
    p_hat = (solved + 1) / (trials + 2)
    # probability that every one of 5 seeds x 10 games is solved
    assert p_hat ** 50 < 1e-6
    norms = [np.mean([r.norm_score for r in bench.evaluate(Agent(cfg, catalog, s), games, catalog)])
             for s in range(5)]
    assert np.mean(norms) < 1.0


@pytest.fixture(scope="module")
def run_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    specs = [RunSpec("text", False, seeds=(0, 1)), RunSpec("text", True, seeds=(0, 1))]
    bench.run_matrix(specs, BASE, root)
    return root


def test_run_directory_layout(run_root):
    run = run_root / "text+cbr_easy"
    names = sorted(p.name for p in run.iterdir())
    for seed in (0, 1):
        for f in (f"train_seed{seed}.csv", f"eval_in_seed{seed}.csv", f"eval_ood_seed{seed}.csv",
                  f"policy_seed{seed}.params", f"retriever_seed{seed}.params", f"memory_seed{seed}.mem"):
            assert f in names
    assert "retriever_seed0.params" not in {p.name for p in (run_root / "text_easy").iterdir()}


def test_saved_agent_reloads(run_root):
    run = run_root / "text+cbr_easy"
    cfg = bench.load_config(run / "config.txt")
    catalog = bench.build_catalog(cfg)
    agent = bench.load_agent(cfg, catalog, run, 1)
    res = bench.evaluate(agent, bench.test_games(cfg, "ood"), catalog)
    assert bench.results_to_csv(res) == (run / "eval_ood_seed1.csv").read_text()


def test_report_rows_and_audit(run_root, tmp_path):
    files = bench.report(run_root, tmp_path / "rep")
    lines = files["summary.csv"].splitlines()[1:]
    assert len(lines) == 4  # 2 variants x 2 splits
    assert {tuple(l.split(",")[:2]) for l in lines} == {
        ("text", "in"), ("text", "ood"), ("text+cbr", "in"), ("text+cbr", "ood")}
    assert "## OOD gap" in files["summary.md"]
    assert "curve_text+cbr_easy.csv" in files
    curve = files["curve_text+cbr_easy.csv"].splitlines()
    assert len(curve) == 1 + BASE.episodes
    assert bench.audit_report(run_root, files) == []


def test_report_is_byte_identical_on_rerun(run_root, tmp_path):
    a = bench.report(run_root, tmp_path / "a")
    b = bench.report(run_root, tmp_path / "b")
    assert a == b
    for name in a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_report_lists_corrupt_files(run_root, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(run_root, root)
    (root / "text_easy" / "eval_in_seed1.csv").write_text("garbage\n")
    (root / "stray").mkdir()
    files = bench.report(root, tmp_path / "rep")
    md = files["summary.md"]
    assert "text_easy/eval_in_seed1.csv" in md and "stray: missing config.txt" in md
    text_in = next(l for l in files["summary.csv"].splitlines() if l.startswith("text,in,"))
    assert text_in.endswith(",1")


def test_report_audit_detects_tampering(run_root, tmp_path):
    files = bench.report(run_root, tmp_path / "rep")
    header, first, *rest = files["summary.csv"].splitlines()
    cells = first.split(",")
    cells[5] = "0.123456"
    tampered = dict(files, **{"summary.csv": "\n".join([header, ",".join(cells), *rest]) + "\n"})
    assert bench.audit_report(run_root, tampered)


def test_report_empty_directory(tmp_path):
    with pytest.raises(BenchError):
        bench.report(tmp_path)
    (tmp_path / "junk").mkdir()
    with pytest.raises(BenchError):
        bench.report(tmp_path)


def test_training_csv_deterministic(tmp_path):
    spec = RunSpec("text", True, seeds=(0,))
    a = bench.run_spec(spec, BASE, tmp_path / "a")
    b = bench.run_spec(spec, BASE, tmp_path / "b")
    for name in ("train_seed0.csv", "eval_in_seed0.csv", "eval_ood_seed0.csv", "memory_seed0.mem"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
