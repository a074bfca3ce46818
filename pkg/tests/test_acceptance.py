"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (printed in the terminal summary)
and then asserts the criterion at its stated tolerance.  Experiments share
one configuration, ``EXPERIMENT``, fixed before any criterion was evaluated.
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from textcbr import bench, checks
from textcbr.agent import Agent
from textcbr.bench import RunSpec, ood_gap, summarize
from textcbr.config import Config
from textcbr.encoder import seed_scores
from textcbr.quantizer import KDCode, code_similarity
from textcbr.trainer import (
    Trainer,
    collect_instances,
    contrastive_loss,
    n_step_return,
    pretrain_retriever,
    template_separation,
)
from textcbr.world import Game, StateGraph

pytestmark = pytest.mark.slow

EXPERIMENT = Config(D=32, retriever_lr=1e-4)
SEEDS = (0, 1, 2, 3, 4)
TARGET = 0.8


def record(log, n, ok, detail):
    log[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(log[n])


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Lazily trained runs keyed by (name, difficulty, seed); each writes its CSVs to disk."""
    root = tmp_path_factory.mktemp("acceptance")
    cache = {}

    def get(spec: RunSpec, seed: int):
        key = (spec.name, spec.difficulty, seed)
        if key not in cache:
            out = root / f"{spec.name}_{spec.difficulty}"
            t0 = time.perf_counter()
            agent, rows, evals = bench.run_seed(spec, seed, EXPERIMENT, out)
            cache[key] = (agent, rows, evals, out, time.perf_counter() - t0)
        return cache[key]

    get.root = root
    return get


def episodes_to_target(rows, window=10):
    """First episode count whose trailing-window mean reaches the target; unreached counts as len+1."""
    norms = [r.norm_score for r in rows]
    for end in range(window, len(norms) + 1):
        if np.mean(norms[end - window:end]) >= TARGET:
            return end
    return len(norms) + 1


# 1 ---------------------------------------------------------------------------


def test_criterion_01_oracle_suites(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    results = [checks.check_quantizer(rng), checks.check_returns(rng), checks.check_contrastive()]
    # recursion oracle on 1000 windows
    worst = 0.0
    for _ in range(1000):
        rewards = rng.normal(size=int(rng.integers(1, 20))).tolist()
        v, gamma = float(rng.normal()), float(rng.uniform(0.05, 1.0))
        acc = v + rewards[-1]
        for r in reversed(rewards[:-1]):
            acc = r + gamma * acc
        worst = max(worst, abs(acc - n_step_return(rewards, v, gamma)))
    results.append(("n-step 1000 windows", worst < 1e-12, f"{worst:.1e}"))
    points = [(1.0, True, 0.0), (0.5, False, 0.0), (1.0, False, 0.125)]
    results.append(("contrastive closed form", all(
        abs(contrastive_loss(s, y, 0.5) - e) < 1e-12 for s, y, e in points), "3 points"))
    ex = n_step_return([0, 1, 0], 0.5, 0.9)
    results.append(("n-step example", abs(ex - 1.305) < 1e-12, f"{ex:.6f}"))
    # code similarity properties on random codes
    ok = True
    for _ in range(500):
        a = KDCode(tuple(int(x) for x in rng.integers(0, 4, 8)), 4)
        b = KDCode(tuple(int(x) for x in rng.integers(0, 4, 8)), 4)
        s = code_similarity(a, b)
        ok &= s == code_similarity(b, a) and code_similarity(a, a) == 1.0 and 0.0 <= s <= 1.0
    results.append(("code similarity", ok, "500 pairs"))
    # seed-score hand recursion
    g = StateGraph(frozenset("abcd"), (("a", "in", "b"), ("a", "in", "c"), ("c", "in", "d")))
    alphas = [{("b", "a"): 1.0, ("c", "a"): 0.5, ("c", "d"): 0.5, ("a", "b"): 0.5,
               ("a", "c"): 0.5, ("d", "c"): 1.0}] * 2
    p = seed_scores(g, ["a"], alphas, 0.25, 3)
    want = {("a", 2): 0.75, ("b", 2): 0.25, ("c", 2): 0.125, ("d", 2): 0.0, ("d", 3): 0.25 * 0.125}
    results.append(("seed-score recursion", all(abs(p[k] - v) < 1e-12 for k, v in want.items()), "5 values"))
    path = seed_scores(StateGraph(frozenset("ab"), (("a", "in", "b"),)), ["a"], None, 0.5, 2)
    results.append(("seed-score path example", (path[("a", 2)], path[("b", 2)]) == (0.5, 0.5), ""))
    elapsed = time.perf_counter() - t0
    failed = [name for name, good, _ in results if not good]
    ok = not failed and elapsed < 60
    record(acceptance_log, 1, ok, f"{len(results)} oracle checks, failed={failed or 'none'}, {elapsed:.1f}s (< 60s)")
    assert ok


# 2 ---------------------------------------------------------------------------


def test_criterion_02_gradient_checks(acceptance_log):
    t0 = time.perf_counter()
    ops = checks.operator_gradient_errors(np.random.default_rng(1), trials=10)
    comp = checks.composition_gradient_error(per_tensor=10)
    elapsed = time.perf_counter() - t0
    worst_op = max(ops, key=ops.get)
    ok = ops[worst_op] < 1e-4 and comp < 1e-4 and elapsed < 300
    record(acceptance_log, 2, ok, f"{len(ops)} operators max rel err {ops[worst_op]:.1e} ({worst_op}); "
           f"encoder+policy+loss composition {comp:.1e}; {elapsed:.1f}s (< 300s)")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_criterion_03_support_and_invariance(acceptance_log):
    support, perm = checks.random_graph_violations(np.random.default_rng(3), n_graphs=200, max_nodes=30)
    ok = support == 0 and perm == 0
    record(acceptance_log, 3, ok, f"200 random graphs: support violations {support}, permutation violations {perm}")
    assert ok


# 4 ---------------------------------------------------------------------------


def _identity_trace(cfg, catalog, games, seed):
    agent = Agent(cfg, catalog, seed)
    trainer = Trainer(agent, catalog, cfg)
    rows, traces = [], []
    for ep, rec in enumerate(games):
        r = trainer.train_episode(ep, rec)
        rows.append((r.steps, r.raw_score, r.norm_score, r.loss_pi, r.loss_v, r.loss_e))
        lines = []
        agent.run_episode(Game(rec.spec(cfg.max_steps), catalog, rec.split), training=False, trace=lines)
        traces.append(lines)
    policy_params = agent.policy.params.fingerprint() if agent.policy.params is not None else ""
    return rows, traces, policy_params


def test_criterion_04_disabled_retrieval_identity(acceptance_log):
    cfg = EXPERIMENT.replace(difficulty="easy", max_steps=30)
    catalog = bench.build_catalog(cfg)
    games = bench.train_games(cfg)[:3]
    mismatches = []
    for variant in ("text", "graph", "random"):
        for seed in SEEDS:
            bare = _identity_trace(cfg.replace(variant=variant, cbr=False), catalog, games, seed)
            off = _identity_trace(cfg.replace(variant=variant, tau=1.0 + 1e-9), catalog, games, seed)
            if bare != off:
                mismatches.append((variant, seed))
    ok = not mismatches
    record(acceptance_log, 4, ok, f"text/graph/random x 5 seeds, tau=1+1e-9 vs no CBR: "
           f"mismatches {mismatches or 'none'}")
    assert ok


# 5 ---------------------------------------------------------------------------


def test_criterion_05_memory_growth(runs, acceptance_log):
    seed = 0
    _, vq_rows, *_ = runs(RunSpec("text", True, backend="vq", splits=(), difficulty="easy"), seed)
    _, none_rows, *_ = runs(RunSpec("text", True, backend="none", splits=(), difficulty="easy"), seed)
    vq, none = vq_rows[-1].mem_entries, none_rows[-1].mem_entries
    vq_rewards = sum(r.raw_score for r in vq_rows)
    none_rewards = sum(r.raw_score for r in none_rows)
    ratio = vq / none
    ok = ratio <= 0.25
    record(acceptance_log, 5, ok, f"easy, 100 episodes, seed {seed}: vq {vq} entries ({vq_rewards:g} rewarded steps), "
           f"none {none} entries ({none_rewards:g} rewarded steps); ratio {ratio:.2f} (need <= 0.25)")
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_06_sample_efficiency(runs, acceptance_log):
    text = [episodes_to_target(runs(RunSpec("text", False, splits=(), difficulty="easy"), s)[1]) for s in SEEDS]
    cbr = [episodes_to_target(runs(RunSpec("text", True, splits=(), difficulty="easy"), s)[1]) for s in SEEDS]
    slower = sum(c > t for c, t in zip(cbr, text))
    ok = np.median(cbr) <= np.median(text) and slower < 4
    record(acceptance_log, 6, ok, f"episodes to trailing-10 norm >= {TARGET} (101 = never): text {text}, "
           f"text+cbr {cbr}; medians {np.median(text):g} vs {np.median(cbr):g}; cbr slower on {slower}/5")
    assert ok


# 7 ---------------------------------------------------------------------------


MEDIUM = {
    "text": RunSpec("text", False, difficulty="medium"),
    "text+cbr": RunSpec("text", True, difficulty="medium"),
    "cbr-only": RunSpec("random", True, difficulty="medium"),
    "random": RunSpec("random", False, difficulty="medium"),
}


def _medium_rows(runs, name):
    per_split = {"in": [], "ood": []}
    for seed in SEEDS:
        evals = runs(MEDIUM[name], seed)[2]
        for split in per_split:
            per_split[split].append(evals[split])
    return {split: summarize(name, split, "medium", res) for split, res in per_split.items()}


def test_criterion_07_ood_direction(runs, acceptance_log):
    rows = {name: _medium_rows(runs, name) for name in MEDIUM}
    gap_text = ood_gap(rows["text"]["in"], rows["text"]["ood"]).norm_gap
    gap_cbr = ood_gap(rows["text+cbr"]["in"], rows["text+cbr"]["ood"]).norm_gap
    cbr_only, rand = rows["cbr-only"]["ood"].norm_mean, rows["random"]["ood"].norm_mean
    ok = gap_cbr < gap_text and cbr_only > rand
    parts = ", ".join(f"{n} in {r['in'].norm_mean:.3f} ood {r['ood'].norm_mean:.3f}" for n, r in rows.items())
    record(acceptance_log, 7, ok, f"medium, 5 seeds: gap text {gap_text:.3f} vs text+cbr {gap_cbr:.3f}; "
           f"ood cbr-only {cbr_only:.3f} vs random {rand:.3f} [{parts}]")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_criterion_08_pretraining_separation(acceptance_log):
    cfg = EXPERIMENT.replace(difficulty="medium")
    catalog = bench.build_catalog(cfg)
    margins = []
    for seed in SEEDS:
        inst = collect_instances(catalog, bench.train_games(cfg), 40, seed, cfg.max_steps)
        order = np.random.default_rng(seed).permutation(len(inst))
        cut = int(round(0.8 * len(inst)))
        fit, held = [inst[i] for i in order[:cut]], [inst[i] for i in order[cut:]]
        agent = Agent(cfg, catalog, seed)
        pretrain_retriever(agent.retriever, fit, cfg, seed=seed)
        same, cross = template_separation(agent.retriever, held)
        margins.append(same - cross)
    mean = float(np.mean(margins))
    ok = mean >= 0.1
    record(acceptance_log, 8, ok, f"held-out 20% same-minus-cross code similarity per seed "
           f"{[round(m, 3) for m in margins]}, mean {mean:.3f} (need >= 0.1)")
    assert ok


# 9 ---------------------------------------------------------------------------


def test_criterion_09_reuse_diagnostics(runs, acceptance_log):
    fracs, cf = [], []
    for seed in SEEDS:
        for res in runs(MEDIUM["text+cbr"], seed)[2].values():
            fracs += [r.reuse_frac for r in res]
            cf += [r.cf_neural_frac for r in res]
    mean = float(np.mean(fracs))
    ok = 0.0 < mean < 1.0
    record(acceptance_log, 9, ok, f"text+cbr medium test episodes: reuse fraction {mean:.3f}, "
           f"counterfactual neural success {np.mean(cf):.3f}")
    assert ok


# 10 --------------------------------------------------------------------------


def test_criterion_10_determinism(runs, tmp_path, acceptance_log):
    spec = RunSpec("text", True, splits=("in", "ood"), difficulty="easy")
    bench.run_seed(spec, 0, EXPERIMENT, tmp_path / "a")
    bench.run_seed(spec, 0, EXPERIMENT, tmp_path / "b")
    names = ["train_seed0.csv", "eval_in_seed0.csv", "eval_ood_seed0.csv", "memory_seed0.mem"]
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    # the earlier shared run of the same spec (without evaluation) trained identically
    _, _, _, out, _ = runs(RunSpec("text", True, splits=(), difficulty="easy"), 0)
    same.append((out / "train_seed0.csv").read_bytes() == (tmp_path / "a" / "train_seed0.csv").read_bytes())
    ok = all(same)
    record(acceptance_log, 10, ok, f"repeat runs byte-identical: {dict(zip(names + ['train vs shared run'], same))}")
    assert ok
