from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from textcbr import tensor as T
from textcbr.agent import Agent, StepDecision, Transition
from textcbr.checks import composition_gradient_error
from textcbr.config import Config
from textcbr.tensor import Tensor
from textcbr.trainer import (
    METRIC_COLUMNS,
    Instance,
    Trainer,
    TrainingAborted,
    a2c_losses,
    collect_instances,
    contrastive_loss,
    episode_returns,
    n_step_return,
    pretrain_retriever,
    rows_to_csv,
    template_separation,
    train,
)
from textcbr.world import Game, GroundedAction, generate_catalog, make_game_set

SMALL = dict(d=8, heads=2, layers=2, dropout=0.0, hidden=8, text_d=8, K=8, D=4, max_steps=12)


@pytest.fixture(scope="module")
def catalog():
    return generate_catalog(0, 6, 24, 12)


@pytest.fixture(scope="module")
def games():
    return make_game_set("t", "easy", "train", range(3))


def test_n_step_return_example():
    assert n_step_return([0, 1, 0], 0.5, 0.9) == pytest.approx(1.305, abs=1e-12)


def test_n_step_return_trivial_cases():
    assert n_step_return([0, 0, 0, 0], 0.0, 0.9) == 0.0
    assert n_step_return([1.0], 0.0, 1.0) == 1.0
    assert n_step_return([0.25], 2.0, 0.5) == 2.25
    with pytest.raises(ValueError):
        n_step_return([], 1.0, 0.9)
    with pytest.raises(ValueError):
        n_step_return([1.0], 0.0, 0.0)


def recursive_return(rewards, v, gamma):
    acc = v + rewards[-1]
    for r in reversed(rewards[:-1]):
        acc = r + gamma * acc
    return acc


def test_n_step_return_matches_recursion():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        rewards = rng.normal(size=int(rng.integers(1, 20))).tolist()
        v, gamma = float(rng.normal()), float(rng.uniform(0.05, 1.0))
        worst = max(worst, abs(n_step_return(rewards, v, gamma) - recursive_return(rewards, v, gamma)))
    assert worst < 1e-12


def test_episode_returns_windows():
    rets = episode_returns([0, 0, 1], 0.0, 0.9)
    assert rets == pytest.approx([0.81, 0.9, 1.0])


@pytest.mark.parametrize("sim,rewarded,mu,expected", [
    (1.0, True, 0.5, 0.0),      # attract, zero distance
    (0.5, False, 0.5, 0.0),     # repel, on the hinge boundary
    (0.3, False, 0.5, 0.0),     # repel, inside the margin
    (1.0, False, 0.5, 0.125),
    (0.0, True, 0.5, 0.5),
    (0.9, False, 0.5, 0.08),
])
def test_contrastive_points(sim, rewarded, mu, expected):
    assert contrastive_loss(sim, rewarded, mu) == pytest.approx(expected, abs=1e-12)


def test_contrastive_verbatim_swaps_branches():
    assert contrastive_loss(1.0, True, 0.5, "verbatim") == pytest.approx(0.125)
    assert contrastive_loss(1.0, False, 0.5, "verbatim") == 0.0
    with pytest.raises(ValueError):
        contrastive_loss(0.5, True, 1.0)


@settings(max_examples=100, deadline=None)
@given(sim=st.floats(0, 1), rewarded=st.booleans(), mu=st.floats(0.01, 0.99))
def test_contrastive_tensor_matches_float(sim, rewarded, mu):
    val = contrastive_loss(sim, rewarded, mu)
    assert val >= 0.0
    assert contrastive_loss(Tensor(sim), rewarded, mu).item() == pytest.approx(val, abs=1e-12)


def _neural(logits, index, value):
    logits = Tensor(np.asarray(logits, dtype=float), requires_grad=True)
    v = Tensor(float(value), requires_grad=True)
    lp = T.log_softmax(logits)
    dec = StepDecision(GroundedAction("GO", ("kitchen",)), index, "neural", None, np.exp(lp.data), value)
    tr = Transition(None, dec, 0.0, value, None, False)
    tr.logp = T.take(lp, index)
    tr.neg_entropy = T.tsum(T.softmax(logits) * lp)
    tr.value_t = v
    return tr


def test_uniform_policy_entropy_term():
    n, eta = 5, 0.01
    _, parts = a2c_losses([_neural(np.zeros(n), 2, 0.0)], [0.0], eta)
    assert parts.loss_e == pytest.approx(-eta * math.log(n), abs=1e-12)


def test_zero_advantage_and_exact_critic():
    _, parts = a2c_losses([_neural([0.3, -1.0, 2.0], 1, 0.7)], [0.7], 0.01)
    assert parts.loss_pi == 0.0 and parts.loss_v == 0.0


def test_zero_probability_action_raises():
    with pytest.raises(ValueError, match="zero probability"):
        a2c_losses([_neural([0.0, -1e6], 1, 0.0)], [1.0], 0.01)


def test_losses_are_means_over_neural_steps():
    trs = [_neural([0.0, 1.0], 0, 0.2), _neural([0.0, 1.0], 1, 0.4)]
    _, parts = a2c_losses(trs, [1.0, 1.0], 0.0)
    assert parts.loss_v == pytest.approx(0.5 * (0.5 * 0.8**2 + 0.5 * 0.6**2))
    assert parts.loss_e == 0.0
    assert a2c_losses([], [], 0.01)[0] is None


def _episode(catalog, games, seed=1, **over):
    cfg = Config(variant="graph", backend="none", **{**SMALL, **over})
    agent = Agent(cfg, catalog, seed)
    train(agent, games, catalog, episodes=6)
    game = Game(games[0].spec(cfg.max_steps), catalog, "train")
    trs, m = agent.run_episode(game, training=True, retain_cases=False)
    return agent, trs, episode_returns([t.reward for t in trs], m.terminal_value, cfg.gamma)


def _rebuild(agent, trs):
    out = []
    for tr in trs:
        if tr.decision.source != "neural":
            out.append(tr)
            continue
        logits, v = agent.policy.forward(tr.obs, False, None)
        lp = T.log_softmax(logits)
        out.append(dataclasses.replace(
            tr, logp=T.take(lp, tr.decision.index), neg_entropy=T.tsum(T.softmax(logits) * lp), value_t=v,
        ))
    return out


def test_critic_gets_no_gradient_through_policy_term(catalog, games):
    agent, trs, rets = _episode(catalog, games)
    params = agent.policy.params
    trs = _rebuild(agent, trs)
    pis = [-(r - float(t.value_t.data)) * t.logp for t, r in zip(trs, rets) if t.decision.source == "neural"]
    T.backward(T.tsum(T.stack(pis)), params)
    assert not np.any(params["pol.v.w"].grad) and not np.any(params["pol.v.b"].grad)
    assert np.any(params["pol.pi.w1"].grad)


def test_full_loss_gradient_matches_finite_differences(catalog, games):
    # the shared helper replays this same miniature episode; make sure it
    # exercises both loss paths before trusting the number
    _, trs, _ = _episode(catalog, games)
    assert {t.decision.source for t in trs} == {"neural", "reuse"} and any(t.reward > 0 for t in trs)
    assert composition_gradient_error(per_tensor=8) < 1e-4


def test_eta_zero_gives_zero_entropy_loss(catalog, games):
    cfg = Config(cbr=False, eta=0.0, **SMALL)
    rows = train(Agent(cfg, catalog, 0), games, catalog, episodes=3)
    assert all(r.loss_e == 0.0 for r in rows)


@pytest.mark.parametrize("variant", ["text", "graph"])
def test_disabled_retrieval_matches_bare_policy(catalog, games, variant):
    cfg = Config(variant=variant, **SMALL)
    bare = train(Agent(cfg.replace(cbr=False), catalog, 3), games, catalog, episodes=4)
    off = train(Agent(cfg.replace(tau=1.5), catalog, 3), games, catalog, episodes=4)
    strip = lambda rows: [(r.steps, r.raw_score, r.loss_pi, r.loss_v, r.loss_e) for r in rows]
    assert strip(bare) == strip(off)
    assert all(r.reuse_frac == 0.0 and r.loss_r == 0.0 for r in off)


def test_metric_rows_and_csv(catalog, games, tmp_path):
    cfg = Config(**SMALL)
    rows = []
    for seed in range(2):
        rows += train(Agent(cfg, catalog, seed), games, catalog, episodes=3, csv_path=tmp_path / f"s{seed}.csv")
    assert len(rows) == 6
    lines = (tmp_path / "s0.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS) and len(lines) == 4
    assert rows_to_csv(rows[:3]) == (tmp_path / "s0.csv").read_text()


def test_empty_game_set(catalog):
    with pytest.raises(ValueError):
        train(Agent(Config(**SMALL), catalog, 0), [], catalog)


def test_nan_aborts_with_episode_and_step(catalog, games):
    agent = Agent(Config(cbr=False, **SMALL), catalog, 0)
    agent.policy.params["pol.v.w"].data[:] = np.nan
    with pytest.raises(TrainingAborted, match=r"episode 0, step \d+"):
        Trainer(agent, catalog).train_episode(0, games[0])


def test_pretraining_needs_two_templates(catalog, games):
    agent = Agent(Config(**SMALL), catalog, 0)
    inst = collect_instances(catalog, games, 5, 0, 30)
    one = [i for i in inst if i.action.template == inst[0].action.template]
    with pytest.raises(ValueError, match="2 templates"):
        pretrain_retriever(agent.retriever, one, agent.config, epochs=1)


def _pretrain_setup(catalog, seed):
    cfg = Config(**{**SMALL, "d": 16, "D": 8, "K": 16}, pretrain_pairs=32)
    games = make_game_set("p", "medium", "train", range(8))
    inst = collect_instances(catalog, games, 24, seed, 50)
    return cfg, inst


def test_pretraining_is_deterministic(catalog):
    cfg, inst = _pretrain_setup(catalog, 0)
    a, b = Agent(cfg, catalog, 0), Agent(cfg, catalog, 0)
    ha = pretrain_retriever(a.retriever, inst, cfg, epochs=3, seed=0)
    hb = pretrain_retriever(b.retriever, inst, cfg, epochs=3, seed=0)
    assert ha == hb and a.fingerprint() == b.fingerprint()


def test_pretraining_separates_held_out_templates(catalog):
    cfg, inst = _pretrain_setup(catalog, 1)
    order = np.random.default_rng(0).permutation(len(inst))
    cut = int(0.8 * len(inst))
    fit, held = [inst[i] for i in order[:cut]], [inst[i] for i in order[cut:]]
    agent = Agent(cfg, catalog, 1)
    pretrain_retriever(agent.retriever, fit, cfg, epochs=30, seed=1)
    same, cross = template_separation(agent.retriever, held)
    assert same - cross > 0.0


def test_template_separation_needs_both_kinds(catalog):
    agent = Agent(Config(**SMALL), catalog, 0)
    game = Game(make_game_set("x", "easy", "train", [0])[0].spec(10), catalog, "train")
    obj, graph = game.objects[0], game.graph()
    inst = [Instance(graph, GroundedAction("TAKE", (obj,)))] * 2
    with pytest.raises(ValueError):
        template_separation(agent.retriever, inst)
