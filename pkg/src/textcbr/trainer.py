"""A2C objectives, the contrastive retriever loss, retriever pretraining and the training loop."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .agent import Agent, Retriever, Transition, stream
from .config import Config
from .quantizer import quantization_pull
from .tensor import Adam, Tensor
from .world import EntityCatalog, Game, GameRecord, GroundedAction, StateGraph

METRIC_COLUMNS = (
    "episode", "steps", "raw_score", "norm_score", "reuse_frac", "cf_neural_frac",
    "mem_entries", "loss_pi", "loss_v", "loss_e", "loss_r",
)


class TrainingAborted(RuntimeError):
    pass


def n_step_return(rewards: Sequence[float], terminal_value: float, gamma: float) -> float:
    """gamma^(T-t) V(s_T) + sum_{i=0}^{T-t} gamma^i r_{t+i}, with rewards = r_t..r_T."""
    if len(rewards) == 0:
        raise ValueError("reward window is empty")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    horizon = len(rewards) - 1
    total = gamma**horizon * terminal_value
    for i, r in enumerate(rewards):
        total += gamma**i * r
    return float(total)


def episode_returns(rewards: Sequence[float], terminal_value: float, gamma: float) -> list[float]:
    return [n_step_return(rewards[t:], terminal_value, gamma) for t in range(len(rewards))]


def fmt(x: float) -> str:
    """Fixed float rendering for metric files."""
    return format(float(x), ".10g")


@dataclass
class LossBreakdown:
    loss_pi: float = 0.0
    loss_v: float = 0.0
    loss_e: float = 0.0
    loss_r: float = 0.0
    sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("loss_pi", "loss_v", "loss_e", "loss_r"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")


def a2c_losses(
    transitions: Sequence[Transition],
    returns: Sequence[float],
    eta: float,
) -> tuple[Tensor | None, LossBreakdown]:
    """Mean over neural-source steps of L_pi + L_v + L_e.

    The advantage enters L_pi as a constant, so critic parameters get no
    gradient through the policy term.
    """
    pis, vs, es = [], [], []
    for t, (tr, ret) in enumerate(zip(transitions, returns)):
        if tr.decision.source != "neural" or tr.logp is None:
            continue
        if not np.isfinite(tr.logp.data) or np.exp(tr.logp.data) == 0.0:
            raise ValueError(f"chosen action has zero probability at step {t}")
        advantage = ret - float(tr.value_t.data)
        pis.append(-advantage * tr.logp)
        vs.append(0.5 * T.square(Tensor(ret) - tr.value_t))
        es.append(eta * tr.neg_entropy)
    sources = [tr.decision.source for tr in transitions]
    if not pis:
        return None, LossBreakdown(sources=sources)
    n = float(len(pis))
    l_pi = T.tsum(T.stack(pis)) / n
    l_v = T.tsum(T.stack(vs)) / n
    l_e = T.tsum(T.stack(es)) / n
    parts = LossBreakdown(float(l_pi.data), float(l_v.data), float(l_e.data), 0.0, sources)
    return l_pi + l_v + l_e, parts


def contrastive_loss(sim, rewarded: bool, mu: float, labels: str = "intent"):
    """Margin contrastive loss on a similarity in [0, 1].

    ``labels="intent"`` attracts rewarded pairs; ``"verbatim"`` swaps the
    label so a rewarded pair takes the margin branch.
    """
    if not 0.0 < mu < 1.0:
        raise ValueError("mu must lie in (0, 1)")
    y = int(rewarded) if labels == "verbatim" else int(not rewarded)
    if isinstance(sim, Tensor):
        if y == 0:
            return 0.5 * T.square(1.0 - sim)
        return 0.5 * T.square(T.relu(sim + (mu - 1.0)))
    sim = float(sim)
    if y == 0:
        return 0.5 * (1.0 - sim) ** 2
    return 0.5 * max(0.0, mu - 1.0 + sim) ** 2


def retriever_losses(agent: Agent, transitions: Sequence[Transition]) -> tuple[Tensor | None, float]:
    """Contrastive loss on reuse-source steps, plus codebook pull."""
    ret = agent.retriever
    if ret is None:
        return None, 0.0
    cfg = agent.config
    terms = []
    for tr in transitions:
        if tr.decision.source != "reuse":
            continue
        c = ret.live_context(tr.obs.graph, tr.reuse_source, True, agent.rng_retriever_dropout)
        sim = ret.similarity(c, tr.reuse_entry.key)
        term = contrastive_loss(sim, tr.reward > 0, cfg.mu, cfg.contrastive_labels)
        if ret.book is not None and ret.book.trainable:
            term = term + cfg.pull_weight * quantization_pull(c, ret.book)
        terms.append(term)
    if not terms:
        return None, 0.0
    loss = T.tsum(T.stack(terms)) / float(len(terms))
    return loss, float(loss.data)


@dataclass
class MetricRow:
    episode: int
    steps: int
    raw_score: float
    norm_score: float
    reuse_frac: float
    cf_neural_frac: float
    mem_entries: int
    loss_pi: float
    loss_v: float
    loss_e: float
    loss_r: float

    def cells(self) -> list[str]:
        return [
            str(self.episode), str(self.steps), fmt(self.raw_score), fmt(self.norm_score),
            fmt(self.reuse_frac), fmt(self.cf_neural_frac), str(self.mem_entries),
            fmt(self.loss_pi), fmt(self.loss_v), fmt(self.loss_e), fmt(self.loss_r),
        ]


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


class Trainer:
    def __init__(self, agent: Agent, catalog: EntityCatalog, config: Config | None = None):
        self.agent = agent
        self.catalog = catalog
        self.config = config or agent.config
        self.policy_opt = Adam(agent.policy.params, self.config.lr) if agent.policy.params is not None else None
        self.retriever_opt = (
            Adam(agent.retriever.params, self.config.retriever_lr)
            if agent.retriever is not None and len(agent.retriever.params)
            else None
        )

    def train_episode(self, episode: int, record: GameRecord) -> MetricRow:
        agent, cfg = self.agent, self.config
        game = Game(record.spec(cfg.max_steps), self.catalog, record.split)
        try:
            transitions, m = agent.run_episode(game, training=True)
        except FloatingPointError as exc:
            raise TrainingAborted(f"episode {episode}, step {game.steps}: {exc}") from exc
        rewards = [t.reward for t in transitions]
        returns = episode_returns(rewards, m.terminal_value, cfg.gamma)
        for step, tr in enumerate(transitions):
            if tr.value_t is not None and not np.isfinite(tr.value_t.data):
                raise TrainingAborted(f"episode {episode}, step {step}: critic value is not finite")
        try:
            pol_loss, parts = a2c_losses(transitions, returns, cfg.eta)
            ret_loss, loss_r = retriever_losses(agent, transitions)
        except (FloatingPointError, ValueError) as exc:
            raise TrainingAborted(f"episode {episode}: {exc}") from exc
        for name, value in (("loss_pi", parts.loss_pi), ("loss_v", parts.loss_v),
                            ("loss_e", parts.loss_e), ("loss_r", loss_r)):
            if not np.isfinite(value):
                bad = _first_bad_step(transitions, returns)
                raise TrainingAborted(f"episode {episode}, step {bad}: {name} is not finite")
        if pol_loss is not None and self.policy_opt is not None:
            T.backward(pol_loss, agent.policy.params)
            self.policy_opt.step()
        if ret_loss is not None and self.retriever_opt is not None:
            T.backward(ret_loss, agent.retriever.params)
            self.retriever_opt.step()
            agent.retriever.invalidate()
        return MetricRow(
            episode, m.steps, m.raw_score, m.norm_score, m.reuse_frac, m.cf_neural_frac,
            len(agent.memory) if agent.memory is not None else 0,
            parts.loss_pi, parts.loss_v, parts.loss_e, loss_r,
        )


def _first_bad_step(transitions: Sequence[Transition], returns: Sequence[float]) -> int:
    for i, (tr, ret) in enumerate(zip(transitions, returns)):
        vals = [ret, tr.value]
        if tr.logp is not None:
            vals.append(float(tr.logp.data))
        if not all(np.isfinite(vals)):
            return i
    return len(transitions) - 1


def train(
    agent: Agent,
    games: Sequence[GameRecord],
    catalog: EntityCatalog,
    config: Config | None = None,
    csv_path: str | Path | None = None,
    episodes: int | None = None,
) -> list[MetricRow]:
    if not games:
        raise ValueError("training game set is empty")
    config = config or agent.config
    if agent.cbr and config.pretrain_episodes > 0:
        instances = collect_instances(catalog, games, config.pretrain_episodes, agent.seed, config.max_steps)
        pretrain_retriever(agent.retriever, instances, config, seed=agent.seed)
    trainer = Trainer(agent, catalog, config)
    n = config.episodes if episodes is None else episodes
    rows = [trainer.train_episode(ep, games[ep % len(games)]) for ep in range(n)]
    if csv_path is not None:
        Path(csv_path).write_text(rows_to_csv(rows), encoding="utf-8")
    return rows


# ------------------------------------------------------------- pretraining


@dataclass(frozen=True)
class Instance:
    graph: StateGraph
    action: GroundedAction


def collect_instances(
    catalog: EntityCatalog,
    games: Sequence[GameRecord],
    episodes: int,
    seed: int,
    max_steps: int = 50,
) -> list[Instance]:
    """Rewarded (graph, action) pairs gathered by a uniform random agent."""
    rng = stream(seed, "sample")
    out = []
    for ep in range(episodes):
        rec = games[ep % len(games)]
        game = Game(rec.spec(max_steps), catalog, rec.split)
        obs = game.observe()
        while not game.done:
            action = obs.valid_actions[int(rng.integers(len(obs.valid_actions)))]
            nxt, reward, _ = game.step(action)
            if reward > 0:
                out.append(Instance(obs.graph, action))
            obs = nxt
    return out


def instance_keys(retriever: Retriever, instances: Sequence[Instance]) -> list:
    keys = []
    for inst in instances:
        if retriever.mode == "entity":
            keys.append(inst.action.slots[0])
        else:
            with T.no_grad():
                c = retriever.encode(inst.graph, [inst.action.slots]).data[0]
            keys.append(retriever.backend.transform(c))
    return keys


def template_separation(retriever: Retriever, instances: Sequence[Instance]) -> tuple[float, float]:
    """(mean same-template similarity, mean cross-template similarity) over distinct pairs."""
    keys = instance_keys(retriever, instances)
    same, cross = [], []
    for i in range(len(keys)):
        sims = retriever.backend.similarities(keys[i], keys[i + 1:])
        for j, s in zip(range(i + 1, len(keys)), sims):
            (same if instances[i].action.template == instances[j].action.template else cross).append(s)
    if not same or not cross:
        raise ValueError("need both same-template and cross-template pairs")
    return float(np.mean(same)), float(np.mean(cross))


def pretrain_retriever(
    retriever: Retriever,
    instances: Sequence[Instance],
    config: Config,
    epochs: int | None = None,
    seed: int = 0,
    lr: float | None = None,
) -> list[float]:
    """Contrastive pretraining: same-template pairs attract, others repel.  Returns per-epoch losses."""
    templates = {inst.action.template for inst in instances}
    if len(templates) < 2:
        raise ValueError(f"pretraining needs at least 2 templates, got {sorted(templates)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 97]))
    opt = Adam(retriever.params, lr if lr is not None else config.retriever_lr)
    by_template: dict[str, list[int]] = {}
    for i, inst in enumerate(instances):
        by_template.setdefault(inst.action.template, []).append(i)
    names = sorted(by_template)
    history = []
    for _ in range(config.pretrain_epochs if epochs is None else epochs):
        keys = instance_keys(retriever, instances)
        terms = []
        for p in range(config.pretrain_pairs):
            i = int(rng.integers(len(instances)))
            t_i = instances[i].action.template
            if p % 2 == 0 and len(by_template[t_i]) > 1:
                pool = [j for j in by_template[t_i] if j != i]
            else:
                others = [t for t in names if t != t_i]
                pool = by_template[others[int(rng.integers(len(others)))]]
            j = pool[int(rng.integers(len(pool)))]
            same = instances[j].action.template == t_i
            c = retriever.live_context(instances[i].graph, instances[i].action, True, rng)
            sim = retriever.similarity(c, keys[j])
            term = contrastive_loss(sim, same, config.mu)
            if retriever.book is not None and retriever.book.trainable:
                term = term + config.pull_weight * quantization_pull(c, retriever.book)
            terms.append(term)
        loss = T.tsum(T.stack(terms)) / float(len(terms))
        T.backward(loss, retriever.params)
        opt.step()
        retriever.invalidate()
        history.append(float(loss.data))
    return history
