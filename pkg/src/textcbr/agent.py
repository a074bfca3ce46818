"""The CBR control loop wrapped around a pluggable neural policy."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import Config
from .encoder import EntityEncoder, SeededGAT, SeededGatConfig, TextEncoder, Vocabulary, tokenize
from .memory import CaseEntry, CaseMemory, CasePair, RetainPolicy, _key_bytes, retain
from .quantizer import Codebook, EntityBackend, KeyBackend, make_backend
from .tensor import ParameterSet, Tensor
from .world import (
    PLAYER,
    RENDER_WORDS,
    ROOMS,
    EntityCatalog,
    FIXTURES,
    Game,
    GroundedAction,
    Observation,
    normalized_score,
)

# named rng streams; keeping them apart makes CBR-on and CBR-off runs share
# the exact policy randomness
STREAMS = {
    "policy_init": 1,
    "retriever_init": 2,
    "sample": 3,
    "policy_dropout": 4,
    "retriever_dropout": 5,
    "td": 6,
    "diag": 7,
    "backend": 8,
}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, STREAMS[name]]))


def stream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, STREAMS[name]]).generate_state(1)[0])


# ----------------------------------------------------------------- policies


class Policy:
    kind = "base"
    params: ParameterSet | None = None

    def forward(self, obs: Observation, training: bool, rng) -> tuple[Tensor, Tensor]:
        """(logits over obs.valid_actions, scalar state value)."""
        raise NotImplementedError

    def value(self, obs: Observation) -> float:
        raise NotImplementedError


class RandomPolicy(Policy):
    kind = "random"

    def forward(self, obs, training, rng):
        return Tensor(np.zeros(len(obs.valid_actions))), Tensor(0.0)

    def value(self, obs) -> float:
        return 0.0


def _mlp_head(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    h = T.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    out = h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    return T.reshape(out, out.shape[:-1])


def _init_head(params: ParameterSet, prefix: str, d_in: int, hidden: int) -> None:
    params.glorot(f"{prefix}.w1", d_in, hidden)
    params.zeros(f"{prefix}.b1", (hidden,))
    params.glorot(f"{prefix}.w2", hidden, 1)
    params.zeros(f"{prefix}.b2", (1,))


def world_vocabulary(catalog: EntityCatalog) -> Vocabulary:
    """Rendering words plus train-split names; ood names fall back to UNK."""
    names = [e.id for e in catalog.split("train")]
    return Vocabulary(list(RENDER_WORDS) + [f for f, _ in FIXTURES] + list(ROOMS) + names)


class TextPolicy(Policy):
    """GRU over the observation text and over each action's text, scored by an MLP."""

    kind = "text"

    def __init__(self, params: ParameterSet, catalog: EntityCatalog, d: int = 32, hidden: int = 64):
        self.params = params
        self.encoder = TextEncoder(params, world_vocabulary(catalog), d, prefix="pol.txt")
        _init_head(params, "pol.pi", 2 * d, hidden)
        params.glorot("pol.v.w", d, 1)
        params.zeros("pol.v.b", (1,))

    def _value(self, h_obs: Tensor) -> Tensor:
        return T.reshape(h_obs @ self.params["pol.v.w"] + self.params["pol.v.b"], ())

    def forward(self, obs, training, rng):
        h_obs = self.encoder.encode_batch([tokenize(obs.text)])
        h_act = self.encoder.encode_batch([tokenize(a.text) for a in obs.valid_actions])
        n = len(obs.valid_actions)
        x = T.concat([T.take(h_obs, np.zeros(n, dtype=np.int64)), h_act], axis=-1)
        return _mlp_head(self.params, "pol.pi", x), self._value(h_obs)

    def value(self, obs) -> float:
        with T.no_grad():
            return float(self._value(self.encoder.encode_batch([tokenize(obs.text)])).data)


class GraphPolicy(Policy):
    """Actor-critic over seeded-GAT action contexts; the critic reads a player-seeded context."""

    kind = "graph"

    def __init__(self, params: ParameterSet, catalog: EntityCatalog, config: SeededGatConfig, hidden: int = 64):
        self.params = params
        self.gat = SeededGAT(params, catalog, config, prefix="pol.gat")
        _init_head(params, "pol.pi", config.d, hidden)
        params.glorot("pol.v.w", config.d, 1)
        params.zeros("pol.v.b", (1,))

    def _value(self, ctx: Tensor) -> Tensor:
        return T.reshape(ctx @ self.params["pol.v.w"] + self.params["pol.v.b"], ())

    def forward(self, obs, training, rng):
        acts = obs.valid_actions
        ctx = self.gat.forward(obs.graph, [a.slots for a in acts] + [(PLAYER,)], training, rng)
        logits = _mlp_head(self.params, "pol.pi", T.take(ctx, np.arange(len(acts))))
        return logits, self._value(T.take(ctx, np.array([len(acts)])))

    def value(self, obs) -> float:
        with T.no_grad():
            ctx = self.gat.forward(obs.graph, [(PLAYER,)])
            return float(self._value(ctx).data)


# ---------------------------------------------------------------- retriever

STANDARDIZE_EPS = 1e-8


def standardize(c: Tensor) -> Tensor:
    """Zero mean, unit variance along the last axis; puts contexts on the codebook's scale."""
    centered = c - T.mean(c, axis=-1, keepdims=True)
    scale = T.sqrt(T.mean(T.square(centered), axis=-1, keepdims=True) + STANDARDIZE_EPS)
    return centered / scale


class Retriever:
    """Context encoder plus key backend; owns its own parameter set."""

    def __init__(self, config: Config, catalog: EntityCatalog, seed: int):
        self.config = config
        self.catalog = catalog
        self.mode = config.context
        self.params = ParameterSet(stream_seed(seed, "retriever_init"))
        self.book: Codebook | None = None
        self.gat: SeededGAT | None = None
        self.entity: EntityEncoder | None = None
        backend_seed = stream_seed(seed, "backend")
        if self.mode == "entity":
            self.entity = EntityEncoder(self.params, catalog, config.d, prefix="ret.ent")
            self.backend: KeyBackend = EntityBackend(self.entity)
        else:
            gat_cfg = SeededGatConfig(config.layers, config.heads, config.d, config.lam, config.dropout)
            self.gat = SeededGAT(self.params, catalog, gat_cfg, prefix="ret.gat")
            if config.backend == "vq":
                self.book = Codebook(
                    self.params if config.train_codebook else ParameterSet(backend_seed),
                    config.K, config.D, config.d, trainable=config.train_codebook, name="ret.codebook",
                )
            self.backend = make_backend(
                config.backend, book=self.book, d=config.d, p=config.rp_dim, tables=config.lsh_tables,
                bits=config.lsh_bits, bucket_cap=config.lsh_bucket, seed=backend_seed,
            )

    @property
    def tag(self) -> str:
        return self.backend.tag

    def new_memory(self) -> CaseMemory:
        cap = self.config.none_cap if self.tag == "none" else None
        return CaseMemory(self.backend, cap)

    def encode(self, graph, seed_sets, training: bool = False, rng=None) -> Tensor:
        c = self.gat.forward(graph, seed_sets, training, rng)
        return standardize(c) if self.config.context_norm else c

    def contexts(self, obs: Observation) -> np.ndarray:
        """Continuous contexts, one row per valid action (gat mode)."""
        with T.no_grad():
            return self.encode(obs.graph, [a.slots for a in obs.valid_actions]).data

    def keys(self, obs: Observation) -> list:
        if self.mode == "entity":
            return [a.slots[0] for a in obs.valid_actions]
        return self.backend.transform_batch(self.contexts(obs))

    def live_context(self, graph, action: GroundedAction, training: bool = False, rng=None) -> Tensor:
        if self.mode == "entity":
            return T.take(self.entity.forward([action.slots[0]]), 0)
        return T.take(self.encode(graph, [action.slots], training, rng), 0)

    def similarity(self, c: Tensor, key) -> Tensor:
        return self.backend.st_similarity(c, key)

    def invalidate(self) -> None:
        if isinstance(self.backend, EntityBackend):
            self.backend.invalidate()


# --------------------------------------------------------------- decisions


@dataclass(frozen=True)
class Candidate:
    action: GroundedAction
    delta: float
    case_step: int
    valid: bool
    source_index: int
    entry: CaseEntry


@dataclass
class StepDecision:
    action: GroundedAction
    index: int
    source: str  # "reuse" or "neural"
    delta: float | None
    probs: np.ndarray
    value: float
    candidates: list[Candidate] = field(default_factory=list)


@dataclass
class Transition:
    obs: Observation
    decision: StepDecision
    reward: float
    value: float
    keys: list | None
    done: bool
    logp: Tensor | None = None
    neg_entropy: Tensor | None = None
    value_t: Tensor | None = None
    reuse_source: GroundedAction | None = None
    reuse_entry: CaseEntry | None = None


@dataclass
class EpisodeMetrics:
    steps: int
    raw_score: float
    norm_score: float
    reuse_steps: int
    reuse_success: int
    cf_neural_success: int
    solved: bool
    terminal_value: float

    @property
    def reuse_frac(self) -> float:
        return self.reuse_steps / self.steps if self.steps else 0.0

    @property
    def cf_neural_frac(self) -> float:
        return self.cf_neural_success / self.reuse_success if self.reuse_success else 0.0


def slot_kind(catalog: EntityCatalog, entity_id: str) -> str:
    return catalog.entity(entity_id).kind


def reuse(
    case: CaseEntry,
    target: GroundedAction,
    obs: Observation,
    catalog: EntityCatalog,
    mode: str = "gat",
) -> GroundedAction | None:
    """Apply the case's template to the target action's entities.

    In gat mode slots are matched to the stored slot-kind signature; in
    entity mode the focus entity replaces the stored focus and the stored
    remaining slots are kept.
    """
    sig = case.signature
    if mode == "entity":
        if not case.slots or slot_kind(catalog, target.slots[0]) != sig[0]:
            return None
        slots = (target.slots[0],) + tuple(case.slots[1:])
        if any(s not in obs.graph.nodes for s in slots):
            return None
        return GroundedAction(case.template, slots)
    if len(target.slots) != len(sig):
        return None
    remaining = list(target.slots)
    assigned = []
    for kind in sig:
        match = next((s for s in remaining if slot_kind(catalog, s) == kind), None)
        if match is None:
            return None
        remaining.remove(match)
        assigned.append(match)
    return GroundedAction(case.template, tuple(assigned))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


class Agent:
    """Neural policy plus case memory; exposes ``decide`` and ``run_episode``."""

    def __init__(self, config: Config, catalog: EntityCatalog, seed: int):
        self.config = config
        self.catalog = catalog
        self.seed = seed
        pparams = ParameterSet(stream_seed(seed, "policy_init"))
        if config.variant == "random":
            self.policy: Policy = RandomPolicy()
        elif config.variant == "text":
            self.policy = TextPolicy(pparams, catalog, config.text_d, config.hidden)
        else:
            gat_cfg = SeededGatConfig(config.layers, config.heads, config.d, config.lam, config.dropout)
            self.policy = GraphPolicy(pparams, catalog, gat_cfg, config.hidden)
        self.policy.params = pparams if config.variant != "random" else None
        self.retriever = Retriever(config, catalog, seed) if config.cbr else None
        self.memory = self.retriever.new_memory() if self.retriever else None
        self.retain_policy = RetainPolicy(config.retain, config.retain_k)
        self.rng_sample = stream(seed, "sample")
        self.rng_policy_dropout = stream(seed, "policy_dropout")
        self.rng_retriever_dropout = stream(seed, "retriever_dropout")
        self.rng_td = stream(seed, "td")
        self.rng_diag = stream(seed, "diag")

    @property
    def cbr(self) -> bool:
        return self.retriever is not None

    def build_contexts(self, obs: Observation) -> list[tuple[GroundedAction, object]]:
        if not self.cbr:
            return []
        return list(zip(obs.valid_actions, self.retriever.keys(obs)))

    def candidates(self, obs: Observation, keys: Sequence, tau: float) -> list[Candidate]:
        if not self.cbr or not len(self.memory):
            return []
        valid = set(obs.valid_actions)
        found: dict[bytes, tuple[CaseEntry, float] | None] = {}
        out = []
        for i, (action, key) in enumerate(zip(obs.valid_actions, keys)):
            kb = _key_bytes(key)
            if kb not in found:
                found[kb] = self.memory.retrieve(key, tau)
            hit = found[kb]
            if hit is None:
                continue
            entry, delta = hit
            cand = reuse(entry, action, obs, self.catalog, self.retriever.mode)
            if cand is not None:
                out.append(Candidate(cand, delta, entry.step, cand in valid, i, entry))
        return out

    def decide(self, obs: Observation, keys, training: bool) -> tuple[StepDecision, Transition]:
        tau = self.config.tau
        cands = self.candidates(obs, keys, tau) if keys is not None else []
        usable = [c for c in cands if c.valid]
        acts = obs.valid_actions
        if usable:
            best = max(usable, key=lambda c: (c.delta, c.case_step, -c.source_index))
            with T.no_grad():
                logits, v = self.policy.forward(obs, False, None)
            probs = _softmax(logits.data)
            index = acts.index(best.action)
            dec = StepDecision(best.action, index, "reuse", best.delta, probs, float(v.data), cands)
            tr = Transition(obs, dec, 0.0, float(v.data), keys, False,
                            reuse_source=acts[best.source_index], reuse_entry=best.entry)
            return dec, tr
        grad = training and self.policy.params is not None
        if grad:
            logits, v = self.policy.forward(obs, True, self.rng_policy_dropout)
        else:
            with T.no_grad():
                logits, v = self.policy.forward(obs, False, None)
        probs = _softmax(logits.data)
        if training or self.policy.kind == "random":
            index = int(self.rng_sample.choice(len(acts), p=probs))
        else:
            index = int(np.argmax(probs))
        dec = StepDecision(acts[index], index, "neural", None, probs, float(v.data), cands)
        tr = Transition(obs, dec, 0.0, float(v.data), keys, False)
        if grad:
            logp = T.log_softmax(logits)
            pi = T.softmax(logits)
            tr.logp = T.take(logp, index)
            tr.neg_entropy = T.tsum(pi * logp)
            tr.value_t = v
        return dec, tr

    def run_episode(
        self,
        game: Game,
        training: bool = True,
        retain_cases: bool | None = None,
        trace: list[str] | None = None,
    ) -> tuple[list[Transition], EpisodeMetrics]:
        if retain_cases is None:
            retain_cases = training
        cfg = self.config
        transitions: list[Transition] = []
        pairs: list[CasePair] = []
        reuse_steps = reuse_success = cf_success = 0
        obs = game.observe()
        done = game.done
        while not done:
            keys = self.retriever.keys(obs) if self.cbr else None
            dec, tr = self.decide(obs, keys, training)
            before = game.clone() if dec.source == "reuse" else None
            nxt, reward, done = game.step(dec.action)
            tr.reward, tr.done = reward, done
            transitions.append(tr)
            if dec.source == "reuse":
                reuse_steps += 1
                if reward > 0:
                    reuse_success += 1
                    cf_action = obs.valid_actions[int(np.argmax(dec.probs))]
                    _, cf_reward, _ = before.step(cf_action)
                    cf_success += int(cf_reward > 0)
            if self.cbr:
                pairs.insert(0, CasePair(
                    keys[dec.index], dec.action.template,
                    tuple(slot_kind(self.catalog, s) for s in dec.action.slots), dec.action.slots,
                ))
                if retain_cases and reward > 0:
                    td = None
                    if self.retain_policy.kind == "td":
                        vals = [t.value for t in transitions]
                        rews = [t.reward for t in transitions]
                        td = [rews[i] + cfg.gamma * vals[i + 1] - vals[i] for i in range(len(vals) - 1)][::-1]
                    retain(self.memory, pairs, reward, self.retain_policy, td, self.rng_td)
            if trace is not None:
                delta = f"{dec.delta:.4f}" if dec.delta is not None else "-"
                trace.append(f"{len(transitions) - 1}\t{dec.source}\t{delta}\t{dec.action.text}\t{reward:g}")
            obs = nxt
        solved = len(game.placed) == len(game.objects)
        terminal = 0.0 if solved else self.policy.value(obs)
        metrics = EpisodeMetrics(
            steps=len(transitions),
            raw_score=game.score,
            norm_score=normalized_score(game.score, game.max_score),
            reuse_steps=reuse_steps,
            reuse_success=reuse_success,
            cf_neural_success=cf_success,
            solved=solved,
            terminal_value=terminal,
        )
        return transitions, metrics

    def parameter_sets(self) -> list[ParameterSet]:
        out = []
        if self.policy.params is not None:
            out.append(self.policy.params)
        if self.retriever is not None:
            out.append(self.retriever.params)
        return out

    def fingerprint(self) -> str:
        parts = [p.fingerprint() for p in self.parameter_sets()]
        if self.retriever is not None and self.retriever.book is not None and not self.retriever.book.trainable:
            parts.append(hashlib.sha256(self.retriever.book.keys.data.tobytes()).hexdigest())
        return "|".join(parts)
