"""Context encoders: seeded graph attention, entity-only FFN, GRU text encoder."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ParameterSet, Tensor
from .world import RELATIONS, EntityCatalog, GroundedAction, StateGraph

NO_EDGE_BIAS = -1e9


@dataclass(frozen=True)
class SeededGatConfig:
    layers: int = 2
    heads: int = 4
    d: int = 64
    lam: float = 0.5
    dropout: float = 0.1

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("hidden dim must be divisible by the head count")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("seed-mix coefficient must lie in (0, 1)")
        if self.layers < 1:
            raise ValueError("need at least one layer")


@dataclass(frozen=True)
class ContextVector:
    values: np.ndarray
    state_id: int
    template: str
    seeds: tuple[str, ...]


@dataclass
class PreparedGraph:
    nodes: list[str]
    index: dict[str, int]
    features: np.ndarray  # (N, d_emb)
    relation: np.ndarray  # (N, N) relation ids, 0 where no edge
    mask: np.ndarray  # (N, N) 1.0 on undirected edges
    onehot: np.ndarray  # (N, N, R)
    bias: np.ndarray  # (N, N, 1)


def prepare_graph(graph: StateGraph, catalog: EntityCatalog) -> PreparedGraph:
    nodes = sorted(graph.nodes)
    index = {v: i for i, v in enumerate(nodes)}
    for v in nodes:
        if v not in catalog:
            raise KeyError(f"graph node {v!r} missing from catalog")
    n, r = len(nodes), len(RELATIONS)
    features = np.array([catalog.embedding(v) for v in nodes]).reshape(n, catalog.d_emb)
    relation = np.zeros((n, n), dtype=np.int64)
    mask = np.zeros((n, n))
    rel_id = {name: i for i, name in enumerate(RELATIONS)}
    for v, rel, u in graph.edges:
        if v == u:
            continue
        i, j = index[v], index[u]
        if mask[i, j]:
            continue
        relation[i, j] = relation[j, i] = rel_id.get(rel, 0)
        mask[i, j] = mask[j, i] = 1.0
    onehot = np.zeros((n, n, r))
    onehot[np.arange(n)[:, None], np.arange(n)[None, :], relation] = mask
    bias = np.where(mask > 0, 0.0, NO_EDGE_BIAS)[:, :, None]
    return PreparedGraph(nodes, index, features, relation, mask, onehot, bias)


def permute_prepared(prep: PreparedGraph, order: Sequence[int]) -> PreparedGraph:
    """Same graph with rows reordered; ``order[i]`` is the old index of new row i."""
    o = np.asarray(order)
    nodes = [prep.nodes[i] for i in o]
    return PreparedGraph(
        nodes, {v: i for i, v in enumerate(nodes)}, prep.features[o], prep.relation[np.ix_(o, o)],
        prep.mask[np.ix_(o, o)], prep.onehot[np.ix_(o, o)], prep.bias[np.ix_(o, o)],
    )


def seed_scores(
    graph: StateGraph,
    seeds: Sequence[str],
    alphas: Sequence[Mapping[tuple[str, str], float]] | None,
    lam: float,
    layers: int,
) -> dict[tuple[str, int], float]:
    """Propagation scores p[(v, l)] for l = 1..layers.

    ``alphas[l-1][(v, u)]`` is the attention of v on neighbor u at layer l;
    missing entries default to 1.0 (``alphas=None`` means all ones).
    """
    if not seeds:
        raise ValueError("seed set must be nonempty")
    adj = graph.neighbors()
    for s in seeds:
        if s not in adj:
            raise KeyError(f"seed {s!r} is not a graph node")
    seed_set = set(seeds)
    p = {v: (1.0 / len(seed_set) if v in seed_set else 0.0) for v in adj}
    out = {(v, 1): p[v] for v in adj}
    for layer in range(1, layers):
        a = alphas[layer - 1] if alphas is not None else {}
        nxt = {}
        for v in adj:
            msg = sum(a.get((v, u), 1.0) * p[u] for u in adj[v])
            nxt[v] = (1.0 - lam) * p[v] + lam * msg
        p = nxt
        out.update({(v, layer + 1): p[v] for v in adj})
    return out


def _ffn(params: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    h = T.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _init_ffn(params: ParameterSet, prefix: str, d_in: int, d_hidden: int, d_out: int) -> None:
    params.glorot(f"{prefix}.w1", d_in, d_hidden)
    params.zeros(f"{prefix}.b1", (d_hidden,))
    params.glorot(f"{prefix}.w2", d_hidden, d_out)
    params.zeros(f"{prefix}.b2", (d_out,))


class SeededGAT:
    """Action-specific context encoder over the state graph.

    Each layer computes additive multi-head attention over undirected
    neighborhoods, scales the aggregated message of node v by its seed score
    p_v, and feeds the residual sum through a two-layer ReLU FFN.  Relation
    types enter as learned offsets on the message inputs.
    """

    def __init__(
        self,
        params: ParameterSet,
        catalog: EntityCatalog,
        config: SeededGatConfig = SeededGatConfig(),
        prefix: str = "gat",
        cache_size: int = 512,
    ):
        self.params = params
        self.catalog = catalog
        self.config = config
        self.prefix = prefix
        d, heads = config.d, config.heads
        dh = d // heads
        params.glorot(f"{prefix}.proj", catalog.d_emb, d)
        for layer in range(config.layers):
            p = f"{prefix}.l{layer}"
            params.glorot(f"{p}.w", d, d)
            params.glorot(f"{p}.att_dst", dh, 1, shape=(heads, dh))
            params.glorot(f"{p}.att_src", dh, 1, shape=(heads, dh))
            params.gaussian(f"{p}.rel", (len(RELATIONS), d), scale=0.1)
            _init_ffn(params, f"{p}.ffn", d, d, d)
        params.glorot(f"{prefix}.readout", d, d)
        _init_ffn(params, f"{prefix}.out", d, d, d)
        self._cache: OrderedDict[StateGraph, PreparedGraph] = OrderedDict()
        self._cache_size = cache_size

    def prepare(self, graph: StateGraph) -> PreparedGraph:
        prep = self._cache.get(graph)
        if prep is None:
            prep = prepare_graph(graph, self.catalog)
            self._cache[graph] = prep
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(graph)
        return prep

    def node_features(self, graph: StateGraph) -> dict[str, np.ndarray]:
        if not graph.nodes:
            return {}
        prep = self.prepare(graph)
        with T.no_grad():
            h = Tensor(prep.features) @ self.params[f"{self.prefix}.proj"]
        return {v: h.data[i].copy() for i, v in enumerate(prep.nodes)}

    def forward(
        self,
        graph: StateGraph,
        seed_sets: Sequence[Sequence[str]],
        training: bool = False,
        rng: np.random.Generator | None = None,
        trace: dict | None = None,
    ) -> Tensor:
        """Context vectors, one row per seed set: (A, d)."""
        cfg, params, pre = self.config, self.params, self.prefix
        prep = self.prepare(graph)
        n, a_count = len(prep.nodes), len(seed_sets)
        heads, dh = cfg.heads, cfg.d // cfg.heads
        seeds = np.zeros((a_count, n))
        for a, ids in enumerate(seed_sets):
            if not ids:
                raise ValueError("empty seed set")
            for v in ids:
                if v not in prep.index:
                    raise KeyError(f"slot entity {v!r} absent from graph")
                seeds[a, prep.index[v]] = 1.0
        p_init = seeds / seeds.sum(axis=1, keepdims=True)
        mask4 = prep.mask[:, :, None]
        bias = prep.bias

        h = Tensor(prep.features) @ params[f"{pre}.proj"]
        p: Tensor = Tensor(p_init)
        batched = False
        if trace is not None:
            trace["p"] = [p_init.copy()]
            trace["alpha"] = []
        for layer in range(cfg.layers):
            lp = f"{pre}.l{layer}"
            b = "a" if batched else ""
            wh = h @ params[f"{lp}.w"]
            whh = T.reshape(wh, wh.shape[:-1] + (heads, dh))
            f_dst = T.einsum(f"{b}nhk,hk->{b}nh", whh, params[f"{lp}.att_dst"])
            g_src = T.einsum(f"{b}nhk,hk->{b}nh", whh, params[f"{lp}.att_src"])
            rel_h = T.reshape(params[f"{lp}.rel"], (len(RELATIONS), heads, dh))
            q_rel = T.einsum("rhk,hk->rh", rel_h, params[f"{lp}.att_src"])
            q_edge = T.take(q_rel, prep.relation)  # (N, N, H)
            lead = f_dst.shape[:-2]
            scores = (
                T.reshape(f_dst, lead + (n, 1, heads))
                + T.reshape(g_src, lead + (1, n, heads))
                + q_edge
            )
            scores = T.leaky_relu(scores) + bias
            alpha = T.softmax(scores, axis=-2) * mask4
            msg = T.einsum(f"{b}vuh,{b}uhk->{b}vhk", alpha, whh)
            per_rel = T.einsum(f"{b}vuh,vur->{b}vhr", alpha, prep.onehot)
            msg = msg + T.einsum(f"{b}vhr,rhk->{b}vhk", per_rel, rel_h)
            msg = T.reshape(msg, msg.shape[:-2] + (cfg.d,))
            z = h + T.reshape(p, (a_count, n, 1)) * msg
            h = _ffn(params, f"{lp}.ffn", z)
            h = T.dropout(h, cfg.dropout, rng, training)
            alpha_bar = T.mean(alpha, axis=-1)
            if trace is not None:
                trace["alpha"].append(alpha_bar.data.copy())
            if layer + 1 < cfg.layers:
                spread = T.einsum(f"{b}vu,au->av", alpha_bar, p)
                p = (1.0 - cfg.lam) * p + cfg.lam * spread
                if trace is not None:
                    trace["p"].append(p.data.copy())
            batched = True
        hp = h @ params[f"{pre}.readout"]
        pooled = T.einsum("an,and->ad", Tensor(seeds), hp)
        return _ffn(params, f"{pre}.out", pooled)

    def encode_context(
        self,
        graph: StateGraph,
        action: GroundedAction,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> ContextVector:
        with T.no_grad():
            c = self.forward(graph, [action.slots], training, rng)
        return ContextVector(c.data[0].copy(), hash(graph), action.template, tuple(action.slots))


class EntityEncoder:
    """Two-layer FFN over raw catalog embeddings (entity-as-context ablation)."""

    def __init__(self, params: ParameterSet, catalog: EntityCatalog, d: int = 64, prefix: str = "ent"):
        self.params = params
        self.catalog = catalog
        self.prefix = prefix
        _init_ffn(params, prefix, catalog.d_emb, d, d)

    def forward(self, entity_ids: Sequence[str]) -> Tensor:
        x = np.array([self.catalog.embedding(e) for e in entity_ids]).reshape(len(entity_ids), -1)
        return _ffn(self.params, self.prefix, Tensor(x))

    def encode_entity_context(self, entity_id: str) -> np.ndarray:
        with T.no_grad():
            return self.forward([entity_id]).data[0].copy()

    def similarity(self, a: str, b: str) -> float:
        with T.no_grad():
            v = self.forward([a, b])
            return float(T.cosine(v[0], v[1]).data)


UNK, PAD = "<unk>", "<pad>"


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    def __init__(self, words):
        self.words = [PAD, UNK] + sorted(set(words) - {PAD, UNK})
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]


class TextEncoder:
    """Token embedding followed by a GRU; returns the final hidden state."""

    def __init__(self, params: ParameterSet, vocab: Vocabulary, d: int = 32, prefix: str = "txt"):
        self.params = params
        self.vocab = vocab
        self.d = d
        self.prefix = prefix
        params.gaussian(f"{prefix}.emb", (len(vocab), d), scale=0.3)
        params.glorot(f"{prefix}.wx", d, 3 * d)
        params.glorot(f"{prefix}.wh", d, 3 * d)
        params.zeros(f"{prefix}.bx", (3 * d,))
        params.zeros(f"{prefix}.bh", (3 * d,))

    def encode_batch(self, sequences: Sequence[Sequence[str]]) -> Tensor:
        if any(len(s) == 0 for s in sequences):
            raise ValueError("token sequences must be nonempty")
        ids = [self.vocab.encode(s) for s in sequences]
        length = max(len(s) for s in ids)
        pad = self.vocab.index[PAD]
        grid = np.full((len(ids), length), pad, dtype=np.int64)
        mask = np.zeros((len(ids), length, 1))
        for i, row in enumerate(ids):
            grid[i, : len(row)] = row
            mask[i, : len(row)] = 1.0
        pre, params = self.prefix, self.params
        emb = T.take(params[f"{pre}.emb"], grid)  # (B, L, d)
        h: Tensor = Tensor(np.zeros((len(ids), self.d)))
        ragged = not np.all(mask)
        for t in range(length):
            x = T.take(emb, (slice(None), t))
            nxt = T.gru_cell(x, h, params[f"{pre}.wx"], params[f"{pre}.wh"], params[f"{pre}.bx"], params[f"{pre}.bh"])
            if ragged and not np.all(mask[:, t]):
                m = mask[:, t]
                h = nxt * m + h * (1.0 - m)
            else:
                h = nxt
        return h

    def encode_text(self, tokens: Sequence[str]) -> Tensor:
        return T.take(self.encode_batch([tokens]), 0)
