"""Fast invariant suite behind ``textcbr selfcheck``.

Each check returns ``(name, ok, detail)``.  The pytest suite covers the same
ground more thoroughly; this module exists so an installed copy can verify
itself without the test tree.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .agent import Agent
from .config import Config
from .encoder import SeededGAT, SeededGatConfig, permute_prepared, seed_scores
from .quantizer import Codebook, code_similarity, quantize
from .tensor import ParameterSet, Tensor
from .trainer import contrastive_loss, n_step_return, train
from .world import Game, GameSpec, generate_catalog, make_game_set

CheckResult = tuple[str, bool, str]


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check_quantizer(rng: np.random.Generator) -> CheckResult:
    for _ in range(50):
        K, D, d = int(rng.integers(2, 9)), int(rng.choice([1, 2, 4])), 8
        book = Codebook(ParameterSet(int(rng.integers(1 << 30))), K, D, d)
        c = rng.normal(size=d)
        code = quantize(c, book)
        keys = book.keys.data.reshape(K, D, d // D).transpose(1, 0, 2)
        for j in range(D):
            dist = ((keys[j] - c.reshape(D, -1)[j]) ** 2).sum(axis=1)
            if code.codes[j] != int(np.flatnonzero(dist == dist.min())[0]):
                return "quantizer argmin", False, f"partition {j} disagrees with brute force"
        if code_similarity(code, code) != 1.0:
            return "quantizer argmin", False, "self-similarity is not 1"
    return "quantizer argmin", True, "50 random codebooks"


def check_returns(rng: np.random.Generator) -> CheckResult:
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 12))
        rewards = rng.normal(size=n).tolist()
        v, gamma = float(rng.normal()), float(rng.uniform(0.1, 1.0))
        acc = v + rewards[-1]
        for r in reversed(rewards[:-1]):
            acc = r + gamma * acc
        worst = max(worst, abs(acc - n_step_return(rewards, v, gamma)))
    return "n-step return", worst < 1e-12, f"max abs err {worst:.2e}"


def check_contrastive() -> CheckResult:
    pts = [(1.0, True, 0.0), (0.0, True, 0.5), (0.4, False, 0.0), (0.9, False, 0.08)]
    bad = [p for p in pts if abs(contrastive_loss(p[0], p[1], 0.5) - p[2]) > 1e-12]
    return "contrastive points", not bad, f"{len(bad)} mismatches"


OPERATORS: dict[str, Callable] = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.square(b), 1.0)),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "einsum": lambda a, b: T.einsum("ij,kj->ik", a, b),
    "concat": lambda a, b: T.concat([a, b], axis=0),
    "stack": lambda a, b: T.stack([a, b], axis=1),
    "sqdist": lambda a, b: T.sqdist(a, b),
    "l2_distance": lambda a, b: T.l2_distance(a, b),
    "cosine": lambda a, b: T.cosine(a, b),
    "relu": lambda a, b: T.relu(a) * b,
    "leaky_relu": lambda a, b: T.leaky_relu(a) * b,
    "tanh": lambda a, b: T.tanh(a) * b,
    "sigmoid": lambda a, b: T.sigmoid(a) * b,
    "exp": lambda a, b: T.exp(a) * b,
    "log": lambda a, b: T.log(T.square(a) + 0.5) * b,
    "sqrt": lambda a, b: T.sqrt(T.square(a) + 0.5) * b,
    "softmax": lambda a, b: T.softmax(a, axis=-1) * b,
    "log_softmax": lambda a, b: T.log_softmax(a, axis=-1) * b,
    "mean": lambda a, b: T.mean(a * b, axis=0),
    "reshape": lambda a, b: T.reshape(a, (4, 3)) * T.reshape(b, (4, 3)),
    "take": lambda a, b: T.take(a, np.array([0, 2, 2])) * T.take(b, np.array([1, 1, 0])),
    "dropout": lambda a, b: T.dropout(a, 0.3, np.random.default_rng(7), True) * b,
    "gru_cell": lambda a, b: T.gru_cell(
        a, T.tanh(b @ Tensor(np.linspace(-1.0, 1.0, 12).reshape(4, 3))),
        Tensor(np.linspace(-0.5, 0.5, 36).reshape(4, 9)),
        Tensor(np.linspace(0.4, -0.4, 27).reshape(3, 9)), Tensor(np.zeros(9)), Tensor(np.full(9, 0.1)),
    ),
}


def operator_gradient_errors(rng: np.random.Generator, trials: int = 5) -> dict[str, float]:
    """Worst relative error of analytic vs central-difference gradients, per operator."""
    out = {}
    for name, op in OPERATORS.items():
        worst = 0.0
        for _ in range(trials):
            a_val = rng.normal(size=(3, 4))
            a_val = np.where(np.abs(a_val) < 0.05, 0.05, a_val)  # keep off relu kinks
            b_val = rng.normal(size=(3, 4))
            w = None
            for x_val, pos in ((a_val, 0), (b_val, 1)):
                args = [Tensor(a_val), Tensor(b_val)]
                args[pos] = Tensor(x_val, requires_grad=True)
                y = op(*args)
                if w is None:
                    w = np.random.default_rng(3).normal(size=y.shape)
                T.tsum(y * w).backward()
                num = numeric_grad(lambda: float(T.tsum(op(Tensor(a_val), Tensor(b_val)) * w).data), x_val)
                denom = np.linalg.norm(num) + np.linalg.norm(args[pos].grad)
                if denom > 1e-12:
                    worst = max(worst, float(np.linalg.norm(num - args[pos].grad) / denom))
        out[name] = worst
    return out


def check_gradients(rng: np.random.Generator) -> CheckResult:
    errs = operator_gradient_errors(rng, trials=2)
    worst = max(errs, key=errs.get)
    return "operator gradients", errs[worst] < 1e-4, f"{len(errs)} ops, max rel err {errs[worst]:.2e} ({worst})"


def composition_gradient_error(seed: int = 1, per_tensor: int = 6, eps: float = 1e-5) -> float:
    """Gradient of policy loss plus retriever loss on a miniature episode, against finite differences.

    The cosine backend keeps the retriever term differentiable.  The advantage
    is a constant of the objective, so the oracle holds it at its base value.
    """
    import dataclasses

    from .trainer import a2c_losses, episode_returns, retriever_losses

    cfg = Config(variant="graph", backend="none", d=8, heads=2, layers=2, dropout=0.0, hidden=8,
                 text_d=8, K=8, D=4, max_steps=12)
    catalog = generate_catalog(0, 6, 24, 12)
    games = make_game_set("t", "easy", "train", range(3))
    agent = Agent(cfg, catalog, seed)
    train(agent, games, catalog, episodes=6)
    game = Game(games[0].spec(cfg.max_steps), catalog, "train")
    trs, m = agent.run_episode(game, training=True, retain_cases=False)
    rets = episode_returns([t.reward for t in trs], m.terminal_value, cfg.gamma)
    neural = [i for i, t in enumerate(trs) if t.decision.source == "neural"]

    def rebuild():
        out = list(trs)
        for i in neural:
            logits, v = agent.policy.forward(trs[i].obs, False, None)
            lp = T.log_softmax(logits)
            out[i] = dataclasses.replace(trs[i], logp=T.take(lp, trs[i].decision.index),
                                         neg_entropy=T.tsum(T.softmax(logits) * lp), value_t=v)
        return out

    def retriever_term():
        loss, _ = retriever_losses(agent, trs)
        return loss if loss is not None else Tensor(0.0)

    base = rebuild()
    adv = {i: rets[i] - float(base[i].value_t.data) for i in neural}

    def policy_oracle() -> float:
        with T.no_grad():
            rb = rebuild()
            terms = [-adv[i] * rb[i].logp + 0.5 * T.square(Tensor(rets[i]) - rb[i].value_t)
                     + cfg.eta * rb[i].neg_entropy for i in neural]
            return float((T.tsum(T.stack(terms)) / float(len(terms))).data)

    def retriever_oracle() -> float:
        with T.no_grad():
            return float(retriever_term().data)

    sets = agent.parameter_sets()
    for ps in sets:
        ps.zero_grad()
    pol, _ = a2c_losses(base, rets, cfg.eta)
    (pol + retriever_term()).backward()
    rng = np.random.default_rng(0)
    worst = 0.0
    # the two parameter sets are disjoint, so each is differenced against the
    # only term that depends on it; this keeps rounding noise off tiny gradients
    for ps in sets:
        oracle = retriever_oracle if agent.retriever is not None and ps is agent.retriever.params else policy_oracle
        for _, t in ps.items():
            flat = list(np.ndindex(t.data.shape))
            picks = [flat[i] for i in rng.choice(len(flat), size=min(per_tensor, len(flat)), replace=False)]
            num, ana = [], []
            for idx in picks:
                old = t.data[idx]
                t.data[idx] = old + eps
                hi = oracle()
                t.data[idx] = old - eps
                lo = oracle()
                t.data[idx] = old
                num.append((hi - lo) / (2 * eps))
                ana.append(t.grad[idx])
            num, ana = np.array(num), np.array(ana)
            denom = np.linalg.norm(num) + np.linalg.norm(ana)
            if denom > 1e-9:
                worst = max(worst, float(np.linalg.norm(num - ana) / denom))
    return worst


def check_composition() -> CheckResult:
    err = composition_gradient_error(per_tensor=2)
    return "loss composition gradient", err < 1e-4, f"max rel err {err:.2e}"


def hop_distances(graph, seeds) -> dict[str, int]:
    adj = graph.neighbors()
    dist = {s: 0 for s in seeds}
    frontier = list(seeds)
    while frontier:
        nxt = []
        for v in frontier:
            for u in adj[v]:
                if u not in dist:
                    dist[u] = dist[v] + 1
                    nxt.append(u)
        frontier = nxt
    return dist


def check_encoder(rng: np.random.Generator, n_games: int = 5) -> CheckResult:
    catalog = generate_catalog(0, 6, 24, 12)
    gat = SeededGAT(ParameterSet(1), catalog, SeededGatConfig(2, 2, 16, 0.5, 0.0))
    for seed in range(n_games):
        obs = Game(GameSpec.for_difficulty("medium", seed), catalog, "train").observe()
        graph = obs.graph
        seeds = [a.slots for a in obs.valid_actions[:3]]
        for s in seeds:
            hops = hop_distances(graph, s)
            p = seed_scores(graph, s, None, 0.5, 3)
            for (v, layer), val in p.items():
                if val > 0 and hops.get(v, 10**9) > layer - 1:
                    return "encoder invariance", False, f"seed score of {v} outside support at layer {layer}"
        with T.no_grad():
            base = gat.forward(graph, seeds).data
            prep = gat.prepare(graph)
            gat._cache[graph] = permute_prepared(prep, rng.permutation(len(prep.nodes)))
            shuffled = gat.forward(graph, seeds).data
            gat._cache.pop(graph)
        if not np.allclose(base, shuffled, atol=1e-10):
            return "encoder invariance", False, f"permutation changed contexts (game {seed})"
    return "encoder invariance", True, f"{n_games} graphs"


def random_graph(rng: np.random.Generator, names, n_nodes: int, p_edge: float = 0.15):
    from .world import RELATIONS, StateGraph

    nodes = list(rng.choice(names, size=n_nodes, replace=False))
    edges = set()
    for i in range(n_nodes):
        for j in range(i + 1, n_nodes):
            if rng.random() < p_edge:
                edges.add((nodes[i], str(rng.choice(RELATIONS)), nodes[j]))
    return StateGraph(frozenset(nodes), tuple(sorted(edges)))


def random_graph_violations(rng: np.random.Generator, n_graphs: int = 200, max_nodes: int = 30) -> tuple[int, int]:
    """(support-bound violations, permutation-invariance violations) over random graphs."""
    catalog = generate_catalog(0, 6, 24, 12)
    gat = SeededGAT(ParameterSet(2), catalog, SeededGatConfig(2, 2, 16, 0.5, 0.0))
    names = catalog.all_ids()
    support = perm = 0
    for _ in range(n_graphs):
        graph = random_graph(rng, names, int(rng.integers(2, max_nodes + 1)))
        nodes = sorted(graph.nodes)
        seeds = [tuple(rng.choice(nodes, size=int(rng.integers(1, 3)), replace=False)) for _ in range(2)]
        for s in seeds:
            hops = hop_distances(graph, s)
            p = seed_scores(graph, s, None, float(rng.uniform(0.05, 0.95)), 4)
            support += sum(1 for (v, layer), val in p.items() if val != 0.0 and hops.get(v, 10**9) > layer - 1)
        with T.no_grad():
            base = gat.forward(graph, seeds).data
            prep = gat.prepare(graph)
            gat._cache[graph] = permute_prepared(prep, rng.permutation(len(prep.nodes)))
            shuffled = gat.forward(graph, seeds).data
            gat._cache.pop(graph)
        perm += int(not np.allclose(base, shuffled, atol=1e-9, rtol=0))
    return support, perm


def check_cbr_identity() -> CheckResult:
    cfg = Config(episodes=3, max_steps=15, d=16, K=8, D=4, text_d=16, hidden=16)
    catalog = generate_catalog(cfg.catalog_seed, cfg.n_types, cfg.n_train, cfg.n_ood)
    games = make_game_set("chk", "easy", "train", range(3))
    bare = train(Agent(cfg.replace(cbr=False), catalog, 0), games, catalog)
    cbr = train(Agent(cfg.replace(tau=1.5), catalog, 0), games, catalog)
    strip = lambda rows: [(r.steps, r.raw_score, r.loss_pi, r.loss_v, r.loss_e) for r in rows]
    ok = strip(bare) == strip(cbr)
    return "cbr identity (tau > 1)", ok, "3 episodes"


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = [
        lambda: check_quantizer(rng),
        lambda: check_returns(rng),
        check_contrastive,
        lambda: check_gradients(rng),
        check_composition,
        lambda: check_encoder(rng),
        check_cbr_identity,
    ]
    out = []
    for chk in checks:
        try:
            out.append(chk())
        except Exception as exc:  # a crashing check is a failing check
            out.append((getattr(chk, "__name__", "check"), False, f"{type(exc).__name__}: {exc}"))
    return out

