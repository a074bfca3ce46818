"""Run configuration and the flat ``key=value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

VARIANTS = ("random", "text", "graph")
CONTEXT_MODES = ("gat", "entity")
LABEL_MODES = ("intent", "verbatim")


@dataclass(frozen=True)
class Config:
    # agent
    variant: str = "text"
    cbr: bool = True
    tau: float = 0.7
    backend: str = "vq"
    retain: str = "lastk"
    retain_k: int = 1
    context: str = "gat"
    # encoder / quantizer
    d: int = 64
    layers: int = 2
    heads: int = 4
    lam: float = 0.5
    dropout: float = 0.1
    K: int = 32
    D: int = 16
    context_norm: bool = True
    train_codebook: bool = True
    pull_weight: float = 0.25
    rp_dim: int = 64
    lsh_tables: int = 16
    lsh_bits: int = 8
    lsh_bucket: int = 4
    none_cap: int = 5000
    # policies
    text_d: int = 32
    hidden: int = 64
    # training
    gamma: float = 0.9
    eta: float = 0.01
    mu: float = 0.5
    lr: float = 1e-3
    retriever_lr: float = 1e-3
    episodes: int = 100
    max_steps: int = 50
    contrastive_labels: str = "intent"
    # pretraining
    pretrain_episodes: int = 0
    pretrain_epochs: int = 20
    pretrain_pairs: int = 64
    # world
    n_types: int = 6
    n_train: int = 24
    n_ood: int = 12
    d_emb: int = 16
    sigma: float = 0.1
    catalog_seed: int = 0
    difficulty: str = "easy"
    train_games: int = 20
    test_games: int = 10
    # evaluation
    retain_at_test: bool = False
    seeds: tuple[int, ...] = field(default=(0, 1, 2, 3, 4))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.context not in CONTEXT_MODES:
            raise ValueError(f"unknown context mode {self.context!r}")
        if self.contrastive_labels not in LABEL_MODES:
            raise ValueError(f"contrastive_labels must be one of {LABEL_MODES}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mu must lie in (0, 1)")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if not self.seeds:
            raise ValueError("seed list must be nonempty")

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_overrides(pairs: dict[str, str], base: Config | None = None) -> Config:
    base = base or Config()
    known = {f.name for f in fields(Config)}
    changes = {}
    for name, raw in pairs.items():
        if name not in known:
            raise KeyError(f"unknown config key {name!r}")
        changes[name] = _coerce(name, raw, getattr(base, name))
    return base.replace(**changes)


def parse_config_text(text: str, base: Config | None = None) -> Config:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs, base)


def load_config(path: str | Path, base: Config | None = None) -> Config:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)
