"""Procedural household tidy-up games with knowledge-graph state.

Objects must be moved onto/into the fixture their type belongs to.  Object
instances are drawn from a catalog split (``train`` or ``ood``); fixtures,
rooms and the player are shared vocabulary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

CATALOG_FORMAT = "textcbr-catalog/1"

OBJECT, SUPPORTER, CONTAINER, ROOM, AGENT = "object", "supporter", "container", "room", "agent"
KINDS = (OBJECT, SUPPORTER, CONTAINER, ROOM, AGENT)
RELATIONS = ("in", "on", "at", "carried", "exit-to")
SPLITS = ("train", "ood")
DIFFICULTIES = ("easy", "medium", "hard")

# template id -> slot kinds
TEMPLATES: dict[str, tuple[str, ...]] = {
    "TAKE": (OBJECT,),
    "DROP": (OBJECT,),
    "PUT_ON": (OBJECT, SUPPORTER),
    "INSERT_IN": (OBJECT, CONTAINER),
    "GO": (ROOM,),
}
TEMPLATE_IDS = tuple(TEMPLATES)
PLACING_TEMPLATES = ("PUT_ON", "INSERT_IN")

FIXTURES: tuple[tuple[str, str], ...] = (
    ("counter", SUPPORTER),
    ("fridge", CONTAINER),
    ("shelf", SUPPORTER),
    ("wardrobe", CONTAINER),
    ("table", SUPPORTER),
    ("washer", CONTAINER),
    ("bed", SUPPORTER),
    ("cabinet", CONTAINER),
    ("sofa", SUPPORTER),
    ("bin", CONTAINER),
    ("desk", SUPPORTER),
    ("drawer", CONTAINER),
)
ROOMS = ("kitchen", "bedroom", "bathroom", "lounge", "study", "hallway")
PLAYER = "you"

RENDER_WORDS = (
    "take", "drop", "put", "insert", "go", "to", "on", "in", "floor",
    "carrying", "nothing", "exits", "none", ":", ",", ".",
)

_SYLLABLES = (
    "ba", "ko", "ri", "zu", "fe", "mo", "ta", "li", "gro", "pes", "vin", "dra",
    "nu", "sha", "tek", "bor", "qui", "lam", "ost", "yel", "pha", "jin", "cru", "dov",
)

# (rooms, objects, distractor fixtures)
DIFFICULTY_LAYOUT = {
    "easy": (1, 3, 4),
    "medium": (2, 4, 4),
    "hard": (3, 5, 4),
}


class GenerationError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True)
class Entity:
    id: str
    name: str
    kind: str
    type_id: int
    split: str | None = None


@dataclass(frozen=True)
class EntityCatalog:
    entities: tuple[Entity, ...]
    fixtures: tuple[Entity, ...]
    prototypes: dict[int, np.ndarray]
    embeddings: dict[str, np.ndarray]
    targets: dict[int, str]
    d_emb: int
    sigma: float
    seed: int

    def __post_init__(self):
        for arr in list(self.prototypes.values()) + list(self.embeddings.values()):
            arr.flags.writeable = False
        index = {e.id: e for e in self.entities + self.fixtures}
        object.__setattr__(self, "_index", index)

    def entity(self, entity_id: str) -> Entity:
        try:
            return self._index[entity_id]  # type: ignore[attr-defined]
        except KeyError:
            raise KeyError(f"unknown entity {entity_id!r}") from None

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._index  # type: ignore[attr-defined]

    def embedding(self, entity_id: str) -> np.ndarray:
        if entity_id not in self.embeddings:
            raise KeyError(f"unknown entity {entity_id!r}")
        return self.embeddings[entity_id]

    def split(self, split: str) -> list[Entity]:
        return [e for e in self.entities if e.split == split]

    @property
    def splits(self) -> set[str]:
        return {e.split for e in self.entities if e.split is not None}

    def canonical_target(self, entity_id: str) -> str:
        return self.targets[self.entity(entity_id).type_id]

    def all_ids(self) -> list[str]:
        return [e.id for e in self.entities + self.fixtures]

    def to_json(self) -> str:
        payload = {
            "format": CATALOG_FORMAT,
            "seed": self.seed,
            "d_emb": self.d_emb,
            "sigma": self.sigma,
            "entities": [e.__dict__ for e in self.entities],
            "fixtures": [e.__dict__ for e in self.fixtures],
            "prototypes": {str(k): v.tolist() for k, v in sorted(self.prototypes.items())},
            "embeddings": {k: v.tolist() for k, v in sorted(self.embeddings.items())},
            "targets": {str(k): v for k, v in sorted(self.targets.items())},
        }
        return json.dumps(payload, sort_keys=True)


def _pseudo_words(rng: np.random.Generator, count: int, reserved: set[str]) -> list[str]:
    words: list[str] = []
    seen = set(reserved)
    while len(words) < count:
        n = int(rng.integers(2, 4))
        w = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_catalog(
    seed: int,
    n_types: int,
    n_train: int,
    n_ood: int,
    d_emb: int = 16,
    sigma: float = 0.1,
) -> EntityCatalog:
    """Typed object catalog; each object embedding is its type prototype plus
    isotropic Gaussian noise of std ``sigma``."""
    if n_ood > 0 and n_types < 2:
        raise ValueError("an ood split needs at least 2 types")
    if n_types < 1 or n_train < 1 or n_ood < 0:
        raise ValueError("n_types and n_train must be positive, n_ood non-negative")
    if n_types > len(FIXTURES) or n_types > d_emb:
        raise ValueError(f"n_types must be <= {min(len(FIXTURES), d_emb)}")
    rng = np.random.default_rng(seed)

    # orthonormal prototypes: pairwise distance sqrt(2) >= 1
    q, _ = np.linalg.qr(rng.normal(size=(d_emb, d_emb)))
    prototypes = {t: q[:, t].copy() for t in range(n_types)}

    train_types = [i % n_types for i in range(n_train)]
    present = sorted(set(train_types))
    ood_types = [present[i % len(present)] for i in range(n_ood)]

    reserved = {name for name, _ in FIXTURES} | set(ROOMS) | set(RENDER_WORDS) | {PLAYER}
    names = _pseudo_words(rng, n_train + n_ood, reserved)
    entities = []
    embeddings: dict[str, np.ndarray] = {}
    for i, (t, split) in enumerate(
        [(t, "train") for t in train_types] + [(t, "ood") for t in ood_types]
    ):
        e = Entity(id=names[i], name=names[i], kind=OBJECT, type_id=t, split=split)
        entities.append(e)
        embeddings[e.id] = prototypes[t] + rng.normal(0.0, sigma, size=d_emb)

    fixtures = []
    for j, (name, kind) in enumerate(FIXTURES):
        fixtures.append(Entity(id=name, name=name, kind=kind, type_id=n_types + j))
    for j, name in enumerate(ROOMS):
        fixtures.append(Entity(id=name, name=name, kind=ROOM, type_id=n_types + len(FIXTURES) + j))
    fixtures.append(Entity(id=PLAYER, name=PLAYER, kind=AGENT, type_id=-1))
    for e in fixtures:
        embeddings[e.id] = _unit(rng.normal(size=d_emb))

    targets = {t: FIXTURES[t][0] for t in range(n_types)}
    return EntityCatalog(
        entities=tuple(entities),
        fixtures=tuple(fixtures),
        prototypes=prototypes,
        embeddings=embeddings,
        targets=targets,
        d_emb=d_emb,
        sigma=sigma,
        seed=seed,
    )


def save_catalog(catalog: EntityCatalog, path: str | Path) -> None:
    Path(path).write_text(catalog.to_json(), encoding="utf-8")


def load_catalog(path: str | Path) -> EntityCatalog:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CATALOG_FORMAT:
        raise ValueError(f"catalog format {payload.get('format')!r}, expected {CATALOG_FORMAT!r}")
    return EntityCatalog(
        entities=tuple(Entity(**e) for e in payload["entities"]),
        fixtures=tuple(Entity(**e) for e in payload["fixtures"]),
        prototypes={int(k): np.array(v) for k, v in payload["prototypes"].items()},
        embeddings={k: np.array(v) for k, v in payload["embeddings"].items()},
        targets={int(k): v for k, v in payload["targets"].items()},
        d_emb=payload["d_emb"],
        sigma=payload["sigma"],
        seed=payload["seed"],
    )


@dataclass(frozen=True)
class GameSpec:
    difficulty: str
    rooms: int
    objects: int
    distractors: int
    max_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")
        if self.difficulty == "easy" and self.rooms != 1:
            raise ValueError("easy games have exactly one room")
        if self.difficulty != "easy" and self.rooms < 2:
            raise ValueError(f"{self.difficulty} games need at least two rooms")
        if self.max_steps <= 0 or self.objects <= 0 or self.distractors < 0:
            raise ValueError("max_steps and objects must be positive")
        if self.rooms > len(ROOMS):
            raise ValueError(f"at most {len(ROOMS)} rooms")

    @classmethod
    def for_difficulty(cls, difficulty: str, seed: int, max_steps: int = 50) -> GameSpec:
        rooms, objects, distractors = DIFFICULTY_LAYOUT[difficulty]
        return cls(difficulty, rooms, objects, distractors, max_steps, seed)


@dataclass(frozen=True, order=True)
class GroundedAction:
    template: str
    slots: tuple[str, ...]

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        if len(self.slots) != len(TEMPLATES[self.template]):
            raise ValueError(f"{self.template} takes {len(TEMPLATES[self.template])} slots")

    @property
    def text(self) -> str:
        s = self.slots
        if self.template == "TAKE":
            return f"take {s[0]}"
        if self.template == "DROP":
            return f"drop {s[0]}"
        if self.template == "PUT_ON":
            return f"put {s[0]} on {s[1]}"
        if self.template == "INSERT_IN":
            return f"insert {s[0]} in {s[1]}"
        return f"go to {s[0]}"

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class StateGraph:
    nodes: frozenset[str]
    edges: tuple[tuple[str, str, str], ...]

    @property
    def relations(self) -> set[str]:
        return set(RELATIONS) | {r for _, r, _ in self.edges}

    def neighbors(self) -> dict[str, set[str]]:
        """Undirected adjacency."""
        adj: dict[str, set[str]] = {v: set() for v in self.nodes}
        for v, _, u in self.edges:
            if v != u:
                adj[v].add(u)
                adj[u].add(v)
        return adj


@dataclass(frozen=True)
class Observation:
    text: str
    graph: StateGraph
    valid_actions: tuple[GroundedAction, ...]
    room: str = ""
    inventory: tuple[str, ...] = field(default_factory=tuple)


def normalized_score(raw: float, max_score: float) -> float:
    if max_score <= 0:
        raise ValueError("max_score must be positive")
    return float(min(1.0, max(0.0, raw / max_score)))


class Game:
    """Mutable single-threaded game instance."""

    def __init__(self, spec: GameSpec, catalog: EntityCatalog, split: str):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.spec = spec
        self.catalog = catalog
        self.split = split
        rng = np.random.default_rng(spec.seed)

        pool = catalog.split(split)
        if len(pool) < spec.objects:
            raise GenerationError(
                f"split {split!r} has {len(pool)} object entities, game needs "
                f"{spec.objects} (deficit {spec.objects - len(pool)})"
            )
        chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=spec.objects, replace=False))]
        self.objects = tuple(e.id for e in chosen)
        targets = sorted({catalog.targets[e.type_id] for e in chosen})
        spare = [name for name, _ in FIXTURES if name not in targets]
        if len(spare) < spec.distractors:
            raise GenerationError(
                f"need {spec.distractors} distractor fixtures, only {len(spare)} available "
                f"(deficit {spec.distractors - len(spare)})"
            )
        distractors = [spare[i] for i in sorted(rng.choice(len(spare), size=spec.distractors, replace=False))]
        self.fixtures = tuple(sorted(targets + distractors))
        self.rooms = tuple(ROOMS[i] for i in rng.choice(len(ROOMS), size=spec.rooms, replace=False))
        self.fixture_room = {f: self.rooms[int(rng.integers(len(self.rooms)))] for f in self.fixtures}
        self.exits = {r: set() for r in self.rooms}
        for a, b in zip(self.rooms, self.rooms[1:]):
            self.exits[a].add(b)
            self.exits[b].add(a)

        # location: (relation, holder) with relation in {at, on, in, carried}
        self.location: dict[str, tuple[str, str]] = {}
        for obj in self.objects:
            room = self.rooms[int(rng.integers(len(self.rooms)))]
            target = catalog.canonical_target(obj)
            spots = [("at", room)] + [
                (self._relation_for(f), f)
                for f in self.fixtures
                if self.fixture_room[f] == room and f != target
            ]
            self.location[obj] = spots[int(rng.integers(len(spots)))]
        self.player_room = self.rooms[0]
        self.placed: set[str] = set()
        self.steps = 0
        self.score = 0.0
        self.done = False

    @staticmethod
    def _relation_for(fixture: str) -> str:
        return "on" if dict(FIXTURES)[fixture] == SUPPORTER else "in"

    @property
    def max_score(self) -> float:
        return float(len(self.objects))

    def clone(self) -> Game:
        other = object.__new__(Game)
        other.__dict__.update(self.__dict__)
        other.location = dict(self.location)
        other.placed = set(self.placed)
        return other

    def room_of(self, obj: str) -> str | None:
        rel, holder = self.location[obj]
        if rel == "carried":
            return None
        if rel == "at":
            return holder
        return self.fixture_room[holder]

    def graph(self) -> StateGraph:
        edges: list[tuple[str, str, str]] = [(PLAYER, "at", self.player_room)]
        for f in self.fixtures:
            edges.append((f, "at", self.fixture_room[f]))
        for obj in self.objects:
            rel, holder = self.location[obj]
            edges.append((obj, rel, PLAYER if rel == "carried" else holder))
        for r in self.rooms:
            for other in sorted(self.exits[r]):
                edges.append((r, "exit-to", other))
        nodes = frozenset(self.objects) | frozenset(self.fixtures) | frozenset(self.rooms) | {PLAYER}
        return StateGraph(nodes=nodes, edges=tuple(sorted(edges)))

    def valid_actions(self) -> tuple[GroundedAction, ...]:
        if self.done:
            return ()
        here = self.player_room
        carried = sorted(o for o in self.objects if self.location[o][0] == "carried")
        reachable = sorted(o for o in self.objects if self.room_of(o) == here and o not in self.placed)
        local = [f for f in self.fixtures if self.fixture_room[f] == here]
        acts = [GroundedAction("TAKE", (o,)) for o in reachable]
        acts += [GroundedAction("DROP", (o,)) for o in carried]
        for o in carried:
            for f in local:
                tmpl = "PUT_ON" if dict(FIXTURES)[f] == SUPPORTER else "INSERT_IN"
                acts.append(GroundedAction(tmpl, (o, f)))
        acts += [GroundedAction("GO", (r,)) for r in sorted(self.exits[here])]
        return tuple(sorted(acts))

    def render(self) -> str:
        here = self.player_room
        local = [f for f in self.fixtures if self.fixture_room[f] == here]
        parts = [f"{here} : " + (" , ".join(local) if local else "none") + " ."]
        for obj in sorted(self.objects):
            rel, holder = self.location[obj]
            if rel == "at" and holder == here:
                parts.append(f"{obj} on floor .")
            elif rel in ("on", "in") and self.fixture_room[holder] == here:
                parts.append(f"{obj} {rel} {holder} .")
        carried = sorted(o for o in self.objects if self.location[o][0] == "carried")
        parts.append("carrying : " + (" , ".join(carried) if carried else "nothing") + " .")
        if len(self.rooms) > 1:
            parts.append("exits : " + " , ".join(sorted(self.exits[here])) + " .")
        return " ".join(parts)

    def observe(self) -> Observation:
        carried = tuple(sorted(o for o in self.objects if self.location[o][0] == "carried"))
        return Observation(
            text=self.render(),
            graph=self.graph(),
            valid_actions=self.valid_actions(),
            room=self.player_room,
            inventory=carried,
        )

    def step(self, action: GroundedAction) -> tuple[Observation, float, bool]:
        if self.done:
            raise InvalidActionError("game is over")
        if action not in self.valid_actions():
            raise InvalidActionError(f"action '{action}' is not valid in the current state")
        reward = 0.0
        t, s = action.template, action.slots
        if t == "TAKE":
            self.location[s[0]] = ("carried", PLAYER)
        elif t == "DROP":
            self.location[s[0]] = ("at", self.player_room)
        elif t in PLACING_TEMPLATES:
            obj, fixture = s
            self.location[obj] = ("on" if t == "PUT_ON" else "in", fixture)
            if fixture == self.catalog.canonical_target(obj) and obj not in self.placed:
                self.placed.add(obj)
                reward = 1.0
        elif t == "GO":
            self.player_room = s[0]
        self.steps += 1
        self.score += reward
        self.done = len(self.placed) == len(self.objects) or self.steps >= self.spec.max_steps
        return self.observe(), reward, self.done


def new_game(spec: GameSpec, catalog: EntityCatalog, split: str) -> tuple[Game, Observation]:
    game = Game(spec, catalog, split)
    return game, game.observe()


def step(game: Game, action: GroundedAction) -> tuple[Observation, float, bool]:
    return game.step(action)


# ---------------------------------------------------------------- game sets


@dataclass(frozen=True)
class GameRecord:
    game_id: str
    difficulty: str
    split: str
    seed: int

    def spec(self, max_steps: int = 50) -> GameSpec:
        return GameSpec.for_difficulty(self.difficulty, self.seed, max_steps)


def make_game_set(prefix: str, difficulty: str, split: str, seeds: Iterable[int]) -> list[GameRecord]:
    return [GameRecord(f"{prefix}-{difficulty}-{split}-{s}", difficulty, split, int(s)) for s in seeds]


def write_manifest(records: Iterable[GameRecord], path: str | Path) -> None:
    lines = [f"{r.game_id}\t{r.difficulty}\t{r.split}\t{r.seed}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> list[GameRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated columns")
        game_id, difficulty, split, seed = cols
        if difficulty not in DIFFICULTIES or split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: bad difficulty or split")
        records.append(GameRecord(game_id, difficulty, split, int(seed)))
    return records
