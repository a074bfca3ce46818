"""Case memory: keyed store of (context key, action template) cases."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .quantizer import KDCode, KeyBackend
from .world import KINDS, TEMPLATE_IDS

MEMORY_MAGIC = b"TCMM"
MEMORY_VERSION = 1
RETAIN_KINDS = ("lastk", "rewarded", "td")
NO_VQ_CAP = 5000


class SnapshotError(ValueError):
    pass


@dataclass
class CaseEntry:
    key: object
    template: str
    signature: tuple[str, ...]
    step: int
    hits: int = 0
    slots: tuple[str, ...] = ()

    def __post_init__(self):
        if self.template not in TEMPLATE_IDS:
            raise ValueError(f"unknown template {self.template!r}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CaseEntry):
            return NotImplemented
        return (
            _key_bytes(self.key) == _key_bytes(other.key)
            and (self.template, self.signature, self.step, self.hits, self.slots)
            == (other.template, other.signature, other.step, other.hits, other.slots)
        )


@dataclass(frozen=True)
class CasePair:
    """One (context key, action) element of a trajectory tail."""

    key: object
    template: str
    signature: tuple[str, ...]
    slots: tuple[str, ...] = ()


@dataclass(frozen=True)
class RetainPolicy:
    kind: str = "lastk"
    k: int = 3

    def __post_init__(self):
        if self.kind not in RETAIN_KINDS:
            raise ValueError(f"unknown retain policy {self.kind!r}")
        if self.k < 1:
            raise ValueError("retain k must be >= 1")


def _key_bytes(key) -> bytes:
    if isinstance(key, KDCode):
        return b"c" + struct.pack(f"<{len(key.codes)}H", *key.codes)
    if isinstance(key, str):
        return b"s" + key.encode("utf-8")
    arr = np.asarray(key)
    return b"a" + arr.dtype.str.encode() + arr.tobytes()


@dataclass
class CaseMemory:
    backend: KeyBackend
    cap: int | None = None
    entries: list[CaseEntry] = field(default_factory=list)
    clock: int = 0

    def __post_init__(self):
        if self.cap is not None and self.cap < 1:
            raise ValueError("memory cap must be positive")
        self._lookup: dict[tuple[bytes, str], int] = {}
        self._stacked = None
        self._reindex()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def tag(self) -> str:
        return self.backend.tag

    def _reindex(self) -> None:
        self._lookup = {(_key_bytes(e.key), e.template): i for i, e in enumerate(self.entries)}
        self.backend.reset_index()
        for i, e in enumerate(self.entries):
            self.backend.on_insert(i, e.key)
        self._stacked = None

    def check_key(self, key) -> None:
        tag = self.backend.tag
        if tag == "vq":
            ok = isinstance(key, KDCode) and key.D == self.backend.book.D
        elif tag == "entity":
            ok = isinstance(key, str)
        else:
            ok = isinstance(key, np.ndarray) and key.ndim == 1
        if not ok:
            raise TypeError(f"key of type {type(key).__name__} does not match backend {tag!r}")

    def _keys(self):
        if self._stacked is None:
            keys = [e.key for e in self.entries]
            if self.backend.tag in ("vq", "entity"):
                self._stacked = keys
            else:
                self._stacked = np.array(keys) if keys else np.zeros((0, 0))
        return self._stacked

    def similarities(self, query) -> tuple[np.ndarray, np.ndarray]:
        """(entry indices, similarities) for the backend's candidate set."""
        self.check_key(query)
        if not self.entries:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        idx = self.backend.candidates(query, len(self.entries))
        if len(idx) == 0:
            return idx, np.zeros(0)
        keys = self._keys()
        if len(idx) == len(self.entries):
            sub = keys
        elif isinstance(keys, list):
            sub = [keys[i] for i in idx]
        else:
            sub = keys[idx]
        return idx, np.asarray(self.backend.similarities(query, sub), dtype=np.float64)

    def retrieve(self, query, tau: float) -> tuple[CaseEntry, float] | None:
        idx, sims = self.similarities(query)
        if len(idx) == 0:
            return None
        best = sims.max()
        if not best > tau:
            return None
        ties = idx[sims == best]
        winner = max(ties, key=lambda i: (self.entries[i].step, i))
        return self.entries[int(winner)], float(best)

    def insert(self, pair: CasePair) -> bool:
        """Add a case; returns False (and bumps the hit count) for a duplicate."""
        self.check_key(pair.key)
        if pair.template not in TEMPLATE_IDS:
            raise ValueError(f"unknown template {pair.template!r}")
        lk = (_key_bytes(pair.key), pair.template)
        self.clock += 1
        if lk in self._lookup:
            self.entries[self._lookup[lk]].hits += 1
            return False
        entry = CaseEntry(pair.key, pair.template, tuple(pair.signature), self.clock, 0, tuple(pair.slots))
        self.entries.append(entry)
        self._lookup[lk] = len(self.entries) - 1
        self.backend.on_insert(len(self.entries) - 1, entry.key)
        self._stacked = None
        if self.cap is not None and len(self.entries) > self.cap:
            del self.entries[: len(self.entries) - self.cap]
            self._reindex()
        return True


def retain(
    mem: CaseMemory,
    tail: Sequence[CasePair],
    reward: float,
    policy: RetainPolicy,
    td_errors: Sequence[float] | None = None,
    rng: np.random.Generator | None = None,
) -> int:
    """Store cases after a rewarded step; ``tail`` is most-recent-first.

    For the TD policy ``tail`` is the whole episode so far and ``td_errors``
    aligns with ``tail[1:]``.  Returns the number of new entries.
    """
    if policy.kind == "td" and td_errors is None:
        raise ValueError("td-error retain policy requires td errors")
    if reward <= 0 or not tail:
        return 0
    if policy.kind == "lastk":
        chosen = list(tail[: policy.k])
    elif policy.kind == "rewarded":
        chosen = [tail[0]]
    else:
        rest = list(tail[1:])
        weights = np.abs(np.asarray(td_errors, dtype=np.float64))[: len(rest)]
        if len(weights) != len(rest):
            raise ValueError("td errors must align with the episode tail")
        chosen = [tail[0]]
        n = min(policy.k - 1, len(rest))
        if n > 0:
            if rng is None:
                raise ValueError("td-error sampling needs an rng")
            total = weights.sum()
            probs = weights / total if total > 0 else np.full(len(rest), 1.0 / len(rest))
            n = min(n, int(np.count_nonzero(probs)))
            picks = rng.choice(len(rest), size=n, replace=False, p=probs)
            chosen += [rest[i] for i in sorted(picks)]
    return sum(mem.insert(p) for p in chosen)


# ------------------------------------------------------------- snapshots


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SnapshotError("memory snapshot is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def snapshot(mem: CaseMemory, path: str | Path) -> None:
    tag = mem.backend.tag
    book = getattr(mem.backend, "book", None)
    K, D = (book.K, book.D) if book is not None else (0, 0)
    dim, dtype = 0, "f8"
    if tag not in ("vq", "entity") and mem.entries:
        first = np.asarray(mem.entries[0].key)
        dim, dtype = first.shape[0], ("i1" if first.dtype == np.int8 else "f8")
    out = [MEMORY_MAGIC, struct.pack("<H", MEMORY_VERSION), _pack_str(tag)]
    out.append(struct.pack("<HHI", K, D, dim) + _pack_str(dtype))
    out.append(struct.pack("<IQ", mem.cap or 0, mem.clock))
    out.append(struct.pack("<H", len(TEMPLATE_IDS)) + b"".join(_pack_str(t) for t in TEMPLATE_IDS))
    out.append(struct.pack("<I", len(mem.entries)))
    tmpl_index = {t: i for i, t in enumerate(TEMPLATE_IDS)}
    kind_index = {k: i for i, k in enumerate(KINDS)}
    for e in mem.entries:
        if tag == "vq":
            out.append(struct.pack(f"<{D}H", *e.key.codes))
        elif tag == "entity":
            out.append(_pack_str(e.key))
        else:
            out.append(np.asarray(e.key, dtype="<" + dtype if dtype == "f8" else dtype).tobytes())
        out.append(struct.pack("<HB", tmpl_index[e.template], len(e.signature)))
        out.append(bytes(kind_index[k] for k in e.signature))
        out.append(struct.pack("<QIB", e.step, e.hits, len(e.slots)))
        out.extend(_pack_str(v) for v in e.slots)
    Path(path).write_bytes(b"".join(out))


def restore(path: str | Path, backend: KeyBackend) -> CaseMemory:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MEMORY_MAGIC:
        raise SnapshotError("not a case-memory snapshot")
    (version,) = r.unpack("<H")
    if version != MEMORY_VERSION:
        raise SnapshotError(f"snapshot format version {version}, this build reads version {MEMORY_VERSION}")
    tag = r.string()
    if tag != backend.tag:
        raise SnapshotError(f"snapshot backend {tag!r} does not match configured backend {backend.tag!r}")
    K, D, dim = r.unpack("<HHI")
    dtype = r.string()
    book = getattr(backend, "book", None)
    if tag == "vq" and (book.K, book.D) != (K, D):
        raise SnapshotError(f"snapshot codes are K={K}, D={D}; codebook is K={book.K}, D={book.D}")
    cap, clock = r.unpack("<IQ")
    (n_tmpl,) = r.unpack("<H")
    templates = [r.string() for _ in range(n_tmpl)]
    unknown = set(templates) - set(TEMPLATE_IDS)
    if unknown:
        raise SnapshotError(f"snapshot uses unknown templates {sorted(unknown)}")
    (count,) = r.unpack("<I")
    entries = []
    width = 1 if dtype == "i1" else 8
    for _ in range(count):
        if tag == "vq":
            key = KDCode(r.unpack(f"<{D}H"), K)
        elif tag == "entity":
            key = r.string()
        else:
            key = np.frombuffer(r.take(dim * width), dtype=np.int8 if dtype == "i1" else "<f8").copy()
            if dtype != "i1":
                key = key.astype(np.float64)
        t_idx, n_sig = r.unpack("<HB")
        sig = tuple(KINDS[i] for i in r.take(n_sig))
        step, hits, n_slots = r.unpack("<QIB")
        slots = tuple(r.string() for _ in range(n_slots))
        entries.append(CaseEntry(key, templates[t_idx], sig, step, hits, slots))
    if r.pos != len(r.data):
        raise SnapshotError("trailing bytes after memory snapshot")
    return CaseMemory(backend, cap or None, entries, clock)
