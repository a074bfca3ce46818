"""Discrete context keys: K-way D-dimensional codes plus alternative memory-key backends."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ParameterSet, Tensor

BACKENDS = ("vq", "none", "rp", "srp", "lsh", "entity")


@dataclass(frozen=True)
class KDCode:
    codes: tuple[int, ...]
    K: int

    def __post_init__(self):
        if not self.codes:
            raise ValueError("a KD code needs at least one partition")
        if any(not 0 <= c < self.K for c in self.codes):
            raise ValueError(f"code entries must lie in [0, {self.K})")

    @property
    def D(self) -> int:
        return len(self.codes)

    def as_array(self) -> np.ndarray:
        return np.array(self.codes, dtype=np.int64)


class Codebook:
    """K key vectors of dim d, each split into D partitions of size d/D."""

    def __init__(
        self,
        params: ParameterSet | None,
        K: int = 32,
        D: int = 16,
        d: int = 64,
        trainable: bool = True,
        name: str = "codebook",
        keys: np.ndarray | None = None,
    ):
        if K < 2:
            raise ValueError("codebook needs K >= 2")
        if d % D:
            raise ValueError("d must be divisible by D")
        self.K, self.D, self.d = K, D, d
        self.trainable = trainable
        if keys is not None:
            keys = np.asarray(keys, dtype=np.float64)
            if keys.shape != (K, d):
                raise ValueError(f"keys must have shape {(K, d)}")
        if trainable:
            if params is None:
                raise ValueError("a trainable codebook needs a parameter set")
            self.keys = params.gaussian(name, (K, d)) if keys is None else params.add(name, keys)
        else:
            rng = np.random.default_rng(0 if params is None else params.seed)
            self.keys = Tensor(rng.normal(size=(K, d)) if keys is None else keys)

    @property
    def partition(self) -> int:
        return self.d // self.D

    def partitioned_keys(self) -> np.ndarray:
        return self.keys.data.reshape(self.K, self.D, self.partition)

    def decode(self, code: KDCode | np.ndarray) -> np.ndarray:
        codes = code.as_array() if isinstance(code, KDCode) else np.asarray(code)
        parts = self.partitioned_keys()
        return parts[codes, np.arange(self.D)].reshape(-1)


def quantize_array(c: np.ndarray, book: Codebook) -> np.ndarray:
    """Per-partition nearest key indices; (d,) -> (D,), (B, d) -> (B, D).  Ties go to the lowest index."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != book.d:
        raise ValueError(f"context has dim {c.shape[-1]}, codebook expects {book.d}")
    flat = c.reshape(-1, book.D, book.partition)
    keys = book.partitioned_keys()  # (K, D, p)
    dist = ((flat[:, None, :, :] - keys[None, :, :, :]) ** 2).sum(axis=-1)  # (B, K, D)
    codes = dist.argmin(axis=1)
    return codes.reshape(c.shape[:-1] + (book.D,))


def quantize(c, book: Codebook) -> KDCode:
    values = c.values if hasattr(c, "values") else (c.data if isinstance(c, Tensor) else c)
    return KDCode(tuple(int(z) for z in quantize_array(values, book)), book.K)


def code_similarity(a, b) -> float:
    """Fraction of positions where the two codes agree."""
    av = np.asarray(a.codes if isinstance(a, KDCode) else a)
    bv = np.asarray(b.codes if isinstance(b, KDCode) else b)
    if av.shape != bv.shape:
        raise ValueError(f"code length mismatch: {av.shape} vs {bv.shape}")
    return float(np.mean(av == bv))


def st_embed(c: Tensor, book: Codebook) -> Tensor:
    """Quantized embedding whose gradient reaches ``c`` unchanged."""
    codes = quantize_array(c.data, book)
    parts = book.partitioned_keys()
    q = parts[codes, np.arange(book.D)].reshape(c.shape)
    return c + T.stop_gradient(Tensor(q) - c)


def quantization_pull(c: Tensor, book: Codebook) -> Tensor:
    """Mean over partitions of ||sg(c^j) - k^j_{z^j}||^2; moves keys toward contexts."""
    if not book.trainable:
        return Tensor(0.0)
    rows = c.data.reshape(-1, book.d)
    codes = quantize_array(rows, book)  # (B, D)
    keys = T.reshape(book.keys, (book.K, book.D, book.partition))
    chosen = T.take(keys, (codes, np.arange(book.D)[None, :]))  # (B, D, p)
    target = Tensor(rows.reshape(-1, book.D, book.partition))
    return T.mean(T.sqdist(target, chosen, axis=-1))


def soft_code_similarity(c: Tensor, other_codes: np.ndarray, book: Codebook) -> Tensor:
    """(1/D) sum_j cos(c^j, k^j_{other_j}); differentiable surrogate of code overlap."""
    keys = T.reshape(book.keys, (book.K, book.D, book.partition))
    other_codes = np.asarray(other_codes)
    chosen = T.take(keys, (other_codes, np.arange(book.D)))  # (D, p)
    parts = T.reshape(c, (book.D, book.partition))
    return T.mean(T.cosine(parts, chosen, axis=-1))


def st_code_similarity(c: Tensor, other_codes: np.ndarray, book: Codebook) -> Tensor:
    """Hard code overlap in the forward pass, soft-surrogate gradient in the backward pass."""
    soft = soft_code_similarity(c, other_codes, book)
    hard = code_similarity(quantize_array(c.data, book), other_codes)
    return soft + T.stop_gradient(Tensor(hard) - soft)


# ------------------------------------------------------------------ backends


class KeyBackend:
    """Turns continuous contexts into memory keys and scores stored keys."""

    tag = "base"
    discrete = False

    def transform(self, c: np.ndarray):
        raise NotImplementedError

    def transform_batch(self, cs: np.ndarray) -> list:
        return [self.transform(c) for c in cs]

    def similarities(self, query, keys: Sequence) -> np.ndarray:
        raise NotImplementedError

    def same_key(self, a, b) -> bool:
        return bool(np.array_equal(np.asarray(a), np.asarray(b)))

    def st_similarity(self, c: Tensor, key) -> Tensor:
        """Differentiable similarity between a live context and a stored key."""
        raise NotImplementedError

    # index hooks (LSH keeps buckets)
    def reset_index(self) -> None:
        pass

    def on_insert(self, idx: int, key) -> None:
        pass

    def candidates(self, query, n_entries: int) -> np.ndarray:
        return np.arange(n_entries)


class VQBackend(KeyBackend):
    tag = "vq"
    discrete = True

    def __init__(self, book: Codebook):
        self.book = book

    def transform(self, c: np.ndarray) -> KDCode:
        return KDCode(tuple(int(z) for z in quantize_array(c, self.book)), self.book.K)

    def transform_batch(self, cs: np.ndarray) -> list[KDCode]:
        codes = quantize_array(cs, self.book)
        return [KDCode(tuple(int(z) for z in row), self.book.K) for row in codes]

    def similarities(self, query: KDCode, keys: Sequence[KDCode]) -> np.ndarray:
        if not keys:
            return np.zeros(0)
        stored = np.array([k.codes for k in keys])
        return (stored == np.array(query.codes)[None, :]).mean(axis=1)

    def same_key(self, a: KDCode, b: KDCode) -> bool:
        return a.codes == b.codes

    def st_similarity(self, c: Tensor, key: KDCode) -> Tensor:
        return st_code_similarity(c, key.as_array(), self.book)


def _cosine_rows(query: np.ndarray, stored: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(query)
    sn = np.linalg.norm(stored, axis=1)
    return stored @ query / np.maximum(qn * sn, T.COSINE_EPS)


class ContinuousBackend(KeyBackend):
    """No quantization: keys are the raw context vectors, cosine similarity."""

    tag = "none"

    def transform(self, c: np.ndarray) -> np.ndarray:
        return np.array(c, dtype=np.float64)

    def transform_batch(self, cs: np.ndarray) -> list[np.ndarray]:
        return [np.array(c, dtype=np.float64) for c in cs]

    def similarities(self, query, keys) -> np.ndarray:
        if not len(keys):
            return np.zeros(0)
        return _cosine_rows(np.asarray(query), np.asarray(keys))

    def st_similarity(self, c: Tensor, key) -> Tensor:
        return T.cosine(c, Tensor(key))


class RandomProjectionBackend(ContinuousBackend):
    """p-dim Gaussian projection (entries ~ N(0, 1/p)), cosine similarity."""

    tag = "rp"

    def __init__(self, d: int, p: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.R = rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, d))

    def transform(self, c: np.ndarray) -> np.ndarray:
        return self.R @ np.asarray(c)

    def transform_batch(self, cs: np.ndarray) -> list[np.ndarray]:
        return list(np.asarray(cs) @ self.R.T)

    def st_similarity(self, c: Tensor, key) -> Tensor:
        return T.cosine(Tensor(self.R) @ T.reshape(c, (-1, 1)), Tensor(np.asarray(key).reshape(-1, 1)), axis=0)


class SignRandomProjectionBackend(RandomProjectionBackend):
    """Sign bits of a random projection; similarity = fraction of equal bits."""

    tag = "srp"
    discrete = True

    def transform(self, c: np.ndarray) -> np.ndarray:
        return np.where(self.R @ np.asarray(c) >= 0, 1, -1).astype(np.int8)

    def transform_batch(self, cs: np.ndarray) -> list[np.ndarray]:
        return list(np.where(np.asarray(cs) @ self.R.T >= 0, 1, -1).astype(np.int8))

    def similarities(self, query, keys) -> np.ndarray:
        if not len(keys):
            return np.zeros(0)
        return (np.asarray(keys) == np.asarray(query)[None, :]).mean(axis=1)

    def st_similarity(self, c: Tensor, key) -> Tensor:
        proj = T.reshape(Tensor(self.R) @ T.reshape(c, (-1, 1)), (-1,))
        soft = 0.5 * (1.0 + T.cosine(proj, Tensor(np.asarray(key, dtype=np.float64))))
        hard = float(np.mean(np.where(proj.data >= 0, 1, -1) == np.asarray(key)))
        return soft + T.stop_gradient(Tensor(hard) - soft)


class LSHBackend(ContinuousBackend):
    """l hash tables of h-bit hyperplane codes; buckets keep their most recent entries.

    Retrieval scores entries sharing at least one bucket with the query by cosine.
    """

    tag = "lsh"

    def __init__(self, d: int, tables: int = 16, bits: int = 8, bucket_cap: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.planes = rng.normal(size=(tables, bits, d))
        self.weights = 1 << np.arange(bits)
        self.bucket_cap = bucket_cap
        self.reset_index()

    def reset_index(self) -> None:
        self.buckets: list[dict[int, deque]] = [dict() for _ in range(len(self.planes))]

    def hashes(self, c: np.ndarray) -> np.ndarray:
        bits = (np.einsum("tbd,d->tb", self.planes, np.asarray(c)) >= 0).astype(np.int64)
        return bits @ self.weights

    def on_insert(self, idx: int, key) -> None:
        for table, h in zip(self.buckets, self.hashes(key)):
            table.setdefault(int(h), deque(maxlen=self.bucket_cap)).append(idx)

    def candidates(self, query, n_entries: int) -> np.ndarray:
        found: set[int] = set()
        for table, h in zip(self.buckets, self.hashes(query)):
            found.update(table.get(int(h), ()))
        return np.array(sorted(i for i in found if i < n_entries), dtype=np.int64)


class EntityBackend(KeyBackend):
    """Keys are focus entity ids; similarity is the cosine of their live FFN encodings."""

    tag = "entity"
    discrete = True

    def __init__(self, encoder):
        self.encoder = encoder
        self._cache: dict[str, np.ndarray] = {}

    def transform(self, c) -> str:
        return str(c)

    def _vectors(self, ids: Sequence[str]) -> np.ndarray:
        missing = [e for e in dict.fromkeys(ids) if e not in self._cache]
        if missing:
            with T.no_grad():
                out = self.encoder.forward(missing).data
            for e, row in zip(missing, out):
                self._cache[e] = row
        return np.array([self._cache[e] for e in ids])

    def invalidate(self) -> None:
        """Drop cached encodings; call after every encoder update."""
        self._cache.clear()

    def similarities(self, query: str, keys: Sequence[str]) -> np.ndarray:
        if not keys:
            return np.zeros(0)
        vecs = self._vectors([query] + list(keys))
        return _cosine_rows(vecs[0], vecs[1:])

    def same_key(self, a: str, b: str) -> bool:
        return a == b

    def st_similarity(self, c: Tensor, key: str) -> Tensor:
        other = self.encoder.forward([key])
        return T.cosine(T.reshape(c, (1, -1)), other)[0]


def make_backend(tag: str, *, book: Codebook | None = None, d: int = 64, p: int = 64,
                 tables: int = 16, bits: int = 8, bucket_cap: int = 4, seed: int = 0,
                 entity_encoder=None) -> KeyBackend:
    if tag == "vq":
        if book is None:
            raise ValueError("vq backend needs a codebook")
        return VQBackend(book)
    if tag == "none":
        return ContinuousBackend()
    if tag == "rp":
        return RandomProjectionBackend(d, p, seed)
    if tag == "srp":
        return SignRandomProjectionBackend(d, p, seed)
    if tag == "lsh":
        return LSHBackend(d, tables, bits, bucket_cap, seed)
    if tag == "entity":
        if entity_encoder is None:
            raise ValueError("entity backend needs an entity encoder")
        return EntityBackend(entity_encoder)
    raise ValueError(f"unconfigured backend {tag!r}")


def backend_transform(c, backend: KeyBackend):
    values = c.values if hasattr(c, "values") else c
    return backend.transform(values)
