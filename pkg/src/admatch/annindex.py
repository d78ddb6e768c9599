"""Normalized ad-vector store with exact and product-quantized search.

Vectors are L2-normalized on the way in, so inner products equal cosine
similarity and higher scores are better. The exact path is the oracle;
the PQ path quantizes each of M subspaces with its own k-means codebook
and scores codes against a per-query lookup table (asymmetric distance
computation), optionally re-ranking an overfetched candidate set with
exact dot products.

Searches read an immutable snapshot; ``add`` builds a new snapshot and
swaps it in atomically, so concurrent readers never see torn state.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .autodiff import DegenerateVectorError
from .data import AdDescriptor, Vocabulary, ad_item_from_descriptor
from .model import MatchingModel

logger = logging.getLogger(__name__)

_MAGIC = b"ADMIDX01"
_FORMAT_VERSION = 1


class PqTrainingError(ValueError):
    """Product quantization cannot be trained on the given vectors."""


@dataclass
class PqCodebooks:
    """Per-subspace centroid tables, shape [M, k, d/M] (float32)."""

    centroids: np.ndarray

    @property
    def n_subspaces(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_centroids(self) -> int:
        return self.centroids.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]


def _kmeans_pp_init(
    data: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Seeded k-means++ seeding over one subspace."""
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = data[first]
    d2 = ((data - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass is on existing centers; reuse points
            centers[j] = data[int(rng.integers(n))]
            continue
        target = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), target))
        idx = min(idx, n - 1)
        centers[j] = data[idx]
        d2 = np.minimum(d2, ((data - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(
    data: np.ndarray, k: int, iterations: int, rng: np.random.Generator
) -> tuple[np.ndarray, list[float]]:
    """Lloyd iterations; empty clusters keep their previous centroid so
    the mean quantization error never increases."""
    centers = _kmeans_pp_init(data, k, rng)
    errors: list[float] = []
    for _ in range(iterations):
        # squared distances via the expansion ||x||^2 - 2 x.c + ||c||^2
        cross = data @ centers.T
        d2 = (
            (data * data).sum(axis=1)[:, None]
            - 2.0 * cross
            + (centers * centers).sum(axis=1)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        errors.append(float(np.maximum(d2[np.arange(len(data)), assign], 0.0).mean()))
        for j in range(k):
            members = data[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers, errors


@dataclass
class PqTrainResult:
    codebooks: PqCodebooks
    error_history: np.ndarray  # [M x iterations] mean squared error, per Lloyd pass


def pq_train(
    vectors: np.ndarray,
    n_subspaces: int = 16,
    n_centroids: int = 256,
    iterations: int = 25,
    seed: int = 0,
) -> PqTrainResult:
    """Train per-subspace k-means codebooks on [n x d] vectors."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("training vectors must be a 2-d array")
    n, d = vectors.shape
    if n_centroids > 256:
        raise PqTrainingError("more than 256 centroids would not fit one code byte")
    if d % n_subspaces != 0:
        raise PqTrainingError(
            f"dimension {d} is not divisible by {n_subspaces} subspaces"
        )
    if n < n_centroids:
        raise PqTrainingError(
            f"{n} vectors cannot train {n_centroids} centroids per subspace"
        )
    rng = np.random.default_rng(seed)
    sub = d // n_subspaces
    centroids = np.empty((n_subspaces, n_centroids, sub), dtype=np.float32)
    history = np.empty((n_subspaces, iterations), dtype=np.float64)
    for m in range(n_subspaces):
        block = vectors[:, m * sub : (m + 1) * sub]
        centers, errors = _lloyd(block, n_centroids, iterations, rng)
        centroids[m] = centers.astype(np.float32)
        history[m] = errors
    return PqTrainResult(PqCodebooks(centroids), history)


def pq_encode(codebooks: PqCodebooks, vectors: np.ndarray) -> np.ndarray:
    """Nearest-centroid codes per subspace, [n x M] uint8."""
    vectors = np.asarray(vectors, dtype=np.float64)
    m_total = codebooks.n_subspaces
    sub = codebooks.sub_dim
    codes = np.empty((vectors.shape[0], m_total), dtype=np.uint8)
    for m in range(m_total):
        block = vectors[:, m * sub : (m + 1) * sub]
        centers = codebooks.centroids[m].astype(np.float64)
        d2 = (
            (block * block).sum(axis=1)[:, None]
            - 2.0 * (block @ centers.T)
            + (centers * centers).sum(axis=1)[None, :]
        )
        codes[:, m] = np.argmin(d2, axis=1).astype(np.uint8)
    return codes


def pq_decode(codebooks: PqCodebooks, codes: np.ndarray) -> np.ndarray:
    """Centroid reconstruction of coded vectors, [n x d]."""
    parts = [
        codebooks.centroids[m][codes[:, m]].astype(np.float64)
        for m in range(codebooks.n_subspaces)
    ]
    return np.concatenate(parts, axis=1)


def normalize(vector: np.ndarray) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise DegenerateVectorError("cannot index a zero-norm vector")
    return vector / norm


@dataclass(frozen=True)
class _Snapshot:
    ids: tuple[str, ...]
    vectors: np.ndarray  # [n x d] float32, unit norm
    codes: np.ndarray | None  # [n x M] uint8 when PQ is trained

    @property
    def size(self) -> int:
        return len(self.ids)


class AnnIndex:
    """Ad-id to unit-vector store with exact and PQ search modes."""

    def __init__(self, dim: int, codebooks: PqCodebooks | None = None) -> None:
        if dim < 1:
            raise ValueError("dimension must be positive")
        if codebooks is not None and dim % codebooks.n_subspaces != 0:
            raise ValueError("dimension not divisible by the PQ subspace count")
        self.dim = dim
        self.codebooks = codebooks
        self._snap = _Snapshot(
            (),
            np.zeros((0, dim), dtype=np.float32),
            np.zeros((0, codebooks.n_subspaces), dtype=np.uint8) if codebooks else None,
        )

    # ------------------------------------------------------------------

    def __len__(self) -> int:
        return self._snap.size

    def ids(self) -> tuple[str, ...]:
        return self._snap.ids

    def vector_for(self, ad_id: str) -> np.ndarray:
        snap = self._snap
        try:
            pos = snap.ids.index(ad_id)
        except ValueError:
            raise KeyError(f"ad {ad_id!r} not in index") from None
        return snap.vectors[pos].astype(np.float64)

    def add(self, ad_id: str, vector: np.ndarray) -> None:
        """Normalize, store, and (when PQ is trained) encode one vector.

        A duplicate ad id replaces the stored entry with a warning.
        Publication is a single snapshot swap, so readers never observe
        a half-applied add.
        """
        unit = normalize(vector).astype(np.float32)
        if unit.shape != (self.dim,):
            raise ValueError(f"expected a {self.dim}-d vector, got {unit.shape}")
        snap = self._snap
        ids = list(snap.ids)
        vectors = snap.vectors
        codes = snap.codes
        if ad_id in ids:
            logger.warning("replacing existing index entry for ad %s", ad_id)
            pos = ids.index(ad_id)
            vectors = vectors.copy()
            vectors[pos] = unit
            if codes is not None:
                codes = codes.copy()
                codes[pos] = pq_encode(self.codebooks, unit[None, :].astype(np.float64))[0]
        else:
            ids.append(ad_id)
            vectors = np.concatenate([vectors, unit[None, :]], axis=0)
            if codes is not None:
                new_code = pq_encode(self.codebooks, unit[None, :].astype(np.float64))
                codes = np.concatenate([codes, new_code], axis=0)
        self._snap = _Snapshot(tuple(ids), vectors, codes)

    def add_many(self, pairs: Iterable[tuple[str, np.ndarray]]) -> None:
        for ad_id, vector in pairs:
            self.add(ad_id, vector)

    # ------------------------------------------------------------------

    @staticmethod
    def _top_by_score(
        ids: Sequence[str], scores: np.ndarray, k: int
    ) -> list[tuple[str, float]]:
        """Top-k by descending score; exact ties break by ascending ad id."""
        order = np.lexsort((np.asarray(ids), -scores))[:k]
        return [(ids[i], float(scores[i])) for i in order]

    def exact_topk(self, query: np.ndarray, k: int) -> list[tuple[str, float]]:
        """Exhaustive inner-product search: the oracle for the PQ path."""
        if k < 1:
            raise ValueError("k must be >= 1")
        snap = self._snap
        if snap.size == 0:
            return []
        query = np.asarray(query, dtype=np.float64)
        scores = snap.vectors @ query
        return self._top_by_score(snap.ids, scores, k)

    def train_pq(
        self,
        n_subspaces: int = 16,
        n_centroids: int = 256,
        iterations: int = 25,
        seed: int = 0,
    ) -> PqTrainResult:
        """(Re)train codebooks on the stored vectors and encode them all."""
        snap = self._snap
        result = pq_train(
            snap.vectors.astype(np.float64),
            n_subspaces=n_subspaces,
            n_centroids=n_centroids,
            iterations=iterations,
            seed=seed,
        )
        self.codebooks = result.codebooks
        codes = pq_encode(self.codebooks, snap.vectors.astype(np.float64))
        self._snap = _Snapshot(snap.ids, snap.vectors, codes)
        return result

    def pq_search(
        self,
        query: np.ndarray,
        k: int,
        overfetch_factor: int = 10,
        rerank: bool = True,
    ) -> list[tuple[str, float]]:
        """ADC search: subspace lookup tables score the codes; the top
        k * overfetch_factor candidates are optionally re-ranked exactly.

        Falls back to exact search when PQ was never trained.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if overfetch_factor < 1:
            raise ValueError("overfetch_factor must be >= 1")
        snap = self._snap
        if self.codebooks is None or snap.codes is None:
            logger.warning("PQ codebooks absent; falling back to exact search")
            return self.exact_topk(query, k)
        if snap.size == 0:
            return []
        query = np.asarray(query, dtype=np.float64)
        cb = self.codebooks
        sub = cb.sub_dim
        # lookup[m, c] = dot(query subvector m, centroid c of subspace m)
        lookup = np.empty((cb.n_subspaces, cb.n_centroids), dtype=np.float64)
        for m in range(cb.n_subspaces):
            lookup[m] = cb.centroids[m].astype(np.float64) @ query[m * sub : (m + 1) * sub]
        approx = lookup[np.arange(cb.n_subspaces)[None, :], snap.codes].sum(axis=1)
        pool = self._top_by_score(snap.ids, approx, k * overfetch_factor)
        if not rerank:
            return pool[:k]
        pool_ids = [ad_id for ad_id, _ in pool]
        pos = {ad_id: i for i, ad_id in enumerate(snap.ids)}
        rows = np.array([pos[a] for a in pool_ids], dtype=np.intp)
        exact = snap.vectors[rows] @ query
        return self._top_by_score(pool_ids, exact, k)

    # ------------------------------------------------------------------
    # file format: little-endian header + codebooks + codes + vectors + ids

    def save(self, path: str | Path) -> None:
        snap = self._snap
        has_pq = self.codebooks is not None
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(
                struct.pack(
                    "<IIIIQ",
                    _FORMAT_VERSION,
                    self.dim,
                    self.codebooks.n_subspaces if has_pq else 0,
                    self.codebooks.n_centroids if has_pq else 0,
                    snap.size,
                )
            )
            if has_pq:
                fh.write(self.codebooks.centroids.astype("<f4").tobytes())
                fh.write(snap.codes.tobytes())
            fh.write(snap.vectors.astype("<f4").tobytes())
            for ad_id in snap.ids:
                raw = ad_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)

    @classmethod
    def load(cls, path: str | Path) -> "AnnIndex":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _MAGIC:
                raise ValueError(f"not an index file (magic {magic!r})")
            version, dim, m_sub, k_cent, count = struct.unpack("<IIIIQ", fh.read(24))
            if version != _FORMAT_VERSION:
                raise ValueError(f"unsupported index version {version}")
            codebooks = None
            codes = None
            if m_sub:
                sub = dim // m_sub
                cb = np.frombuffer(
                    fh.read(4 * m_sub * k_cent * sub), dtype="<f4"
                ).reshape(m_sub, k_cent, sub)
                codebooks = PqCodebooks(cb.copy())
                codes = np.frombuffer(fh.read(count * m_sub), dtype=np.uint8).reshape(
                    count, m_sub
                ).copy()
            vectors = np.frombuffer(fh.read(4 * count * dim), dtype="<f4").reshape(
                count, dim
            ).copy()
            ids = []
            for _ in range(count):
                (length,) = struct.unpack("<I", fh.read(4))
                ids.append(fh.read(length).decode("utf-8"))
        index = cls(dim, codebooks)
        index._snap = _Snapshot(tuple(ids), vectors, codes)
        return index


# ----------------------------------------------------------------------
# offline export


def export_ad_vectors(
    model: MatchingModel,
    ads: Sequence[AdDescriptor],
    vocab: Vocabulary,
    batch_size: int = 512,
) -> Iterator[tuple[str, np.ndarray]]:
    """Offline ad-tower inference: yields (ad_id, unit-norm vector).

    Ads whose encoder output has zero norm are skipped with a warning;
    the inner product against these normalized vectors equals cosine
    against the raw tower outputs.
    """
    for lo in range(0, len(ads), batch_size):
        chunk = ads[lo : lo + batch_size]
        items = [ad_item_from_descriptor(a, vocab) for a in chunk]
        raw = model.ad_forward(items).data
        norms = np.linalg.norm(raw, axis=1)
        for descriptor, row, norm in zip(chunk, raw, norms):
            if norm == 0.0:
                logger.warning(
                    "skipping ad %s: degenerate zero-norm encoder output",
                    descriptor.item_id,
                )
                continue
            yield descriptor.item_id, row / norm


def build_exact_index(
    model: MatchingModel,
    ads: Sequence[AdDescriptor],
    vocab: Vocabulary,
) -> AnnIndex:
    """Export all ad vectors into a fresh exact-mode index."""
    index = AnnIndex(model.config.d)
    index.add_many(export_ad_vectors(model, ads, vocab))
    return index
