"""Text embeddings in two spaces: semantic (clustering) and classifier (detection weights).

Real encoder services sit behind the same ``embed_text`` provider interface as
the deterministic synthetic providers used throughout the tests. Matrices are
stored in the LEMB flat binary container:

    magic    4 bytes  b"LEMB"
    version  u32 LE   (currently 1)
    space    u8       0 = semantic, 1 = classifier
    dim      u32 LE
    count    u64 LE
    ids      count * i64 LE
    rows     count * dim * f32 LE, row-major

A JSON sidecar at ``<path>.json`` records provider metadata.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from lami.errors import EmbeddingError

LEMB_MAGIC = b"LEMB"
LEMB_VERSION = 1
_SPACE_CODES = {"semantic": 0, "classifier": 1}
_SPACE_NAMES = {v: k for k, v in _SPACE_CODES.items()}

# Rows whose norm is already this close to 1 are stored untouched, so that
# normalize(normalize(v)) == normalize(v) bit-exactly and file fixtures round-trip.
_NORM_SKIP_TOL = 1e-6


class TextEmbeddingProvider(Protocol):
    dim: int

    def embed_text(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise EmbeddingError("cannot normalize a zero vector")
    if abs(norm - 1.0) <= _NORM_SKIP_TOL:
        return v
    return v / norm


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Unit-row matrix aligned to ascending concept ids, tagged by space."""

    space: str
    dim: int
    ids: tuple[int, ...]
    rows: np.ndarray  # |ids| x dim float32
    _index: Mapping[int, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if self.space not in _SPACE_CODES:
            raise EmbeddingError(f"unknown embedding space {self.space!r}")
        rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if rows.shape != (len(self.ids), self.dim):
            raise EmbeddingError(
                f"rows shape {rows.shape} does not match ({len(self.ids)}, {self.dim})"
            )
        if len(set(self.ids)) != len(self.ids):
            raise EmbeddingError("duplicate ids in embedding matrix")
        if any(a >= b for a, b in zip(self.ids, self.ids[1:])):
            raise EmbeddingError("ids must be sorted ascending")
        if len(self.ids):
            norms = np.linalg.norm(rows.astype(np.float64), axis=1)
            bad = np.nonzero(np.abs(norms - 1.0) > 1e-6)[0]
            if bad.size:
                raise EmbeddingError(f"rows not unit-normalized at positions {bad.tolist()}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "_index", {cid: i for i, cid in enumerate(self.ids)})

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self, concept_id: int) -> int:
        if concept_id not in self._index:
            raise EmbeddingError(f"concept id {concept_id} not in embedding matrix")
        return self._index[concept_id]

    def row_for(self, concept_id: int) -> np.ndarray:
        return self.rows[self.index_of(concept_id)]

    def submatrix(self, ids: Iterable[int]) -> "EmbeddingMatrix":
        wanted = sorted(set(ids))
        rows = np.stack([self.row_for(i) for i in wanted]) if wanted else np.zeros((0, self.dim), np.float32)
        return EmbeddingMatrix(space=self.space, dim=self.dim, ids=tuple(wanted), rows=rows)


def _build_matrix(space: str, items: Sequence[tuple[int, np.ndarray]], dim: int) -> EmbeddingMatrix:
    by_id: dict[int, np.ndarray] = {}
    for cid, vec in items:
        if cid in by_id:
            raise EmbeddingError(f"duplicate concept id {cid}")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (dim,):
            raise EmbeddingError(f"provider returned dim {vec.shape} for id {cid}, expected ({dim},)")
        by_id[cid] = _unit(vec)
    ids = tuple(sorted(by_id))
    rows = (
        np.stack([by_id[i] for i in ids]).astype(np.float32)
        if ids
        else np.zeros((0, dim), np.float32)
    )
    return EmbeddingMatrix(space=space, dim=dim, ids=ids, rows=rows)


def embed_semantic(descriptions: Sequence, provider: TextEmbeddingProvider) -> EmbeddingMatrix:
    """Embed one description per concept into the semantic (clustering) space."""
    items = [(d.concept_id, provider.embed_text(d.text)) for d in descriptions]
    return _build_matrix("semantic", items, provider.dim)


def embed_classifier(
    texts: Sequence[tuple[int, str]], provider: TextEmbeddingProvider
) -> EmbeddingMatrix:
    """Embed (concept_id, text) pairs into the classifier (detection-weight) space."""
    items = [(cid, provider.embed_text(text)) for cid, text in texts]
    return _build_matrix("classifier", items, provider.dim)


def _text_seed_words(text: str) -> list[int]:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return list(struct.unpack("<4Q", digest))


def synthetic_embed(text: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random unit vector keyed by (text, seed)."""
    if dim < 2:
        raise EmbeddingError(f"dim must be >= 2, got {dim}")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, *_text_seed_words(text)])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class SyntheticProvider:
    """Whole-text hash embedding; unrelated texts come out near-orthogonal."""

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise EmbeddingError(f"dim must be >= 2, got {dim}")
        self.dim = dim
        self.seed = seed

    def embed_text(self, text: str) -> np.ndarray:
        return synthetic_embed(text, self.dim, self.seed)

    def metadata(self) -> dict:
        return {"provider": "synthetic", "dim": self.dim, "seed": self.seed}


_TOKEN = re.compile(r"[a-z0-9]+")


class TokenHashProvider:
    """Bag-of-words hash embedding: cosine similarity tracks token overlap.

    Used as the stand-in for real text encoders wherever the toy pipeline
    needs *structured* similarity (clustering, classifier weights), not just
    determinism.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 2:
            raise EmbeddingError(f"dim must be >= 2, got {dim}")
        self.dim = dim
        self.seed = seed
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vec(self, token: str) -> np.ndarray:
        if token not in self._token_cache:
            self._token_cache[token] = synthetic_embed(token, self.dim, self.seed)
        return self._token_cache[token]

    def embed_text(self, text: str) -> np.ndarray:
        tokens = _TOKEN.findall(text.lower())
        if not tokens:
            raise EmbeddingError(f"no tokens in text {text!r}")
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token_vec(tok)
        norm = np.linalg.norm(acc)
        if norm == 0.0:
            raise EmbeddingError(f"token vectors cancelled for text {text!r}")
        return acc / norm

    def metadata(self) -> dict:
        return {"provider": "tokenhash", "dim": self.dim, "seed": self.seed}


class FixtureProvider:
    """Exact-match text -> vector mapping, loadable from a JSON file."""

    def __init__(self, mapping: Mapping[str, Sequence[float]]):
        if not mapping:
            raise EmbeddingError("fixture mapping is empty")
        self._mapping = {k: np.asarray(v, dtype=np.float64) for k, v in mapping.items()}
        dims = {v.shape for v in self._mapping.values()}
        if len(dims) != 1:
            raise EmbeddingError(f"fixture vectors have mixed shapes: {sorted(dims)}")
        (shape,) = dims
        if len(shape) != 1 or shape[0] < 2:
            raise EmbeddingError(f"fixture vectors must be 1-D of dim >= 2, got {shape}")
        self.dim = shape[0]

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def save(self, path: str | Path) -> None:
        payload = {k: [float(x) for x in v] for k, v in self._mapping.items()}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    def embed_text(self, text: str) -> np.ndarray:
        if text not in self._mapping:
            raise EmbeddingError(f"fixture has no embedding for text {text!r}")
        return self._mapping[text]

    def metadata(self) -> dict:
        return {"provider": "fixture", "dim": self.dim, "count": len(self._mapping)}


class WrappedProvider:
    """Apply a prompt wrapper such as ``a photo of a {}`` before embedding."""

    def __init__(self, provider: TextEmbeddingProvider, template: str):
        if "{}" not in template:
            raise EmbeddingError("wrapper template must contain '{}'")
        self.provider = provider
        self.template = template
        self.dim = provider.dim

    def embed_text(self, text: str) -> np.ndarray:
        return self.provider.embed_text(self.template.format(text))

    def metadata(self) -> dict:
        inner = getattr(self.provider, "metadata", dict)()
        return {**inner, "wrapper": self.template}


def write_lemb_block(path: str | Path, space: str, ids: Sequence[int], rows: np.ndarray) -> None:
    """Low-level LEMB writer; does not require unit rows (used for centroid blocks too)."""
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise EmbeddingError(f"rows shape {rows.shape} does not match {len(ids)} ids")
    header = struct.pack("<4sIBIQ", LEMB_MAGIC, LEMB_VERSION, _SPACE_CODES[space], rows.shape[1], len(ids))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(ids, dtype="<i8").tobytes())
        fh.write(rows.tobytes())


def read_lemb_block(path: str | Path) -> tuple[str, tuple[int, ...], np.ndarray]:
    """Low-level LEMB reader; returns (space, ids, float32 rows)."""
    path = Path(path)
    blob = path.read_bytes()
    header_size = struct.calcsize("<4sIBIQ")
    if len(blob) < header_size:
        raise EmbeddingError(f"{path}: truncated LEMB header")
    magic, version, space_code, dim, count = struct.unpack("<4sIBIQ", blob[:header_size])
    if magic != LEMB_MAGIC:
        raise EmbeddingError(f"{path}: bad magic {magic!r}")
    if version != LEMB_VERSION:
        raise EmbeddingError(f"{path}: unsupported LEMB version {version}")
    if space_code not in _SPACE_NAMES:
        raise EmbeddingError(f"{path}: unknown space code {space_code}")
    ids_bytes = 8 * count
    rows_bytes = 4 * count * dim
    if len(blob) != header_size + ids_bytes + rows_bytes:
        raise EmbeddingError(
            f"{path}: size mismatch, expected {header_size + ids_bytes + rows_bytes} bytes, got {len(blob)}"
        )
    ids = np.frombuffer(blob, dtype="<i8", count=count, offset=header_size)
    rows = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=header_size + ids_bytes)
    return _SPACE_NAMES[space_code], tuple(int(i) for i in ids), rows.reshape(count, dim).copy()


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path, metadata: dict | None = None) -> None:
    path = Path(path)
    write_lemb_block(path, matrix.space, matrix.ids, matrix.rows)
    sidecar = {
        "space": matrix.space,
        "dim": matrix.dim,
        "count": len(matrix.ids),
        **(metadata or {}),
    }
    with open(path.with_name(path.name + ".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    space, ids, rows = read_lemb_block(path)
    return EmbeddingMatrix(space=space, dim=rows.shape[1], ids=ids, rows=rows)


def cosine_matrix(a: EmbeddingMatrix, b: EmbeddingMatrix) -> np.ndarray:
    """Pairwise cosine similarities; rows are unit so this is a plain dot product."""
    if a.dim != b.dim:
        raise EmbeddingError(f"dim mismatch: {a.dim} vs {b.dim}")
    return a.rows.astype(np.float64) @ b.rows.astype(np.float64).T
