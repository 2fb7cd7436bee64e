"""Guideline corpus ingestion, embedding and exact top-k retrieval."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .errors import EmbedderError, EmptyCorpusError, FormatError, IngestError, ShapeError, ValidationError

_ID_RE = re.compile(r"^G(0|[1-9][0-9]*)$")
_TOKEN_RE = re.compile(r"[a-z0-9]+")

NORM_TOL = 1e-6


@dataclass(frozen=True)
class Guideline:
    id: str
    text: str
    summary: str = ""

    def __post_init__(self) -> None:
        if not _ID_RE.match(self.id):
            raise IngestError(f"guideline id {self.id!r} does not match G<n>")
        if not self.text.strip():
            raise IngestError(f"guideline {self.id} has empty text")

    @property
    def number(self) -> int:
        return int(self.id[1:])

    def to_dict(self) -> dict[str, str]:
        return {"id": self.id, "text": self.text, "summary": self.summary}


def ingest(document: str | bytes | list[dict[str, Any]]) -> list[Guideline]:
    """Parse a guideline corpus.

    Accepts a JSON array of ``{id, text, summary}`` objects (or the already
    decoded list). Anything that is not a JSON array is treated as plain text
    with one rule per non-blank line, numbered ``G0, G1, ...`` in order.
    """
    if isinstance(document, bytes):
        document = document.decode("utf-8")
    entries: list[dict[str, Any]] | None
    if isinstance(document, list):
        entries = document
    else:
        entries = None
        stripped = document.strip()
        if stripped.startswith("["):
            try:
                decoded = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise IngestError(f"corpus looks like JSON but does not parse: {exc}") from exc
            if not isinstance(decoded, list):
                raise IngestError("JSON corpus must be an array")
            entries = decoded

    if entries is None:
        lines = [ln.strip() for ln in str(document).splitlines() if ln.strip()]
        if not lines:
            raise EmptyCorpusError("guideline corpus is empty")
        return [Guideline(f"G{i}", line, _summarize(line)) for i, line in enumerate(lines)]

    if not entries:
        raise EmptyCorpusError("guideline corpus is empty")
    out: list[Guideline] = []
    seen: set[str] = set()
    for pos, entry in enumerate(entries):
        if not isinstance(entry, dict) or "id" not in entry or "text" not in entry:
            raise IngestError(f"corpus entry {pos} needs 'id' and 'text' fields")
        gid = str(entry["id"])
        if gid in seen:
            raise IngestError(f"duplicate guideline id {gid}")
        seen.add(gid)
        out.append(Guideline(gid, str(entry["text"]), str(entry.get("summary", ""))))
    return out


def load_corpus(path: str | Path) -> list[Guideline]:
    return ingest(Path(path).read_text(encoding="utf-8"))


def _summarize(line: str, max_words: int = 8) -> str:
    words = line.split()
    return " ".join(words[:max_words]) + (" ..." if len(words) > max_words else "")


class Embedder(Protocol):
    tag: str

    def embed(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    """Bag-of-words embedder: each lower-cased token hashes into one of ``dim`` buckets.

    Stable across processes and platforms (blake2b, not ``hash()``), so it
    gives repeatable similarity without any model.
    """

    def __init__(self, dim: int = 64) -> None:
        if dim < 1:
            raise ValidationError("embedding dimension must be positive")
        self.dim = dim
        self.tag = f"hash-bow-{dim}"

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in _TOKEN_RE.findall(text.lower()):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            vec[int.from_bytes(digest, "little") % self.dim] += 1.0
        return vec


def normalize(vec: Sequence[float] | np.ndarray) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"embedding must be 1-D, got shape {arr.shape}")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValidationError("cannot normalize a zero or non-finite vector")
    return arr / norm


@dataclass(frozen=True)
class GuidelineIndex:
    guidelines: tuple[Guideline, ...]
    vectors: np.ndarray  # (n, dim), rows unit-norm, read-only
    embedder_tag: str

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.guidelines):
            raise ShapeError("index needs exactly one vector per guideline")
        self.vectors.flags.writeable = False

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.guidelines)

    def by_id(self, gid: str) -> Guideline:
        for g in self.guidelines:
            if g.id == gid:
                return g
        raise KeyError(gid)

    def to_dict(self) -> dict[str, Any]:
        return {
            "embedder_tag": self.embedder_tag,
            "dim": self.dim,
            "entries": [
                {**g.to_dict(), "vector": [float(x) for x in v]}
                for g, v in zip(self.guidelines, self.vectors)
            ],
        }

    def save(self, path: str | Path) -> None:
        from .io import write_atomic

        write_atomic(path, json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> GuidelineIndex:
        try:
            dim = int(data["dim"])
            entries = data["entries"]
            guidelines = tuple(Guideline(e["id"], e["text"], e.get("summary", "")) for e in entries)
            vectors = np.array([e["vector"] for e in entries], dtype=np.float64).reshape(len(entries), dim)
            tag = str(data["embedder_tag"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed guideline index: {exc}") from exc
        return cls(guidelines, vectors, tag)

    @classmethod
    def load(cls, path: str | Path) -> GuidelineIndex:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_index(guidelines: Sequence[Guideline], embedder: Embedder) -> GuidelineIndex:
    rows = []
    dim: int | None = None
    for g in guidelines:
        try:
            raw = embedder.embed(g.text)
        except Exception as exc:  # noqa: BLE001 - re-raised with the guideline attached
            raise EmbedderError(f"embedding failed for {g.id}: {exc}", guideline_id=g.id) from exc
        try:
            vec = normalize(raw)
        except ValidationError as exc:
            raise EmbedderError(f"embedding for {g.id} is unusable: {exc}", guideline_id=g.id) from exc
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise EmbedderError(
                f"embedder returned dimension {vec.shape[0]} for {g.id}, expected {dim}", guideline_id=g.id
            )
        rows.append(vec)
    vectors = np.vstack(rows) if rows else np.zeros((0, getattr(embedder, "dim", 0)))
    return GuidelineIndex(tuple(guidelines), vectors, embedder.tag)


TIE_TOL = 1e-12


def top_k(index: GuidelineIndex, query: np.ndarray, k: int) -> list[tuple[Guideline, float]]:
    """Exact cosine ranking; ties broken by ascending guideline number."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise ShapeError(f"query dimension {q.shape} does not match index dimension {index.dim}")
    q = normalize(q)
    sims = index.vectors @ q
    order = sorted(range(len(index)), key=lambda i: -sims[i])
    # Scores within TIE_TOL of a group's first score are ties: rounding in the
    # normalisation must not decide between mathematically equal cosines.
    ranked: list[int] = []
    group: list[int] = []
    for i in order:
        if group and sims[group[0]] - sims[i] > TIE_TOL:
            ranked += sorted(group, key=lambda j: index.guidelines[j].number)
            if len(ranked) >= k:
                group = []
                break
            group = []
        group.append(i)
    ranked += sorted(group, key=lambda j: index.guidelines[j].number)
    return [(index.guidelines[i], float(sims[i])) for i in ranked[:k]]
