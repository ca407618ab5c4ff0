"""Local knowledge bases with hybrid lexical+vector search and a strict date cutoff.

Two corpora are expected in practice: published articles ("pubmed" source) and
trial registrations ("nct" source). Every search takes a cutoff date and only
returns documents dated strictly before it, so nothing published on or after a
subject trial's start date can leak into feature construction.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Okapi BM25 with the canonical defaults; IDF = ln(1 + (N-df+0.5)/(df+0.5)).
BM25_K1 = 1.5
BM25_B = 0.75
RRF_CONSTANT = 60

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class RetrievalError(Exception):
    pass


class DuplicateDocId(RetrievalError):
    pass


class MalformedRecord(RetrievalError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics. No stemming, no stopwords."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    doc_id: str
    source: str  # pubmed | nct
    title: str
    body: str
    date: dt.date  # publication date (pubmed) or trial start date (nct)
    nct_id: str | None = None

    @property
    def text(self) -> str:
        return f"{self.title} {self.body}".strip()

    def to_dict(self) -> dict:
        d = {
            "doc_id": self.doc_id,
            "source": self.source,
            "title": self.title,
            "body": self.body,
            "date": self.date.isoformat(),
        }
        if self.nct_id is not None:
            d["nct_id"] = self.nct_id
        return d


class Embedder:
    """Text -> unit-norm vector of fixed dimension. Must be deterministic."""

    dimension: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> str:
        raise NotImplementedError


class HashingEmbedder(Embedder):
    """Feature hashing of token unigrams with sign hashing, L2-normalized.

    Deterministic across processes (md5-based, not the salted builtin hash),
    so tests and replayed runs see identical vectors without model weights.
    """

    def __init__(self, dimension: int = 256):
        self.dimension = dimension

    def _slot(self, token: str) -> tuple[int, float]:
        digest = hashlib.md5(token.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "big") % self.dimension
        sign = 1.0 if digest[8] & 1 else -1.0
        return bucket, sign

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in tokenize(text):
            bucket, sign = self._slot(token)
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
        return vec

    def spec(self) -> str:
        return f"hashing:{self.dimension}"


class RemoteEmbedder(Embedder):
    """Client for an OpenAI-compatible /embeddings endpoint.

    Provided for production corpora; outputs are L2-normalized to satisfy the
    unit-norm contract regardless of what the service returns.
    """

    def __init__(self, base_url: str, model_id: str, api_key: str = "", dimension: int = 0):
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key = api_key
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        resp = requests.post(
            f"{self.base_url}/embeddings",
            json={"model": self.model_id, "input": text},
            headers=headers,
            timeout=120,
        )
        resp.raise_for_status()
        vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        if self.dimension and vec.shape[0] != self.dimension:
            raise RetrievalError(f"embedding dimension {vec.shape[0]} != expected {self.dimension}")
        norm = float(np.linalg.norm(vec))
        return vec / norm if norm > 0 else vec

    def spec(self) -> str:
        return f"remote:{self.model_id}:{self.dimension}"


def make_embedder(spec: str) -> Embedder:
    kind, _, rest = spec.partition(":")
    if kind == "hashing":
        return HashingEmbedder(dimension=int(rest))
    raise RetrievalError(f"cannot reconstruct embedder from spec {spec!r}")


@dataclass
class RetrievalIndex:
    """Immutable after ingest; lexical and vector indices cover the same docs."""

    documents: dict[str, Document]
    embedder: Embedder
    postings: dict[str, dict[str, int]] = field(default_factory=dict)  # term -> doc_id -> tf
    doc_lengths: dict[str, int] = field(default_factory=dict)
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    by_nct_id: dict[str, str] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.documents)

    @property
    def avg_doc_length(self) -> float:
        if not self.doc_lengths:
            return 0.0
        return sum(self.doc_lengths.values()) / len(self.doc_lengths)

    def get_by_nct_id(self, nct_id: str) -> Document | None:
        doc_id = self.by_nct_id.get(nct_id)
        return self.documents.get(doc_id) if doc_id else None


def ingest(records, embedder: Embedder | None = None) -> RetrievalIndex:
    """Build an index from an iterable of Documents."""
    embedder = embedder or HashingEmbedder()
    index = RetrievalIndex(documents={}, embedder=embedder)
    for doc in records:
        if doc.doc_id in index.documents:
            raise DuplicateDocId(doc.doc_id)
        index.documents[doc.doc_id] = doc
        tokens = tokenize(doc.text)
        index.doc_lengths[doc.doc_id] = len(tokens)
        for token in tokens:
            index.postings.setdefault(token, {})
            index.postings[token][doc.doc_id] = index.postings[token].get(doc.doc_id, 0) + 1
        index.vectors[doc.doc_id] = embedder.embed(doc.text)
        if doc.nct_id:
            index.by_nct_id[doc.nct_id] = doc.doc_id
    return index


def _idf(n_docs: int, doc_freq: int) -> float:
    return math.log(1.0 + (n_docs - doc_freq + 0.5) / (doc_freq + 0.5))


def bm25_score(index: RetrievalIndex, query_terms: set[str], doc_id: str) -> float:
    score = 0.0
    dl = index.doc_lengths[doc_id]
    avgdl = index.avg_doc_length
    for term in query_terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        tf = plist.get(doc_id, 0)
        if tf == 0:
            continue
        norm = tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / avgdl)
        score += _idf(index.size, len(plist)) * tf * (BM25_K1 + 1.0) / norm
    return score


def bm25_search(
    index: RetrievalIndex, query: str, k: int, cutoff: dt.date
) -> list[tuple[str, float]]:
    """Okapi BM25 over documents dated strictly before the cutoff.

    Corpus statistics (N, df, avgdl) are index-wide; the cutoff filters
    candidates only. Zero-score documents are excluded.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = set(tokenize(query))
    candidates: set[str] = set()
    for term in terms:
        candidates.update(index.postings.get(term, ()))
    scored = []
    for doc_id in candidates:
        if index.documents[doc_id].date >= cutoff:
            continue
        s = bm25_score(index, terms, doc_id)
        if s > 0.0:
            scored.append((doc_id, s))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def vector_search(
    index: RetrievalIndex, query: str, k: int, cutoff: dt.date
) -> list[tuple[str, float]]:
    """Cosine similarity of unit vectors; same cutoff and tie-break as BM25."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qvec = index.embedder.embed(query)
    scored = []
    for doc_id, doc in index.documents.items():
        if doc.date >= cutoff:
            continue
        scored.append((doc_id, float(qvec @ index.vectors[doc_id])))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def reciprocal_rank_fusion(
    ranked_lists: list[list[str]], constant: int = RRF_CONSTANT
) -> list[tuple[str, float]]:
    """fused(d) = sum over lists of 1/(constant + rank_d), ranks starting at 1."""
    fused: dict[str, float] = {}
    for ranking in ranked_lists:
        for rank, doc_id in enumerate(ranking, start=1):
            fused[doc_id] = fused.get(doc_id, 0.0) + 1.0 / (constant + rank)
    out = list(fused.items())
    out.sort(key=lambda pair: (-pair[1], pair[0]))
    return out


def hybrid_search(
    index: RetrievalIndex, query: str, k: int, cutoff: dt.date
) -> list[tuple[str, float]]:
    """Fuse the BM25 and vector top-2k lists by reciprocal rank, truncate to k.

    RRF is used because BM25 scores and cosines live on incommensurable
    scales; rank fusion is scale-free.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    lexical = [doc_id for doc_id, _ in bm25_search(index, query, 2 * k, cutoff)]
    semantic = [doc_id for doc_id, _ in vector_search(index, query, 2 * k, cutoff)]
    return reciprocal_rank_fusion([lexical, semantic])[:k]


def nct_exclusion_search(
    index: RetrievalIndex, query: str, k: int, subject_trial_start: dt.date
) -> list[tuple[str, float]]:
    """Hybrid search over trial registrations that began strictly before the
    subject trial's start date. Same-day starts are excluded."""
    return hybrid_search(index, query, k, cutoff=subject_trial_start)


# ---------------------------------------------------------------------------
# Corpus files and on-disk index format
# ---------------------------------------------------------------------------

INDEX_FORMAT_VERSION = 1


def read_corpus_jsonl(path: str):
    """Yield Documents from a JSON-Lines corpus file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f"{path}:{lineno}: invalid JSON ({exc})") from None
            try:
                date = dt.date.fromisoformat(str(raw["date"]))
                doc = Document(
                    doc_id=str(raw["doc_id"]),
                    source=str(raw["source"]),
                    title=str(raw.get("title", "")),
                    body=str(raw.get("body", "")),
                    date=date,
                    nct_id=str(raw["nct_id"]) if raw.get("nct_id") else None,
                )
            except (KeyError, ValueError) as exc:
                raise MalformedRecord(f"{path}:{lineno}: {exc}") from None
            if doc.source not in ("pubmed", "nct"):
                raise MalformedRecord(f"{path}:{lineno}: unknown source {doc.source!r}")
            yield doc


def save_index(index: RetrievalIndex, out_dir: str) -> None:
    """Persist documents + embeddings; postings are rebuilt on load.

    Embeddings are stored as float64 .npy so search results round-trip
    bit-exactly even with a remote embedder.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc_ids = sorted(index.documents)
    with open(out / "documents.jsonl", "w", encoding="utf-8") as fh:
        for doc_id in doc_ids:
            fh.write(json.dumps(index.documents[doc_id].to_dict(), sort_keys=True) + "\n")
    matrix = np.stack([index.vectors[d] for d in doc_ids]) if doc_ids else np.zeros((0, index.embedder.dimension))
    np.save(out / "embeddings.npy", matrix)
    meta = {
        "format_version": INDEX_FORMAT_VERSION,
        "embedder": index.embedder.spec(),
        "dimension": index.embedder.dimension,
        "n_documents": len(doc_ids),
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_index(index_dir: str, embedder: Embedder | None = None) -> RetrievalIndex:
    src = Path(index_dir)
    meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
    if meta.get("format_version", 0) > INDEX_FORMAT_VERSION:
        raise RetrievalError(f"index format {meta.get('format_version')} is newer than supported")
    if embedder is None:
        embedder = make_embedder(meta["embedder"])
    docs = list(read_corpus_jsonl(str(src / "documents.jsonl")))
    matrix = np.load(src / "embeddings.npy")
    index = RetrievalIndex(documents={}, embedder=embedder)
    for row, doc in enumerate(docs):
        if doc.doc_id in index.documents:
            raise DuplicateDocId(doc.doc_id)
        index.documents[doc.doc_id] = doc
        tokens = tokenize(doc.text)
        index.doc_lengths[doc.doc_id] = len(tokens)
        for token in tokens:
            index.postings.setdefault(token, {})
            index.postings[token][doc.doc_id] = index.postings[token].get(doc.doc_id, 0) + 1
        index.vectors[doc.doc_id] = matrix[row]
        if doc.nct_id:
            index.by_nct_id[doc.nct_id] = doc.doc_id
    return index


def ingest_corpus_file(corpus_path: str, out_dir: str, embed_dim: int = 256) -> RetrievalIndex:
    index = ingest(read_corpus_jsonl(corpus_path), embedder=HashingEmbedder(embed_dim))
    save_index(index, out_dir)
    return index
