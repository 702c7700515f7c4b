"""Disk-backed retrieval store: chunking, embeddings, cosine ranking, and
retrieval-augmented structured analysis through a chat session.

The default embedder is a deterministic hashing term-frequency model. It is
intentionally simple: no network, no model weights, identical vectors on every
platform, and integer-valued components so that cosine scores are exactly
reproducible in float64.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .gateway import ChatSession, StructuredResponse, estimate_tokens

log = logging.getLogger(__name__)

CHUNK_SIZE = 512
CHUNK_OVERLAP = 64
DEFAULT_TOP_K = 5
HASH_DIMENSION = 256
RESPONSE_RESERVE_TOKENS = 1024  # window head-room kept free for the reply

MANIFEST_NAME = "manifest.json"
CHUNKS_NAME = "chunks.jsonl"
STORE_MAGIC = "pentestflow-corpus"
STORE_VERSION = 1


class RagError(Exception):
    """Base class for retrieval store failures."""


class CorpusMissing(RagError):
    pass


class CorpusCorrupt(RagError):
    pass


class EmbedderMismatch(RagError):
    """Corpus on disk was built with a different embedder or dimension."""


@dataclass(frozen=True)
class DocumentChunk:
    corpus_id: str
    doc_id: str
    chunk_index: int
    text: str
    source_uri: str


@dataclass(frozen=True)
class RetrievalHit:
    chunk: DocumentChunk
    score: float


def chunk_text(text: str, chunk_size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP) -> list[str]:
    """Split text into fixed-size character windows with overlap.

    The final chunk always reaches the end of the text; a document that fits
    in one window yields exactly one chunk. Empty text yields no chunks.
    """
    if chunk_size <= 0 or overlap < 0 or overlap >= chunk_size:
        raise ValueError("need chunk_size > overlap >= 0")
    if not text:
        return []
    step = chunk_size - overlap
    chunks = []
    start = 0
    while True:
        chunks.append(text[start : start + chunk_size])
        if start + chunk_size >= len(text):
            break
        start += step
    return chunks


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class Embedder(Protocol):
    embedder_id: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Term-frequency vectors over md5-hashed tokens.

    Components are raw token counts (unnormalized). Keeping them integral
    makes dot products exact in float64, which retrieval correctness tests
    rely on.
    """

    def __init__(self, dimension: int = HASH_DIMENSION) -> None:
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.embedder_id = f"hash-tf-{dimension}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        matrix = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            for token in _TOKEN_RE.findall(text.lower()):
                digest = hashlib.md5(token.encode("utf-8")).digest()
                slot = int.from_bytes(digest[:4], "big") % self.dimension
                matrix[row, slot] += 1.0
        return matrix


class HttpEmbedder:
    """Embeddings from an OpenAI-compatible /embeddings endpoint."""

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        dimension: int,
        credential_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        http_post: Callable | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model_name = model_name
        self.dimension = dimension
        self.credential_env = credential_env
        self.timeout = timeout
        self.embedder_id = f"http-{model_name}-{dimension}"
        self._post = http_post

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import os

        import requests

        post = self._post or requests.post
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.credential_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        response = post(
            self.endpoint,
            json={"model": self.model_name, "input": list(texts)},
            headers=headers,
            timeout=self.timeout,
        )
        response.raise_for_status()
        rows = [item["embedding"] for item in response.json()["data"]]
        matrix = np.asarray(rows, dtype=np.float64)
        if matrix.shape != (len(texts), self.dimension):
            raise RagError(
                f"embedding endpoint returned shape {matrix.shape}, "
                f"expected ({len(texts)}, {self.dimension})"
            )
        return matrix


@dataclass
class _Corpus:
    chunks: list[DocumentChunk]
    matrix: np.ndarray  # (n_chunks, dimension) float64


class RagStore:
    """Corpus-per-directory retrieval store with exact cosine ranking.

    Ranking is exhaustive (every chunk scored on every query), so results
    are exactly what brute-force cosine over the corpus would give; there is
    no approximate index to drift from the oracle.
    """

    def __init__(self, root: Path | str, embedder: Embedder | None = None) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.embedder = embedder if embedder is not None else HashingEmbedder()
        self._cache: dict[str, _Corpus] = {}
        self._lock = threading.Lock()

    # -- paths ------------------------------------------------------------

    def _corpus_dir(self, corpus_id: str) -> Path:
        if not corpus_id or "/" in corpus_id or corpus_id.startswith("."):
            raise ValueError(f"bad corpus id {corpus_id!r}")
        return self.root / corpus_id

    def corpus_exists(self, corpus_id: str) -> bool:
        return (self._corpus_dir(corpus_id) / MANIFEST_NAME).is_file()

    def list_corpora(self) -> list[str]:
        found = []
        for child in sorted(self.root.iterdir()):
            if (child / MANIFEST_NAME).is_file():
                found.append(child.name)
        return found

    # -- indexing ---------------------------------------------------------

    def index(
        self,
        corpus_id: str,
        documents: Iterable[tuple[str, str, str]],
        chunk_size: int = CHUNK_SIZE,
        overlap: int = CHUNK_OVERLAP,
    ) -> int:
        """Chunk, embed, and append documents (doc_id, text, source_uri).

        Returns the number of chunks added. The corpus directory is written
        immediately and deterministically.
        """
        with self._lock:
            corpus = (
                self._load_locked(corpus_id) if self.corpus_exists(corpus_id)
                else _Corpus(chunks=[], matrix=np.zeros((0, self.embedder.dimension)))
            )
            new_chunks: list[DocumentChunk] = []
            for doc_id, text, source_uri in documents:
                for chunk_index, piece in enumerate(
                    chunk_text(text, chunk_size, overlap)
                ):
                    new_chunks.append(
                        DocumentChunk(
                            corpus_id=corpus_id,
                            doc_id=doc_id,
                            chunk_index=chunk_index,
                            text=piece,
                            source_uri=source_uri,
                        )
                    )
            if new_chunks:
                vectors = self.embedder.embed([c.text for c in new_chunks])
                corpus.chunks.extend(new_chunks)
                corpus.matrix = (
                    np.vstack([corpus.matrix, vectors])
                    if corpus.matrix.size
                    else vectors
                )
            self._cache[corpus_id] = corpus
            self._persist_locked(corpus_id, corpus)
            return len(new_chunks)

    # -- persistence ------------------------------------------------------

    def persist(self, corpus_id: str) -> None:
        """Rewrite a corpus directory from the in-memory state."""
        with self._lock:
            corpus = self._load_locked(corpus_id)
            self._persist_locked(corpus_id, corpus)

    def _persist_locked(self, corpus_id: str, corpus: _Corpus) -> None:
        directory = self._corpus_dir(corpus_id)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "magic": STORE_MAGIC,
            "version": STORE_VERSION,
            "embedder": self.embedder.embedder_id,
            "dimension": self.embedder.dimension,
            "chunk_count": len(corpus.chunks),
        }
        (directory / MANIFEST_NAME).write_text(
            json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )
        lines = []
        for i, chunk in enumerate(corpus.chunks):
            lines.append(
                json.dumps(
                    {
                        "doc_id": chunk.doc_id,
                        "chunk_index": chunk.chunk_index,
                        "source_uri": chunk.source_uri,
                        "text": chunk.text,
                        "vector": corpus.matrix[i].tolist(),
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
            )
        (directory / CHUNKS_NAME).write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8"
        )

    def _load_locked(self, corpus_id: str) -> _Corpus:
        cached = self._cache.get(corpus_id)
        if cached is not None:
            return cached
        directory = self._corpus_dir(corpus_id)
        manifest_path = directory / MANIFEST_NAME
        if not manifest_path.is_file():
            raise CorpusMissing(f"no corpus {corpus_id!r} under {self.root}")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise CorpusCorrupt(f"corpus {corpus_id!r}: bad manifest: {err}") from err
        if manifest.get("magic") != STORE_MAGIC:
            raise CorpusCorrupt(f"corpus {corpus_id!r}: wrong magic header")
        if manifest.get("version") != STORE_VERSION:
            raise CorpusCorrupt(
                f"corpus {corpus_id!r}: unsupported version {manifest.get('version')}"
            )
        if manifest.get("embedder") != self.embedder.embedder_id or int(
            manifest.get("dimension", -1)
        ) != self.embedder.dimension:
            raise EmbedderMismatch(
                f"corpus {corpus_id!r} was built with embedder "
                f"{manifest.get('embedder')!r} (dim {manifest.get('dimension')}); "
                f"store uses {self.embedder.embedder_id!r}"
            )
        chunks: list[DocumentChunk] = []
        vectors: list[list[float]] = []
        chunks_path = directory / CHUNKS_NAME
        raw_lines = (
            chunks_path.read_text(encoding="utf-8").splitlines()
            if chunks_path.is_file()
            else []
        )
        for raw in raw_lines:
            if not raw.strip():
                continue
            try:
                doc = json.loads(raw)
                chunks.append(
                    DocumentChunk(
                        corpus_id=corpus_id,
                        doc_id=str(doc["doc_id"]),
                        chunk_index=int(doc["chunk_index"]),
                        text=str(doc["text"]),
                        source_uri=str(doc.get("source_uri", "")),
                    )
                )
                vectors.append([float(x) for x in doc["vector"]])
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
                raise CorpusCorrupt(f"corpus {corpus_id!r}: bad chunk line: {err}") from err
        if len(chunks) != int(manifest.get("chunk_count", len(chunks))):
            raise CorpusCorrupt(f"corpus {corpus_id!r}: chunk count mismatch")
        matrix = (
            np.asarray(vectors, dtype=np.float64)
            if vectors
            else np.zeros((0, self.embedder.dimension))
        )
        corpus = _Corpus(chunks=chunks, matrix=matrix)
        self._cache[corpus_id] = corpus
        return corpus

    # -- retrieval --------------------------------------------------------

    def retrieve(
        self, corpus_id: str, query: str, k: int = DEFAULT_TOP_K
    ) -> list[RetrievalHit]:
        """Top-k chunks by cosine similarity.

        Exact ordering contract: descending score, then (doc_id, chunk_index)
        ascending for ties. Zero-norm vectors score 0 against everything.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        if not query:
            raise ValueError("query must be non-empty")
        with self._lock:
            corpus = self._load_locked(corpus_id)
        n = len(corpus.chunks)
        if n == 0:
            return []
        qvec = self.embedder.embed([query])[0]
        scores = cosine_scores(corpus.matrix, qvec)
        order = sorted(
            range(n),
            key=lambda i: (
                -scores[i],
                corpus.chunks[i].doc_id,
                corpus.chunks[i].chunk_index,
            ),
        )
        return [
            RetrievalHit(chunk=corpus.chunks[i], score=float(scores[i]))
            for i in order[: min(k, n)]
        ]

    # -- synthesis --------------------------------------------------------

    def synthesize(
        self,
        corpus_id: str,
        analysis_prompt: str,
        k: int,
        session: ChatSession,
        schema_id: str,
    ) -> StructuredResponse:
        """Answer an analysis prompt with retrieved context prepended.

        Chunks that would blow the session's context budget are dropped from
        the tail of the ranking. With k=0, or an empty corpus, the call
        degrades to a plain structured completion flagged context_empty.
        """
        if k < 0:
            raise ValueError("k must be non-negative")
        hits = self.retrieve(corpus_id, analysis_prompt, k) if k > 0 else []
        budget = (
            session.profile.context_window
            - estimate_tokens(session.system_message)
            - estimate_tokens(analysis_prompt)
            - RESPONSE_RESERVE_TOKENS
        )
        kept: list[RetrievalHit] = []
        used = 0
        for hit in hits:
            block_tokens = estimate_tokens(hit.chunk.text) + 16
            if used + block_tokens > budget:
                break
            kept.append(hit)
            used += block_tokens
        if kept:
            blocks = []
            for hit in kept:
                blocks.append(
                    f"[source: {hit.chunk.source_uri} "
                    f"doc={hit.chunk.doc_id} chunk={hit.chunk.chunk_index}]\n"
                    f"{hit.chunk.text}"
                )
            prompt = (
                "Context passages (cite sources where relevant):\n\n"
                + "\n---\n".join(blocks)
                + "\n\n"
                + analysis_prompt
            )
        else:
            prompt = analysis_prompt
        response = session.complete_structured(prompt, schema_id)
        if not kept:
            response.context_empty = True
        return response


def cosine_scores(matrix: np.ndarray, qvec: np.ndarray) -> np.ndarray:
    """Cosine similarity of each matrix row against qvec.

    Computed as dot / sqrt(|a|^2 * |q|^2) in float64. For integer-valued
    vectors the radicand is an exact integer, so identical vectors score
    exactly 1.0. Zero vectors score 0.0. Results are clipped to [-1, 1].
    """
    if matrix.size == 0:
        return np.zeros(0)
    dots = matrix @ qvec
    norms2 = np.einsum("ij,ij->i", matrix, matrix)
    qnorm2 = float(qvec @ qvec)
    denom = np.sqrt(norms2 * qnorm2)
    scores = np.divide(
        dots, denom, out=np.zeros_like(dots, dtype=np.float64), where=denom > 0
    )
    return np.clip(scores, -1.0, 1.0)


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Scalar cosine similarity with the same exactness contract."""
    dot = 0.0
    na2 = 0.0
    nb2 = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na2 += x * x
        nb2 += y * y
    denom = math.sqrt(na2 * nb2)
    if denom == 0.0:
        return 0.0
    return max(-1.0, min(1.0, dot / denom))
