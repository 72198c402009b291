"""Documentation tools: TF-IDF ranked retrieval and regex grep over a text corpus.

The corpus is a directory of ``<doc_id>.txt`` files whose first line is the
title. Ranking uses the textbook weighting tf(t,d) * ln(N/df(t)) with
L2-normalized document vectors and cosine scoring. A single-document corpus
makes every idf zero, in which case lookup falls back to raw term-frequency
vectors so queries still rank.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

_TOKEN_RE = re.compile(r"[a-z0-9_]+")

SNIPPET_CHARS = 500
GREP_MATCH_CAP = 100


class DocsError(Exception):
    """Raised for corpus or index construction failures."""


class GrepPatternError(Exception):
    """Raised when a grep pattern does not compile; message names the parse failure."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters, keeping underscores."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str

    @property
    def full_text(self) -> str:
        return f"{self.title}\n{self.body}" if self.title else self.body


@dataclass(frozen=True)
class DocCorpus:
    documents: tuple[Document, ...]

    def __post_init__(self) -> None:
        ids = [d.doc_id for d in self.documents]
        if len(ids) != len(set(ids)):
            raise DocsError("doc_ids must be unique")
        for doc in self.documents:
            if not doc.body.strip():
                raise DocsError(f"document {doc.doc_id!r} has an empty body")


def load_corpus(directory: str | Path) -> DocCorpus:
    """Build a corpus from ``<directory>/<doc_id>.txt`` files, first line = title."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DocsError(f"corpus directory not found: {directory}")
    documents = []
    for path in sorted(directory.glob("*.txt")):
        text = path.read_text(encoding="utf-8")
        first, _, rest = text.partition("\n")
        documents.append(Document(doc_id=path.stem, title=first.strip(), body=rest.strip()))
    if not documents:
        raise DocsError(f"no .txt documents in {directory}")
    return DocCorpus(tuple(documents))


def load_bundled_corpus() -> DocCorpus:
    """Load the small documentation excerpt shipped inside the package."""
    from importlib import resources

    root = resources.files("cadforge.data").joinpath("docs")
    with resources.as_file(root) as directory:
        return load_corpus(directory)


@dataclass(frozen=True)
class TfIdfIndex:
    """Immutable index: sparse L2-normalized per-document weight vectors."""

    corpus: DocCorpus
    doc_count: int
    doc_freq: dict[str, int]
    idf: dict[str, float]
    doc_vectors: dict[str, dict[str, float]]
    tf_fallback: bool


@dataclass(frozen=True)
class LookupHit:
    doc_id: str
    score: float
    snippet: str


@dataclass(frozen=True)
class LookupResult:
    hits: tuple[LookupHit, ...]
    no_matches: bool

    def to_payload(self) -> dict:
        return {
            "results": [{"doc_id": h.doc_id, "score": round(h.score, 6), "snippet": h.snippet} for h in self.hits],
            "no_matches": self.no_matches,
        }


@dataclass(frozen=True)
class GrepHit:
    doc_id: str
    line_no: int
    line: str
    context: tuple[str, ...]


@dataclass(frozen=True)
class GrepResult:
    hits: tuple[GrepHit, ...]
    truncated: bool

    def to_payload(self) -> dict:
        return {
            "matches": [
                {"doc_id": h.doc_id, "line_no": h.line_no, "line": h.line, "context": list(h.context)}
                for h in self.hits
            ],
            "truncated": self.truncated,
        }


def _term_counts(tokens: list[str]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for token in tokens:
        counts[token] = counts.get(token, 0) + 1
    return counts


def _normalize(vector: dict[str, float]) -> dict[str, float]:
    norm = math.sqrt(sum(w * w for w in vector.values()))
    if norm == 0.0:
        return {}
    return {term: w / norm for term, w in vector.items()}


def build_tfidf_index(corpus: DocCorpus) -> TfIdfIndex:
    """Index the corpus; raises :class:`DocsError` on an empty corpus."""
    if not corpus.documents:
        raise DocsError("cannot index an empty corpus")
    per_doc_counts = {doc.doc_id: _term_counts(tokenize(doc.full_text)) for doc in corpus.documents}
    doc_freq: dict[str, int] = {}
    for counts in per_doc_counts.values():
        for term in counts:
            doc_freq[term] = doc_freq.get(term, 0) + 1
    n_docs = len(corpus.documents)
    idf = {term: math.log(n_docs / df) for term, df in doc_freq.items()}
    tf_fallback = all(v == 0.0 for v in idf.values())

    doc_vectors: dict[str, dict[str, float]] = {}
    for doc_id, counts in per_doc_counts.items():
        if tf_fallback:
            raw = {term: float(count) for term, count in counts.items()}
        else:
            raw = {term: count * idf[term] for term, count in counts.items()}
        doc_vectors[doc_id] = _normalize(raw)
    return TfIdfIndex(
        corpus=corpus,
        doc_count=n_docs,
        doc_freq=doc_freq,
        idf=idf,
        doc_vectors=doc_vectors,
        tf_fallback=tf_fallback,
    )


def lookup_documentation(index: TfIdfIndex, query: str, k: int = 5) -> LookupResult:
    """Top-k documents by cosine similarity; ties break by ascending doc_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    tokens = [t for t in tokenize(query) if t in index.doc_freq]
    if not tokens:
        return LookupResult(hits=(), no_matches=True)
    counts = _term_counts(tokens)
    if index.tf_fallback:
        query_vector = _normalize({term: float(c) for term, c in counts.items()})
    else:
        query_vector = _normalize({term: c * index.idf[term] for term, c in counts.items()})

    scored = []
    for doc in index.corpus.documents:
        vector = index.doc_vectors[doc.doc_id]
        score = sum(weight * vector.get(term, 0.0) for term, weight in query_vector.items())
        if score > 0.0:
            scored.append((doc, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0].doc_id))
    hits = tuple(
        LookupHit(doc_id=doc.doc_id, score=score, snippet=doc.body[:SNIPPET_CHARS])
        for doc, score in scored[:k]
    )
    return LookupResult(hits=hits, no_matches=not hits)


def grep_documentation(corpus: DocCorpus, pattern: str, context: int = 1) -> GrepResult:
    """All matching lines across all documents, capped at 100 with a truncation flag."""
    try:
        compiled = re.compile(pattern)
    except re.error as exc:
        raise GrepPatternError(f"invalid regex: {exc}") from exc
    if context < 0:
        raise ValueError("context must be >= 0")

    hits: list[GrepHit] = []
    truncated = False
    for doc in corpus.documents:
        lines = doc.full_text.splitlines()
        for i, line in enumerate(lines):
            if not compiled.search(line):
                continue
            if len(hits) >= GREP_MATCH_CAP:
                truncated = True
                break
            lo = max(0, i - context)
            hi = min(len(lines), i + context + 1)
            hits.append(
                GrepHit(doc_id=doc.doc_id, line_no=i + 1, line=line, context=tuple(lines[lo:hi]))
            )
        if truncated:
            break
    return GrepResult(hits=tuple(hits), truncated=truncated)
