"""Stage 1: generate, parse, deduplicate, and index part descriptions per category.

Descriptions are requested in large batches (default 200) as a strict JSON
array of strings. A non-JSON reply earns exactly one reprompt with a format
reminder; a second failure fails the batch and the category moves on.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .llm import ChatBackend, ChatMessage, UsageCounters

logger = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 200
NEAR_DUPLICATE_JACCARD = 0.9

FORMAT_REMINDER = (
    "Your previous reply was not valid JSON. Respond again with ONLY a JSON "
    "array of strings, no prose, no code fences."
)

# Advisory only: descriptions should be dimension-free; offenders are logged, not dropped.
_DIMENSION_RE = re.compile(r"\d+(\.\d+)?\s*(mm|cm|m|in|inch|inches|\"|units?)\b", re.IGNORECASE)
_NORMALIZE_RE = re.compile(r"[^a-z0-9\s]")


class CatalogError(Exception):
    """Raised when a batch cannot be parsed even after the reprompt."""


@dataclass(frozen=True)
class CategorySpec:
    name: str
    target_count: int
    reference_snippet: str | None = None

    def __post_init__(self) -> None:
        if self.target_count < 1:
            raise ValueError("target_count must be >= 1")


@dataclass(frozen=True)
class PartDescription:
    id: str
    category: str
    text: str
    normalized_text: str

    @classmethod
    def create(cls, id: str, category: str, text: str) -> "PartDescription":
        if not text.strip():
            raise ValueError("description text must be nonempty")
        return cls(id=id, category=category, text=text, normalized_text=normalize_text(text))


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    lowered = _NORMALIZE_RE.sub(" ", text.lower())
    return " ".join(lowered.split())


def load_taxonomy(path: str | Path) -> list[CategorySpec]:
    """Load the category taxonomy data file (list of {name, target_count, reference_snippet?})."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    specs = [
        CategorySpec(
            name=entry["name"],
            target_count=int(entry.get("target_count", 100)),
            reference_snippet=entry.get("reference_snippet"),
        )
        for entry in raw
    ]
    names = [s.name for s in specs]
    if len(names) != len(set(names)):
        raise ValueError("category names must be unique")
    return specs


def render_catalog_prompt(template: str, batch_size: int) -> str:
    return template.replace("{batch_size}", str(batch_size))


def _parse_description_array(text: str) -> list[str] | None:
    """Parse a JSON array of strings, tolerating a fenced code block."""
    candidates = [text.strip()]
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if fence:
        candidates.append(fence.group(1).strip())
    for candidate in candidates:
        try:
            parsed = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, list) and all(isinstance(item, str) for item in parsed):
            return parsed
    return None


@dataclass
class BatchResult:
    descriptions: list[PartDescription]
    reprompts: int
    usage: UsageCounters


def generate_catalog_batch(
    category: CategorySpec,
    batch_size: int,
    llm: ChatBackend,
    prompt_template: str,
) -> BatchResult:
    """Request one batch of descriptions for a category.

    Returns parsed descriptions tagged with the category; partial batches are
    accepted and logged. Raises :class:`CatalogError` after the reprompt fails.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    system = render_catalog_prompt(prompt_template, batch_size)
    user = f"Category: {category.name}. Produce {batch_size} part descriptions for this category."
    messages = [ChatMessage(role="system", content=system), ChatMessage(role="user", content=user)]

    usage = UsageCounters()
    reprompts = 0
    reply, call_usage = llm.complete(messages)
    usage = usage + call_usage
    items = _parse_description_array(reply.content)
    if items is None:
        reprompts = 1
        messages.append(reply)
        messages.append(ChatMessage(role="user", content=FORMAT_REMINDER))
        reply, call_usage = llm.complete(messages)
        usage = usage + call_usage
        items = _parse_description_array(reply.content)
        if items is None:
            raise CatalogError(f"category {category.name!r}: batch unparsable after reprompt")

    items = [item for item in items if item.strip()]
    if len(items) < batch_size:
        logger.info(
            "category %s: partial batch, %d of %d descriptions", category.name, len(items), batch_size
        )
    descriptions = []
    for i, text in enumerate(items):
        if _DIMENSION_RE.search(text):
            logger.warning("category %s: description carries dimensions: %r", category.name, text)
        descriptions.append(PartDescription.create(id=f"raw-{i}", category=category.name, text=text))
    return BatchResult(descriptions=descriptions, reprompts=reprompts, usage=usage)


def _token_set(text: str) -> frozenset[str]:
    return frozenset(text.split())


def _jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def deduplicate_descriptions(
    descriptions: Iterable[PartDescription],
    *,
    near_duplicate_jaccard: float | None = None,
) -> list[PartDescription]:
    """Drop exact duplicates under normalized text, keeping first occurrences.

    With ``near_duplicate_jaccard`` set, also drops items whose token-set
    Jaccard similarity with an already-kept item reaches the threshold.
    Output order is stable.
    """
    kept: list[PartDescription] = []
    seen: set[str] = set()
    kept_tokens: list[frozenset[str]] = []
    for desc in descriptions:
        if desc.normalized_text in seen:
            continue
        if near_duplicate_jaccard is not None:
            tokens = _token_set(desc.normalized_text)
            if any(_jaccard(tokens, prior) >= near_duplicate_jaccard for prior in kept_tokens):
                continue
            kept_tokens.append(tokens)
        seen.add(desc.normalized_text)
        kept.append(desc)
    return kept


def index_catalog(
    per_category: dict[str, list[PartDescription]],
    taxonomy: list[CategorySpec],
) -> list[PartDescription]:
    """Assign stable ids and cap each category at its target count."""
    targets = {spec.name: spec.target_count for spec in taxonomy}
    indexed: list[PartDescription] = []
    for category in sorted(per_category):
        cap = targets.get(category)
        entries = per_category[category]
        if cap is not None:
            entries = entries[:cap]
        slug = re.sub(r"[^a-z0-9]+", "-", category.lower()).strip("-")
        for i, desc in enumerate(entries):
            indexed.append(
                PartDescription(
                    id=f"{slug}-{i:05d}",
                    category=desc.category,
                    text=desc.text,
                    normalized_text=desc.normalized_text,
                )
            )
    return indexed


def write_catalog(descriptions: Iterable[PartDescription], path: str | Path) -> int:
    """Persist the catalog index as JSON-lines of {id, category, text}."""
    count = 0
    with Path(path).open("w", encoding="utf-8") as handle:
        for desc in descriptions:
            handle.write(json.dumps({"id": desc.id, "category": desc.category, "text": desc.text}) + "\n")
            count += 1
    return count


def read_catalog(path: str | Path) -> list[PartDescription]:
    descriptions = []
    with Path(path).open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw: dict[str, Any] = json.loads(line)
                descriptions.append(PartDescription.create(id=raw["id"], category=raw["category"], text=raw["text"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise CatalogError(f"{path}:{lineno}: bad catalog line ({exc})") from exc
    return descriptions


def run_catalog_stage(
    taxonomy: list[CategorySpec],
    llm: ChatBackend,
    prompt_template: str,
    *,
    batch_size: int = DEFAULT_BATCH_SIZE,
    near_duplicate_jaccard: float | None = None,
) -> list[PartDescription]:
    """Generate the full catalog: batched generation, global dedup, indexing."""
    collected: list[PartDescription] = []
    for category in taxonomy:
        have = 0
        while have < category.target_count:
            try:
                batch = generate_catalog_batch(category, batch_size, llm, prompt_template)
            except CatalogError as exc:
                logger.error("%s; skipping remainder of category", exc)
                break
            if not batch.descriptions:
                break
            collected.extend(batch.descriptions)
            have += len(batch.descriptions)

    deduped = deduplicate_descriptions(collected, near_duplicate_jaccard=near_duplicate_jaccard)
    per_category: dict[str, list[PartDescription]] = {}
    for desc in deduped:
        per_category.setdefault(desc.category, []).append(desc)
    return index_catalog(per_category, taxonomy)
