"""Append-only artifact store, dataset manifest with splits, and generation stats.

Layout under the store root:

    store_root/
      manifest.jsonl          one JSON record per committed artifact
      splits.json             seeded train/val/test assignment
      outcomes.jsonl          one TaskOutcome per finished task
      artifacts/<id>/         code.py, model.stl, model.step, meta.json, conversation.jsonl
      staging/                scratch space for in-flight rollouts

Commits are atomic in the crash sense that matters: files move into place
first and the manifest line is appended last, so a crash in between leaves
an orphan directory but never a manifest entry pointing at missing files.
"""
from __future__ import annotations

import json
import logging
import random
import shutil
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable

logger = logging.getLogger(__name__)

ARTIFACT_FILES = ("code.py", "model.stl", "model.step", "meta.json", "conversation.jsonl")


class StoreError(Exception):
    """Raised for commit violations: duplicate ids, missing staged files, bad roots."""


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class Artifact:
    """One accepted design at commit time: code text plus staged file paths."""

    artifact_id: str
    task_id: str
    category: str
    description: str
    code: str
    stl_path: str
    step_path: str
    topo: dict[str, Any]
    created_at: str
    conversation_log_path: str

    def manifest_record(self) -> dict[str, Any]:
        return {
            "artifact_id": self.artifact_id,
            "task_id": self.task_id,
            "category": self.category,
            "description": self.description,
            "topo": self.topo,
            "created_at": self.created_at,
        }


class ArtifactStore:
    """Filesystem-backed store. Manifest appends are serialized through one lock."""

    def __init__(self, root: str | Path, *, clock: Callable[[], str] = utc_now_iso) -> None:
        self.root = Path(root)
        self.artifacts_dir = self.root / "artifacts"
        self.staging_dir = self.root / "staging"
        self.manifest_path = self.root / "manifest.jsonl"
        self.outcomes_path = self.root / "outcomes.jsonl"
        self.splits_path = self.root / "splits.json"
        self._clock = clock
        self._manifest_lock = threading.Lock()
        self._outcomes_lock = threading.Lock()
        self.artifacts_dir.mkdir(parents=True, exist_ok=True)
        self.staging_dir.mkdir(parents=True, exist_ok=True)

    def now(self) -> str:
        return self._clock()

    # -- staging ------------------------------------------------------------

    def new_staging_dir(self, task_id: str) -> Path:
        path = self.staging_dir / task_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def discard_staging(self, task_id: str) -> None:
        shutil.rmtree(self.staging_dir / task_id, ignore_errors=True)

    # -- commit -------------------------------------------------------------

    def commit_artifact(self, artifact: Artifact, extra_meta: dict[str, Any] | None = None) -> str:
        """Assemble the artifact directory, move it into place, then append the manifest line.

        The referenced STL/STEP/conversation files must exist (they are
        copied, never moved, so retries stay safe). A crash between the move
        and the append leaves no manifest entry; the integrity scan reports
        the orphan directory.
        """
        final_dir = self.artifacts_dir / artifact.artifact_id
        if final_dir.exists():
            raise StoreError(f"duplicate artifact id {artifact.artifact_id!r}")
        sources = {
            "model.stl": Path(artifact.stl_path),
            "model.step": Path(artifact.step_path),
            "conversation.jsonl": Path(artifact.conversation_log_path),
        }
        for name, source in sources.items():
            if not source.is_file():
                raise StoreError(f"staged file for {name} not found: {source}")

        staged_dir = self.staging_dir / f"commit-{artifact.artifact_id}"
        shutil.rmtree(staged_dir, ignore_errors=True)
        staged_dir.mkdir(parents=True)
        (staged_dir / "code.py").write_text(artifact.code, encoding="utf-8")
        for name, source in sources.items():
            shutil.copyfile(source, staged_dir / name)
        meta = artifact.manifest_record()
        meta.update(extra_meta or {})
        (staged_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")

        staged_dir.rename(final_dir)
        self._append_manifest_line(artifact.manifest_record())
        return artifact.artifact_id

    def _append_manifest_line(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True) + "\n"
        with self._manifest_lock:
            with self.manifest_path.open("a", encoding="utf-8") as handle:
                handle.write(line)
                handle.flush()

    def append_outcome(self, outcome: dict[str, Any]) -> None:
        line = json.dumps(outcome, sort_keys=True) + "\n"
        with self._outcomes_lock:
            with self.outcomes_path.open("a", encoding="utf-8") as handle:
                handle.write(line)
                handle.flush()

    # -- reads --------------------------------------------------------------

    def read_manifest(self) -> list[dict[str, Any]]:
        if not self.manifest_path.is_file():
            return []
        entries = []
        with self.manifest_path.open(encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    entries.append(json.loads(line))
        return entries

    def read_outcomes(self) -> list[dict[str, Any]]:
        if not self.outcomes_path.is_file():
            return []
        outcomes = []
        with self.outcomes_path.open(encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    outcomes.append(json.loads(line))
        return outcomes

    def integrity_scan(self, *, repair: bool = False) -> dict[str, Any]:
        """Check the manifest <-> artifact-directory bijection.

        An orphan directory (files moved, manifest append never happened) is
        the only state an interrupted commit can leave behind; with
        ``repair=True`` orphans are quarantined back under staging so the
        bijection holds afterwards.
        """
        manifest_ids = {entry["artifact_id"] for entry in self.read_manifest()}
        disk_ids = {p.name for p in self.artifacts_dir.iterdir() if p.is_dir()}
        orphan_dirs = sorted(disk_ids - manifest_ids)
        missing_dirs = sorted(manifest_ids - disk_ids)
        incomplete = sorted(
            aid
            for aid in (manifest_ids & disk_ids)
            if any(not (self.artifacts_dir / aid / name).is_file() for name in ARTIFACT_FILES)
        )
        if repair and orphan_dirs:
            for orphan in orphan_dirs:
                target = self.staging_dir / f"orphaned-{orphan}"
                shutil.rmtree(target, ignore_errors=True)
                (self.artifacts_dir / orphan).rename(target)
                logger.warning("quarantined orphan artifact dir %s", orphan)
        return {
            "ok": not orphan_dirs and not missing_dirs and not incomplete,
            "orphan_dirs": orphan_dirs,
            "missing_dirs": missing_dirs,
            "incomplete": incomplete,
            "repaired": bool(repair and orphan_dirs),
            "n_entries": len(manifest_ids),
        }


# -- splits -------------------------------------------------------------------


def build_manifest_splits(
    artifact_ids: list[str], n_val: int, n_test: int, seed: int
) -> dict[str, str]:
    """Seeded shuffle; the last ``n_test`` ids become test, the prior ``n_val`` val."""
    if n_val < 0 or n_test < 0:
        raise ValueError("split sizes must be nonnegative")
    if n_val + n_test > len(artifact_ids):
        raise StoreError(
            f"cannot split {len(artifact_ids)} entries into val={n_val} + test={n_test}"
        )
    shuffled = list(artifact_ids)
    random.Random(seed).shuffle(shuffled)
    n_train = len(shuffled) - n_val - n_test
    assignment: dict[str, str] = {}
    for i, artifact_id in enumerate(shuffled):
        if i < n_train:
            assignment[artifact_id] = "train"
        elif i < n_train + n_val:
            assignment[artifact_id] = "val"
        else:
            assignment[artifact_id] = "test"
    return assignment


def write_splits(store: ArtifactStore, assignment: dict[str, str], seed: int) -> None:
    payload = {"seed": seed, "splits": assignment}
    store.splits_path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


# -- generation statistics ------------------------------------------------------


@dataclass
class GenerationStats:
    n_tasks: int
    n_accepted: int
    first_attempt_success_rate: float | None
    mean_attempts: float | None
    median_attempts: float | None
    mean_function_calls: float | None
    tool_call_totals: dict[str, int]
    tokens_generated: int
    tokens_processed: int
    tokens_per_design_mean: float | None
    tokens_per_design_median: float | None

    def to_json_dict(self) -> dict[str, Any]:
        record = {
            "n_tasks": self.n_tasks,
            "n_accepted": self.n_accepted,
            "tool_call_totals": dict(sorted(self.tool_call_totals.items())),
            "tokens_generated": self.tokens_generated,
            "tokens_processed": self.tokens_processed,
        }
        optional = {
            "first_attempt_success_rate": self.first_attempt_success_rate,
            "mean_attempts": self.mean_attempts,
            "median_attempts": self.median_attempts,
            "mean_function_calls": self.mean_function_calls,
            "tokens_per_design_mean": self.tokens_per_design_mean,
            "tokens_per_design_median": self.tokens_per_design_median,
        }
        record.update({key: value for key, value in optional.items() if value is not None})
        return record


def _median_lower(values: list[float]) -> float:
    """Median with the lower-middle convention for even counts."""
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def compute_generation_stats(outcomes: Iterable[dict[str, Any]]) -> GenerationStats:
    """Aggregate run-level statistics from TaskOutcome records.

    Rates and per-design statistics are computed over accepted tasks; an
    empty outcome set yields zero totals with the rates absent rather than 0/0.
    """
    outcomes = list(outcomes)
    n_tasks = len(outcomes)
    accepted = [o for o in outcomes if o.get("status") == "accepted"]

    tool_totals: dict[str, int] = {}
    tokens_generated = 0
    tokens_processed = 0
    for outcome in outcomes:
        for name, count in (outcome.get("tool_call_counts") or {}).items():
            tool_totals[name] = tool_totals.get(name, 0) + int(count)
        tokens = outcome.get("tokens") or {}
        tokens_generated += int(tokens.get("completion", 0))
        tokens_processed += int(tokens.get("prompt", 0))

    if n_tasks == 0:
        return GenerationStats(
            n_tasks=0,
            n_accepted=0,
            first_attempt_success_rate=None,
            mean_attempts=None,
            median_attempts=None,
            mean_function_calls=None,
            tool_call_totals={},
            tokens_generated=0,
            tokens_processed=0,
            tokens_per_design_mean=None,
            tokens_per_design_median=None,
        )

    first_attempt = sum(1 for o in accepted if int(o.get("attempts_used", 0)) == 1)
    rate = first_attempt / n_tasks

    mean_attempts = median_attempts = None
    mean_calls = None
    per_design_mean = per_design_median = None
    if accepted:
        attempts = [float(o["attempts_used"]) for o in accepted]
        mean_attempts = sum(attempts) / len(attempts)
        median_attempts = _median_lower(attempts)
        calls = [float(sum((o.get("tool_call_counts") or {}).values())) for o in accepted]
        mean_calls = sum(calls) / len(calls)
        generated = [float((o.get("tokens") or {}).get("completion", 0)) for o in accepted]
        per_design_mean = sum(generated) / len(generated)
        per_design_median = _median_lower(generated)

    return GenerationStats(
        n_tasks=n_tasks,
        n_accepted=len(accepted),
        first_attempt_success_rate=rate,
        mean_attempts=mean_attempts,
        median_attempts=median_attempts,
        mean_function_calls=mean_calls,
        tool_call_totals=tool_totals,
        tokens_generated=tokens_generated,
        tokens_processed=tokens_processed,
        tokens_per_design_mean=per_design_mean,
        tokens_per_design_median=per_design_median,
    )
