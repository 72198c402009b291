"""Artifact store: atomic commits, integrity scan, splits, run statistics."""
from __future__ import annotations

import dataclasses
import json
import random

import pytest

from cadforge.store import (
    ARTIFACT_FILES,
    Artifact,
    ArtifactStore,
    StoreError,
    build_manifest_splits,
    compute_generation_stats,
    utc_now_iso,
    write_splits,
)
from helpers.reports import write_cube_artifacts

FIXED_TS = "2024-05-01T12:00:00+00:00"


def fixed_clock() -> str:
    return FIXED_TS


def make_store(root) -> ArtifactStore:
    return ArtifactStore(root / "store", clock=fixed_clock)


def stage_artifact(store: ArtifactStore, task_id: str = "task-1", artifact_id: str = "task-1-abc") -> Artifact:
    staging = store.new_staging_dir(task_id)
    stl_path, step_path = write_cube_artifacts(staging)
    log_path = staging / "conversation.jsonl"
    log_path.write_text('{"role": "system", "content": "s"}\n', encoding="utf-8")
    return Artifact(
        artifact_id=artifact_id,
        task_id=task_id,
        category="Mounting Bracket",
        description="a rectangular mounting bracket",
        code="import cadquery as cq\nresult = cq.Workplane('XY').box(10, 10, 10)\n",
        stl_path=str(stl_path),
        step_path=str(step_path),
        topo={"num_brep_faces": 9, "num_solids": 1, "volume": 1000.0},
        created_at=store.now(),
        conversation_log_path=str(log_path),
    )


class TestCommit:
    def test_commit_produces_complete_artifact_dir(self, tmp_path):
        store = make_store(tmp_path)
        artifact = stage_artifact(store)
        returned = store.commit_artifact(artifact)
        assert returned == artifact.artifact_id
        final = store.artifacts_dir / artifact.artifact_id
        assert sorted(p.name for p in final.iterdir()) == sorted(ARTIFACT_FILES)
        assert (final / "code.py").read_text(encoding="utf-8") == artifact.code

    def test_commit_appends_manifest_line(self, tmp_path):
        store = make_store(tmp_path)
        artifact = stage_artifact(store)
        store.commit_artifact(artifact)
        lines = store.manifest_path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0]) == artifact.manifest_record()
        assert json.loads(lines[0])["created_at"] == FIXED_TS

    def test_meta_json_merges_extra_fields(self, tmp_path):
        store = make_store(tmp_path)
        artifact = stage_artifact(store)
        store.commit_artifact(artifact, extra_meta={"attempts_used": 2, "final_turn": 4})
        meta = json.loads((store.artifacts_dir / artifact.artifact_id / "meta.json").read_text())
        assert meta["attempts_used"] == 2
        assert meta["final_turn"] == 4
        assert meta["artifact_id"] == artifact.artifact_id

    def test_duplicate_artifact_id_rejected(self, tmp_path):
        store = make_store(tmp_path)
        first = stage_artifact(store, task_id="task-1", artifact_id="dup")
        store.commit_artifact(first)
        second = stage_artifact(store, task_id="task-2", artifact_id="dup")
        with pytest.raises(StoreError, match="duplicate"):
            store.commit_artifact(second)

    def test_missing_source_file_rejected_before_any_write(self, tmp_path):
        store = make_store(tmp_path)
        artifact = stage_artifact(store)
        broken = dataclasses.replace(artifact, stl_path=str(tmp_path / "nowhere.stl"))
        with pytest.raises(StoreError, match="model.stl"):
            store.commit_artifact(broken)
        assert store.read_manifest() == []
        assert list(store.artifacts_dir.iterdir()) == []

    def test_commit_leaves_no_staging_residue(self, tmp_path):
        store = make_store(tmp_path)
        artifact = stage_artifact(store)
        store.commit_artifact(artifact)
        assert not (store.staging_dir / f"commit-{artifact.artifact_id}").exists()

    def test_sources_are_copied_not_moved(self, tmp_path):
        store = make_store(tmp_path)
        artifact = stage_artifact(store)
        store.commit_artifact(artifact)
        # originals still exist, so a retry after a crash can re-commit
        assert (store.staging_dir / artifact.task_id / "model.stl").is_file()

    def test_discard_staging(self, tmp_path):
        store = make_store(tmp_path)
        staging = store.new_staging_dir("task-9")
        (staging / "x").write_text("x")
        store.discard_staging("task-9")
        assert not staging.exists()
        store.discard_staging("task-9")  # idempotent

    def test_read_manifest_preserves_commit_order(self, tmp_path):
        store = make_store(tmp_path)
        for i in range(3):
            store.commit_artifact(stage_artifact(store, task_id=f"t{i}", artifact_id=f"t{i}-x"))
        assert [e["artifact_id"] for e in store.read_manifest()] == ["t0-x", "t1-x", "t2-x"]

    def test_outcomes_round_trip(self, tmp_path):
        store = make_store(tmp_path)
        store.append_outcome({"task_id": "t1", "status": "accepted"})
        store.append_outcome({"task_id": "t2", "status": "exhausted"})
        assert [o["task_id"] for o in store.read_outcomes()] == ["t1", "t2"]

    def test_clock_injection_default_is_utc_iso(self):
        stamp = utc_now_iso()
        assert "T" in stamp and stamp.endswith("Z")
        assert len(stamp) == len("2024-05-01T12:00:00Z")


class TestIntegrityScan:
    def test_clean_store_is_ok(self, tmp_path):
        store = make_store(tmp_path)
        store.commit_artifact(stage_artifact(store))
        result = store.integrity_scan()
        assert result["ok"]
        assert result["n_entries"] == 1

    def test_orphan_dir_detected(self, tmp_path):
        store = make_store(tmp_path)
        store.commit_artifact(stage_artifact(store))
        (store.artifacts_dir / "ghost").mkdir()
        result = store.integrity_scan()
        assert not result["ok"]
        assert result["orphan_dirs"] == ["ghost"]

    def test_missing_dir_detected(self, tmp_path):
        store = make_store(tmp_path)
        artifact = stage_artifact(store)
        store.commit_artifact(artifact)
        import shutil

        shutil.rmtree(store.artifacts_dir / artifact.artifact_id)
        result = store.integrity_scan()
        assert result["missing_dirs"] == [artifact.artifact_id]

    def test_incomplete_dir_detected(self, tmp_path):
        store = make_store(tmp_path)
        artifact = stage_artifact(store)
        store.commit_artifact(artifact)
        (store.artifacts_dir / artifact.artifact_id / "meta.json").unlink()
        result = store.integrity_scan()
        assert result["incomplete"] == [artifact.artifact_id]

    def test_repair_quarantines_orphans(self, tmp_path):
        store = make_store(tmp_path)
        store.commit_artifact(stage_artifact(store))
        ghost = store.artifacts_dir / "ghost"
        ghost.mkdir()
        (ghost / "code.py").write_text("x = 1\n")
        result = store.integrity_scan(repair=True)
        assert result["repaired"]
        assert not ghost.exists()
        assert (store.staging_dir / "orphaned-ghost" / "code.py").is_file()
        assert store.integrity_scan()["ok"]

    def test_repair_without_orphans_is_noop(self, tmp_path):
        store = make_store(tmp_path)
        result = store.integrity_scan(repair=True)
        assert result["ok"]
        assert not result["repaired"]


class TestSplits:
    def test_counts_and_partition(self, tmp_path):
        ids = [f"a-{i:03d}" for i in range(10)]
        assignment = build_manifest_splits(ids, n_val=2, n_test=3, seed=7)
        assert sorted(assignment) == sorted(ids)
        counts = {"train": 0, "val": 0, "test": 0}
        for split in assignment.values():
            counts[split] += 1
        assert counts == {"train": 5, "val": 2, "test": 3}

    def test_same_seed_reproduces_assignment(self):
        ids = [f"a-{i}" for i in range(50)]
        first = build_manifest_splits(ids, 5, 5, seed=123)
        second = build_manifest_splits(ids, 5, 5, seed=123)
        assert first == second

    def test_different_seed_changes_assignment(self):
        ids = [f"a-{i}" for i in range(50)]
        assert build_manifest_splits(ids, 5, 5, seed=1) != build_manifest_splits(ids, 5, 5, seed=2)

    def test_split_follows_seeded_shuffle_order(self):
        ids = [f"a-{i}" for i in range(10)]
        assignment = build_manifest_splits(ids, 2, 3, seed=99)
        shuffled = list(ids)
        random.Random(99).shuffle(shuffled)
        assert all(assignment[x] == "train" for x in shuffled[:5])
        assert all(assignment[x] == "val" for x in shuffled[5:7])
        assert all(assignment[x] == "test" for x in shuffled[7:])

    def test_oversized_split_rejected(self):
        with pytest.raises(StoreError):
            build_manifest_splits(["a"], 1, 1, seed=0)

    def test_negative_sizes_rejected(self):
        with pytest.raises(ValueError):
            build_manifest_splits(["a"], -1, 0, seed=0)

    def test_write_splits_file_shape(self, tmp_path):
        store = make_store(tmp_path)
        assignment = {"a-1": "train", "a-2": "test"}
        write_splits(store, assignment, seed=41)
        payload = json.loads(store.splits_path.read_text(encoding="utf-8"))
        assert payload == {"seed": 41, "splits": assignment}


def outcome(status: str = "accepted", attempts: int = 1, calls: dict | None = None, tokens: dict | None = None) -> dict:
    return {
        "status": status,
        "attempts_used": attempts,
        "tool_call_counts": calls or {},
        "tokens": tokens or {},
    }


class TestGenerationStats:
    def test_first_attempt_rate_exact_fraction(self):
        outcomes = [outcome(attempts=1) for _ in range(223)]
        outcomes += [outcome(attempts=2) for _ in range(500)]
        outcomes += [outcome(status="exhausted", attempts=100) for _ in range(277)]
        stats = compute_generation_stats(outcomes)
        assert stats.n_tasks == 1000
        assert stats.first_attempt_success_rate == 223 / 1000
        assert stats.first_attempt_success_rate == pytest.approx(0.223, abs=0)

    def test_attempt_moments_over_accepted_only(self):
        outcomes = [
            outcome(attempts=1),
            outcome(attempts=3),
            outcome(attempts=5),
            outcome(status="exhausted", attempts=100),
        ]
        stats = compute_generation_stats(outcomes)
        assert stats.mean_attempts == pytest.approx(3.0)
        assert stats.median_attempts == 3
        assert stats.first_attempt_success_rate == pytest.approx(1 / 4)

    def test_median_uses_lower_middle_for_even_counts(self):
        outcomes = [outcome(attempts=a) for a in (1, 2, 3, 4)]
        assert compute_generation_stats(outcomes).median_attempts == 2

    def test_tool_call_totals_and_means(self):
        outcomes = [
            outcome(calls={"execute_and_validate": 2, "lookup_documentation": 1}),
            outcome(calls={"execute_and_validate": 4}),
            outcome(status="aborted", calls={"execute_and_validate": 7}),
        ]
        stats = compute_generation_stats(outcomes)
        assert stats.tool_call_totals == {"execute_and_validate": 13, "lookup_documentation": 1}
        assert stats.mean_function_calls == pytest.approx((3 + 4) / 2)

    def test_token_totals_over_all_tasks_but_per_design_over_accepted(self):
        outcomes = [
            outcome(tokens={"prompt": 100, "completion": 10}),
            outcome(tokens={"prompt": 200, "completion": 30}),
            outcome(status="exhausted", tokens={"prompt": 1000, "completion": 500}),
        ]
        stats = compute_generation_stats(outcomes)
        assert stats.tokens_processed == 1300
        assert stats.tokens_generated == 540
        assert stats.tokens_per_design_mean == pytest.approx(20.0)
        assert stats.tokens_per_design_median == 10

    def test_empty_outcomes_yield_absent_rates(self):
        stats = compute_generation_stats([])
        assert stats.n_tasks == 0
        assert stats.first_attempt_success_rate is None
        record = stats.to_json_dict()
        assert "first_attempt_success_rate" not in record
        assert "mean_attempts" not in record
        assert record["n_tasks"] == 0

    def test_no_accepted_tasks_keeps_rate_but_not_attempt_stats(self):
        stats = compute_generation_stats([outcome(status="exhausted", attempts=100)])
        assert stats.first_attempt_success_rate == 0.0
        assert stats.mean_attempts is None
        record = stats.to_json_dict()
        assert record["first_attempt_success_rate"] == 0.0
        assert "mean_attempts" not in record

    def test_permutation_invariance(self):
        rng = random.Random(5)
        outcomes = [
            outcome(
                status=rng.choice(["accepted", "exhausted", "aborted"]),
                attempts=rng.randint(1, 9),
                calls={"execute_and_validate": rng.randint(0, 5)},
                tokens={"prompt": rng.randint(0, 100), "completion": rng.randint(0, 100)},
            )
            for _ in range(40)
        ]
        base = compute_generation_stats(outcomes)
        shuffled = list(outcomes)
        rng.shuffle(shuffled)
        # medians and totals cannot depend on outcome order
        assert compute_generation_stats(shuffled) == base
