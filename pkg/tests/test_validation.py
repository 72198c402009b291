"""Acceptance gates: reason codes per fixture, wire round-trip, monotonicity."""
from __future__ import annotations

import random

import numpy as np
import pytest

from cadforge.mesh import TriMesh, cube_mesh, write_stl
from cadforge.validation import (
    REASON_EXEC,
    REASON_EXPORT_STEP,
    REASON_EXPORT_STL,
    REASON_KERNEL_MESH_MISMATCH,
    REASON_MESH_COMPONENTS,
    REASON_MIN_FACES,
    REASON_MIN_VOLUME,
    REASON_NOT_WATERTIGHT,
    REASON_SINGLE_SOLID,
    REASON_STL_MISSING,
    REASON_STL_UNREADABLE,
    ExportOutcome,
    GeometryGates,
    ReportError,
    TopologyMetrics,
    ValidationReport,
    evaluate_report,
)
from helpers.reports import passing_report, write_cube_artifacts

NO_RECHECK = GeometryGates(require_watertight_stl=False)


def ok_report(
    faces: int = 9,
    solids: int = 1,
    volume: float = 1000.0,
    stl: str = "ok",
    step: str = "ok",
    artifact_paths: dict | None = None,
) -> ValidationReport:
    return ValidationReport(
        exec_status="ok",
        topo=TopologyMetrics(faces, solids, volume, (-1, -1, -1, 1, 1, 1)),
        exports={"stl": ExportOutcome(stl), "step": ExportOutcome(step)},
        artifact_paths=artifact_paths,
    )


class TestReasonCodes:
    def test_exec_failure_is_the_only_reason(self):
        report = ValidationReport(exec_status="error", error_message="NameError")
        verdict = evaluate_report(report, GeometryGates())
        assert not verdict.passed
        assert verdict.reasons == (REASON_EXEC,)

    def test_timeout_counts_as_exec_failure(self):
        report = ValidationReport(exec_status="timeout")
        assert evaluate_report(report, GeometryGates()).reasons == (REASON_EXEC,)

    def test_six_faces_fails_min_faces_gate(self):
        verdict = evaluate_report(ok_report(faces=6), NO_RECHECK)
        assert not verdict.passed
        assert verdict.reasons == (REASON_MIN_FACES,)

    def test_two_solids_fails_single_solid_gate(self):
        verdict = evaluate_report(ok_report(solids=2), NO_RECHECK)
        assert not verdict.passed
        assert verdict.reasons == (REASON_SINGLE_SOLID,)

    def test_zero_volume_fails_volume_gate(self):
        verdict = evaluate_report(ok_report(volume=0.0), NO_RECHECK)
        assert not verdict.passed
        assert verdict.reasons == (REASON_MIN_VOLUME,)

    def test_export_failures_named_individually(self):
        verdict = evaluate_report(ok_report(stl="error"), NO_RECHECK)
        assert verdict.reasons == (REASON_EXPORT_STL,)
        verdict = evaluate_report(ok_report(step="error"), NO_RECHECK)
        assert verdict.reasons == (REASON_EXPORT_STEP,)

    def test_failures_collected_not_short_circuited(self):
        verdict = evaluate_report(ok_report(faces=3, solids=0, volume=0.0, stl="error"), NO_RECHECK)
        assert verdict.reasons == (
            REASON_SINGLE_SOLID,
            REASON_MIN_FACES,
            REASON_MIN_VOLUME,
            REASON_EXPORT_STL,
        )

    def test_passing_report_passes_with_real_stl(self, cube_artifacts):
        stl_path, step_path = cube_artifacts
        verdict = evaluate_report(passing_report(stl_path, step_path), GeometryGates())
        assert verdict.passed
        assert verdict.reasons == ()

    def test_missing_stl_path_flagged(self, tmp_path):
        report = ok_report(artifact_paths={"stl": str(tmp_path / "nope.stl")})
        verdict = evaluate_report(report, GeometryGates())
        assert REASON_STL_MISSING in verdict.reasons

    def test_unreadable_stl_flagged(self, tmp_path):
        bad = tmp_path / "bad.stl"
        bad.write_bytes(bytes([0xFF] * 40))
        report = ok_report(artifact_paths={"stl": str(bad)})
        assert REASON_STL_UNREADABLE in evaluate_report(report, GeometryGates()).reasons

    def test_open_mesh_stl_fails_watertight_recheck(self, tmp_path):
        cube = cube_mesh()
        opened = TriMesh(cube.vertices, cube.triangles[:-1])
        path = tmp_path / "open.stl"
        write_stl(opened, path)
        report = ok_report(artifact_paths={"stl": str(path)})
        reasons = evaluate_report(report, GeometryGates()).reasons
        assert REASON_NOT_WATERTIGHT in reasons

    def test_two_component_stl_contradicting_kernel_flagged(self, tmp_path):
        a = cube_mesh(1.0)
        b = cube_mesh(1.0, center=(5.0, 0.0, 0.0))
        both = TriMesh(
            np.vstack([a.vertices, b.vertices]),
            np.vstack([a.triangles, b.triangles + len(a.vertices)]),
        )
        path = tmp_path / "two.stl"
        write_stl(both, path)
        # kernel claims one solid; the mesh recheck sees two components
        report = ok_report(solids=1, artifact_paths={"stl": str(path)})
        reasons = evaluate_report(report, GeometryGates()).reasons
        assert REASON_MESH_COMPONENTS in reasons
        assert REASON_KERNEL_MESH_MISMATCH in reasons

    def test_custom_gates_respected(self):
        gates = GeometryGates(min_faces=20, require_single_solid=False, min_volume=0.5, require_watertight_stl=False)
        verdict = evaluate_report(ok_report(faces=19, solids=3, volume=0.6), gates)
        assert verdict.reasons == (REASON_MIN_FACES,)


class TestReportContract:
    def test_wire_round_trip(self, cube_artifacts):
        report = passing_report(*cube_artifacts)
        assert ValidationReport.from_wire(report.to_wire()) == report

    def test_error_report_round_trip(self):
        report = ValidationReport(exec_status="error", error_message="boom", traceback="tb")
        assert ValidationReport.from_wire(report.to_wire()) == report

    def test_invalid_exec_status_rejected(self):
        with pytest.raises(ReportError):
            ValidationReport(exec_status="exploded")

    def test_topo_forbidden_unless_ok(self):
        with pytest.raises(ReportError):
            ValidationReport(
                exec_status="error",
                topo=TopologyMetrics(1, 1, 1.0, (0, 0, 0, 1, 1, 1)),
            )

    def test_nonfinite_volume_rejected(self):
        with pytest.raises(ReportError):
            ValidationReport(
                exec_status="ok",
                topo=TopologyMetrics(6, 1, float("nan"), (0, 0, 0, 1, 1, 1)),
            )

    def test_negative_faces_rejected(self):
        with pytest.raises(ReportError):
            TopologyMetrics(-1, 1, 1.0, (0, 0, 0, 1, 1, 1))

    def test_malformed_wire_rejected(self):
        with pytest.raises(ReportError):
            ValidationReport.from_wire({"exec_status": "ok", "topo": {"num_brep_faces": 1}})

    def test_verdict_payload_shape(self):
        verdict = evaluate_report(ok_report(faces=2), NO_RECHECK)
        payload = verdict.to_payload()
        assert payload == {"accepted": False, "failed_gates": [REASON_MIN_FACES]}

    def test_bad_gates_rejected(self):
        with pytest.raises(ValueError):
            GeometryGates(min_faces=0)
        with pytest.raises(ValueError):
            GeometryGates(min_volume=0.0)


def random_report(rng: random.Random) -> ValidationReport:
    if rng.random() < 0.2:
        return ValidationReport(exec_status=rng.choice(["error", "timeout"]))
    return ok_report(
        faces=rng.randint(0, 20),
        solids=rng.randint(0, 3),
        volume=rng.choice([0.0, 0.005, 0.01, 0.5, 100.0]),
        stl=rng.choice(["ok", "error"]),
        step=rng.choice(["ok", "error"]),
    )


def degrade(report: ValidationReport, rng: random.Random) -> ValidationReport:
    """Produce a report that is at most as good on every gate dimension."""
    if report.exec_status != "ok" or rng.random() < 0.1:
        return ValidationReport(exec_status=rng.choice(["error", "timeout"]))
    topo = report.topo
    faces = topo.num_brep_faces - rng.randint(0, 5)
    faces = max(faces, 0)
    solids = topo.num_solids if rng.random() < 0.5 else rng.choice([0, 2, 3])
    volume = topo.volume * rng.choice([1.0, 0.5, 0.0])
    stl = report.exports["stl"].status if rng.random() < 0.5 else "error"
    step = report.exports["step"].status if rng.random() < 0.5 else "error"
    return ok_report(faces=faces, solids=solids, volume=volume, stl=stl, step=step)


def dominates(better: ValidationReport, worse: ValidationReport) -> bool:
    """True when `better` is at least as good on every gate dimension."""
    if worse.exec_status != "ok":
        return True
    if better.exec_status != "ok":
        return False
    bt, wt = better.topo, worse.topo
    if bt.num_brep_faces < wt.num_brep_faces:
        return False
    if bt.volume < wt.volume:
        return False
    if wt.num_solids == 1 and bt.num_solids != 1:
        return False
    for key in ("stl", "step"):
        if worse.exports[key].ok and not better.exports[key].ok:
            return False
    return True


class TestGateMonotonicity:
    def test_monotone_over_randomized_reports(self):
        rng = random.Random(20250401)
        gates = NO_RECHECK
        checked = 0
        for _ in range(1000):
            better = random_report(rng)
            worse = degrade(better, rng)
            if not dominates(better, worse):
                continue
            checked += 1
            verdict_better = evaluate_report(better, gates)
            verdict_worse = evaluate_report(worse, gates)
            # a report that dominates another can never do worse at the gate
            if verdict_worse.passed:
                assert verdict_better.passed
            if better.exec_status == "ok" and worse.exec_status == "ok":
                assert set(verdict_better.reasons) <= set(verdict_worse.reasons)
        assert checked >= 800
