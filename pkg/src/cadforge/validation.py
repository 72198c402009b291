"""Acceptance policy: the executor's structured report checked against geometry gates.

A candidate design passes only if code execution succeeded, the kernel-side
topology clears every gate, both exports succeeded, and (by default) the
exported STL independently re-checks as a watertight single-component mesh.
Failures are collected rather than short-circuited so the model gets the
complete list of violated gates as feedback.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from . import mesh as meshmod

EXEC_STATUSES = ("ok", "error", "timeout")

# Gate reason codes, in check order.
REASON_EXEC = "exec"
REASON_SINGLE_SOLID = "single_solid"
REASON_MIN_FACES = "min_faces"
REASON_MIN_VOLUME = "min_volume"
REASON_EXPORT_STL = "export_stl"
REASON_EXPORT_STEP = "export_step"
REASON_STL_MISSING = "stl_missing"
REASON_STL_UNREADABLE = "stl_unreadable"
REASON_NOT_WATERTIGHT = "stl_not_watertight"
REASON_MESH_COMPONENTS = "stl_components"
REASON_KERNEL_MESH_MISMATCH = "kernel_mesh_mismatch"


class ReportError(Exception):
    """Raised when a wire report violates the shared contract."""


@dataclass(frozen=True)
class TopologyMetrics:
    num_brep_faces: int
    num_solids: int
    volume: float
    bbox: tuple[float, float, float, float, float, float]

    def __post_init__(self) -> None:
        if self.num_brep_faces < 0:
            raise ReportError("num_brep_faces must be >= 0")
        if len(self.bbox) != 6:
            raise ReportError("bbox must have 6 entries")

    def to_wire(self) -> dict[str, Any]:
        return {
            "num_brep_faces": self.num_brep_faces,
            "num_solids": self.num_solids,
            "volume": self.volume,
            "bbox": list(self.bbox),
        }


@dataclass(frozen=True)
class ExportOutcome:
    status: str  # "ok" | "error"
    detail: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_wire(self) -> dict[str, Any]:
        return {"status": self.status, "detail": self.detail}


@dataclass(frozen=True)
class ValidationReport:
    """Executor verdict: execution status, topology metrics, export results."""

    exec_status: str
    error_message: str | None = None
    traceback: str | None = None
    topo: TopologyMetrics | None = None
    exports: dict[str, ExportOutcome] | None = None
    artifact_paths: dict[str, str] | None = None

    def __post_init__(self) -> None:
        if self.exec_status not in EXEC_STATUSES:
            raise ReportError(f"invalid exec_status {self.exec_status!r}")
        if self.exec_status != "ok" and (self.topo is not None or self.exports is not None):
            raise ReportError("topo and exports must be absent unless exec_status is ok")
        if self.topo is not None and not _is_finite(self.topo.volume):
            raise ReportError("volume must be finite")

    def to_wire(self) -> dict[str, Any]:
        return {
            "exec_status": self.exec_status,
            "error_message": self.error_message,
            "traceback": self.traceback,
            "topo": self.topo.to_wire() if self.topo else None,
            "exports": {name: out.to_wire() for name, out in self.exports.items()} if self.exports else None,
            "artifact_paths": dict(self.artifact_paths) if self.artifact_paths else None,
        }

    @classmethod
    def from_wire(cls, wire: dict[str, Any]) -> "ValidationReport":
        try:
            topo = None
            if wire.get("topo") is not None:
                raw = wire["topo"]
                topo = TopologyMetrics(
                    num_brep_faces=int(raw["num_brep_faces"]),
                    num_solids=int(raw["num_solids"]),
                    volume=float(raw["volume"]),
                    bbox=tuple(float(x) for x in raw["bbox"]),
                )
            exports = None
            if wire.get("exports") is not None:
                exports = {
                    name: ExportOutcome(status=str(out["status"]), detail=out.get("detail"))
                    for name, out in wire["exports"].items()
                }
            paths = wire.get("artifact_paths")
            return cls(
                exec_status=str(wire["exec_status"]),
                error_message=wire.get("error_message"),
                traceback=wire.get("traceback"),
                topo=topo,
                exports=exports,
                artifact_paths=dict(paths) if paths else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ReportError(f"malformed validation report: {exc}") from exc


@dataclass(frozen=True)
class GeometryGates:
    """Thresholds a report must clear. Defaults assume the 100-unit scale convention."""

    min_faces: int = 7
    require_single_solid: bool = True
    min_volume: float = 0.01
    require_watertight_stl: bool = True

    def __post_init__(self) -> None:
        if self.min_faces < 1:
            raise ValueError("min_faces must be >= 1")
        if self.min_volume <= 0.0:
            raise ValueError("min_volume must be > 0")


@dataclass(frozen=True)
class Verdict:
    passed: bool
    reasons: tuple[str, ...] = ()

    def to_payload(self) -> dict[str, Any]:
        return {"accepted": self.passed, "failed_gates": list(self.reasons)}


def _is_finite(x: float) -> bool:
    return math.isfinite(x)


def evaluate_report(report: ValidationReport, gates: GeometryGates) -> Verdict:
    """Apply every gate in order and collect all violations.

    When execution itself failed, topology and exports are absent by
    contract and the verdict carries only the execution reason.
    """
    if report.exec_status != "ok":
        return Verdict(passed=False, reasons=(REASON_EXEC,))

    reasons: list[str] = []
    topo = report.topo
    if topo is None:
        reasons.append(REASON_EXEC)
        return Verdict(passed=False, reasons=tuple(reasons))

    if gates.require_single_solid and topo.num_solids != 1:
        reasons.append(REASON_SINGLE_SOLID)
    if topo.num_brep_faces < gates.min_faces:
        reasons.append(REASON_MIN_FACES)
    if topo.volume < gates.min_volume:
        reasons.append(REASON_MIN_VOLUME)

    exports = report.exports or {}
    stl_export = exports.get("stl")
    step_export = exports.get("step")
    if stl_export is None or not stl_export.ok:
        reasons.append(REASON_EXPORT_STL)
    if step_export is None or not step_export.ok:
        reasons.append(REASON_EXPORT_STEP)

    if gates.require_watertight_stl:
        reasons.extend(_stl_recheck_reasons(report))
    return Verdict(passed=not reasons, reasons=tuple(reasons))


def _stl_recheck_reasons(report: ValidationReport) -> list[str]:
    paths = report.artifact_paths or {}
    stl_path = paths.get("stl")
    if not stl_path or not Path(stl_path).is_file():
        return [REASON_STL_MISSING]
    try:
        tri = meshmod.load_stl(stl_path)
    except meshmod.MeshError:
        return [REASON_STL_UNREADABLE]

    reasons = []
    if not meshmod.mesh_is_watertight(tri):
        reasons.append(REASON_NOT_WATERTIGHT)
    components = meshmod.mesh_connected_components(tri)
    if components != 1:
        reasons.append(REASON_MESH_COMPONENTS)
    topo = report.topo
    if topo is not None and components != topo.num_solids:
        reasons.append(REASON_KERNEL_MESH_MISMATCH)
    return reasons
