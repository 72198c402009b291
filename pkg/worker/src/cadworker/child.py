"""Child entrypoint: execute one candidate program and report on it.

Runs in a throwaway process per request. The parent enforces the timeout and
reads the report from a file, so candidate prints cannot corrupt the
protocol stream. Standard output of the candidate is diverted to stderr.
"""
from __future__ import annotations

import contextlib
import json
import sys
import traceback
from pathlib import Path
from typing import Any, Callable

from . import geometry, kernel

STL_NAME = "model.stl"
STEP_NAME = "model.step"
NO_RESULT_MESSAGE = "no result variable"


def ensure_kernel() -> str:
    """Make ``import cadquery`` work; returns which backend provides it."""
    try:
        import cadquery
    except ImportError:
        sys.modules["cadquery"] = kernel.build_module()
        return "fallback"
    # a previously injected fallback module also satisfies the import
    return "fallback" if getattr(cadquery, "__fallback__", False) else "cadquery"


def _error_fragment(message: str, trace: str | None = None) -> dict[str, Any]:
    return {
        "exec_status": "error",
        "error_message": message,
        "traceback": trace,
        "topo": None,
        "exports": None,
        "artifact_paths": None,
    }


def _fallback_analysis(result: object, out_dir: Path) -> tuple[dict, dict[str, Callable[[], None]]]:
    if isinstance(result, kernel.Workplane):
        node = result.val()
    elif isinstance(result, (kernel.Prism, kernel.Boolean, kernel.Rounded)):
        node = result
    else:
        raise kernel.KernelError(
            f"result must be a Workplane with a solid, got {type(result).__name__}"
        )
    raster = geometry.rasterize_solid(node)
    topo = geometry.topology_of(raster)

    def export_stl() -> None:
        geometry.write_binary_stl(geometry.mask_to_triangles(raster), out_dir / STL_NAME)

    def export_step() -> None:
        geometry.write_step(topo, out_dir / STEP_NAME)

    return topo.to_wire(), {"stl": export_stl, "step": export_step}


def _cadquery_analysis(result: object, out_dir: Path) -> tuple[dict, dict[str, Callable[[], None]]]:
    import cadquery as cq

    shape = result.val() if isinstance(result, cq.Workplane) else result
    solids = shape.Solids()
    box = shape.BoundingBox()
    topo = {
        "num_brep_faces": len(shape.Faces()),
        "num_solids": len(solids),
        "volume": float(shape.Volume()),
        "bbox": [box.xmin, box.ymin, box.zmin, box.xmax, box.ymax, box.zmax],
    }

    def export_stl() -> None:
        cq.exporters.export(result, str(out_dir / STL_NAME))

    def export_step() -> None:
        cq.exporters.export(result, str(out_dir / STEP_NAME))

    return topo, {"stl": export_stl, "step": export_step}


def run_candidate(code: str, out_dir: Path) -> dict[str, Any]:
    """Execute the program, read ``result``, validate geometry, export files."""
    backend = ensure_kernel()
    out_dir.mkdir(parents=True, exist_ok=True)
    namespace: dict[str, Any] = {"__name__": "__cad_candidate__"}
    try:
        compiled = compile(code, "<candidate>", "exec")
        with contextlib.redirect_stdout(sys.stderr):
            exec(compiled, namespace)
    except BaseException as exc:
        return _error_fragment(f"{type(exc).__name__}: {exc}", traceback.format_exc())

    if "result" not in namespace:
        return _error_fragment(NO_RESULT_MESSAGE)

    analyze = _fallback_analysis if backend == "fallback" else _cadquery_analysis
    try:
        topo, exporters = analyze(namespace["result"], out_dir)
    except Exception as exc:
        return _error_fragment(f"{type(exc).__name__}: {exc}", traceback.format_exc())

    exports: dict[str, dict[str, Any]] = {}
    artifact_paths: dict[str, str] = {}
    for key, exporter in exporters.items():
        target = out_dir / (STL_NAME if key == "stl" else STEP_NAME)
        try:
            exporter()
            exports[key] = {"status": "ok", "detail": None}
            artifact_paths[key] = str(target)
        except Exception as exc:
            exports[key] = {"status": "error", "detail": f"{type(exc).__name__}: {exc}"}

    return {
        "exec_status": "ok",
        "error_message": None,
        "traceback": None,
        "topo": topo,
        "exports": exports,
        "artifact_paths": artifact_paths or None,
    }


def main() -> int:
    payload = json.load(sys.stdin)
    fragment = run_candidate(payload["code"], Path(payload["out_dir"]))
    report_path = Path(payload["report_path"])
    tmp_path = report_path.with_suffix(".tmp")
    tmp_path.write_text(json.dumps(fragment, sort_keys=True), encoding="utf-8")
    tmp_path.rename(report_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
