"""Raster evaluation of prismatic solids: topology metrics and mesh export.

Solids built by the fallback kernel are evaluated on a fixed planar grid:
booleans become mask operations, fillet/chamfer become Euclidean morphology,
and the exported STL is the watertight surface of the occupied cells. All
steps are deterministic, so repeated runs of the same program yield
bit-identical metrics and files.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .kernel import Boolean, Disk, Prism, Rect, Rounded, SolidNode, node_height

TARGET_CELLS = 192  # cells across the longest sketch extent
PAD_CELLS = 2

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)
EIGHT_CONN = np.ones((3, 3), dtype=int)

STL_HEADER = b"cadworker prismatic surface"  # must not start with b"solid"


class GeometryError(Exception):
    """The solid cannot be evaluated to a usable region."""


@dataclass(frozen=True)
class Grid:
    x0: float
    y0: float
    cell: float
    nx: int
    ny: int

    def edge_x(self, i: int) -> float:
        return self.x0 + i * self.cell

    def edge_y(self, j: int) -> float:
        return self.y0 + j * self.cell


@dataclass(frozen=True)
class RasterSolid:
    grid: Grid
    mask: np.ndarray  # bool, shape (nx, ny), True = material
    height: float


@dataclass(frozen=True)
class PrismaticTopology:
    num_brep_faces: int
    num_solids: int
    volume: float
    bbox: tuple[float, float, float, float, float, float]

    def to_wire(self) -> dict:
        return {
            "num_brep_faces": self.num_brep_faces,
            "num_solids": self.num_solids,
            "volume": self.volume,
            "bbox": list(self.bbox),
        }


# -- sketch bounds -----------------------------------------------------------------


def _prim_bounds(prim: Rect | Disk) -> tuple[float, float, float, float]:
    if isinstance(prim, Rect):
        return (
            prim.cx - prim.width / 2.0,
            prim.cy - prim.height / 2.0,
            prim.cx + prim.width / 2.0,
            prim.cy + prim.height / 2.0,
        )
    return (prim.cx - prim.radius, prim.cy - prim.radius, prim.cx + prim.radius, prim.cy + prim.radius)


def sketch_bounds(node: SolidNode) -> tuple[float, float, float, float]:
    """Planar bounding box of the material; cut tools do not extend it."""
    if isinstance(node, Prism):
        boxes = [_prim_bounds(p) for p in node.prims]
        return (
            min(b[0] for b in boxes),
            min(b[1] for b in boxes),
            max(b[2] for b in boxes),
            max(b[3] for b in boxes),
        )
    if isinstance(node, Boolean):
        a = sketch_bounds(node.a)
        if node.op == "cut":
            return a
        b = sketch_bounds(node.b)
        return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))
    if isinstance(node, Rounded):
        # opening removes material; closing fills concavities inside the hull
        return sketch_bounds(node.base)
    raise GeometryError(f"unknown solid node {type(node).__name__}")


def max_round_radius(node: SolidNode) -> float:
    """Largest fillet/chamfer radius in the tree; sizes the grid padding."""
    if isinstance(node, Prism):
        return 0.0
    if isinstance(node, Boolean):
        return max(max_round_radius(node.a), max_round_radius(node.b))
    return max(node.radius, max_round_radius(node.base))


# -- rasterization -----------------------------------------------------------------


def _paint(prims: tuple[Rect | Disk, ...], grid: Grid) -> np.ndarray:
    xs = grid.x0 + (np.arange(grid.nx) + 0.5) * grid.cell
    ys = grid.y0 + (np.arange(grid.ny) + 0.5) * grid.cell
    cx = xs[:, None]
    cy = ys[None, :]
    mask = np.zeros((grid.nx, grid.ny), dtype=bool)
    for prim in prims:
        if isinstance(prim, Rect):
            mask |= (np.abs(cx - prim.cx) <= prim.width / 2.0) & (
                np.abs(cy - prim.cy) <= prim.height / 2.0
            )
        else:
            mask |= (cx - prim.cx) ** 2 + (cy - prim.cy) ** 2 <= prim.radius**2
    return mask


def _dilate(mask: np.ndarray, r_cells: float) -> np.ndarray:
    return ndimage.distance_transform_edt(~mask) <= r_cells


def _erode(mask: np.ndarray, r_cells: float) -> np.ndarray:
    return ndimage.distance_transform_edt(mask) > r_cells


def _eval(node: SolidNode, grid: Grid) -> np.ndarray:
    if isinstance(node, Prism):
        return _paint(node.prims, grid)
    if isinstance(node, Boolean):
        a = _eval(node.a, grid)
        b = _eval(node.b, grid)
        return (a | b) if node.op == "union" else (a & ~b)
    if isinstance(node, Rounded):
        base = _eval(node.base, grid)
        r = node.radius / grid.cell
        opened = _dilate(_erode(base, r), r)
        if node.mode == "fillet":
            return opened
        return _erode(_dilate(opened, r), r)  # chamfer also rounds concave corners
    raise GeometryError(f"unknown solid node {type(node).__name__}")


def fill_diagonal_contacts(mask: np.ndarray) -> np.ndarray:
    """Add cells until no 2x2 block has exactly two diagonal cells occupied.

    Such blocks produce a non-manifold vertical edge in the voxel surface;
    filling one empty neighbor keeps the surface watertight. Growth is
    monotone, so the loop terminates.
    """
    mask = mask.copy()
    for _ in range(mask.size):
        a = mask[:-1, :-1]
        b = mask[1:, 1:]
        c = mask[1:, :-1]
        d = mask[:-1, 1:]
        main = a & b & ~c & ~d
        anti = c & d & ~a & ~b
        if not main.any() and not anti.any():
            return mask
        fill = np.zeros_like(mask)
        fill[1:, :-1] |= main
        fill[:-1, :-1] |= anti
        mask |= fill
    raise GeometryError("diagonal contact cleanup did not converge")


def rasterize_solid(node: SolidNode) -> RasterSolid:
    xmin, ymin, xmax, ymax = sketch_bounds(node)
    extent = max(xmax - xmin, ymax - ymin)
    if extent <= 0:
        raise GeometryError("sketch has zero extent")
    cell = extent / TARGET_CELLS
    # padding must exceed the largest morphological dilation, or closing
    # saturates at the grid border and leaves a spurious material skin
    round_pad = math.ceil(max_round_radius(node) / cell) + 1 if max_round_radius(node) else 0
    pad = PAD_CELLS + round_pad
    x0 = xmin - pad * cell
    y0 = ymin - pad * cell
    nx = math.ceil((xmax - x0) / cell) + pad
    ny = math.ceil((ymax - y0) / cell) + pad
    grid = Grid(x0=x0, y0=y0, cell=cell, nx=nx, ny=ny)
    mask = fill_diagonal_contacts(_eval(node, grid))
    if not mask.any():
        raise GeometryError("solid rasterized to an empty region")
    return RasterSolid(grid=grid, mask=mask, height=node_height(node))


# -- topology metrics ----------------------------------------------------------------


def _hole_count(mask: np.ndarray) -> int:
    # background components not connected to the padded border are holes;
    # 8-connectivity on the background is the dual of 4-connected material
    padded = np.pad(~mask, 1, constant_values=True)
    _, n = ndimage.label(padded, structure=EIGHT_CONN)
    return n - 1


def topology_of(raster: RasterSolid) -> PrismaticTopology:
    mask = raster.mask
    grid = raster.grid
    _, components = ndimage.label(mask, structure=FOUR_CONN)
    holes = _hole_count(mask)
    # per solid: top, bottom, and one outer wall; plus one wall per hole
    faces = 3 * components + holes
    volume = float(mask.sum()) * grid.cell**2 * raster.height
    ii, jj = np.nonzero(mask)
    bbox = (
        grid.edge_x(int(ii.min())),
        grid.edge_y(int(jj.min())),
        0.0,
        grid.edge_x(int(ii.max()) + 1),
        grid.edge_y(int(jj.max()) + 1),
        raster.height,
    )
    return PrismaticTopology(
        num_brep_faces=faces, num_solids=components, volume=volume, bbox=bbox
    )


# -- surface extraction and export ----------------------------------------------------


def _lift(points: np.ndarray, z: float) -> np.ndarray:
    return np.column_stack([points, np.full(len(points), z)])


def mask_to_triangles(raster: RasterSolid) -> np.ndarray:
    """Closed voxel surface of the mask as an (n, 3, 3) triangle array.

    Every vertex lies on the cell-edge lattice and is computed by the same
    expression everywhere, so downstream exact vertex merging reconstructs a
    watertight 2-manifold.
    """
    grid, mask, h = raster.grid, raster.mask, raster.height
    xs = grid.x0 + np.arange(grid.nx + 1) * grid.cell
    ys = grid.y0 + np.arange(grid.ny + 1) * grid.cell
    chunks: list[np.ndarray] = []

    ii, jj = np.nonzero(mask)
    a = np.column_stack([xs[ii], ys[jj]])
    b = np.column_stack([xs[ii + 1], ys[jj]])
    c = np.column_stack([xs[ii + 1], ys[jj + 1]])
    d = np.column_stack([xs[ii], ys[jj + 1]])
    top = [_lift(p, h) for p in (a, b, c, d)]
    bot = [_lift(p, 0.0) for p in (a, b, c, d)]
    chunks.append(np.stack([top[0], top[1], top[2]], axis=1))
    chunks.append(np.stack([top[0], top[2], top[3]], axis=1))
    chunks.append(np.stack([bot[0], bot[2], bot[1]], axis=1))
    chunks.append(np.stack([bot[0], bot[3], bot[2]], axis=1))

    padded = np.pad(mask, 1, constant_values=False)
    neighbors = {
        "east": padded[2:, 1:-1],
        "west": padded[:-2, 1:-1],
        "north": padded[1:-1, 2:],
        "south": padded[1:-1, :-2],
    }
    for side, neighbor in neighbors.items():
        wi, wj = np.nonzero(mask & ~neighbor)
        if len(wi) == 0:
            continue
        if side in ("east", "west"):
            x = xs[wi + 1] if side == "east" else xs[wi]
            p1 = np.column_stack([x, ys[wj], np.zeros(len(wi))])
            p2 = np.column_stack([x, ys[wj + 1], np.zeros(len(wi))])
            p3 = np.column_stack([x, ys[wj + 1], np.full(len(wi), h)])
            p4 = np.column_stack([x, ys[wj], np.full(len(wi), h)])
            if side == "east":  # outward +x
                chunks.append(np.stack([p1, p2, p3], axis=1))
                chunks.append(np.stack([p1, p3, p4], axis=1))
            else:  # outward -x
                chunks.append(np.stack([p1, p3, p2], axis=1))
                chunks.append(np.stack([p1, p4, p3], axis=1))
        else:
            y = ys[wj + 1] if side == "north" else ys[wj]
            q1 = np.column_stack([xs[wi], y, np.zeros(len(wi))])
            q2 = np.column_stack([xs[wi + 1], y, np.zeros(len(wi))])
            q3 = np.column_stack([xs[wi + 1], y, np.full(len(wi), h)])
            q4 = np.column_stack([xs[wi], y, np.full(len(wi), h)])
            if side == "north":  # outward +y
                chunks.append(np.stack([q1, q3, q2], axis=1))
                chunks.append(np.stack([q1, q4, q3], axis=1))
            else:  # outward -y
                chunks.append(np.stack([q1, q2, q3], axis=1))
                chunks.append(np.stack([q1, q3, q4], axis=1))

    return np.concatenate(chunks, axis=0)


def write_binary_stl(triangles: np.ndarray, path) -> None:
    tris = np.asarray(triangles, dtype=np.float64)
    if tris.ndim != 3 or tris.shape[1:] != (3, 3):
        raise GeometryError(f"triangle array must be (n, 3, 3), got {tris.shape}")
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    lengths = np.linalg.norm(normals, axis=1)
    lengths[lengths == 0.0] = 1.0
    normals = normals / lengths[:, None]
    record = np.zeros(
        len(tris),
        dtype=[("normal", "<f4", 3), ("vertices", "<f4", (3, 3)), ("attr", "<u2")],
    )
    record["normal"] = normals
    record["vertices"] = tris
    with open(path, "wb") as handle:
        handle.write(STL_HEADER.ljust(80, b" "))
        handle.write(struct.pack("<I", len(tris)))
        handle.write(record.tobytes())


def write_step(topology: PrismaticTopology, path, name: str = "model") -> None:
    """Minimal deterministic AP214 text file carrying the part's extent.

    Downstream consumers treat STEP as an opaque artifact; this writer
    records the bounding-box corners rather than the full B-Rep.
    """
    x0, y0, z0, x1, y1, z1 = topology.bbox
    corners = [
        (x, y, z) for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)
    ]
    lines = [
        "ISO-10303-21;",
        "HEADER;",
        "FILE_DESCRIPTION(('prismatic solid export'),'2;1');",
        f"FILE_NAME('{name}.step','',('cadworker'),(''),'','','');",
        "FILE_SCHEMA(('AUTOMOTIVE_DESIGN { 1 0 10303 214 1 1 1 1 }'));",
        "ENDSEC;",
        "DATA;",
        f"#1=PRODUCT('{name}','prismatic solid','',());",
    ]
    for index, (x, y, z) in enumerate(corners, start=2):
        lines.append(f"#{index}=CARTESIAN_POINT('',({x:.6f},{y:.6f},{z:.6f}));")
    lines += ["ENDSEC;", "END-ISO-10303-21;", ""]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines))
