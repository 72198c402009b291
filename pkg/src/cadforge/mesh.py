"""Triangle-mesh primitives: STL parsing, watertightness, components, signed volume.

These checks run on exported STL files without any CAD kernel, so the
acceptance policy can re-verify geometry independently of whatever the
executor reported.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEGENERATE_AREA_EPS = 1e-12
VERTEX_MERGE_DECIMALS = 9


class MeshError(Exception):
    """Raised for structurally invalid meshes or unparsable STL data."""


@dataclass(frozen=True)
class TriMesh:
    """Immutable triangle mesh. Degenerate triangles are dropped at load time."""

    vertices: np.ndarray
    triangles: np.ndarray
    dropped_degenerate: int = 0

    def __post_init__(self) -> None:
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise MeshError("triangle indices out of range")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def bounds(self) -> np.ndarray:
        """(2, 3) array of [min_xyz, max_xyz]."""
        if not len(self.vertices):
            raise MeshError("empty mesh has no bounds")
        return np.stack([self.vertices.min(axis=0), self.vertices.max(axis=0)])


def triangle_areas(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)


def mesh_from_triangle_soup(points: np.ndarray) -> TriMesh:
    """Build a mesh from an (n, 3, 3) corner array, merging coincident vertices.

    Positions are merged at 1e-9 so adjacency is well defined even when the
    exporter duplicated vertices per facet (as STL always does).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3, 3)
    areas = triangle_areas(points[:, 0], points[:, 1], points[:, 2])
    keep = areas > DEGENERATE_AREA_EPS
    dropped = int((~keep).sum())
    points = points[keep]

    flat = points.reshape(-1, 3)
    keys = np.round(flat, VERTEX_MERGE_DECIMALS)
    # np.unique over rows gives a deterministic canonical vertex set
    _, first_index, inverse = np.unique(
        keys.view([("x", np.float64), ("y", np.float64), ("z", np.float64)]).reshape(-1),
        return_index=True,
        return_inverse=True,
    )
    vertices = flat[first_index]
    triangles = inverse.reshape(-1, 3)
    return TriMesh(vertices=vertices, triangles=triangles, dropped_degenerate=dropped)


def _undirected_edges(mesh: TriMesh) -> np.ndarray:
    """(3m, 2) array of sorted vertex-index pairs, one row per triangle edge."""
    t = mesh.triangles
    edges = np.concatenate([t[:, (0, 1)], t[:, (1, 2)], t[:, (2, 0)]])
    return np.sort(edges, axis=1)


def mesh_is_watertight(mesh: TriMesh) -> bool:
    """True iff every undirected edge is shared by exactly two triangles."""
    if not mesh.n_triangles:
        return False
    edges = _undirected_edges(mesh)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool((counts == 2).all())


def mesh_connected_components(mesh: TriMesh) -> int:
    """Number of components under triangle adjacency via shared undirected edges."""
    m = mesh.n_triangles
    if m == 0:
        return 0
    edges = _undirected_edges(mesh)
    tri_ids = np.tile(np.arange(m), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges_sorted = edges[order]
    tris_sorted = tri_ids[order]

    parent = np.arange(m)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    i = 0
    n_edges = len(edges_sorted)
    while i < n_edges:
        j = i + 1
        while j < n_edges and (edges_sorted[j] == edges_sorted[i]).all():
            union(int(tris_sorted[i]), int(tris_sorted[j]))
            j += 1
        i = j
    return len({find(k) for k in range(m)})


def mesh_signed_volume(mesh: TriMesh) -> float:
    """Divergence-theorem volume: sum of det(v0, v1, v2) / 6 over triangles.

    Positive for outward-oriented closed surfaces; only meaningful as a
    volume when the mesh is watertight.
    """
    if not mesh.n_triangles:
        return 0.0
    v0, v1, v2 = mesh.corners()
    dets = np.einsum("ij,ij->i", v0, np.cross(v1, v2))
    return float(dets.sum() / 6.0)


# --- STL I/O ---

_BINARY_RECORD = struct.Struct("<12fH")


def _looks_binary(data: bytes) -> bool:
    if len(data) < 84:
        return False
    (count,) = struct.unpack_from("<I", data, 80)
    return len(data) == 84 + 50 * count


def load_stl(path: str | Path) -> TriMesh:
    """Parse binary or ASCII STL into a merged-vertex :class:`TriMesh`."""
    data = Path(path).read_bytes()
    if _looks_binary(data):
        return _parse_binary_stl(data)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MeshError(f"not a valid STL file: {path}") from exc
    return _parse_ascii_stl(text)


def _parse_binary_stl(data: bytes) -> TriMesh:
    (count,) = struct.unpack_from("<I", data, 80)
    records = np.frombuffer(data, dtype=np.uint8, count=50 * count, offset=84)
    floats = records.reshape(count, 50)[:, :48].copy().view("<f4").reshape(count, 12)
    corners = floats[:, 3:12].astype(np.float64).reshape(count, 3, 3)
    return mesh_from_triangle_soup(corners)


def _parse_ascii_stl(text: str) -> TriMesh:
    corners: list[list[float]] = []
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0] == "vertex":
            try:
                corners.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except ValueError as exc:
                raise MeshError(f"bad vertex line in ASCII STL: {line.strip()!r}") from exc
    if not corners or len(corners) % 3:
        raise MeshError("ASCII STL does not contain whole triangles")
    return mesh_from_triangle_soup(np.array(corners).reshape(-1, 3, 3))


def write_stl(mesh: TriMesh, path: str | Path, header: str = "cadforge") -> None:
    """Write binary STL (80-byte header, uint32 count, 50-byte records)."""
    v0, v1, v2 = mesh.corners()
    normals = np.cross(v1 - v0, v2 - v0)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    lengths[lengths == 0.0] = 1.0
    normals = normals / lengths

    buf = bytearray()
    buf += header.encode("ascii")[:80].ljust(80, b"\0")
    buf += struct.pack("<I", mesh.n_triangles)
    for i in range(mesh.n_triangles):
        buf += _BINARY_RECORD.pack(*normals[i], *v0[i], *v1[i], *v2[i], 0)
    Path(path).write_bytes(bytes(buf))


def cube_mesh(edge: float = 1.0, center: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned cube with outward-oriented triangles (test/fixture helper)."""
    h = edge / 2.0
    cx, cy, cz = center
    corners = np.array(
        [
            [cx - h, cy - h, cz - h],
            [cx + h, cy - h, cz - h],
            [cx + h, cy + h, cz - h],
            [cx - h, cy + h, cz - h],
            [cx - h, cy - h, cz + h],
            [cx + h, cy - h, cz + h],
            [cx + h, cy + h, cz + h],
            [cx - h, cy + h, cz + h],
        ]
    )
    quads = [
        (0, 3, 2, 1),  # bottom (-z)
        (4, 5, 6, 7),  # top (+z)
        (0, 1, 5, 4),  # front (-y)
        (2, 3, 7, 6),  # back (+y)
        (1, 2, 6, 5),  # right (+x)
        (3, 0, 4, 7),  # left (-x)
    ]
    triangles = []
    for a, b, c, d in quads:
        triangles.append((a, b, c))
        triangles.append((a, c, d))
    return TriMesh(vertices=corners, triangles=np.array(triangles))
