"""Mesh checks: signed volume, watertightness, components, STL round-trips."""
from __future__ import annotations

import struct

import numpy as np
import pytest

from cadforge.mesh import (
    MeshError,
    TriMesh,
    cube_mesh,
    load_stl,
    mesh_connected_components,
    mesh_from_triangle_soup,
    mesh_is_watertight,
    mesh_signed_volume,
    triangle_areas,
    write_stl,
)
from helpers.geometry import l_prism_mesh, triangle_fan_mesh, uv_sphere_mesh


def inverted(mesh: TriMesh) -> TriMesh:
    flipped = mesh.triangles[:, (0, 2, 1)]
    return TriMesh(vertices=mesh.vertices, triangles=flipped)


class TestSignedVolume:
    def test_unit_cube_volume_exact(self):
        assert mesh_signed_volume(cube_mesh(1.0)) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_cube_is_negative(self):
        assert mesh_signed_volume(inverted(cube_mesh(1.0))) == pytest.approx(-1.0, abs=1e-9)

    def test_translation_invariance(self):
        base = mesh_signed_volume(cube_mesh(2.0))
        moved = mesh_signed_volume(cube_mesh(2.0, center=(17.0, -4.0, 9.5)))
        assert moved == pytest.approx(base, rel=1e-12)

    def test_scale_law_cubed_over_random_meshes(self):
        rng = np.random.default_rng(42)
        for trial in range(100):
            kind = trial % 3
            if kind == 0:
                base = cube_mesh(1.0)
            elif kind == 1:
                base = l_prism_mesh(height=1.0)
            else:
                base = uv_sphere_mesh(radius=0.5, n_theta=12, n_phi=6)
            # random positive-determinant warp keeps the mesh closed and varied
            warp = np.eye(3) + 0.3 * rng.standard_normal((3, 3))
            if np.linalg.det(warp) <= 0.05:
                warp = np.eye(3)
            shift = rng.uniform(-5.0, 5.0, size=3)
            warped = TriMesh(base.vertices @ warp.T + shift, base.triangles)
            scale = float(rng.uniform(0.1, 10.0))
            scaled = TriMesh(warped.vertices * scale, warped.triangles)
            expected = scale**3 * mesh_signed_volume(warped)
            got = mesh_signed_volume(scaled)
            assert got == pytest.approx(expected, rel=1e-6)

    def test_l_prism_volume_matches_area_times_height(self):
        assert mesh_signed_volume(l_prism_mesh(height=2.5)) == pytest.approx(4.0 * 2.5, rel=1e-12)

    def test_empty_mesh_volume_zero(self):
        empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        assert mesh_signed_volume(empty) == 0.0


class TestWatertight:
    def test_cube_is_watertight(self):
        assert mesh_is_watertight(cube_mesh())

    def test_sphere_is_watertight(self):
        assert mesh_is_watertight(uv_sphere_mesh())

    def test_open_box_is_not(self):
        cube = cube_mesh()
        opened = TriMesh(cube.vertices, cube.triangles[:-1])
        assert not mesh_is_watertight(opened)

    def test_three_triangle_fan_is_not(self):
        # the shared edge belongs to three triangles, violating edge-count==2
        assert not mesh_is_watertight(triangle_fan_mesh())

    def test_empty_mesh_is_not(self):
        empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        assert not mesh_is_watertight(empty)

    def test_two_disjoint_cubes_are_watertight_together(self):
        a = cube_mesh(1.0)
        b = cube_mesh(1.0, center=(5.0, 0.0, 0.0))
        both = TriMesh(
            np.vstack([a.vertices, b.vertices]),
            np.vstack([a.triangles, b.triangles + len(a.vertices)]),
        )
        assert mesh_is_watertight(both)


class TestComponents:
    def test_single_cube_one_component(self):
        assert mesh_connected_components(cube_mesh()) == 1

    def test_disjoint_cubes_two_components(self):
        a = cube_mesh(1.0)
        b = cube_mesh(1.0, center=(5.0, 0.0, 0.0))
        both = TriMesh(
            np.vstack([a.vertices, b.vertices]),
            np.vstack([a.triangles, b.triangles + len(a.vertices)]),
        )
        assert mesh_connected_components(both) == 2

    def test_cubes_sharing_one_vertex_stay_two_components(self):
        # touching at a corner shares a vertex but no edge; edge-adjacency
        # keeps them separate, matching the two-solid geometric reading
        a = cube_mesh(1.0, center=(0.0, 0.0, 0.0))
        b = cube_mesh(1.0, center=(1.0, 1.0, 1.0))
        soup = np.vstack(
            [
                a.vertices[a.triangles].reshape(-1, 3, 3),
                b.vertices[b.triangles].reshape(-1, 3, 3),
            ]
        )
        merged = mesh_from_triangle_soup(soup)
        # the soup merge must actually unify the shared corner vertex
        assert len(merged.vertices) == 15
        assert mesh_connected_components(merged) == 2
        assert mesh_is_watertight(merged)

    def test_empty_mesh_zero_components(self):
        empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        assert mesh_connected_components(empty) == 0


class TestSoupMerging:
    def test_duplicate_vertices_merged(self):
        cube = cube_mesh()
        soup = cube.vertices[cube.triangles].reshape(-1, 3, 3)
        merged = mesh_from_triangle_soup(soup)
        assert len(merged.vertices) == 8
        assert merged.n_triangles == 12
        assert mesh_is_watertight(merged)

    def test_near_coincident_vertices_merge_at_1e9(self):
        cube = cube_mesh()
        soup = cube.vertices[cube.triangles].reshape(-1, 3, 3).copy()
        soup += np.random.default_rng(3).uniform(-1e-12, 1e-12, soup.shape)
        merged = mesh_from_triangle_soup(soup)
        assert len(merged.vertices) == 8

    def test_degenerate_triangles_dropped_and_counted(self):
        cube = cube_mesh()
        soup = cube.vertices[cube.triangles].reshape(-1, 3, 3)
        zero_area = np.array([[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]])
        merged = mesh_from_triangle_soup(np.vstack([soup, zero_area]))
        assert merged.dropped_degenerate == 1
        assert merged.n_triangles == 12

    def test_triangle_index_bounds_checked(self):
        with pytest.raises(MeshError):
            TriMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))

    def test_triangle_areas(self):
        v0 = np.array([[0.0, 0.0, 0.0]])
        v1 = np.array([[1.0, 0.0, 0.0]])
        v2 = np.array([[0.0, 1.0, 0.0]])
        assert triangle_areas(v0, v1, v2)[0] == pytest.approx(0.5)


class TestStlIo:
    def test_binary_round_trip_preserves_geometry(self, tmp_path):
        path = tmp_path / "cube.stl"
        write_stl(cube_mesh(2.0), path)
        loaded = load_stl(path)
        assert loaded.n_triangles == 12
        assert len(loaded.vertices) == 8
        assert mesh_is_watertight(loaded)
        assert mesh_signed_volume(loaded) == pytest.approx(8.0, rel=1e-6)

    def test_binary_layout(self, tmp_path):
        path = tmp_path / "cube.stl"
        write_stl(cube_mesh(1.0), path, header="hdr")
        data = path.read_bytes()
        assert len(data) == 84 + 50 * 12
        (count,) = struct.unpack_from("<I", data, 80)
        assert count == 12
        assert data[:3] == b"hdr"

    def test_ascii_stl_parses(self, tmp_path):
        path = tmp_path / "tri.stl"
        path.write_text(
            "solid ascii\n"
            " facet normal 0 0 1\n"
            "  outer loop\n"
            "   vertex 0 0 0\n"
            "   vertex 1 0 0\n"
            "   vertex 0 1 0\n"
            "  endloop\n"
            " endfacet\n"
            "endsolid ascii\n"
        )
        mesh = load_stl(path)
        assert mesh.n_triangles == 1
        assert len(mesh.vertices) == 3

    def test_ascii_with_partial_triangle_rejected(self, tmp_path):
        path = tmp_path / "bad.stl"
        path.write_text("solid x\nvertex 0 0 0\nvertex 1 0 0\nendsolid x\n")
        with pytest.raises(MeshError):
            load_stl(path)

    def test_garbage_bytes_rejected(self, tmp_path):
        path = tmp_path / "junk.stl"
        path.write_bytes(bytes([0xFF, 0xFE] * 50))
        with pytest.raises(MeshError):
            load_stl(path)

    def test_round_trip_volume_for_sphere(self, tmp_path):
        sphere = uv_sphere_mesh(radius=1.5)
        path = tmp_path / "sphere.stl"
        write_stl(sphere, path)
        loaded = load_stl(path)
        assert mesh_is_watertight(loaded)
        # float32 storage costs precision, but the value must survive loosely
        assert mesh_signed_volume(loaded) == pytest.approx(mesh_signed_volume(sphere), rel=1e-5)
