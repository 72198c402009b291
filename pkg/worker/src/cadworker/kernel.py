"""Prismatic stand-in for the CadQuery scripting API.

Installed under the module name ``cadquery`` when the real package cannot be
imported, so candidate programs starting with ``import cadquery as cq`` still
execute. Geometry is 2.5D: every solid is the extrusion of a planar region
along +Z from z=0. The supported surface is XY workplanes plus center, rect,
circle, extrude, union, cut, edges("|Z"), fillet, and chamfer. Corner
treatments are approximate: fillet and chamfer of vertical edges both round
the cross-section morphologically. Anything outside this surface raises
KernelError, which reaches the caller as a structured execution error.
"""
from __future__ import annotations

import types
from dataclasses import dataclass

HEIGHT_TOL = 1e-9


class KernelError(Exception):
    """A candidate program used geometry the prismatic kernel cannot model."""


@dataclass(frozen=True)
class Rect:
    cx: float
    cy: float
    width: float
    height: float


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class Prism:
    prims: tuple[Rect | Disk, ...]
    height: float


@dataclass(frozen=True)
class Boolean:
    op: str  # "union" | "cut"
    a: "SolidNode"
    b: "SolidNode"


@dataclass(frozen=True)
class Rounded:
    base: "SolidNode"
    radius: float
    mode: str  # "fillet" | "chamfer"


SolidNode = Prism | Boolean | Rounded


def node_height(node: SolidNode) -> float:
    if isinstance(node, Prism):
        return node.height
    if isinstance(node, Boolean):
        return node_height(node.a)
    return node_height(node.base)


class Workplane:
    """Fluent builder mirroring the subset of cadquery.Workplane we model.

    Every method returns a new Workplane; instances are never mutated, which
    matches how candidate programs chain and reuse intermediate objects.
    """

    def __init__(
        self,
        inPlane: str = "XY",
        *,
        _origin: tuple[float, float] = (0.0, 0.0),
        _pending: tuple[Rect | Disk, ...] = (),
        _node: SolidNode | None = None,
        _edges_selected: bool = False,
    ) -> None:
        if inPlane != "XY":
            raise KernelError(
                f"prismatic fallback kernel supports Workplane('XY') only, got {inPlane!r}"
            )
        self._origin = _origin
        self._pending = _pending
        self._node = _node
        self._edges_selected = _edges_selected

    def _evolve(self, **changes) -> "Workplane":
        state = {
            "_origin": self._origin,
            "_pending": self._pending,
            "_node": self._node,
            "_edges_selected": False,  # selections do not survive other calls
        }
        state.update(changes)
        return Workplane("XY", **state)

    # -- sketching ---------------------------------------------------------------

    def center(self, x: float, y: float) -> "Workplane":
        ox, oy = self._origin
        return self._evolve(_origin=(ox + float(x), oy + float(y)))

    def rect(self, xLen: float, yLen: float, centered: bool = True, forConstruction: bool = False) -> "Workplane":
        if forConstruction:
            raise KernelError("construction geometry is not supported")
        if not isinstance(centered, bool):
            raise KernelError("per-axis 'centered' tuples are not supported")
        if xLen <= 0 or yLen <= 0:
            raise KernelError("rect dimensions must be positive")
        ox, oy = self._origin
        cx, cy = (ox, oy) if centered else (ox + xLen / 2.0, oy + yLen / 2.0)
        prim = Rect(cx=cx, cy=cy, width=float(xLen), height=float(yLen))
        return self._evolve(_pending=self._pending + (prim,))

    def circle(self, radius: float, forConstruction: bool = False) -> "Workplane":
        if forConstruction:
            raise KernelError("construction geometry is not supported")
        if radius <= 0:
            raise KernelError("circle radius must be positive")
        ox, oy = self._origin
        return self._evolve(_pending=self._pending + (Disk(cx=ox, cy=oy, radius=float(radius)),))

    # -- solids ------------------------------------------------------------------

    def extrude(self, until: float) -> "Workplane":
        if not self._pending:
            raise KernelError("extrude called with no pending sketch")
        depth = float(until)
        if depth <= 0:
            raise KernelError("only positive extrusion depths are supported")
        prism: SolidNode = Prism(prims=self._pending, height=depth)
        node = prism if self._node is None else _combine("union", self._node, prism)
        return self._evolve(_pending=(), _node=node)

    def union(self, other: "Workplane") -> "Workplane":
        return self._evolve(_node=_combine("union", self._require_node(), _node_of(other)))

    def cut(self, other: "Workplane") -> "Workplane":
        base = self._require_node()
        tool = _node_of(other)
        if node_height(tool) < node_height(base) - HEIGHT_TOL:
            raise KernelError("cut tools must span the full part height (through cuts only)")
        return self._evolve(_node=Boolean("cut", base, tool))

    # -- edge treatments -----------------------------------------------------------

    def edges(self, selector: str | None = None) -> "Workplane":
        if selector != "|Z":
            raise KernelError(
                f"only vertical-edge selection edges('|Z') is supported, got {selector!r}"
            )
        self._require_node()
        return self._evolve(_edges_selected=True)

    def fillet(self, radius: float) -> "Workplane":
        return self._rounded(radius, "fillet")

    def chamfer(self, length: float) -> "Workplane":
        return self._rounded(length, "chamfer")

    def _rounded(self, radius: float, mode: str) -> "Workplane":
        if not self._edges_selected:
            raise KernelError(f"{mode} requires a preceding edges('|Z') selection")
        if radius <= 0:
            raise KernelError(f"{mode} size must be positive")
        node = Rounded(base=self._require_node(), radius=float(radius), mode=mode)
        return self._evolve(_node=node)

    # -- introspection ---------------------------------------------------------------

    def val(self) -> SolidNode:
        return self._require_node()

    @property
    def solid_node(self) -> SolidNode | None:
        return self._node

    def _require_node(self) -> SolidNode:
        if self._node is None:
            raise KernelError("no solid on the stack; extrude a sketch first")
        return self._node


def _node_of(other: object) -> SolidNode:
    if not isinstance(other, Workplane):
        raise KernelError(f"boolean operand must be a Workplane, got {type(other).__name__}")
    return other._require_node()


def _combine(op: str, a: SolidNode, b: SolidNode) -> SolidNode:
    if op == "union" and abs(node_height(a) - node_height(b)) > HEIGHT_TOL:
        raise KernelError(
            f"union requires equal extrusion heights, got {node_height(a)} and {node_height(b)}"
        )
    return Boolean(op, a, b)


def build_module() -> types.ModuleType:
    """Create the module object injected as sys.modules['cadquery']."""
    module = types.ModuleType("cadquery")
    module.Workplane = Workplane
    module.KernelError = KernelError
    module.__fallback__ = True
    module.__doc__ = __doc__
    return module
