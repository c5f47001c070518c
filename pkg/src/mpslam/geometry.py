"""Planar specular-reflection geometry.

Mirror-image anchors across reflective wall segments, reflection points,
geometric delay / angle-of-arrival / angle-of-departure, and line-of-sight
visibility checks. All functions are pure; angles are radians in (-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

SPEED_OF_LIGHT = 299792458.0

_DEGENERATE_EPS = 1e-12


class DegenerateGeometryError(ValueError):
    """Raised when a reflection point is undefined (agent in the mirror plane)."""


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)


@dataclass(frozen=True)
class Surface:
    """Finite reflective wall segment with a unit normal."""

    endpoint_a: NDArray[np.float64]
    endpoint_b: NDArray[np.float64]
    normal: NDArray[np.float64]

    def __post_init__(self) -> None:
        a = np.asarray(self.endpoint_a, dtype=float)
        b = np.asarray(self.endpoint_b, dtype=float)
        u = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "endpoint_a", a)
        object.__setattr__(self, "endpoint_b", b)
        object.__setattr__(self, "normal", u)
        if a.shape != (2,) or b.shape != (2,) or u.shape != (2,):
            raise ValueError("surface endpoints and normal must be 2-vectors")
        if abs(np.linalg.norm(u) - 1.0) > 1e-12:
            raise ValueError("surface normal must be unit length")
        t = b - a
        if np.linalg.norm(t) < _DEGENERATE_EPS:
            raise ValueError("surface endpoints coincide")
        if abs(np.dot(u, t)) > 1e-9 * np.linalg.norm(t):
            raise ValueError("surface normal must be orthogonal to the segment")

    @classmethod
    def from_endpoints(
        cls,
        a,
        b,
        toward: NDArray[np.float64] | None = None,
    ) -> "Surface":
        """Build a surface from endpoints; orient the normal toward `toward` if given."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        t = b - a
        n = np.array([-t[1], t[0]]) / np.linalg.norm(t)
        if toward is not None and np.dot(np.asarray(toward, dtype=float) - a, n) < 0:
            n = -n
        return cls(a, b, n)


@dataclass(frozen=True)
class Anchor:
    """Physical anchor (transmitter) or its virtual mirror image."""

    position: NDArray[np.float64]
    is_virtual: bool = False
    parent_surface: Surface | None = field(default=None)

    def __post_init__(self) -> None:
        p = np.asarray(self.position, dtype=float)
        object.__setattr__(self, "position", p)
        if p.shape != (2,):
            raise ValueError("anchor position must be a 2-vector")
        if self.is_virtual and self.parent_surface is None:
            raise ValueError("virtual anchors must reference their parent surface")
        if not self.is_virtual and self.parent_surface is not None:
            raise ValueError("physical anchors carry no parent surface")


@dataclass(frozen=True)
class AgentPose:
    """Agent position and velocity; heading is the velocity direction."""

    position: NDArray[np.float64]
    velocity: NDArray[np.float64]

    def __post_init__(self) -> None:
        p = np.asarray(self.position, dtype=float)
        v = np.asarray(self.velocity, dtype=float)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)
        if p.shape != (2,) or v.shape != (2,):
            raise ValueError("pose position and velocity must be 2-vectors")

    @property
    def heading(self) -> float:
        if np.linalg.norm(self.velocity) == 0.0:
            raise ValueError("heading undefined at zero velocity")
        return float(np.arctan2(self.velocity[1], self.velocity[0]))


def mirror_point(p, surface: Surface) -> NDArray[np.float64]:
    """Reflect a point across the infinite line through a surface."""
    p = np.asarray(p, dtype=float)
    d = np.dot(p - surface.endpoint_a, surface.normal)
    return p - 2.0 * d * surface.normal


def mirror_anchor(pa: Anchor, surface: Surface) -> Anchor:
    """Mirror a physical anchor across a surface, yielding the virtual anchor."""
    if pa.is_virtual:
        raise ValueError("mirror_anchor expects a physical anchor")
    return Anchor(mirror_point(pa.position, surface), is_virtual=True, parent_surface=surface)


def reflection_point(agent, pa: Anchor, va: Anchor, u) -> NDArray[np.float64]:
    """Point where the agent-to-anchor path meets the mirror line.

    Computed as q = p_va + [(p_pa - p_va)^T u / (2 (p_n - p_va)^T u)] (p_n - p_va);
    the result lies on the mirror line and on the segment agent -> virtual anchor.
    Raises DegenerateGeometryError when that segment is parallel to the mirror
    line (the agent sits at the image depth and no crossing exists).
    """
    p_n = np.asarray(agent, dtype=float)
    p_pa = pa.position
    p_va = va.position
    u = np.asarray(u, dtype=float)
    den = 2.0 * np.dot(p_n - p_va, u)
    if abs(den) < _DEGENERATE_EPS:
        raise DegenerateGeometryError("agent lies in the mirror plane")
    num = np.dot(p_pa - p_va, u)
    return p_va + (num / den) * (p_n - p_va)


def true_delay(p, p_feat) -> float:
    """Propagation delay in seconds for the (mirrored) straight-line path."""
    p = np.asarray(p, dtype=float)
    p_feat = np.asarray(p_feat, dtype=float)
    return float(np.linalg.norm(p - p_feat)) / SPEED_OF_LIGHT


def true_aoa(agent: AgentPose, p_feat) -> float:
    """Angle of arrival in the agent frame: bearing to the feature minus heading."""
    p_feat = np.asarray(p_feat, dtype=float)
    d = p_feat - agent.position
    return float(wrap_angle(np.arctan2(d[1], d[0]) - agent.heading))


def true_aod(agent, feature: Anchor) -> float:
    """Angle of departure at the physical anchor.

    Physical feature: bearing from the anchor to the agent. Virtual feature:
    bearing from the physical anchor position to the reflection point on the
    parent surface.
    """
    agent = np.asarray(agent, dtype=float)
    if not feature.is_virtual:
        d = agent - feature.position
        return float(wrap_angle(np.arctan2(d[1], d[0])))
    surface = feature.parent_surface
    assert surface is not None
    p_pa = mirror_point(feature.position, surface)
    q = reflection_point(agent, Anchor(p_pa), feature, surface.normal)
    d = q - p_pa
    return float(wrap_angle(np.arctan2(d[1], d[0])))


def _segments_intersect(p0, p1, q0, q1) -> bool:
    """True when the open segment p0->p1 crosses the segment q0->q1.

    Endpoints of p0->p1 touching the other segment do not count as a crossing
    (paths may start or end exactly on a wall).
    """
    r = p1 - p0
    s = q1 - q0
    denom = r[0] * s[1] - r[1] * s[0]
    if abs(denom) < _DEGENERATE_EPS:
        return False
    d = q0 - p0
    t = (d[0] * s[1] - d[1] * s[0]) / denom
    v = (d[0] * r[1] - d[1] * r[0]) / denom
    return 1e-9 < t < 1.0 - 1e-9 and -1e-9 <= v <= 1.0 + 1e-9


def _within_segment(q, surface: Surface) -> bool:
    t = surface.endpoint_b - surface.endpoint_a
    s = np.dot(q - surface.endpoint_a, t) / np.dot(t, t)
    return -1e-9 <= s <= 1.0 + 1e-9


def is_visible(agent, feature: Anchor, surfaces) -> bool:
    """Line-of-sight test for a physical anchor, reflected-path test for a virtual one.

    A virtual anchor is visible when its reflection point exists, lies within
    the parent wall segment, and both legs (agent to reflection point,
    reflection point to physical anchor) are unobstructed by the other walls.
    Degenerate geometry counts as not visible.
    """
    agent = np.asarray(agent, dtype=float)
    if not feature.is_virtual:
        return not any(
            _segments_intersect(agent, feature.position, s.endpoint_a, s.endpoint_b)
            for s in surfaces
        )
    parent = feature.parent_surface
    assert parent is not None
    p_pa = mirror_point(feature.position, parent)
    try:
        q = reflection_point(agent, Anchor(p_pa), feature, parent.normal)
    except DegenerateGeometryError:
        return False
    if np.dot(agent - q, feature.position - q) > 0.0:
        return False  # bounce point not between agent and mirror image
    if not _within_segment(q, parent):
        return False
    for s in surfaces:
        if s is parent:
            continue
        if _segments_intersect(agent, q, s.endpoint_a, s.endpoint_b):
            return False
        if _segments_intersect(q, p_pa, s.endpoint_a, s.endpoint_b):
            return False
    return True
