"""Planar contact statics: CoP, friction cones, support polygons and the ZMP.

Wrenches are stacked torque-before-force, ``(tau_x, tau_y, tau_z, f_x, f_y,
f_n)``, which is the column layout the polygon constraint matrices act on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .dynamics import skew

GROUND_NORMAL = np.array([0.0, 0.0, 1.0])


class ContactInactiveError(ValueError):
    """The normal force is not positive, so the CoP is undefined."""


class DegeneratePolygonError(ValueError):
    pass


class UnsupportedConfigurationError(ValueError):
    pass


def tangent_basis(normal):
    """Right-handed ``(t1, t2, n)`` basis. For ``n = z`` this is the world frame."""
    n = np.asarray(normal, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("contact normal must be unit norm")
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = ref - (ref @ n) * n
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return np.column_stack([t1, t2, n])


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque: np.ndarray
    frame: str = "world"

    def stacked(self):
        return np.concatenate([self.torque, self.force])

    @classmethod
    def from_stacked(cls, vec, frame="world"):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[3:].copy(), vec[:3].copy(), frame)


@dataclass(frozen=True)
class ContactSpec:
    """An established planar contact at end-effector ``ee_id``.

    ``vertices`` are 2D points in the contact tangent plane, relative to the
    end-effector point, which is also the wrench reference point.
    """

    ee_id: str | int
    vertices: np.ndarray
    normal: np.ndarray = field(default_factory=lambda: GROUND_NORMAL.copy())
    mu: float = 0.7
    cone_facets: int = 4

    def __post_init__(self):
        verts = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        if verts.shape[1] == 3:
            if np.abs(verts[:, 2]).max() > 1e-9:
                raise ValueError("contact vertices must be coplanar (z = 0 in the contact frame)")
            verts = verts[:, :2]
        if verts.shape[0] < 3 and not (verts.shape[0] == 1 and np.allclose(verts, 0)):
            raise ValueError("a surface contact needs at least three vertices")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float))
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("contact normal must be unit norm")
        if not self.mu > 0:
            raise ValueError("friction coefficient must be positive")
        if self.cone_facets < 3:
            raise ValueError("cone_facets must be at least 3")

    @property
    def is_point(self):
        return self.vertices.shape[0] == 1

    @property
    def basis(self):
        return tangent_basis(self.normal)

    def vertex_offsets_world(self):
        """Vertex displacements from the reference point, world frame."""
        b = self.basis
        return self.vertices @ b[:, :2].T


@dataclass(frozen=True)
class SupportPolygon:
    A_x: np.ndarray
    A_y: np.ndarray
    B: np.ndarray
    vertices: np.ndarray

    def margins(self, point):
        """Signed distances ``B - A p`` (positive inside)."""
        return self.B - (self.A_x * point[0] + self.A_y * point[1])

    def contains(self, point, tol=0.0):
        return bool(np.all(self.margins(point) >= -tol))

    @property
    def centroid(self):
        return polygon_centroid(self.vertices)


def convex_hull_2d(points):
    """Counter-clockwise hull vertices of a 2D point cloud."""
    pts = np.asarray(points, dtype=float)
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegeneratePolygonError("points do not span a polygon") from exc
    return pts[hull.vertices]  # qhull returns 2D hulls counter-clockwise


def polygon_area(vertices):
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_centroid(vertices):
    x, y = vertices[:, 0], vertices[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    area = 0.5 * cross.sum()
    cx = ((x + np.roll(x, -1)) * cross).sum() / (6 * area)
    cy = ((y + np.roll(y, -1)) * cross).sum() / (6 * area)
    return np.array([cx, cy])


def half_planes(vertices):
    """Unit outward normals ``(a_x, a_y)`` and offsets ``b`` of a CCW polygon."""
    verts = np.asarray(vertices, dtype=float)
    if verts.shape[0] < 3 or polygon_area(verts) < 1e-12:
        raise DegeneratePolygonError("polygon area below 1e-12 m^2")
    edges = np.roll(verts, -1, axis=0) - verts
    normals = np.column_stack([edges[:, 1], -edges[:, 0]])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    b = np.einsum("ij,ij->i", normals, verts)
    return normals[:, 0], normals[:, 1], b


def polygon_from_points(points):
    hull = convex_hull_2d(points)
    ax, ay, b = half_planes(hull)
    return SupportPolygon(ax, ay, b, hull)


def cop_of_wrench(wrench, normal=GROUND_NORMAL):
    """CoP ``(p_x, p_y)`` in the tangent plane of ``normal``."""
    basis = tangent_basis(normal)
    tau = basis.T @ np.asarray(wrench.torque, dtype=float)
    f = basis.T @ np.asarray(wrench.force, dtype=float)
    if f[2] <= 0:
        raise ContactInactiveError("normal force must be positive for the CoP to exist")
    return np.array([-tau[1] / f[2], tau[0] / f[2]])


def _polygon_wrench_rows(ax, ay, b):
    rows = np.zeros((len(b), 6))
    rows[:, 0] = ay
    rows[:, 1] = -ax
    rows[:, 5] = -b
    return rows


def cop_constraint_matrix(contact: ContactSpec):
    """Rows ``A_c`` with ``A_c F <= 0`` iff the CoP lies in the contact patch.

    ``F`` is the contact wrench in the contact frame, stacked torque first.
    """
    ax, ay, b = half_planes(convex_hull_2d(contact.vertices))
    return _polygon_wrench_rows(ax, ay, b)


def force_columns(rows):
    """The force part ``A_c2`` of a wrench constraint matrix."""
    return rows[:, 3:]


def friction_projector(normal, mu):
    """``P_mu = I - n n^T - mu n n^T``."""
    n = np.asarray(normal, dtype=float)
    nn = np.outer(n, n)
    return np.eye(3) - nn - mu * nn


def friction_pyramid_rows(normal, mu, facets=4):
    """Facet rows ``D`` with ``D f <= 0`` for a cone inscribed in ``|f_t| <= mu f_n``.

    The facets sit halfway between the generators of :func:`friction_generators`,
    so both describe the same polyhedral cone.
    """
    basis = tangent_basis(normal)
    angles = 2 * np.pi * np.arange(facets) / facets + np.pi / facets
    dirs = np.cos(angles)[:, None] * basis[:, 0] + np.sin(angles)[:, None] * basis[:, 1]
    return dirs - mu * np.cos(np.pi / facets) * basis[:, 2]


def friction_generators(normal, mu, facets=4):
    """Unit-normal-component edge rays of the linearized friction cone, as columns."""
    basis = tangent_basis(normal)
    angles = 2 * np.pi * np.arange(facets) / facets
    rays = basis[:, 2][:, None] + mu * (
        np.cos(angles) * basis[:, 0][:, None] + np.sin(angles) * basis[:, 1][:, None]
    )
    return rays


def point_force_wrench_map(point):
    """6x3 map from a force at ``point`` to its wrench about the origin (torque first)."""
    return np.vstack([skew(np.asarray(point, dtype=float)), np.eye(3)])


def wrench_about_origin(point, wrench_at_point):
    """Shift a stacked wrench acting at ``point`` to the inertial origin."""
    tau, f = wrench_at_point[:3], wrench_at_point[3:]
    return np.concatenate([tau + np.cross(point, f), f])


def support_polygon(contacts, poses, angular_tol=1e-6):
    """Convex hull of all contact vertices projected on the ground plane.

    ``poses`` gives the world position of each contact's reference point.
    """
    points = []
    for contact, origin in zip(contacts, poses):
        angle = np.arccos(np.clip(contact.normal @ GROUND_NORMAL, -1.0, 1.0))
        if angle > angular_tol:
            raise UnsupportedConfigurationError(
                "support polygon requires co-planar ground contacts with normal (0, 0, 1)"
            )
        world = np.asarray(origin, dtype=float) + contact.vertex_offsets_world()
        points.append(world[:, :2])
    if not points:
        raise DegeneratePolygonError("no contacts")
    return polygon_from_points(np.vstack(points))


def zmp(wrenches):
    """ZMP of world-frame wrenches taken about the inertial origin."""
    total = np.sum([np.asarray(w if not isinstance(w, Wrench) else w.stacked()) for w in wrenches], axis=0)
    if total[5] <= 0:
        raise ContactInactiveError("total normal force must be positive")
    return np.array([-total[1] / total[5], total[0] / total[5]])


def zmp_constraint_matrix(polygon: SupportPolygon):
    """``A_Z = [A_y, -A_x, 0, 0, 0, -B]``; ``A_Z sum(F) <= 0`` keeps the ZMP inside."""
    return _polygon_wrench_rows(polygon.A_x, polygon.A_y, polygon.B)
