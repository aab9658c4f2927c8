"""Indexed triangle meshes: file IO, validation diagnostics, per-face features.

Meshes are plain vertex/face index arrays in millimetres. Vertex normals are
derived on construction (area-weighted average of incident face normals), so
every vertex must be referenced by at least one face with nonzero total normal.

The per-face descriptor is a fixed 13-wide vector laid out as
``[area, normal(3), interior_angles(3), center(3), normal_dots(3)]`` where
``normal_dots[i]`` is the dot product of the face normal with the vertex
normal of the face's i-th stored vertex.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEATURE_DIM = 13

# Faces below this area (mm^2) are considered degenerate: small enough to
# guard the normal computation without rejecting tiny valid faces.
DEGENERATE_AREA = 1e-10

_NORMAL_TOL = 1e-6


class MeshError(ValueError):
    """Invalid mesh data (bad indices, degenerate geometry, parse failures)."""


class DegenerateFaceError(MeshError):
    """A face with area at or below the degeneracy threshold."""


@dataclass
class Mesh:
    """Triangle mesh with derived, unit-length vertex normals.

    Use :func:`make_mesh` (or :meth:`Mesh.create`) instead of the raw
    constructor so the invariants are checked and normals derived.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[0]

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    @classmethod
    def create(cls, vertices, faces) -> "Mesh":
        return make_mesh(vertices, faces)

    def translated(self, offset) -> "Mesh":
        return make_mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)

    def transformed(self, rotation) -> "Mesh":
        r = np.asarray(rotation, dtype=np.float64)
        return make_mesh(self.vertices @ r.T, self.faces)


@dataclass
class FaceFeatures:
    """The 13 per-face descriptors of one nondegenerate triangle."""

    area: float
    normal: np.ndarray
    interior_angles: np.ndarray
    center: np.ndarray
    normal_dots: np.ndarray

    def to_vector(self) -> np.ndarray:
        out = np.empty(FEATURE_DIM, dtype=np.float64)
        out[0] = self.area
        out[1:4] = self.normal
        out[4:7] = self.interior_angles
        out[7:10] = self.center
        out[10:13] = self.normal_dots
        return out


@dataclass
class ValidationReport:
    """Topology diagnostics; purely informational, nothing is repaired."""

    is_manifold: bool
    boundary_edge_count: int
    non_manifold_edges: list[tuple[int, int]]
    degenerate_faces: list[int]
    euler_characteristic: int
    edge_count: int = field(default=0)


def make_mesh(vertices, faces) -> Mesh:
    """Validate raw arrays and build a Mesh with derived vertex normals."""
    v = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64))
    f = np.ascontiguousarray(np.asarray(faces, dtype=np.int64))
    if v.ndim != 2 or v.shape[1] != 3:
        raise MeshError(f"vertices must be (n, 3), got {v.shape}")
    if f.size == 0:
        raise MeshError("mesh has no faces")
    if f.ndim != 2 or f.shape[1] != 3:
        raise MeshError(f"faces must be (m, 3) triangles, got {f.shape}")
    if v.shape[0] == 0:
        raise MeshError("mesh has no vertices")
    if f.min() < 0 or f.max() >= v.shape[0]:
        bad = int(f.max() if f.max() >= v.shape[0] else f.min())
        raise MeshError(f"face index {bad} out of range for {v.shape[0]} vertices")
    repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if repeated.any():
        raise MeshError(f"face {int(np.nonzero(repeated)[0][0])} repeats a vertex index")
    if not np.isfinite(v).all():
        raise MeshError("vertices contain non-finite values")
    normals = _vertex_normals(v, f)
    return Mesh(vertices=v, faces=f, vertex_normals=normals)


def _face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-face cross product (v1-v0) x (v2-v0); its norm is twice the area."""
    p0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - p0
    e2 = vertices[faces[:, 2]] - p0
    return np.cross(e1, e2)


def _vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    # Accumulating the raw cross products weights each face normal by area.
    cross = _face_cross(vertices, faces)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], cross)
    norms = np.linalg.norm(acc, axis=1)
    zero = norms < 1e-12
    if zero.any():
        raise MeshError(
            f"vertex {int(np.nonzero(zero)[0][0])} has zero normal "
            "(unreferenced vertex or cancelling incident faces)"
        )
    return acc / norms[:, None]


def face_feature_matrix(mesh: Mesh) -> np.ndarray:
    """All per-face feature vectors as an (m, 13) array.

    Raises DegenerateFaceError if any face area is at or below the threshold.
    """
    v, f = mesh.vertices, mesh.faces
    cross = _face_cross(v, f)
    cross_norm = np.linalg.norm(cross, axis=1)
    area = 0.5 * cross_norm
    bad = area <= DEGENERATE_AREA
    if bad.any():
        raise DegenerateFaceError(
            f"face {int(np.nonzero(bad)[0][0])} is degenerate (area <= {DEGENERATE_AREA})"
        )
    normal = cross / cross_norm[:, None]
    p = v[f]  # (m, 3, 3)
    angles = np.empty((f.shape[0], 3), dtype=np.float64)
    for k in range(3):
        a = p[:, (k + 1) % 3] - p[:, k]
        b = p[:, (k + 2) % 3] - p[:, k]
        cosang = np.einsum("ij,ij->i", a, b) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        )
        angles[:, k] = np.arccos(np.clip(cosang, -1.0, 1.0))
    center = p.mean(axis=1)
    vn = mesh.vertex_normals[f]  # (m, 3, 3)
    dots = np.einsum("ij,ikj->ik", normal, vn)
    out = np.empty((f.shape[0], FEATURE_DIM), dtype=np.float64)
    out[:, 0] = area
    out[:, 1:4] = normal
    out[:, 4:7] = angles
    out[:, 7:10] = center
    out[:, 10:13] = dots
    return out


def face_features(mesh: Mesh, face_id: int) -> FaceFeatures:
    """Feature descriptor of a single face (see module docstring for layout)."""
    if not 0 <= face_id < mesh.face_count:
        raise MeshError(f"face id {face_id} out of range")
    tri = mesh.faces[face_id]
    p = mesh.vertices[tri]
    cross = np.cross(p[1] - p[0], p[2] - p[0])
    norm = float(np.linalg.norm(cross))
    area = 0.5 * norm
    if area <= DEGENERATE_AREA:
        raise DegenerateFaceError(f"face {face_id} is degenerate (area={area:g})")
    normal = cross / norm
    angles = np.empty(3, dtype=np.float64)
    for k in range(3):
        a = p[(k + 1) % 3] - p[k]
        b = p[(k + 2) % 3] - p[k]
        c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        angles[k] = np.arccos(np.clip(c, -1.0, 1.0))
    dots = mesh.vertex_normals[tri] @ normal
    return FaceFeatures(
        area=area,
        normal=normal,
        interior_angles=angles,
        center=p.mean(axis=0),
        normal_dots=dots,
    )


def _edge_faces(faces: np.ndarray) -> dict[tuple[int, int], list[int]]:
    edges: dict[tuple[int, int], list[int]] = {}
    for i, (a, b, c) in enumerate(faces):
        for u, w in ((a, b), (b, c), (c, a)):
            key = (u, w) if u < w else (w, u)
            edges.setdefault(key, []).append(i)
    return edges


def validate_manifold(mesh: Mesh) -> ValidationReport:
    """Edge/vertex manifoldness diagnostics plus the Euler characteristic.

    A mesh is manifold when every edge bounds one or two faces and every
    vertex star is a single disk or half-disk fan.
    """
    faces = [tuple(int(x) for x in row) for row in mesh.faces]
    edges = _edge_faces(mesh.faces)
    non_manifold = sorted(e for e, fs in edges.items() if len(fs) > 2)
    boundary = sum(1 for fs in edges.values() if len(fs) == 1)

    ok = not non_manifold
    if ok:
        # Vertex stars: at each vertex, the opposite edges of its incident
        # faces must chain into one simple path or cycle.
        incident: dict[int, list[tuple[int, int]]] = {}
        for a, b, c in faces:
            incident.setdefault(a, []).append((b, c))
            incident.setdefault(b, []).append((c, a))
            incident.setdefault(c, []).append((a, b))
        for links in incident.values():
            deg: dict[int, int] = {}
            for u, w in links:
                deg[u] = deg.get(u, 0) + 1
                deg[w] = deg.get(w, 0) + 1
            if any(d > 2 for d in deg.values()):
                ok = False
                break
            # Connectivity of the link graph via union-find over neighbors.
            parent = {u: u for u in deg}

            def find(x):
                while parent[x] != x:
                    parent[x] = parent[parent[x]]
                    x = parent[x]
                return x

            for u, w in links:
                ru, rw = find(u), find(w)
                if ru != rw:
                    parent[ru] = rw
            roots = {find(u) for u in deg}
            if len(roots) != 1:
                ok = False
                break
            ends = sum(1 for d in deg.values() if d == 1)
            if ends not in (0, 2):
                ok = False
                break

    cross = _face_cross(mesh.vertices, mesh.faces)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    degenerate = [int(i) for i in np.nonzero(areas <= DEGENERATE_AREA)[0]]

    euler = mesh.vertex_count - len(edges) + mesh.face_count
    return ValidationReport(
        is_manifold=ok,
        boundary_edge_count=boundary,
        non_manifold_edges=non_manifold,
        degenerate_faces=degenerate,
        euler_characteristic=euler,
        edge_count=len(edges),
    )


def load_mesh(path) -> Mesh:
    """Read an ASCII triangle mesh (``v x y z`` / ``f i j k``, 1-based)."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) != 4:
                    raise MeshError(f"{path}:{lineno}: vertex line needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad coordinate: {exc}") from exc
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshError(f"{path}:{lineno}: face line needs 3 indices (triangles only)")
                try:
                    idx = [int(x) for x in parts[1:]]
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad face index: {exc}") from exc
                if any(i < 1 for i in idx):
                    raise MeshError(f"{path}:{lineno}: face indices are 1-based and positive")
                faces.append([i - 1 for i in idx])
            else:
                raise MeshError(f"{path}:{lineno}: unsupported record '{tag}'")
    if not vertices:
        raise MeshError(f"{path}: no vertices")
    if not faces:
        raise MeshError(f"{path}: no faces")
    return make_mesh(np.array(vertices), np.array(faces))


def dumps_mesh(mesh: Mesh) -> str:
    """Canonical serialization: vertices then faces, 9 significant digits."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}\n")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}\n")
    return "".join(lines)


def save_mesh(mesh: Mesh, path) -> None:
    """Write the canonical form produced by :func:`dumps_mesh`."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps_mesh(mesh))
