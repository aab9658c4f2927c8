"""Subdivision remeshing: simplify to a base mesh, then 1-to-4 refine.

The pipeline turns an arbitrary manifold scan into a subdivision-regular mesh:
quadric-error edge collapse down to ``base_faces`` faces, followed by
``subdivision_levels`` rounds of midpoint subdivision. Every base face becomes
a *patch* of ``4^K`` refined faces whose storage order is the canonical
depth-first hierarchy order (corner children in base-vertex order, center
child last), independent of how the base faces happened to be stored.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from .meshio import Mesh, MeshError, make_mesh, validate_manifold

MAX_LEVELS = 6  # memory guard: 4^6 faces per patch is already 4096


class RemeshError(MeshError):
    pass


class NonManifoldError(RemeshError):
    def __init__(self, edges):
        self.edges = list(edges)
        shown = ", ".join(str(e) for e in self.edges[:8])
        more = "" if len(self.edges) <= 8 else f" (+{len(self.edges) - 8} more)"
        super().__init__(f"mesh is not manifold at edges: {shown}{more}")


def patch_vertex_count(levels: int) -> int:
    """Distinct vertices in one patch after `levels` subdivisions."""
    n = 2**levels
    return (n + 1) * (n + 2) // 2


@dataclass
class RemeshConfig:
    base_faces: int = 500
    subdivision_levels: int = 3

    def __post_init__(self):
        if self.base_faces < 4:
            raise ValueError("base_faces must be at least 4")
        if not 0 <= self.subdivision_levels <= MAX_LEVELS:
            raise ValueError(f"subdivision_levels must be in [0, {MAX_LEVELS}]")

    @property
    def faces_per_patch(self) -> int:
        return 4**self.subdivision_levels


@dataclass
class PatchMap:
    """Base-face -> descendant hierarchy of a refined mesh.

    patch_faces[i] lists patch i's refined-face indices in hierarchy order;
    patch_vertices[i] lists its distinct vertex indices in first-appearance
    order along that face sequence.
    """

    patch_faces: np.ndarray  # (f_n, 4^K) int64
    patch_vertices: np.ndarray  # (f_n, T_K) int64
    patch_centers: np.ndarray  # (f_n, 3) float64

    @property
    def patch_count(self) -> int:
        return self.patch_faces.shape[0]

    @property
    def faces_per_patch(self) -> int:
        return self.patch_faces.shape[1]

    @property
    def vertices_per_patch(self) -> int:
        return self.patch_vertices.shape[1]


@dataclass
class RemeshedMesh:
    mesh: Mesh
    patch_map: PatchMap
    config: RemeshConfig


# ---------------------------------------------------------------------------
# Quadric-error simplification


def _plane_quadric(p0, normal, area):
    n = np.append(normal, -np.dot(normal, p0))
    return area * np.outer(n, n)


def _collapse_cost(quadric, pos_u, pos_v):
    """Best collapse target and its quadric cost.

    Solves for the optimal point; falls back to the best of the midpoint and
    the two endpoints when the quadric is near-singular.
    """
    a = quadric[:3, :3]
    b = -quadric[:3, 3]
    try:
        det = np.linalg.det(a)
        scale = max(abs(a).max(), 1e-30)
        if abs(det) > 1e-10 * scale**3:
            target = np.linalg.solve(a, b)
            h = np.append(target, 1.0)
            return float(h @ quadric @ h), target
    except np.linalg.LinAlgError:
        pass
    best_cost, best = np.inf, None
    for cand in (0.5 * (pos_u + pos_v), pos_u, pos_v):
        h = np.append(cand, 1.0)
        c = float(h @ quadric @ h)
        if c < best_cost:
            best_cost, best = c, cand
    return best_cost, best


def simplify(mesh: Mesh, target_faces: int) -> Mesh:
    """Quadric edge collapse to exactly `target_faces` faces.

    Collapses are rejected when they would change topology (link condition)
    or fold a face over; the result is manifold with the Euler characteristic
    of the input preserved.
    """
    if target_faces < 4:
        raise RemeshError("target_faces must be at least 4")
    report = validate_manifold(mesh)
    if not report.is_manifold:
        raise NonManifoldError(report.non_manifold_edges)
    if mesh.face_count < target_faces:
        raise RemeshError(
            f"mesh has {mesh.face_count} faces, fewer than target {target_faces}"
        )
    if mesh.face_count == target_faces:
        return mesh

    pos = mesh.vertices.copy()
    faces = [list(map(int, f)) for f in mesh.faces]
    alive = [True] * len(faces)
    n_alive = len(faces)

    vert_faces: list[set[int]] = [set() for _ in range(len(pos))]
    for i, (a, b, c) in enumerate(faces):
        vert_faces[a].add(i)
        vert_faces[b].add(i)
        vert_faces[c].add(i)

    # Area-weighted plane quadrics per vertex.
    cross = np.cross(
        mesh.vertices[mesh.faces[:, 1]] - mesh.vertices[mesh.faces[:, 0]],
        mesh.vertices[mesh.faces[:, 2]] - mesh.vertices[mesh.faces[:, 0]],
    )
    norms = np.linalg.norm(cross, axis=1)
    quadrics = np.zeros((len(pos), 4, 4), dtype=np.float64)
    for i, (a, b, c) in enumerate(faces):
        if norms[i] < 1e-30:
            continue
        q = _plane_quadric(pos[a], cross[i] / norms[i], 0.5 * norms[i])
        quadrics[a] += q
        quadrics[b] += q
        quadrics[c] += q

    version = [0] * len(pos)
    heap: list[tuple[float, int, int, int, int, int]] = []
    counter = 0

    def neighbors(u: int) -> set[int]:
        out: set[int] = set()
        for fi in vert_faces[u]:
            out.update(faces[fi])
        out.discard(u)
        return out

    def push_edge(u: int, v: int):
        nonlocal counter
        cost, _ = _collapse_cost(quadrics[u] + quadrics[v], pos[u], pos[v])
        counter += 1
        heapq.heappush(heap, (cost, counter, u, v, version[u], version[v]))

    seen = set()
    for f in faces:
        for u, v in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (u, v) if u < v else (v, u)
            if key not in seen:
                seen.add(key)
                push_edge(*key)
    del seen

    def collapse_ok(u: int, v: int) -> bool:
        shared_faces = vert_faces[u] & vert_faces[v]
        if not 1 <= len(shared_faces) <= 2:
            return False
        opposite = set()
        for fi in shared_faces:
            for w in faces[fi]:
                if w != u and w != v:
                    opposite.add(w)
        if neighbors(u) & neighbors(v) != opposite:
            return False  # link condition: collapse would pinch the surface
        if n_alive - len(shared_faces) < target_faces:
            return False
        return True

    def try_collapse(u: int, v: int, target: np.ndarray) -> bool:
        nonlocal n_alive
        shared_faces = vert_faces[u] & vert_faces[v]
        moved = (vert_faces[u] | vert_faces[v]) - shared_faces
        # Reject fold-overs: every surviving face must keep its orientation.
        new_tris = {}
        for fi in moved:
            tri = [u if w == v else w for w in faces[fi]]
            p0, p1, p2 = pos[tri[0]], pos[tri[1]], pos[tri[2]]
            old0, old1, old2 = (pos[w] for w in faces[fi])
            old_n = np.cross(old1 - old0, old2 - old0)
            # Evaluate with the collapsed vertex at its new target position.
            pts = [target if w == u else pos[w] for w in tri]
            new_n = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            nn = np.linalg.norm(new_n)
            if nn < 1e-30 or np.dot(old_n, new_n) <= 1e-12 * np.linalg.norm(old_n) * nn:
                return False
            new_tris[fi] = tri
        dedupe = {tuple(sorted(t)) for t in new_tris.values()}
        if len(dedupe) != len(new_tris):
            return False

        pos[u] = target
        quadrics[u] = quadrics[u] + quadrics[v]
        for fi in shared_faces:
            alive[fi] = False
            n_alive -= 1
            for w in faces[fi]:
                vert_faces[w].discard(fi)
        for fi, tri in new_tris.items():
            if v in faces[fi]:
                vert_faces[v].discard(fi)
                vert_faces[u].add(fi)
            faces[fi] = tri
        vert_faces[v] = set()
        version[u] += 1
        version[v] += 1
        for w in neighbors(u):
            push_edge(*((u, w) if u < w else (w, u)))
        return True

    while n_alive > target_faces:
        if not heap:
            raise RemeshError(
                f"cannot reach {target_faces} faces without breaking topology "
                f"(stuck at {n_alive})"
            )
        cost, _, u, v, ver_u, ver_v = heapq.heappop(heap)
        if version[u] != ver_u or version[v] != ver_v:
            continue
        if not vert_faces[u] or not vert_faces[v]:
            continue
        if not collapse_ok(u, v):
            continue
        _, target = _collapse_cost(quadrics[u] + quadrics[v], pos[u], pos[v])
        try_collapse(u, v, target)

    keep_faces = np.array([f for f, a in zip(faces, alive) if a], dtype=np.int64)
    used = np.unique(keep_faces)
    remap = np.full(len(pos), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    out = make_mesh(pos[used], remap[keep_faces])

    post = validate_manifold(out)
    if not post.is_manifold:
        raise RemeshError("simplification produced a non-manifold mesh")
    lo_in, hi_in = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    lo_out, hi_out = out.vertices.min(axis=0), out.vertices.max(axis=0)
    diag = float(np.linalg.norm(hi_in - lo_in))
    drift = max(np.abs(lo_out - lo_in).max(), np.abs(hi_out - hi_in).max())
    if drift > 0.05 * diag:
        raise RemeshError(f"bounding box drifted by {drift:.3g} (> 5% of diagonal)")
    return out


# ---------------------------------------------------------------------------
# Midpoint subdivision


def _subdivide_once(vertices: np.ndarray, faces: np.ndarray):
    """Split every face into 4; children stored per parent as
    [corner a, corner b, corner c, center], each corner child starting at its
    base vertex. New midpoint vertices are indexed in face-scan order.
    """
    verts = [vertices]
    midpoint: dict[tuple[int, int], int] = {}
    next_id = vertices.shape[0]
    new_rows = []

    def mid(a: int, b: int) -> int:
        nonlocal next_id
        key = (a, b) if a < b else (b, a)
        idx = midpoint.get(key)
        if idx is None:
            idx = next_id
            next_id += 1
            midpoint[key] = idx
            new_rows.append(0.5 * (vertices[key[0]] + vertices[key[1]]))
        return idx

    out_faces = np.empty((faces.shape[0] * 4, 3), dtype=np.int64)
    for i, (a, b, c) in enumerate(faces):
        mab, mbc, mca = mid(a, b), mid(b, c), mid(c, a)
        base = 4 * i
        out_faces[base + 0] = (a, mab, mca)
        out_faces[base + 1] = (b, mbc, mab)
        out_faces[base + 2] = (c, mca, mbc)
        out_faces[base + 3] = (mab, mbc, mca)
    if new_rows:
        verts.append(np.array(new_rows))
    return np.concatenate(verts, axis=0), out_faces


def subdivide(mesh: Mesh, levels: int) -> RemeshedMesh:
    """Apply `levels` rounds of 1-to-4 midpoint subdivision with patch tracking."""
    if not 0 <= levels <= MAX_LEVELS:
        raise RemeshError(f"levels must be in [0, {MAX_LEVELS}]")
    report = validate_manifold(mesh)
    if not report.is_manifold:
        raise NonManifoldError(report.non_manifold_edges)

    v, f = mesh.vertices, mesh.faces
    for _ in range(levels):
        v, f = _subdivide_once(v, f)
    refined = make_mesh(v, f)

    f_n = mesh.face_count
    per = 4**levels
    # Depth-first hierarchy order coincides with storage order: each round
    # writes the 4 children of face i at 4i..4i+3, so a base face's
    # descendants stay contiguous and depth-first ordered.
    patch_faces = np.arange(f_n * per, dtype=np.int64).reshape(f_n, per)

    t = patch_vertex_count(levels)
    patch_vertices = np.empty((f_n, t), dtype=np.int64)
    for p in range(f_n):
        seen: dict[int, None] = {}
        for fi in patch_faces[p]:
            for w in f[fi]:
                seen.setdefault(int(w), None)
        if len(seen) != t:
            raise RemeshError(
                f"patch {p} has {len(seen)} distinct vertices, expected {t}"
            )
        patch_vertices[p] = np.fromiter(seen.keys(), dtype=np.int64, count=t)

    centroids = refined.vertices[refined.faces].mean(axis=1)
    patch_centers = centroids[patch_faces].mean(axis=1)

    cfg = RemeshConfig(base_faces=max(f_n, 4), subdivision_levels=levels)
    return RemeshedMesh(
        mesh=refined,
        patch_map=PatchMap(patch_faces, patch_vertices, patch_centers),
        config=cfg,
    )


def remesh_pipeline(mesh: Mesh, config: RemeshConfig | None = None) -> RemeshedMesh:
    """validate -> simplify to base_faces -> subdivide; errors propagate."""
    cfg = config or RemeshConfig()
    report = validate_manifold(mesh)
    if not report.is_manifold:
        raise NonManifoldError(report.non_manifold_edges)
    base = mesh if mesh.face_count == cfg.base_faces else simplify(mesh, cfg.base_faces)
    return subdivide(base, cfg.subdivision_levels)


# ---------------------------------------------------------------------------
# Sidecar persistence: mesh file + binary patch map

_MAP_MAGIC = b"ABMPATCH"
_MAP_VERSION = 1


def save_patch_map(rm: RemeshedMesh, path) -> None:
    pm = rm.patch_map
    with open(path, "wb") as fh:
        fh.write(_MAP_MAGIC)
        fh.write(
            struct.pack(
                "<IIIII",
                _MAP_VERSION,
                rm.config.base_faces,
                rm.config.subdivision_levels,
                pm.patch_count,
                pm.vertices_per_patch,
            )
        )
        fh.write(pm.patch_faces.astype("<i4").tobytes())
        fh.write(pm.patch_vertices.astype("<i4").tobytes())
        fh.write(pm.patch_centers.astype("<f8").tobytes())


def load_patch_map(path, mesh: Mesh) -> RemeshedMesh:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAP_MAGIC:
            raise RemeshError(f"{path}: not a patch-map file")
        version, base_faces, levels, f_n, t = struct.unpack("<IIIII", fh.read(20))
        if version != _MAP_VERSION:
            raise RemeshError(f"{path}: unsupported patch-map version {version}")
        per = 4**levels
        pf = np.frombuffer(fh.read(f_n * per * 4), dtype="<i4").reshape(f_n, per)
        pv = np.frombuffer(fh.read(f_n * t * 4), dtype="<i4").reshape(f_n, t)
        pc = np.frombuffer(fh.read(f_n * 3 * 8), dtype="<f8").reshape(f_n, 3)
    if mesh.face_count != f_n * per:
        raise RemeshError(
            f"{path}: patch map expects {f_n * per} faces, mesh has {mesh.face_count}"
        )
    cfg = RemeshConfig(base_faces=base_faces, subdivision_levels=levels)
    pm = PatchMap(
        pf.astype(np.int64), pv.astype(np.int64), np.ascontiguousarray(pc)
    )
    return RemeshedMesh(mesh=mesh, patch_map=pm, config=cfg)
