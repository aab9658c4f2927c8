"""Procedural oral-scan stand-ins with exact ground-truth labels.

A case is an arch-shaped ridge (a tube swept along a circular arc, with
smooth tooth bumps) that has one edentulous gap, plus a floating antagonist
slab above the gap. The gap geometry encodes the three labels exactly:

* the gap channel floor sits ``transgingival`` mm below the collar rim,
* the chord between the two channel wall top corners equals ``diameter``,
* the slab's flat underside sits ``height`` mm above the collar rim.

Channel walls are linear ramps whose corner vertices are placed exactly on
grid stations, so an independent probe (:func:`measure_case`) can recover all
three labels from the mesh alone to float precision at zero noise.

Parameter ranges and the category grid are synthetic conventions (the ranges
are clinically plausible, nothing more): transgingival 1-5 mm, diameter
3.5-7 mm, height 4-10 mm; categories quantize at 1 / 0.5 / 1 mm steps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import derive_seed
from .meshio import Mesh, dumps_mesh, make_mesh

# Scene constants (all mm / radians).
ARCH_RADIUS = 24.0
ARCH_HALF_SPAN = np.radians(95.0)
TUBE_RADIUS = 6.0
RIM_LIFT = 1.0  # collar plateau sits this far above the plain tube crest
PLATEAU_HALF = 6.0  # arc half-width of the flat collar around the gap
BLEND_HALF = 8.0  # plateau blends back into the tube by this arc distance
WALL_RAMP = 0.4  # arc width of each channel wall ramp
PROBE_HALF = 4.8  # probe only trusts the crest profile inside this arc window
TOOTH_OFFSET = 8.4  # first tooth centre, arc distance from the gap centre
TOOTH_PITCH = 7.6
TOOTH_HALF = 3.0
STATION_ANGLE = np.radians(9.5)  # tooth-position granularity along the arch

SLAB_SIZE = (14.0, 10.0, 2.5)  # tangent, radial, vertical extents
SLAB_DIVS = (6, 4, 2)

PARAM_RANGES = {
    "transgingival": (1.0, 5.0),
    "diameter": (3.5, 7.0),
    "height": (4.0, 10.0),
}
CATEGORY_STEPS = {"transgingival": 1.0, "diameter": 0.5, "height": 1.0}

SYSTEMS = ("OSSTEM", "SYSGEN", "DIO", "MEGAGEN")
SERIES = ("R", "A", "S", "W", "K", "E", "T")


class CaseError(ValueError):
    pass


def location_vocabulary() -> list[str]:
    """All tooth locations the generator understands (arch + FDI number)."""
    out = []
    for arch, quadrants in (("Top", (1, 2)), ("Bottom", (3, 4))):
        for q in quadrants:
            for pos in range(1, 8):
                out.append(f"{arch}-{q}{pos}")
    return out


def location_angle(location: str) -> float:
    """Arch angle of the gap for a location like 'Bottom-45'."""
    try:
        arch, fdi = location.split("-")
        quadrant, pos = int(fdi[0]), int(fdi[1:])
    except (ValueError, IndexError):
        raise CaseError(f"bad location '{location}' (expected e.g. 'Bottom-45')") from None
    if arch not in ("Top", "Bottom") or quadrant not in (1, 2, 3, 4) or not 1 <= pos <= 7:
        raise CaseError(f"bad location '{location}'")
    if (arch == "Top") != (quadrant in (1, 2)):
        raise CaseError(f"location '{location}': quadrant does not match arch")
    sign = 1.0 if quadrant in (1, 4) else -1.0
    return sign * pos * STATION_ANGLE


def quantize_category(transgingival: float, diameter: float, height: float) -> str:
    """Stock-abutment style type id: the parameter cell on the category grid."""
    parts = []
    for name, value in (
        ("transgingival", transgingival),
        ("diameter", diameter),
        ("height", height),
    ):
        lo, hi = PARAM_RANGES[name]
        step = CATEGORY_STEPS[name]
        nbins = int(round((hi - lo) / step))
        b = min(int((value - lo) / step), nbins - 1)
        parts.append(f"{name[0]}{lo + b * step:g}")
    return "-".join(parts)


@dataclass
class CaseSpec:
    seed: int
    transgingival: float
    diameter: float
    height: float
    location: str
    system: str
    series: str
    noise_level: float = 0.0
    category: str = field(init=False)

    def __post_init__(self):
        for name in ("transgingival", "diameter", "height"):
            lo, hi = PARAM_RANGES[name]
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise CaseError(f"{name}={v} outside synthetic range [{lo}, {hi}]")
        location_angle(self.location)  # validates
        if self.noise_level < 0:
            raise CaseError("noise_level must be non-negative")
        self.category = quantize_category(self.transgingival, self.diameter, self.height)

    def label_array(self) -> np.ndarray:
        return np.array([self.transgingival, self.diameter, self.height], dtype=np.float64)


# ---------------------------------------------------------------------------
# Geometry


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _crest_profile(s, spec: CaseSpec):
    """Crest radius offset above TUBE_RADIUS at arc distance s from the gap."""
    s = np.abs(np.asarray(s, dtype=np.float64))
    alpha_top = np.arcsin(spec.diameter / (2.0 * ARCH_RADIUS))
    s_top = alpha_top * ARCH_RADIUS
    s_floor = s_top - WALL_RAMP
    # Collar plateau with a smooth blend back into the plain tube.
    plateau = RIM_LIFT * (1.0 - _smoothstep((s - PLATEAU_HALF) / (BLEND_HALF - PLATEAU_HALF)))
    # Channel: flat floor, linear walls up to the plateau.
    depth = np.where(
        s <= s_floor,
        spec.transgingival,
        np.where(s < s_top, spec.transgingival * (s_top - s) / WALL_RAMP, 0.0),
    )
    return plateau - depth, s_top, s_floor


def _tooth_profile(s, rng_phase: float):
    """Cosine-squared tooth bumps, outward from the gap on both sides."""
    s = np.asarray(s, dtype=np.float64)
    out = np.zeros_like(s)
    max_s = ARCH_HALF_SPAN * ARCH_RADIUS * 2.0
    k = 0
    centre = TOOTH_OFFSET
    while centre < max_s:
        amp = 2.0 + 0.8 * np.sin(1.7 * k + rng_phase)
        for side in (-1.0, 1.0):
            d = np.abs(s - side * centre)
            inside = d < TOOTH_HALF
            out = out + np.where(
                inside, amp * np.cos(np.pi * d / (2.0 * TOOTH_HALF)) ** 2, 0.0
            )
        k += 1
        centre += TOOTH_PITCH
    return out


def _bump_u(u):
    """Smooth hat around the crest direction u = pi/2 (1 on the core)."""
    x = np.abs(np.angle(np.exp(1j * (np.asarray(u) - np.pi / 2.0)))) / 0.9
    return np.where(x <= 0.4, 1.0, 1.0 - _smoothstep((x - 0.4) / 0.6))


def _signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    p = vertices[faces]
    return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


def _oriented(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    return faces if _signed_volume(vertices, faces) > 0 else faces[:, [0, 2, 1]]


def _ridge_mesh(spec: CaseSpec, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    phi_g = location_angle(spec.location)
    rng = np.random.default_rng(derive_seed("case-ridge", spec.seed))
    tooth_phase = float(rng.uniform(0, 2 * np.pi))
    noise_modes = [
        (
            float(rng.uniform(0.15, 0.35)),
            int(rng.integers(2, 6)),
            float(rng.uniform(0, 2 * np.pi)),
            int(rng.integers(1, 4)),
            float(rng.uniform(0, 2 * np.pi)),
        )
        for _ in range(3)
    ]

    n_u = max(16, int(round(56 * resolution)))
    ds = 0.55 / max(resolution, 1e-3)
    n_phi = max(32, int(round(2 * ARCH_HALF_SPAN * ARCH_RADIUS / ds)))
    stations = list(np.linspace(-ARCH_HALF_SPAN, ARCH_HALF_SPAN, n_phi))
    # Channel wall corners must be actual grid stations.
    _, s_top, s_floor = _crest_profile(0.0, spec)
    inserted = [
        phi_g + sgn * s / ARCH_RADIUS for sgn in (-1.0, 1.0) for s in (s_top, s_floor)
    ] + [phi_g]
    guard = 0.05 * ds / ARCH_RADIUS
    stations = [
        p for p in stations if all(abs(p - q) > guard for q in inserted)
    ] + inserted
    stations = np.array(sorted(stations))

    u = np.pi / 2.0 + 2.0 * np.pi * np.arange(n_u) / n_u  # crest column at j=0
    uu, pp = np.meshgrid(u, stations, indexing="ij")  # (n_u, n_phi)
    s = (pp - phi_g) * ARCH_RADIUS
    crest, _, _ = _crest_profile(s, spec)
    crest = crest + _tooth_profile(s, tooth_phase)
    r = TUBE_RADIUS + crest * _bump_u(uu)
    if spec.noise_level > 0:
        fade = _smoothstep((np.abs(s) - 9.0) / 3.0)
        noise = np.zeros_like(s)
        for amp, f_phi, th, f_u, ps in noise_modes:
            noise += amp * np.cos(f_phi * pp + th) * np.cos(f_u * uu + ps)
        r = r + spec.noise_level * fade * noise

    radial = np.stack([np.sin(pp), np.cos(pp), np.zeros_like(pp)], axis=-1)
    centre = ARCH_RADIUS * radial
    points = centre + r[..., None] * (
        np.cos(uu)[..., None] * radial
        + np.sin(uu)[..., None] * np.array([0.0, 0.0, 1.0])
    )

    n_phi = len(stations)
    verts = points.transpose(1, 0, 2).reshape(-1, 3)  # ring-major: ring j row

    def vid(j, i):
        return j * n_u + i % n_u

    faces = []
    for j in range(n_phi - 1):
        for i in range(n_u):
            a, b = vid(j, i), vid(j, i + 1)
            c, d = vid(j + 1, i), vid(j + 1, i + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    # End caps: pole at each tube centreline end.
    pole_lo = len(verts)
    pole_hi = pole_lo + 1
    verts = np.vstack([verts, centre[0, 0], centre[0, -1]])
    for i in range(n_u):
        faces.append((pole_lo, vid(0, i + 1), vid(0, i)))
        faces.append((pole_hi, vid(n_phi - 1, i), vid(n_phi - 1, i + 1)))
    faces = np.array(faces, dtype=np.int64)
    return verts, _oriented(verts, faces)


def _slab_mesh(spec: CaseSpec) -> tuple[np.ndarray, np.ndarray]:
    """Tessellated closed box; flat underside at collar rim + height."""
    phi_g = location_angle(spec.location)
    sx, sy, sz = SLAB_SIZE
    nx, ny, nz = SLAB_DIVS
    counts = (nx, ny, nz)

    key_to_id: dict[tuple[int, int, int], int] = {}
    verts: list[tuple[int, int, int]] = []

    def vid(ix, iy, iz):
        key = (ix, iy, iz)
        if key not in key_to_id:
            key_to_id[key] = len(verts)
            verts.append(key)
        return key_to_id[key]

    faces = []

    def grid_face(fixed_axis, fixed_val, flip):
        ax_a, ax_b = [ax for ax in range(3) if ax != fixed_axis]
        for ia in range(counts[ax_a]):
            for ib in range(counts[ax_b]):
                corner = [0, 0, 0]
                corner[fixed_axis] = fixed_val

                def at(da, db):
                    c = corner.copy()
                    c[ax_a] = ia + da
                    c[ax_b] = ib + db
                    return vid(*c)

                a, b, c, d = at(0, 0), at(1, 0), at(1, 1), at(0, 1)
                if flip:
                    faces.append((a, c, b))
                    faces.append((a, d, c))
                else:
                    faces.append((a, b, c))
                    faces.append((a, c, d))

    # The natural (ax_a x ax_b) normal points along +axis only for axis 0 and
    # 2 (dropping the middle axis is an odd permutation), hence the parity.
    for axis in range(3):
        grid_face(axis, 0, flip=(axis != 1))
        grid_face(axis, counts[axis], flip=(axis == 1))

    lattice = np.array(verts, dtype=np.float64)
    local = lattice / np.array(counts) * np.array([sx, sy, sz]) - np.array(
        [sx / 2.0, sy / 2.0, 0.0]
    )
    # Local frame: x along the arch tangent, y radial, z up; underside at z=0.
    tangent = np.array([np.cos(phi_g), -np.sin(phi_g), 0.0])
    radial = np.array([np.sin(phi_g), np.cos(phi_g), 0.0])
    base = ARCH_RADIUS * radial + np.array(
        [0.0, 0.0, TUBE_RADIUS + RIM_LIFT + spec.height]
    )
    points = base + local[:, [0]] * tangent + local[:, [1]] * radial + local[:, [2]] * np.array([0.0, 0.0, 1.0])
    faces = np.array(faces, dtype=np.int64)
    return points, _oriented(points, faces)


def generate_case(spec: CaseSpec, resolution: float = 1.0) -> Mesh:
    """Deterministic labelled case mesh (ridge plus antagonist slab)."""
    rv, rf = _ridge_mesh(spec, resolution)
    sv, sf = _slab_mesh(spec)
    verts = np.vstack([rv, sv])
    faces = np.vstack([rf, sf + len(rv)])
    return make_mesh(verts, faces)


# ---------------------------------------------------------------------------
# Independent measurement probe


def _face_components(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    parent = np.arange(n_vertices)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for a, b, c in faces:
        ra, rb, rc = find(a), find(b), find(c)
        parent[rb] = ra
        parent[find(rc)] = ra
    return np.array([find(v) for v in range(n_vertices)])


def measure_case(mesh: Mesh, location: str) -> tuple[float, float, float]:
    """Recover (transgingival, diameter, height) from the mesh geometry alone.

    Used as the independent oracle against the generator: splits the mesh
    into components, reads the collar rim and channel floor off the crest
    polyline around the gap, extrapolates the linear channel walls to rim
    height for the diameter chord, and takes the slab underside for height.
    """
    phi_g = location_angle(location)
    comp = _face_components(mesh.faces, mesh.vertex_count)
    roots = np.unique(comp)
    if len(roots) != 2:
        raise CaseError(f"expected ridge + slab components, found {len(roots)}")
    min_z = {r: mesh.vertices[comp == r, 2].min() for r in roots}
    slab_root = max(roots, key=lambda r: min_z[r])
    slab_pts = mesh.vertices[comp == slab_root]
    ridge_pts = mesh.vertices[comp != slab_root]

    rho = np.hypot(ridge_pts[:, 0], ridge_pts[:, 1])
    phi = np.arctan2(ridge_pts[:, 0], ridge_pts[:, 1])
    s = (phi - phi_g) * ARCH_RADIUS
    crest = (np.abs(rho - ARCH_RADIUS) < 0.3) & (ridge_pts[:, 2] > 0) & (np.abs(s) <= PROBE_HALF)
    if crest.sum() < 8:
        raise CaseError("probe found too few crest vertices near the gap")
    pts = ridge_pts[crest][np.argsort(s[crest])]
    z = pts[:, 2]

    z_rim = float(z.max())
    z_floor = float(z.min())
    transgingival = z_rim - z_floor
    height = float(slab_pts[:, 2].min()) - z_rim

    def wall_point(side: int, z_target: float) -> np.ndarray:
        # side -1: scan the descending left wall; +1: ascending right wall.
        idx = range(len(z) - 1) if side < 0 else range(len(z) - 1, 0, -1)
        for i in idx:
            j = i + 1 if side < 0 else i - 1
            z0, z1 = z[i], z[j]
            if (z0 - z_target) * (z1 - z_target) <= 0 and z0 != z1:
                w = (z_target - z0) / (z1 - z0)
                return pts[i] + w * (pts[j] - pts[i])
        raise CaseError("channel wall crossing not found")

    lo = z_floor + 0.35 * transgingival
    hi = z_floor + 0.65 * transgingival
    corners = []
    for side in (-1, 1):
        p_lo = wall_point(side, lo)
        p_hi = wall_point(side, hi)
        corners.append(p_lo + (p_hi - p_lo) * (z_rim - lo) / (hi - lo))
    diameter = float(np.linalg.norm(corners[0] - corners[1]))
    return transgingival, diameter, height


# ---------------------------------------------------------------------------
# Dataset assembly


@dataclass
class DatasetManifest:
    meta: dict
    records: list[dict]

    def split_records(self, tag: str) -> list[dict]:
        return [r for r in self.records if r["split"] == tag]

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "meta", **self.meta}, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps({"kind": "case", **rec}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        meta, records = None, []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                kind = obj.pop("kind", None)
                if kind == "meta":
                    meta = obj
                elif kind == "case":
                    records.append(obj)
                else:
                    raise CaseError(f"{path}: unknown record kind {kind!r}")
        if meta is None:
            raise CaseError(f"{path}: missing meta record")
        return cls(meta=meta, records=records)


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_case_specs(n: int, seed: int, noise_level: float = 0.0) -> list[CaseSpec]:
    """Draw n cases over a seeded palette of category cells (balanced counts)."""
    if n < 1:
        raise CaseError("need at least one case")
    rng = np.random.default_rng(derive_seed("dataset", seed))
    bins = {
        name: int(round((hi - lo) / CATEGORY_STEPS[name]))
        for name, (lo, hi) in PARAM_RANGES.items()
    }
    n_cells = bins["transgingival"] * bins["diameter"] * bins["height"]
    palette_size = int(np.clip(n // 8, 2, 24))
    palette = rng.choice(n_cells, size=palette_size, replace=False)
    locations = location_vocabulary()

    specs = []
    for i in range(n):
        cell = int(palette[i % palette_size])
        bt = cell % bins["transgingival"]
        bd = (cell // bins["transgingival"]) % bins["diameter"]
        bh = cell // (bins["transgingival"] * bins["diameter"])
        jitter = rng.uniform(0.05, 0.95, size=3)
        t = PARAM_RANGES["transgingival"][0] + (bt + jitter[0]) * CATEGORY_STEPS["transgingival"]
        d = PARAM_RANGES["diameter"][0] + (bd + jitter[1]) * CATEGORY_STEPS["diameter"]
        h = PARAM_RANGES["height"][0] + (bh + jitter[2]) * CATEGORY_STEPS["height"]
        specs.append(
            CaseSpec(
                seed=derive_seed(seed, "case", i),
                transgingival=float(t),
                diameter=float(d),
                height=float(h),
                location=str(rng.choice(locations)),
                system=str(rng.choice(SYSTEMS)),
                series=SERIES[bd],
                noise_level=noise_level,
            )
        )
    return specs


def assign_splits(specs: list[CaseSpec], split: float, seed: int) -> list[str]:
    """Per-category stratified split; the global train count is exactly
    round(split * n) via largest-remainder allocation, each category within
    one sample of its own fraction."""
    if not 0.0 <= split <= 1.0:
        raise CaseError("split fraction must be in [0, 1]")
    n = len(specs)
    by_cat: dict[str, list[int]] = {}
    for i, spec in enumerate(specs):
        by_cat.setdefault(spec.category, []).append(i)
    want_total = _round_half_away(split * n)
    floors = {c: int(np.floor(split * len(idx))) for c, idx in by_cat.items()}
    remainder = want_total - sum(floors.values())
    fracs = sorted(
        by_cat,
        key=lambda c: (split * len(by_cat[c]) - floors[c], c),
        reverse=True,
    )
    extra = set(fracs[:remainder])
    rng = np.random.default_rng(derive_seed(seed, "split"))
    tags = [""] * n
    for cat, idx in sorted(by_cat.items()):
        order = list(rng.permutation(idx))
        k = floors[cat] + (1 if cat in extra else 0)
        for j, i in enumerate(order):
            tags[i] = "train" if j < k else "test"
    return tags


def build_dataset(
    n: int,
    split: float = 0.85,
    seed: int = 0,
    out_dir=None,
    resolution: float = 1.0,
    noise_level: float = 0.0,
) -> DatasetManifest:
    """Sample specs, optionally write meshes (content-addressed) + manifest."""
    if n < 20:
        raise CaseError(f"need at least 20 cases for stratified splits, got {n}")
    specs = sample_case_specs(n, seed, noise_level)
    tags = assign_splits(specs, split, seed)
    records = []
    root = Path(out_dir) if out_dir is not None else None
    for spec, tag in zip(specs, tags):
        rec = {
            "location": spec.location,
            "system": spec.system,
            "series": spec.series,
            "transgingival": spec.transgingival,
            "diameter": spec.diameter,
            "height": spec.height,
            "category": spec.category,
            "split": tag,
            "seed": spec.seed,
        }
        if root is not None:
            mesh = generate_case(spec, resolution=resolution)
            payload = dumps_mesh(mesh)
            digest = hashlib.sha256(payload.encode("ascii")).hexdigest()[:16]
            rel = Path("meshes") / digest[:2] / f"{digest}.obj"
            target = root / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(payload, encoding="ascii")
            rec["mesh"] = str(rel)
        records.append(rec)
    manifest = DatasetManifest(
        meta={
            "version": 1,
            "n": n,
            "split": split,
            "seed": seed,
            "resolution": resolution,
            "noise_level": noise_level,
        },
        records=records,
    )
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        manifest.save(root / "manifest.jsonl")
    return manifest
