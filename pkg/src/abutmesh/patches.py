"""Network-ready patch features, positions, and masked/visible partitions.

Each patch contributes one row: the 13-dim descriptors of its ``4^K`` faces
concatenated in hierarchy order (with face centers expressed relative to the
patch center, so rows are translation invariant), the absolute patch center,
and the patch's vertex coordinates relative to that center.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .meshio import FEATURE_DIM, face_feature_matrix
from .remesh import RemeshedMesh


@dataclass
class PatchFeatureSet:
    features: np.ndarray  # (f_n, 4^K * 13)
    centers: np.ndarray  # (f_n, 3), absolute mm
    vertex_rel: np.ndarray  # (f_n, T_K, 3), vertex coords minus patch center

    @property
    def patch_count(self) -> int:
        return self.features.shape[0]

    @property
    def faces_per_patch(self) -> int:
        return self.features.shape[1] // FEATURE_DIM

    @property
    def per_face_features(self) -> np.ndarray:
        """(f_n, 4^K, 13) view of `features`; also the reconstruction target."""
        return self.features.reshape(self.patch_count, self.faces_per_patch, FEATURE_DIM)


@dataclass
class MaskSpec:
    ratio: float
    seed: int
    masked: np.ndarray  # sorted patch indices
    visible: np.ndarray  # sorted patch indices

    @property
    def masked_count(self) -> int:
        return self.masked.shape[0]


def build_patch_features(rm: RemeshedMesh) -> PatchFeatureSet:
    """Assemble per-patch features, centers, and relative vertex coordinates."""
    pm = rm.patch_map
    per_face = face_feature_matrix(rm.mesh)  # raises on degenerate faces
    f_n = pm.patch_count
    feats = per_face[pm.patch_faces]  # (f_n, 4^K, 13)
    feats = feats.copy()
    # Face centers relative to the patch center keep rows translation
    # invariant; absolute positions travel separately in `centers`.
    feats[:, :, 7:10] -= pm.patch_centers[:, None, :]
    vertex_rel = rm.mesh.vertices[pm.patch_vertices] - pm.patch_centers[:, None, :]
    return PatchFeatureSet(
        features=feats.reshape(f_n, -1),
        centers=pm.patch_centers.copy(),
        vertex_rel=vertex_rel,
    )


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def mask_patches(pfs: PatchFeatureSet, ratio: float, seed: int) -> MaskSpec:
    """Uniform random patch subset of size round(ratio * f_n), fixed by seed.

    The generator is counter-based (Philox) so masks are reproducible in
    parallel data loading regardless of draw order.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    f_n = pfs.patch_count
    k = _round_half_away(ratio * f_n)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & (2**64 - 1))))
    perm = rng.permutation(f_n)
    masked = np.sort(perm[:k])
    visible = np.sort(perm[k:])
    return MaskSpec(ratio=ratio, seed=seed, masked=masked, visible=visible)


# ---------------------------------------------------------------------------
# Packed sample cache

_SAMPLE_MAGIC = b"ABMSAMP1"
_SAMPLE_VERSION = 1


def write_sample_cache(pfs: PatchFeatureSet, path) -> None:
    f_n = pfs.patch_count
    t = pfs.vertex_rel.shape[1]
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_MAGIC)
        fh.write(struct.pack("<IIII", _SAMPLE_VERSION, f_n, pfs.faces_per_patch, t))
        fh.write(pfs.features.astype("<f8").tobytes())
        fh.write(pfs.centers.astype("<f8").tobytes())
        fh.write(pfs.vertex_rel.astype("<f8").tobytes())


def read_sample_cache(path) -> PatchFeatureSet:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _SAMPLE_MAGIC:
            raise ValueError(f"{path}: not a packed sample file")
        version, f_n, per, t = struct.unpack("<IIII", fh.read(16))
        if version != _SAMPLE_VERSION:
            raise ValueError(f"{path}: unsupported sample version {version}")
        width = per * FEATURE_DIM
        feats = np.frombuffer(fh.read(f_n * width * 8), dtype="<f8").reshape(f_n, width)
        centers = np.frombuffer(fh.read(f_n * 3 * 8), dtype="<f8").reshape(f_n, 3)
        rel = np.frombuffer(fh.read(f_n * t * 3 * 8), dtype="<f8").reshape(f_n, t, 3)
    return PatchFeatureSet(
        features=feats.copy(), centers=centers.copy(), vertex_rel=rel.copy()
    )
