"""Shared fixtures: canonical meshes and a desk-scale training setup."""

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from abutmesh.losses import LossConfig
from abutmesh.meshio import Mesh, make_mesh
from abutmesh.network import ModelConfig
from abutmesh.remesh import subdivide
from abutmesh.synthetic import generate_case, sample_case_specs
from abutmesh.text import TextPrompt
from abutmesh.training import TrainConfig, make_sample, make_text_encoder


def tetrahedron() -> Mesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return make_mesh(v, f)


def icosahedron() -> Mesh:
    phi = (1 + 5**0.5) / 2
    verts = []
    for a, b in [(1, phi), (-1, phi), (1, -phi), (-1, -phi)]:
        verts += [[0, a, b], [a, b, 0], [b, 0, a]]
    v = np.array(verts, dtype=float)
    hull = ConvexHull(v)
    centre = v.mean(axis=0)
    faces = []
    for tri in hull.simplices:
        n = np.cross(v[tri[1]] - v[tri[0]], v[tri[2]] - v[tri[0]])
        faces.append(tri if np.dot(n, v[tri].mean(axis=0) - centre) > 0 else tri[[0, 2, 1]])
    return make_mesh(v, np.array(faces))


def icosphere(levels: int) -> Mesh:
    rm = subdivide(icosahedron(), levels)
    v = rm.mesh.vertices / np.linalg.norm(rm.mesh.vertices, axis=1, keepdims=True)
    return make_mesh(v, rm.mesh.faces)


@pytest.fixture(scope="session")
def tetra():
    return tetrahedron()


@pytest.fixture(scope="session")
def ico():
    return icosahedron()


@pytest.fixture(scope="session")
def sphere1280():
    return icosphere(3)


def desk_model_config(**overrides) -> ModelConfig:
    base = dict(
        embed_dim=64,
        encoder_blocks=2,
        decoder_blocks=1,
        heads=4,
        text_width=64,
        base_faces=64,
        levels=2,
        mask_ratio=0.5,
        loss=LossConfig(recon_weight=0.1),
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(
        paradigm="ssat",
        epochs=100,
        pretrain_epochs=4,
        batch_size=8,
        lr=5e-3,
        seed=0,
        model=desk_model_config(),
    )
    base.update(overrides)
    return TrainConfig(**base)


def coarse_samples(n: int, seed: int, cfg: TrainConfig, noise_level: float = 0.0):
    specs = sample_case_specs(n, seed=seed, noise_level=noise_level)
    encoder = make_text_encoder(cfg)
    out = []
    for i, spec in enumerate(specs):
        mesh = generate_case(spec, resolution=0.35)
        prompt = TextPrompt(spec.location, spec.system, spec.series)
        out.append(
            make_sample(mesh, prompt, spec.label_array(), cfg, encoder=encoder, name=f"case-{i}")
        )
    return specs, out


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_train_config()


@pytest.fixture(scope="session")
def eight_samples(desk_cfg):
    """Eight coarse labelled cases shared by the training tests."""
    return coarse_samples(8, seed=42, cfg=desk_cfg)
