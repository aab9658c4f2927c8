"""Abutment parameter prediction from intraoral scan meshes.

Pipeline: remesh a scan into subdivision-regular patches, encode patches with
a transformer shared between a masked-reconstruction branch and a regression
branch, fuse clinical text prompts by cross-attention, and regress the three
stock-abutment parameters (transgingival, diameter, height, in mm).
"""

from .estimator import AbutmentRegressor
from .losses import LossConfig, interval_iou, iou_report
from .meshio import Mesh, face_features, load_mesh, make_mesh, save_mesh, validate_manifold
from .network import AbutmentParams, DualBranchNet, ModelConfig
from .patches import build_patch_features, mask_patches
from .remesh import RemeshConfig, remesh_pipeline, simplify, subdivide
from .text import HashTextEncoder, TextPrompt, render_prompt

__version__ = "0.1.0"

__all__ = [
    "AbutmentParams",
    "AbutmentRegressor",
    "DualBranchNet",
    "HashTextEncoder",
    "LossConfig",
    "Mesh",
    "ModelConfig",
    "RemeshConfig",
    "TextPrompt",
    "build_patch_features",
    "face_features",
    "interval_iou",
    "iou_report",
    "load_mesh",
    "make_mesh",
    "mask_patches",
    "remesh_pipeline",
    "render_prompt",
    "save_mesh",
    "simplify",
    "subdivide",
    "validate_manifold",
]
