"""Dual-branch mesh transformer: shared encoder, reconstruction decoder with a
learnable mask token, text cross-attention fusion, and three regression heads.

Only the regression path (`forward_regression`) runs at prediction time; all
reconstruction-side parameters live under the ``dec.`` namespace so they can
be zeroed or dropped from a checkpoint without changing predictions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, derive_seed, trunc_normal
from .losses import LossConfig
from .meshio import FEATURE_DIM
from .patches import MaskSpec, PatchFeatureSet
from .remesh import patch_vertex_count
from .text import TextEmbedding


@dataclass
class ModelConfig:
    embed_dim: int = 384
    encoder_blocks: int = 12
    decoder_blocks: int = 6
    heads: int = 6
    mlp_ratio: float = 4.0
    text_width: int = 512
    base_faces: int = 500
    levels: int = 3
    mask_ratio: float = 0.5
    fused_dim: int | None = None  # post-concat projection width; defaults to embed_dim
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must be in [0, 1]")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    @property
    def faces_per_patch(self) -> int:
        return 4**self.levels

    @property
    def feature_width(self) -> int:
        return self.faces_per_patch * FEATURE_DIM

    @property
    def verts_per_patch(self) -> int:
        return patch_vertex_count(self.levels)

    @property
    def out_dim(self) -> int:
        return self.fused_dim if self.fused_dim is not None else self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class AbutmentParams:
    transgingival: float
    diameter: float
    height: float

    def as_array(self) -> np.ndarray:
        return np.array([self.transgingival, self.diameter, self.height], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "AbutmentParams":
        t, d, h = (float(x) for x in np.asarray(arr).ravel()[:3])
        return cls(transgingival=t, diameter=d, height=h)


@dataclass
class ReconstructionOutput:
    vertices: Tensor  # (|M|, T, 3) relative coordinates per masked patch
    face_features: Tensor  # (|M|, 4^K, 13)
    masked_indices: np.ndarray


class DualBranchNet:
    """Parameter store plus the forward passes of both branches."""

    def __init__(self, config: ModelConfig, dtype=np.float64, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self._params: dict[str, Parameter] = {}
        d = config.embed_dim
        hidden = int(d * config.mlp_ratio)

        self._new("embed.mlp1_w", (config.feature_width, d))
        self._new("embed.mlp1_b", (d,), "zeros")
        self._new("embed.mlp2_w", (d, d))
        self._new("embed.mlp2_b", (d,), "zeros")
        self._new("embed.pos_w", (3, d))
        self._new("embed.pos_b", (d,), "zeros")

        for i in range(config.encoder_blocks):
            self._block_params(f"enc.{i}", d, hidden)

        self._new("dec.pos_w", (3, d))
        self._new("dec.pos_b", (d,), "zeros")
        self._new("dec.mask_token", (1, d))
        for i in range(config.decoder_blocks):
            self._block_params(f"dec.{i}", d, hidden)
        self._new("dec.vert_w", (d, config.verts_per_patch * 3))
        self._new("dec.vert_b", (config.verts_per_patch * 3,), "zeros")
        self._new("dec.feat_w", (d, config.feature_width))
        self._new("dec.feat_b", (config.feature_width,), "zeros")

        self._new("fuse.proj_w", (config.text_width, d))
        self._new("fuse.proj_b", (d,), "zeros")
        self._new("fuse.out_w", (2 * d, config.out_dim))
        self._new("fuse.out_b", (config.out_dim,), "zeros")

        for i in (1, 2, 3):
            self._new(f"reg.fc{i}_w", (config.out_dim, config.out_dim))
            self._new(f"reg.fc{i}_b", (config.out_dim,), "zeros")
        for name in ("t", "d", "h"):
            self._new(f"reg.head_{name}_w", (config.out_dim, 1))
            self._new(f"reg.head_{name}_b", (1,), "zeros")
        # Output affine constants (set by the trainer from train-split labels).
        self._new("reg.out_mean", (3,), "zeros", trainable=False)
        self._new("reg.out_scale", (3,), "ones", trainable=False)

    def _new(self, name: str, shape, init: str = "trunc_normal", trainable: bool = True):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name}")
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        elif init == "trunc_normal":
            rng = np.random.default_rng(derive_seed("param", self.seed, name))
            value = trunc_normal(shape, 0.02, rng)
        else:
            raise ValueError(f"unknown init '{init}'")
        self._params[name] = Parameter(
            name, value.astype(self.dtype), init=init, trainable=trainable
        )

    def _block_params(self, prefix: str, d: int, hidden: int):
        self._new(f"{prefix}.ln1_g", (d,), "ones")
        self._new(f"{prefix}.ln1_b", (d,), "zeros")
        for proj in ("q", "k", "v", "o"):
            self._new(f"{prefix}.attn_w{proj}", (d, d))
            self._new(f"{prefix}.attn_b{proj}", (d,), "zeros")
        self._new(f"{prefix}.ln2_g", (d,), "ones")
        self._new(f"{prefix}.ln2_b", (d,), "zeros")
        self._new(f"{prefix}.mlp_w1", (d, hidden))
        self._new(f"{prefix}.mlp_b1", (hidden,), "zeros")
        self._new(f"{prefix}.mlp_w2", (hidden, d))
        self._new(f"{prefix}.mlp_b2", (d,), "zeros")

    # -- parameter access -------------------------------------------------

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def parameters(self) -> dict[str, Tensor]:
        return {k: p.tensor for k, p in self._params.items()}

    def parameter_specs(self) -> dict[str, str]:
        return {k: p.init for k, p in self._params.items()}

    def trainable_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            k: p.tensor
            for k, p in self._params.items()
            if p.tensor.requires_grad and k.startswith(prefix)
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True):
        missing = [k for k in self._params if k not in arrays]
        unexpected = [k for k in arrays if k not in self._params]
        if strict and (missing or unexpected):
            raise ValueError(
                f"state mismatch: missing={missing[:4]}..., unexpected={unexpected[:4]}..."
            )
        for k, arr in arrays.items():
            if k not in self._params:
                continue
            tgt = self._params[k].tensor
            if tuple(arr.shape) != tuple(tgt.data.shape):
                raise ValueError(
                    f"parameter {k}: shape {arr.shape} != expected {tgt.data.shape}"
                )
            tgt.data = np.ascontiguousarray(arr, dtype=self.dtype)
        return missing

    # -- building blocks ---------------------------------------------------

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        cfg = self.config
        d = cfg.embed_dim
        h = cfg.heads
        dh = d // h
        n = x.data.shape[0]
        q = ad.linear(x, self[f"{prefix}.attn_wq"], self[f"{prefix}.attn_bq"])
        k = ad.linear(x, self[f"{prefix}.attn_wk"], self[f"{prefix}.attn_bk"])
        v = ad.linear(x, self[f"{prefix}.attn_wv"], self[f"{prefix}.attn_bv"])
        q = ad.transpose(ad.reshape(q, (n, h, dh)), (1, 0, 2))  # (h, n, dh)
        k = ad.transpose(ad.reshape(k, (n, h, dh)), (1, 0, 2))
        v = ad.transpose(ad.reshape(v, (n, h, dh)), (1, 0, 2))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)  # (h, n, dh)
        ctx = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (n, d))
        return ad.linear(ctx, self[f"{prefix}.attn_wo"], self[f"{prefix}.attn_bo"])

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        hdn = ad.gelu(ad.linear(x, self[f"{prefix}.mlp_w1"], self[f"{prefix}.mlp_b1"]))
        return ad.linear(hdn, self[f"{prefix}.mlp_w2"], self[f"{prefix}.mlp_b2"])

    def _transformer_block(self, x: Tensor, prefix: str) -> Tensor:
        y = ad.layer_norm(x, self[f"{prefix}.ln1_g"], self[f"{prefix}.ln1_b"])
        x = x + self._attention(y, prefix)
        y = ad.layer_norm(x, self[f"{prefix}.ln2_g"], self[f"{prefix}.ln2_b"])
        return x + self._mlp(y, prefix)

    # -- branch forwards ---------------------------------------------------

    def embed_patches(self, pfs: PatchFeatureSet) -> Tensor:
        """Patch features through the MLP plus the learned positional map."""
        cfg = self.config
        if pfs.features.shape[1] != cfg.feature_width:
            raise ValueError(
                f"feature width {pfs.features.shape[1]} != expected {cfg.feature_width}"
            )
        feats = ad.as_tensor(pfs.features, dtype=self.dtype)
        centers = ad.as_tensor(pfs.centers, dtype=self.dtype)
        hidden = ad.gelu(ad.linear(feats, self["embed.mlp1_w"], self["embed.mlp1_b"]))
        tokens = ad.linear(hidden, self["embed.mlp2_w"], self["embed.mlp2_b"])
        pos = ad.linear(centers, self["embed.pos_w"], self["embed.pos_b"])
        return tokens + pos

    def encode(self, x: Tensor) -> Tensor:
        for i in range(self.config.encoder_blocks):
            x = self._transformer_block(x, f"enc.{i}")
        return x

    def decode_reconstruct(
        self, f_visible: Tensor, mask: MaskSpec, centers: np.ndarray
    ) -> ReconstructionOutput:
        """Decode visible tokens plus repeated mask tokens at masked slots."""
        cfg = self.config
        f_n = len(mask.visible) + len(mask.masked)
        if f_visible.data.shape[0] != len(mask.visible):
            raise ValueError(
                f"visible embedding count {f_visible.data.shape[0]} != "
                f"{len(mask.visible)} visible patches"
            )
        centers_t = ad.as_tensor(np.asarray(centers), dtype=self.dtype)
        pos = ad.linear(centers_t, self["dec.pos_w"], self["dec.pos_b"])  # (f_n, d)
        vis_tok = f_visible + ad.take(pos, mask.visible, axis=0)
        n_masked = len(mask.masked)
        rec_vert_shape = (n_masked, cfg.verts_per_patch, 3)
        rec_feat_shape = (n_masked, cfg.faces_per_patch, FEATURE_DIM)
        mask_tok = ad.take(self["dec.mask_token"], np.zeros(n_masked, dtype=np.int64), axis=0)
        mask_tok = mask_tok + ad.take(pos, mask.masked, axis=0)
        cat = ad.concat([vis_tok, mask_tok], axis=0)
        order = np.concatenate([mask.visible, mask.masked])
        inv = np.empty(f_n, dtype=np.int64)
        inv[order] = np.arange(f_n)
        x = ad.take(cat, inv, axis=0)
        for i in range(cfg.decoder_blocks):
            x = self._transformer_block(x, f"dec.{i}")
        at_masked = ad.take(x, mask.masked, axis=0)
        verts = ad.reshape(
            ad.linear(at_masked, self["dec.vert_w"], self["dec.vert_b"]), rec_vert_shape
        )
        feats = ad.reshape(
            ad.linear(at_masked, self["dec.feat_w"], self["dec.feat_b"]), rec_feat_shape
        )
        return ReconstructionOutput(
            vertices=verts, face_features=feats, masked_indices=mask.masked
        )

    def fuse_text(self, f_e: Tensor, text: TextEmbedding) -> tuple[Tensor, Tensor]:
        """Cross-attend mesh queries to projected text, pool, project.

        Returns (fused output (1, out_dim), attended features (f_n, d)). The
        attended features keep a residual mesh term so a single text token
        cannot wash out mesh content.
        """
        if text is None:
            raise ValueError("a text prompt embedding is required")
        cfg = self.config
        ft = ad.as_tensor(text.vectors, dtype=self.dtype)
        if ft.data.shape[1] != cfg.text_width:
            raise ValueError(
                f"text width {ft.data.shape[1]} != configured {cfg.text_width}"
            )
        f_pj = ad.linear(ft, self["fuse.proj_w"], self["fuse.proj_b"])  # (t, d)
        scores = ad.scale(ad.matmul(f_e, ad.transpose(f_pj)), 1.0 / np.sqrt(cfg.embed_dim))
        attn = ad.softmax(scores, axis=-1)  # (f_n, t)
        f_ca = f_e + ad.matmul(attn, f_pj)
        f_max = ad.max_(f_ca, axis=0, keepdims=True)
        f_mean = ad.mean_(f_ca, axis=0, keepdims=True)
        f_o = ad.linear(
            ad.concat([f_max, f_mean], axis=1), self["fuse.out_w"], self["fuse.out_b"]
        )
        return f_o, f_ca

    def regression_head(self, f_o: Tensor) -> Tensor:
        """Shared FC stack then three single-output heads; returns shape (3,)."""
        h = f_o
        for i in (1, 2, 3):
            h = ad.gelu(ad.linear(h, self[f"reg.fc{i}_w"], self[f"reg.fc{i}_b"]))
        outs = [
            ad.linear(h, self[f"reg.head_{n}_w"], self[f"reg.head_{n}_b"])
            for n in ("t", "d", "h")
        ]
        raw = ad.reshape(ad.concat(outs, axis=1), (3,))
        return ad.add(ad.mul(raw, self["reg.out_scale"]), self["reg.out_mean"])

    def forward_regression(self, pfs: PatchFeatureSet, text: TextEmbedding) -> Tensor:
        x = self.embed_patches(pfs)
        f_e = self.encode(x)
        f_o, _ = self.fuse_text(f_e, text)
        return self.regression_head(f_o)

    def forward_reconstruction(
        self, pfs: PatchFeatureSet, mask: MaskSpec
    ) -> ReconstructionOutput:
        x = self.embed_patches(pfs)
        x_vis = ad.take(x, mask.visible, axis=0)
        f_e = self.encode(x_vis)
        return self.decode_reconstruct(f_e, mask, pfs.centers)

    def predict_params(self, pfs: PatchFeatureSet, text: TextEmbedding) -> AbutmentParams:
        out = self.forward_regression(pfs, text)
        return AbutmentParams.from_array(out.data)
