"""Scikit-learn style estimator wrapping the full pipeline.

`AbutmentRegressor.fit` takes raw (mesh, prompt) samples plus (n, 3) labels,
runs remeshing/patching internally, and trains the dual-branch model; defaults
are desk-scale so the estimator is usable interactively. Hyperparameters
follow sklearn conventions (constructor args mirrored by get_params).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .losses import LossConfig, iou_report
from .meshio import Mesh, load_mesh
from .network import ModelConfig
from .text import TextPrompt
from .training import TrainConfig, TrainSample, make_sample, make_text_encoder, train


def check_prompt(value) -> TextPrompt:
    """Accept a TextPrompt or a (location, system, series) triple."""
    if isinstance(value, TextPrompt):
        return value
    if isinstance(value, (tuple, list)) and len(value) == 3:
        return TextPrompt(*map(str, value))
    raise ValueError(
        f"expected TextPrompt or (location, system, series), got {value!r}"
    )


def check_mesh(value) -> Mesh:
    """Accept a Mesh or a path to a mesh file."""
    if isinstance(value, Mesh):
        return value
    if isinstance(value, (str, bytes)) or hasattr(value, "__fspath__"):
        return load_mesh(value)
    raise ValueError(f"expected Mesh or mesh path, got {type(value).__name__}")


def check_samples(X) -> list[tuple[Mesh, TextPrompt]]:
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("X must be a non-empty sequence of (mesh, prompt) pairs")
    out = []
    for i, item in enumerate(X):
        if not isinstance(item, (tuple, list)) or len(item) != 2:
            raise ValueError(f"X[{i}] must be a (mesh, prompt) pair")
        mesh, prompt = item
        out.append((check_mesh(mesh), check_prompt(prompt)))
    return out


def check_labels(y, n: int) -> np.ndarray:
    arr = check_array(y, ensure_2d=True, dtype=np.float64)
    if arr.shape != (n, 3):
        raise ValueError(
            f"y must be ({n}, 3) [transgingival, diameter, height], got {arr.shape}"
        )
    if not (arr > 0).all():
        raise ValueError("labels must be positive millimetre values")
    return arr


class AbutmentRegressor(BaseEstimator, RegressorMixin):
    """Predicts (transgingival, diameter, height) from scans plus prompts.

    X is a sequence of (mesh, prompt) pairs: mesh is a Mesh or file path,
    prompt a TextPrompt or (location, system, series) triple. y is (n, 3).
    `score` returns the mean interval IoU across the three parameters
    (1.0 is exact agreement), not R^2.
    """

    def __init__(
        self,
        base_faces=64,
        levels=2,
        embed_dim=64,
        encoder_blocks=2,
        decoder_blocks=1,
        heads=4,
        text_width=64,
        mask_ratio=0.5,
        recon_weight=0.1,
        face_feature_weight=1.0,
        huber_delta=1.0,
        paradigm="ssat",
        epochs=50,
        pretrain_epochs=50,
        steps=None,
        batch_size=4,
        lr=5e-3,
        weight_decay=0.0,
        seed=0,
    ):
        self.base_faces = base_faces
        self.levels = levels
        self.embed_dim = embed_dim
        self.encoder_blocks = encoder_blocks
        self.decoder_blocks = decoder_blocks
        self.heads = heads
        self.text_width = text_width
        self.mask_ratio = mask_ratio
        self.recon_weight = recon_weight
        self.face_feature_weight = face_feature_weight
        self.huber_delta = huber_delta
        self.paradigm = paradigm
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        model = ModelConfig(
            embed_dim=self.embed_dim,
            encoder_blocks=self.encoder_blocks,
            decoder_blocks=self.decoder_blocks,
            heads=self.heads,
            text_width=self.text_width,
            base_faces=self.base_faces,
            levels=self.levels,
            mask_ratio=self.mask_ratio,
            loss=LossConfig(
                face_feature_weight=self.face_feature_weight,
                recon_weight=self.recon_weight,
                huber_delta=self.huber_delta,
            ),
        )
        return TrainConfig(
            paradigm=self.paradigm,
            epochs=self.epochs,
            pretrain_epochs=self.pretrain_epochs,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.seed,
            model=model,
        )

    def fit(self, X, y):
        pairs = check_samples(X)
        labels = check_labels(y, len(pairs))
        cfg = self._train_config()
        encoder = make_text_encoder(cfg)
        samples = [
            make_sample(mesh, prompt, label, cfg, encoder=encoder, name=f"fit-{i}")
            for i, ((mesh, prompt), label) in enumerate(zip(pairs, labels))
        ]
        self.model_, self.run_log_ = train(cfg, train_samples=samples)
        self._cfg_ = cfg
        self._encoder_ = encoder
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("AbutmentRegressor is not fitted yet; call fit first")

    def _sample_for(self, mesh: Mesh, prompt: TextPrompt) -> TrainSample:
        return make_sample(mesh, prompt, np.zeros(3), self._cfg_, encoder=self._encoder_)

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        pairs = check_samples(X)
        out = np.empty((len(pairs), 3), dtype=np.float64)
        for i, (mesh, prompt) in enumerate(pairs):
            sample = self._sample_for(mesh, prompt)
            out[i] = self.model_.forward_regression(sample.pfs, sample.text).data
        return out

    def score(self, X, y) -> float:
        """Mean interval IoU over the three parameters, in [0, 1]."""
        self._check_fitted()
        pred = self.predict(X)
        labels = check_labels(y, pred.shape[0])
        report = iou_report(pred, labels)
        return float(
            np.mean([report["transgingival"], report["diameter"], report["height"]])
            / 100.0
        )
