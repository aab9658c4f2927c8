"""Training paradigms, evaluation, and single-case prediction.

Two schedules over the same dual-branch model:

* joint ("ssat"): every step forwards each batch sample twice through the
  shared encoder (masked for reconstruction, complete with the text prompt
  for regression) and optimizes recon_weight * L_re + L_rg;
* two-stage ("ssl_ft"): a reconstruction-only pretraining phase, then a
  fresh run that loads the pretrained weights and optimizes L_rg only.

Prediction runs preprocessing plus the regression branch only; the
reconstruction decoder is never executed and its parameters may be absent
from the checkpoint.
"""

from __future__ import annotations

import configparser
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import derive_seed, load_checkpoint, save_checkpoint
from .losses import (
    LossBreakdown,
    LossConfig,
    branch_losses,
    chamfer_l2,
    face_feature_mse,
    iou_report,
    regression_loss,
)
from .meshio import Mesh, load_mesh
from .network import AbutmentParams, DualBranchNet, ModelConfig
from .optim import AdamW, clip_global_norm, cosine_lr
from .patches import (
    PatchFeatureSet,
    build_patch_features,
    mask_patches,
    read_sample_cache,
    write_sample_cache,
)
from .remesh import RemeshConfig, remesh_pipeline
from .synthetic import DatasetManifest
from .text import FileTextEncoder, HashTextEncoder, TextEmbedding, TextPrompt


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    paradigm: str = "ssat"  # "ssat" | "ssl_ft"
    epochs: int = 10
    pretrain_epochs: int = 300  # ssl_ft phase 1 only
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    steps: int | None = None  # optional hard cap on optimizer steps
    pretrain_steps: int | None = None
    eval_every: int = 0  # epochs between test-split evals (0 = off)
    recon_eval_count: int = 12  # samples in the fixed-mask reconstruction probe
    log_wallclock: bool = True
    dtype: str = "float64"
    text_mode: str = "sentence"
    text_encoder_kind: str = "hash"
    text_encoder_seed: int = 0
    text_embeddings_path: str = ""
    manifest: str = ""
    cache_dir: str = ""
    checkpoint: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.paradigm not in ("ssat", "ssl_ft"):
            raise ValueError(f"unknown paradigm '{self.paradigm}'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.paradigm == "ssl_ft" and self.pretrain_epochs < 1:
            raise ValueError("ssl_ft needs a positive pretrain_epochs")
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)

    @property
    def loss(self) -> LossConfig:
        return self.model.loss

    def to_ini_string(self) -> str:
        cp = configparser.ConfigParser()
        train = {
            k: v
            for k, v in asdict(self).items()
            if k != "model" and v is not None
        }
        cp["train"] = {k: str(v) for k, v in train.items()}
        model = self.model.to_dict()
        loss = model.pop("loss")
        cp["model"] = {k: str(v) for k, v in model.items() if v is not None}
        cp["loss"] = {k: str(v) for k, v in loss.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, path) -> "TrainConfig":
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise TrainingError(f"config file not found: {path}")
        kwargs: dict = {}
        if cp.has_section("train"):
            kwargs.update(_coerce_section(cp["train"], cls))
        model_kwargs = _coerce_section(cp["model"], ModelConfig) if cp.has_section("model") else {}
        if cp.has_section("loss"):
            model_kwargs["loss"] = LossConfig(**_coerce_section(cp["loss"], LossConfig))
        kwargs["model"] = ModelConfig(**model_kwargs)
        return cls(**kwargs)


def _coerce_section(section, cls) -> dict:
    out = {}
    by_name = {f.name: f for f in fields(cls)}
    for key, raw in section.items():
        if key not in by_name or key in ("model", "loss"):
            continue
        ann = str(by_name[key].type)
        if raw == "None":
            out[key] = None
        elif "bool" in ann:
            out[key] = raw.lower() in ("1", "true", "yes")
        elif "int" in ann:
            out[key] = int(raw)
        elif "float" in ann:
            out[key] = float(raw)
        else:
            out[key] = raw
    return out


@dataclass
class TrainSample:
    pfs: PatchFeatureSet
    label: np.ndarray  # (3,)
    prompt: TextPrompt
    text: TextEmbedding
    name: str = ""


@dataclass
class RunLog:
    steps: list[LossBreakdown] = field(default_factory=list)
    epoch_eval: list[dict] = field(default_factory=list)
    wallclock: dict = field(default_factory=dict)
    checkpoint_path: str = ""
    final_eval: dict | None = None

    def loss_series(self, attr: str = "l_total") -> np.ndarray:
        return np.array([getattr(b, attr) for b in self.steps])


def make_text_encoder(cfg: TrainConfig):
    if cfg.text_encoder_kind == "hash":
        return HashTextEncoder(width=cfg.model.text_width, seed=cfg.text_encoder_seed)
    if cfg.text_encoder_kind == "file":
        if not cfg.text_embeddings_path:
            raise TrainingError("text_embeddings_path required for the file encoder")
        return FileTextEncoder(cfg.text_embeddings_path)
    raise TrainingError(f"unknown text encoder kind '{cfg.text_encoder_kind}'")


def preprocess_mesh(mesh: Mesh, model_cfg: ModelConfig) -> PatchFeatureSet:
    rm = remesh_pipeline(
        mesh,
        RemeshConfig(
            base_faces=model_cfg.base_faces, subdivision_levels=model_cfg.levels
        ),
    )
    return build_patch_features(rm)


def make_sample(
    mesh: Mesh, prompt: TextPrompt, label, cfg: TrainConfig, encoder=None, name: str = ""
) -> TrainSample:
    encoder = encoder or make_text_encoder(cfg)
    pfs = preprocess_mesh(mesh, cfg.model)
    return TrainSample(
        pfs=pfs,
        label=np.asarray(label, dtype=np.float64).reshape(3),
        prompt=prompt,
        text=encoder.encode(prompt, mode=cfg.text_mode),
        name=name,
    )


def load_samples(
    manifest: DatasetManifest | str | Path,
    cfg: TrainConfig,
    base_dir=None,
    cache_dir=None,
    splits=("train", "test"),
) -> dict[str, list[TrainSample]]:
    """Materialize manifest records into TrainSamples, caching patch features."""
    if not isinstance(manifest, DatasetManifest):
        path = Path(manifest)
        base_dir = base_dir if base_dir is not None else path.parent
        manifest = DatasetManifest.load(path)
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    cache_dir = Path(cache_dir) if cache_dir else None
    if cache_dir:
        cache_dir.mkdir(parents=True, exist_ok=True)
    encoder = make_text_encoder(cfg)
    out: dict[str, list[TrainSample]] = {tag: [] for tag in splits}
    for rec in manifest.records:
        if rec["split"] not in out:
            continue
        mesh_rel = rec.get("mesh")
        if not mesh_rel:
            raise TrainingError(
                "manifest record has no mesh path; rebuild the dataset with --out"
            )
        prompt = TextPrompt(rec["location"], rec["system"], rec["series"])
        label = np.array(
            [rec["transgingival"], rec["diameter"], rec["height"]], dtype=np.float64
        )
        pfs = None
        cache_path = None
        if cache_dir:
            stem = Path(mesh_rel).stem
            cache_path = cache_dir / (
                f"{stem}__f{cfg.model.base_faces}k{cfg.model.levels}.bin"
            )
            if cache_path.exists():
                pfs = read_sample_cache(cache_path)
        if pfs is None:
            try:
                mesh = load_mesh(base_dir / mesh_rel)
            except Exception as exc:
                raise TrainingError(f"sample '{mesh_rel}': {exc}") from exc
            pfs = preprocess_mesh(mesh, cfg.model)
            if cache_path is not None:
                write_sample_cache(pfs, cache_path)
        out[rec["split"]].append(
            TrainSample(
                pfs=pfs,
                label=label,
                prompt=prompt,
                text=encoder.encode(prompt, mode=cfg.text_mode),
                name=str(mesh_rel),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Core loops


def _np_dtype(cfg: TrainConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def _init_output_stats(model: DualBranchNet, samples: list[TrainSample]):
    labels = np.stack([s.label for s in samples])
    mean = labels.mean(axis=0)
    scale = np.maximum(labels.std(axis=0), 0.5)
    model["reg.out_mean"].data = mean.astype(model.dtype)
    model["reg.out_scale"].data = scale.astype(model.dtype)


def _recon_probe(model: DualBranchNet, samples, cfg: TrainConfig) -> float:
    """Mean masked-patch vertex Chamfer on fixed probe masks.

    The probe masks never change between epochs, so the series measures model
    improvement without the noise of per-epoch mask resampling.
    """
    vals = []
    for i, s in enumerate(samples[: cfg.recon_eval_count]):
        mask = mask_patches(
            s.pfs, cfg.model.mask_ratio, derive_seed(cfg.seed, "probe", i)
        )
        if mask.masked_count == 0:
            continue
        rec = model.forward_reconstruction(s.pfs, mask)
        vals.append(
            ad.mean_(chamfer_l2(rec.vertices, s.pfs.vertex_rel[mask.masked])).item()
        )
    return float(np.mean(vals)) if vals else 0.0


def _batch_losses(model, batch, masks, cfg: TrainConfig, mode: str):
    zero = ad.as_tensor(np.zeros((), dtype=_np_dtype(cfg)))
    l_cd, l_face = zero, zero
    preds = []
    cd_parts, face_parts = [], []
    for sample, mask in zip(batch, masks):
        x = model.embed_patches(sample.pfs)
        if mode in ("joint", "recon") and mask.masked_count > 0:
            x_vis = ad.take(x, mask.visible, axis=0)
            f_vis = model.encode(x_vis)
            rec = model.decode_reconstruct(f_vis, mask, sample.pfs.centers)
            gt_rel = sample.pfs.vertex_rel[mask.masked]
            gt_feat = sample.pfs.per_face_features[mask.masked]
            cd_parts.append(ad.mean_(chamfer_l2(rec.vertices, gt_rel)))
            face_parts.append(face_feature_mse(rec.face_features, gt_feat))
        if mode in ("joint", "reg"):
            f_e = model.encode(x)
            f_o, _ = model.fuse_text(f_e, sample.text)
            preds.append(ad.reshape(model.regression_head(f_o), (1, 3)))
    if cd_parts:
        l_cd = ad.scale(sum(cd_parts[1:], cd_parts[0]), 1.0 / len(cd_parts))
        l_face = ad.scale(sum(face_parts[1:], face_parts[0]), 1.0 / len(face_parts))
    if preds:
        pred_batch = ad.concat(preds, axis=0) if len(preds) > 1 else preds[0]
        labels = np.stack([s.label for s in batch]).astype(_np_dtype(cfg))
        l_l1, l_mse, _ = regression_loss(pred_batch, labels, cfg.loss)
    else:
        l_l1 = l_mse = zero
    return branch_losses(l_cd, l_face, l_l1, l_mse, cfg.loss)


def _run_phase(
    model: DualBranchNet,
    samples: list[TrainSample],
    cfg: TrainConfig,
    mode: str,
    epochs: int,
    max_steps: int | None,
    log: RunLog,
    eval_samples: list[TrainSample] | None = None,
    phase: str = "train",
):
    if not samples:
        raise TrainingError("no training samples")
    opt = AdamW(
        model.trainable_parameters(),
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    n = len(samples)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = (
        max_steps if max_steps is not None else epochs * batches_per_epoch
    )
    start = time.perf_counter()
    step = 0
    epoch = 0
    while step < total_steps:
        order = np.random.default_rng(
            derive_seed(cfg.seed, "order", phase, epoch)
        ).permutation(n)
        for b0 in range(0, n, cfg.batch_size):
            if step >= total_steps:
                break
            idx = order[b0 : b0 + cfg.batch_size]
            batch = [samples[i] for i in idx]
            masks = [
                mask_patches(
                    samples[i].pfs,
                    cfg.model.mask_ratio,
                    derive_seed(cfg.seed, "mask", epoch, int(i)),
                )
                for i in idx
            ]
            l_re, l_rg, l_total, breakdown = _batch_losses(model, batch, masks, cfg, mode)
            if not np.isfinite(breakdown.l_total):
                raise TrainingError(
                    f"non-finite loss at {phase} step {step}: {breakdown}"
                )
            objective = {"joint": l_total, "recon": l_re, "reg": l_rg}[mode]
            opt.zero_grad()
            objective.backward()
            clip_global_norm(opt.params, cfg.grad_clip)
            opt.step(lr=cosine_lr(step, total_steps, cfg.lr))
            log.steps.append(breakdown)
            step += 1
        epoch += 1
        if cfg.eval_every and epoch % cfg.eval_every == 0:
            if mode == "recon":
                log.epoch_eval.append(
                    {
                        "phase": phase,
                        "epoch": epoch,
                        "recon_chamfer": _recon_probe(model, samples, cfg),
                    }
                )
            elif eval_samples:
                row = evaluate_model(model, eval_samples)
                row["epoch"] = epoch
                row["phase"] = phase
                log.epoch_eval.append(row)
    if cfg.log_wallclock:
        log.wallclock[phase] = time.perf_counter() - start


def _finalize(model: DualBranchNet, cfg: TrainConfig, log: RunLog):
    log.wallclock["total"] = sum(
        v for k, v in log.wallclock.items() if k != "total"
    )
    if cfg.checkpoint:
        save_model(model, cfg.checkpoint, cfg)
        log.checkpoint_path = str(cfg.checkpoint)


def train_ssat(
    cfg: TrainConfig,
    train_samples: list[TrainSample] | None = None,
    eval_samples: list[TrainSample] | None = None,
) -> tuple[DualBranchNet, RunLog]:
    """Joint training of both branches on the shared encoder."""
    if train_samples is None:
        data = load_samples(cfg.manifest, cfg, cache_dir=cfg.cache_dir or None)
        train_samples, eval_samples = data["train"], data["test"]
    model = DualBranchNet(cfg.model, dtype=_np_dtype(cfg), seed=cfg.seed)
    _init_output_stats(model, train_samples)
    log = RunLog()
    _run_phase(
        model,
        train_samples,
        cfg,
        "joint",
        cfg.epochs,
        cfg.steps,
        log,
        eval_samples,
        phase="ssat",
    )
    if eval_samples:
        log.final_eval = evaluate_model(model, eval_samples)
    _finalize(model, cfg, log)
    return model, log


def train_ssl_ft(
    cfg: TrainConfig,
    train_samples: list[TrainSample] | None = None,
    eval_samples: list[TrainSample] | None = None,
) -> tuple[DualBranchNet, RunLog]:
    """Reconstruction pretraining, then regression-only fine-tuning."""
    if train_samples is None:
        data = load_samples(cfg.manifest, cfg, cache_dir=cfg.cache_dir or None)
        train_samples, eval_samples = data["train"], data["test"]
    log = RunLog()
    pre_model = DualBranchNet(cfg.model, dtype=_np_dtype(cfg), seed=cfg.seed)
    _run_phase(
        pre_model,
        train_samples,
        cfg,
        "recon",
        cfg.pretrain_epochs,
        cfg.pretrain_steps,
        log,
        phase="pretrain",
    )
    pretrained = pre_model.state_dict()
    model = DualBranchNet(cfg.model, dtype=_np_dtype(cfg), seed=cfg.seed)
    model.load_state(pretrained)
    _init_output_stats(model, train_samples)
    _run_phase(
        model,
        train_samples,
        cfg,
        "reg",
        cfg.epochs,
        cfg.steps,
        log,
        eval_samples,
        phase="finetune",
    )
    if eval_samples:
        log.final_eval = evaluate_model(model, eval_samples)
    _finalize(model, cfg, log)
    return model, log


def train(cfg: TrainConfig, **kwargs) -> tuple[DualBranchNet, RunLog]:
    fn = train_ssat if cfg.paradigm == "ssat" else train_ssl_ft
    return fn(cfg, **kwargs)


# ---------------------------------------------------------------------------
# Evaluation and prediction


def evaluate_model(model: DualBranchNet, samples: list[TrainSample]) -> dict:
    preds = np.stack(
        [model.forward_regression(s.pfs, s.text).data for s in samples]
    )
    truths = np.stack([s.label for s in samples])
    return iou_report(preds, truths)


def save_model(model: DualBranchNet, path, cfg: TrainConfig | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.state_dict(), path)
    sidecar = {
        "model": model.config.to_dict(),
        "dtype": str(np.dtype(model.dtype)),
        "text_encoder": {
            "kind": cfg.text_encoder_kind if cfg else "hash",
            "seed": cfg.text_encoder_seed if cfg else 0,
            "mode": cfg.text_mode if cfg else "sentence",
            "embeddings_path": cfg.text_embeddings_path if cfg else "",
        },
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_model(path) -> tuple[DualBranchNet, dict]:
    """Rebuild a model from a checkpoint + sidecar; decoder weights optional."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"checkpoint sidecar not found: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    model_cfg = ModelConfig.from_dict(sidecar["model"])
    dtype = np.dtype(sidecar.get("dtype", "float64"))
    model = DualBranchNet(model_cfg, dtype=dtype)
    arrays = load_checkpoint(path)
    model.load_state(arrays, strict=False)
    return model, sidecar


def _sidecar_encoder(sidecar: dict):
    info = sidecar.get("text_encoder", {})
    if info.get("kind") == "file" and info.get("embeddings_path"):
        return FileTextEncoder(info["embeddings_path"]), info.get("mode", "sentence")
    return (
        HashTextEncoder(
            width=sidecar["model"]["text_width"], seed=info.get("seed", 0)
        ),
        info.get("mode", "sentence"),
    )


def evaluate_checkpoint(checkpoint, manifest_path, split: str = "test", cache_dir=None) -> dict:
    model, sidecar = load_model(checkpoint)
    cfg = TrainConfig(model=model.config)
    data = load_samples(manifest_path, cfg, cache_dir=cache_dir, splits=(split,))
    samples = data[split]
    if not samples:
        raise TrainingError(f"manifest has no '{split}' samples")
    return evaluate_model(model, samples)


def predict(
    checkpoint, mesh_path, location: str, system: str, series: str
) -> AbutmentParams:
    """Preprocess one scan and run the regression branch only."""
    model, sidecar = load_model(checkpoint)
    mesh = load_mesh(mesh_path)
    pfs = preprocess_mesh(mesh, model.config)
    encoder, mode = _sidecar_encoder(sidecar)
    text = encoder.encode(TextPrompt(location, system, series), mode=mode)
    return model.predict_params(pfs, text)


# ---------------------------------------------------------------------------
# Ablation sweeps


def run_fraction_sweep(
    cfg: TrainConfig,
    fractions,
    train_samples: list[TrainSample],
    eval_samples: list[TrainSample],
) -> list[dict]:
    """Retrain on nested subsets of the training data; one IoU row each."""
    rows = []
    rng = np.random.default_rng(derive_seed(cfg.seed, "fraction-sweep"))
    order = rng.permutation(len(train_samples))
    for frac in fractions:
        k = max(1, int(round(frac * len(train_samples))))
        subset = [train_samples[i] for i in order[:k]]
        _, log = train_ssat(cfg, subset, eval_samples)
        row = dict(log.final_eval)
        row["fraction"] = frac
        row["train_count"] = k
        rows.append(row)
    return rows


def run_mask_sweep(
    cfg: TrainConfig,
    ratios,
    train_samples: list[TrainSample],
    eval_samples: list[TrainSample],
) -> list[dict]:
    """Retrain at several masking ratios; one IoU row each."""
    import copy

    rows = []
    for ratio in ratios:
        sub_cfg = copy.deepcopy(cfg)
        sub_cfg.model.mask_ratio = float(ratio)
        _, log = train_ssat(sub_cfg, train_samples, eval_samples)
        row = dict(log.final_eval)
        row["mask_ratio"] = float(ratio)
        rows.append(row)
    return rows
