"""Training losses and the interval-IoU evaluation metric.

Reconstruction: symmetric Chamfer distance on predicted vs true patch-vertex
relative coordinates (unsquared norms; a `squared` flag is available) plus a
per-patch MSE on the 13-dim face features. Regression: smooth-L1 plus MSE,
both averaged over all predicted scalars. Parameter accuracy is scored as the
IoU of unit intervals anchored at the predicted and true values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    abs_,
    as_tensor,
    mean_,
    mul,
    reshape,
    scale,
    sub,
    sum_,
    where_mask,
)


@dataclass
class LossConfig:
    face_feature_weight: float = 1.0  # weight of the face-feature MSE in the recon loss
    recon_weight: float = 0.1  # weight of the recon loss in the total
    huber_delta: float = 1.0  # smooth-L1 quadratic/linear switch point

    def __post_init__(self):
        if self.face_feature_weight < 0 or self.recon_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


@dataclass
class LossBreakdown:
    l_cd: float
    l_mse_face: float
    l_re: float
    l_l1: float
    l_mse_reg: float
    l_rg: float
    l_total: float


def chamfer_l2(pred, target, squared: bool = False) -> Tensor:
    """Symmetric mean nearest-neighbour distance between two point sets.

    Accepts (n, 3) sets or stacked (..., n, 3) batches; batched input yields
    one value per batch entry. Nearest-neighbour ties route the gradient to
    the first match in scan order; coincident points contribute zero gradient.
    """
    p = as_tensor(pred)
    q = as_tensor(target, dtype=p.dtype)
    if p.data.shape[-1] != q.data.shape[-1]:
        raise ValueError(f"point dims differ: {p.data.shape} vs {q.data.shape}")
    if p.data.ndim < 2 or q.data.ndim < 2:
        raise ValueError("point sets must be (..., n, k) arrays")
    n = p.data.shape[-2]
    m = q.data.shape[-2]
    if n == 0 or m == 0:
        raise ValueError("chamfer_l2 requires non-empty point sets")

    diff = p.data[..., :, None, :] - q.data[..., None, :, :]  # (..., n, m, k)
    d = np.einsum("...k,...k->...", diff, diff)
    if not squared:
        d = np.sqrt(d)
    idx_pq = np.argmin(d, axis=-1)  # nearest q for each p, (..., n)
    idx_qp = np.argmin(d, axis=-2)  # nearest p for each q, (..., m)
    min_pq = np.take_along_axis(d, idx_pq[..., None], axis=-1)[..., 0]
    min_qp = np.take_along_axis(d, idx_qp[..., None, :], axis=-2)[..., 0, :]
    out = min_pq.mean(axis=-1, dtype=np.float64) + min_qp.mean(axis=-1, dtype=np.float64)
    out = np.asarray(out, dtype=p.data.dtype)

    def bwd(g):
        g = np.asarray(g, dtype=np.float64)
        nn_q = np.take_along_axis(q.data, idx_pq[..., None], axis=-2)  # (..., n, k)
        nn_p = np.take_along_axis(p.data, idx_qp[..., None], axis=-2)  # (..., m, k)
        vec_p = p.data - nn_q
        vec_q = q.data - nn_p
        if squared:
            u = 2.0 * vec_p
            w = 2.0 * vec_q
        else:
            norm_p = np.linalg.norm(vec_p, axis=-1, keepdims=True)
            norm_q = np.linalg.norm(vec_q, axis=-1, keepdims=True)
            u = np.divide(vec_p, norm_p, out=np.zeros_like(vec_p), where=norm_p > 0)
            w = np.divide(vec_q, norm_q, out=np.zeros_like(vec_q), where=norm_q > 0)
        gp_direct = g[..., None, None] * u / n  # d(term1)/dp
        gq_direct = g[..., None, None] * w / m  # d(term2)/dq

        batch_shape = idx_pq.shape[:-1]
        nbatch = int(np.prod(batch_shape)) if batch_shape else 1
        # Nearest neighbours also move: scatter the negated unit vectors.
        gq_total = gq_direct.copy()
        off_m = (np.arange(nbatch) * m).reshape(batch_shape + (1,)) if batch_shape else 0
        np.add.at(
            gq_total.reshape(-1, gq_total.shape[-1]),
            (idx_pq + off_m).reshape(-1),
            -gp_direct.reshape(-1, gp_direct.shape[-1]),
        )
        gp_total = gp_direct.copy()
        off_n = (np.arange(nbatch) * n).reshape(batch_shape + (1,)) if batch_shape else 0
        np.add.at(
            gp_total.reshape(-1, gp_total.shape[-1]),
            (idx_qp + off_n).reshape(-1),
            -gq_direct.reshape(-1, gq_direct.shape[-1]),
        )
        return gp_total.astype(p.data.dtype), gq_total.astype(q.data.dtype)

    return Tensor(out, _parents=(p, q), _bwd=bwd)


def face_feature_mse(pred, target) -> Tensor:
    """Mean over patches of the squared L2 norm of the feature difference.

    Leading axis indexes masked patches; the remaining axes are flattened
    into the per-patch feature vector.
    """
    p = as_tensor(pred)
    t = as_tensor(target, dtype=p.dtype)
    if p.data.shape != t.data.shape:
        raise ValueError(f"shape mismatch: {p.data.shape} vs {t.data.shape}")
    d = sub(p, t)
    per_patch = sum_(reshape(mul(d, d), (p.data.shape[0], -1)), axis=1)
    return mean_(per_patch)


def smooth_l1(pred, target, delta: float = 1.0) -> Tensor:
    """Elementwise smooth L1: quadratic inside `delta`, linear outside."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    p = as_tensor(pred)
    t = as_tensor(target, dtype=p.dtype)
    d = sub(p, t)
    a = abs_(d)
    quad = scale(mul(d, d), 0.5 / delta)
    lin = sub(a, as_tensor(np.full_like(a.data, 0.5 * delta)))
    return where_mask(a.data < delta, quad, lin)


def regression_loss(pred, target, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(smooth-L1 mean, MSE mean, their sum) over all predicted scalars."""
    p = as_tensor(pred)
    t = as_tensor(target, dtype=p.dtype)
    if p.data.shape != t.data.shape:
        raise ValueError(
            f"prediction/target shape mismatch: {p.data.shape} vs {t.data.shape}"
        )
    l_l1 = mean_(smooth_l1(p, t, cfg.huber_delta))
    d = sub(p, t)
    l_mse = mean_(mul(d, d))
    return l_l1, l_mse, l_l1 + l_mse


def branch_losses(
    l_cd, l_mse_face, l_l1, l_mse_reg, cfg: LossConfig
) -> tuple[Tensor, Tensor, Tensor, LossBreakdown]:
    """(l_re, l_rg, l_total) tensors plus a float snapshot of every term."""
    l_cd = as_tensor(l_cd)
    l_mse_face = as_tensor(l_mse_face)
    l_l1 = as_tensor(l_l1)
    l_mse_reg = as_tensor(l_mse_reg)
    l_re = l_cd + scale(l_mse_face, cfg.face_feature_weight)
    l_rg = l_l1 + l_mse_reg
    l_tot = scale(l_re, cfg.recon_weight) + l_rg
    breakdown = LossBreakdown(
        l_cd=l_cd.item(),
        l_mse_face=l_mse_face.item(),
        l_re=l_re.item(),
        l_l1=l_l1.item(),
        l_mse_reg=l_mse_reg.item(),
        l_rg=l_rg.item(),
        l_total=l_tot.item(),
    )
    return l_re, l_rg, l_tot, breakdown


def total_loss(
    l_cd, l_mse_face, l_l1, l_mse_reg, cfg: LossConfig
) -> tuple[Tensor, LossBreakdown]:
    """Combine branch losses; returns the differentiable total plus a snapshot."""
    _, _, l_tot, breakdown = branch_losses(l_cd, l_mse_face, l_l1, l_mse_reg, cfg)
    return l_tot, breakdown


# ---------------------------------------------------------------------------
# Evaluation metric


def interval_iou(pv, gt):
    """IoU of the unit intervals [pv, pv+1] and [gt, gt+1].

    Closed form: (1 - |pv - gt|) / (1 + |pv - gt|) while the intervals
    overlap, otherwise 0. Vectorizes over array inputs.
    """
    d = np.abs(np.asarray(pv, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
    out = np.where(d < 1.0, (1.0 - d) / (1.0 + d), 0.0)
    return float(out) if out.ndim == 0 else out


PARAM_NAMES = ("transgingival", "diameter", "height")


def iou_report(pred: np.ndarray, truth: np.ndarray) -> dict:
    """Per-parameter mean interval IoU x 100 over a batch of (n, 3) values."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(
            f"expected matching (n, 3) arrays, got {pred.shape} and {truth.shape}"
        )
    means = {
        name: float(np.mean(interval_iou(pred[:, j], truth[:, j])) * 100.0)
        for j, name in enumerate(PARAM_NAMES)
    }
    means["count"] = pred.shape[0]
    return means


def format_iou_table(rows: list[dict], key: str = "") -> str:
    """Human-readable table for one or more iou_report dicts."""
    header = ([key] if key else []) + [n.capitalize() for n in PARAM_NAMES] + ["N"]
    lines = ["  ".join(f"{h:>14}" for h in header)]
    for row in rows:
        cells = [str(row[key])] if key else []
        cells += [f"{row[n]:.2f}" for n in PARAM_NAMES] + [str(row["count"])]
        lines.append("  ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)
