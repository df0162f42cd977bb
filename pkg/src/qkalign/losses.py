"""Training objectives: uncertainty-weighted pose loss, scene cross-entropy,
the query-key alignment auxiliary loss, and their weighted combination.

All losses accept batched tensors and return scalar graph tensors; batch
reduction is the mean. The alignment term is differentiable through the
captured query/key projections, with subgradient 0 where the centroid gap
is exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


@dataclass
class LossBreakdown:
    l_t: float
    l_r: float
    l_pose: float
    l_scene: float
    l_qka_t: float
    l_qka_r: float
    l_aux: float
    l_total: float
    s_t: float
    s_r: float
    lambda_aux: float

    FIELDS = (
        "l_t",
        "l_r",
        "l_pose",
        "l_scene",
        "l_qka_t",
        "l_qka_r",
        "l_aux",
        "l_total",
        "s_t",
        "s_r",
        "lambda_aux",
    )

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def _as_batch(x, width: int) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        t = ad.reshape(t, (1, t.data.shape[0]))
    if t.data.ndim != 2 or t.data.shape[1] != width:
        raise ContractError(f"expected (B, {width}) values, got {t.data.shape}")
    return t


def pose_loss(t, t_hat, r, r_hat, s_t: Tensor, s_r: Tensor):
    """L_t * exp(-s_t) + s_t + L_r * exp(-s_r) + s_r with learnable s terms.

    L_t is the batch-mean euclidean position error; L_r the batch-mean
    distance between the true unit quaternion and the normalized prediction.
    Returns (loss, l_t, l_r) scalar tensors.
    """
    t = _as_batch(t, 3)
    t_hat = _as_batch(t_hat, 3)
    r = _as_batch(r, 4)
    r_hat = _as_batch(r_hat, 4)
    l_t = ad.reduce_mean(ad.vector_norm(ad.sub(t_hat, t)))
    l_r = ad.reduce_mean(ad.vector_norm(ad.sub(ad.normalize(r_hat), r)))
    loss = ad.add(
        ad.add(ad.mul(l_t, ad.exp(ad.neg(s_t))), s_t),
        ad.add(ad.mul(l_r, ad.exp(ad.neg(s_r))), s_r),
    )
    return loss, l_t, l_r


def scene_loss(y, y_hat) -> Tensor:
    """Cross-entropy of the true scene under predicted probabilities.

    ``y`` is one-hot (a contract error otherwise); ``y_hat`` comes from a
    softmax over the scene logits, so entries must be strictly positive.
    Batched inputs reduce by the mean.
    """
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if y_arr.ndim == 1:
        y_arr = y_arr[None]
    rows_ok = np.all(np.isin(y_arr, (0.0, 1.0))) and np.all(y_arr.sum(axis=1) == 1.0)
    if y_arr.ndim != 2 or not rows_ok:
        raise ContractError("scene_loss expects one-hot target rows")
    p = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    if p.data.ndim == 1:
        p = ad.reshape(p, (1, p.data.shape[0]))
    if p.data.shape != y_arr.shape:
        raise ContractError(
            f"scene_loss shapes disagree: target {y_arr.shape}, prediction {p.data.shape}"
        )
    picked = ad.reduce_sum(ad.mul(Tensor(y_arr), ad.log(p)), axis=1)
    return ad.neg(ad.reduce_mean(picked))


def qka_loss(captures) -> Tensor:
    """Mean over layers and heads of the L2 gap between query and key
    centroids, computed on the post-projection Q/K captures of one branch's
    encoder. Token (and batch) axes reduce by the mean.
    """
    captures = list(captures)
    if not captures:
        raise ContractError("qka_loss needs the branch's encoder captures")
    total = None
    for cap in captures:
        if cap.q.data.shape != cap.k.data.shape:
            raise ContractError(
                f"capture Q/K shapes disagree: {cap.q.data.shape} vs {cap.k.data.shape}"
            )
        gap = ad.sub(
            ad.reduce_mean(cap.q, axis=-3), ad.reduce_mean(cap.k, axis=-3)
        )  # centroids over the token axis -> (..., H, head_dim)
        per_head = ad.vector_norm(gap)
        layer_term = ad.reduce_mean(per_head)
        total = layer_term if total is None else ad.add(total, layer_term)
    return ad.scale(total, 1.0 / len(captures))


def total_loss(
    output,
    t,
    r,
    scene_onehot,
    s_t: Tensor,
    s_r: Tensor,
    lambda_aux: float,
    qka_enabled: bool = True,
):
    """Assemble L_pose + L_scene + lambda_aux * (L_QKA_t + L_QKA_r).

    Returns (total graph tensor, LossBreakdown of floats). With the
    auxiliary arm disabled (or no encoder captures to align), the total is
    exactly the pose + scene sum.
    """
    pose_term, l_t, l_r = pose_loss(t, output.t_hat, r, output.r_hat, s_t, s_r)
    probs = ad.softmax_rows(output.scene_logits)
    scene_term = scene_loss(scene_onehot, probs)
    use_qka = qka_enabled and lambda_aux != 0.0 and output.captures_t and output.captures_r
    if use_qka:
        qka_t = qka_loss(output.captures_t)
        qka_r = qka_loss(output.captures_r)
        aux = ad.scale(ad.add(qka_t, qka_r), lambda_aux)
        total = ad.add(ad.add(pose_term, scene_term), aux)
        qka_t_val, qka_r_val, aux_val = qka_t.item(), qka_r.item(), aux.item()
    else:
        total = ad.add(pose_term, scene_term)
        qka_t_val = qka_r_val = aux_val = 0.0
    breakdown = LossBreakdown(
        l_t=l_t.item(),
        l_r=l_r.item(),
        l_pose=pose_term.item(),
        l_scene=scene_term.item(),
        l_qka_t=qka_t_val,
        l_qka_r=qka_r_val,
        l_aux=aux_val,
        l_total=total.item(),
        s_t=s_t.item(),
        s_r=s_r.item(),
        lambda_aux=lambda_aux,
    )
    return total, breakdown
