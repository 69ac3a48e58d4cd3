"""Sigmoid class-contrastive and multiview contrastive losses.

Both losses share the per-pair term ``-log σ(z·(t·s − b))`` where ``s`` is
a dot product between a fused descriptor and a target, ``z = ±1`` marks
positive and negative pairs, and ``t``/``b`` are the shared scale and
offset. The class loss is normalized by the batch size only; the
multiview loss by ``|B|·|U|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import tensor as T


@dataclass
class ContrastiveBatchView:
    fused: object                 # |B|×D Tensor or array, unit rows
    class_targets: np.ndarray     # |B|×D text embeddings y_j
    class_ids: np.ndarray         # |B|
    t: object                     # scalar Tensor or float
    b: object                     # scalar Tensor or float
    unseen: np.ndarray | None = None        # |U|×D single-view targets
    unseen_owner: np.ndarray | None = None  # |U| indices into the batch
    class_mask_enabled: bool = False

    @property
    def has_unseen(self) -> bool:
        return self.unseen is not None and len(self.unseen) > 0


def build_sign_matrix(class_ids, owners=None, class_mask_enabled: bool = False) -> np.ndarray:
    """±1 pair labels between batch rows and target columns.

    Columns are the batch itself when ``owners`` is None, otherwise one
    column per target, owned by batch row ``owners[j]``. A pair is positive
    when the target belongs to the row's instance or, with the class mask,
    to any instance of the same class.
    """
    class_ids = np.asarray(class_ids)
    owners = np.arange(len(class_ids)) if owners is None else np.asarray(owners)
    positive = np.arange(len(class_ids))[:, None] == owners[None, :]
    if class_mask_enabled:
        positive |= class_ids[:, None] == class_ids[owners][None, :]
    return np.where(positive, 1.0, -1.0)


def _scalar(x) -> T.Tensor:
    x = T.as_tensor(x)
    return x if x.shape == () else T.reshape(x, ())


def _pair_loss_sum(fused, targets, z, t, b) -> T.Tensor:
    sims = T.matmul(fused, T.Tensor(np.asarray(targets).T))
    logits = T.sub(T.mul(sims, _scalar(t)), _scalar(b))
    return T.neg(T.sum(T.log_sigmoid(T.mul(logits, z))))


def class_loss(batch: ContrastiveBatchView) -> T.Tensor:
    fused = T.as_tensor(batch.fused)
    n = fused.shape[0]
    if n == 0:
        raise ValueError("class_loss: empty batch")
    z = build_sign_matrix(batch.class_ids, None, batch.class_mask_enabled)
    return T.mul(_pair_loss_sum(fused, batch.class_targets, z, batch.t, batch.b), 1.0 / n)


def multiview_loss(batch: ContrastiveBatchView) -> T.Tensor:
    fused = T.as_tensor(batch.fused)
    if not batch.has_unseen:
        raise ValueError("multiview_loss: no unseen-view targets (|U| = 0)")
    owners = np.asarray(batch.unseen_owner)
    if owners.min() < 0 or owners.max() >= fused.shape[0]:
        raise ValueError("multiview_loss: unseen_owner out of range")
    z = build_sign_matrix(batch.class_ids, owners, batch.class_mask_enabled)
    norm = 1.0 / (fused.shape[0] * len(batch.unseen))
    return T.mul(_pair_loss_sum(fused, batch.unseen, z, batch.t, batch.b), norm)


def total_loss(batch: ContrastiveBatchView):
    """``(L, L_c, L_mv)``; ``L_mv`` is None when the batch carries no unseen views."""
    lc = class_loss(batch)
    if not batch.has_unseen:
        return lc, lc, None
    lmv = multiview_loss(batch)
    return T.add(lc, lmv), lc, lmv
