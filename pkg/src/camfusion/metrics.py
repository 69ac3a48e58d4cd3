"""Semantic-segmentation and instance-classification metrics."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import _kernels
from .numerics.tensor import sigmoid

MAP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


@dataclass
class GroundTruthInstance:
    instance_id: int
    class_id: int
    point_ids: np.ndarray

    def __post_init__(self):
        self.point_ids = np.unique(np.asarray(self.point_ids, dtype=np.int64))
        if self.point_ids.size == 0:
            raise ValueError(f"ground-truth instance {self.instance_id} has no points")


@dataclass
class Prediction:
    point_ids: np.ndarray
    class_id: int
    confidence: float
    instance_id: int = -1

    def __post_init__(self):
        self.point_ids = np.unique(np.asarray(self.point_ids, dtype=np.int64))
        if not np.isfinite(self.confidence):
            raise ValueError("prediction confidence must be finite")


# ---------------------------------------------------------------------------
# classification


def classify(F, vocab_embeddings, class_ids, t: float | None = 1.0, b: float = 0.0):
    """Rank classes by ``sigmoid(t·F·y_c + b)``; ``t=None`` ranks by raw cosine.

    Returns ``(class_ids, confidences)`` sorted by descending confidence,
    ties by ascending class id.
    """
    Y = np.asarray(vocab_embeddings, dtype=np.float64)
    ids = np.asarray(class_ids)
    if Y.shape[0] == 0:
        raise ValueError("empty vocabulary")
    s = Y @ np.asarray(F, dtype=np.float64)
    conf = s if t is None else sigmoid(t * s + b)
    order = np.lexsort((ids, -conf))
    return ids[order], conf[order]


def confidence_matrix(fused, vocab_embeddings, t: float | None = 1.0, b: float = 0.0):
    Y = np.asarray(vocab_embeddings, dtype=np.float64)
    F = np.asarray(fused, dtype=np.float64).reshape(-1, Y.shape[1])
    # one mat-vec per row, the same product classify() takes, so the two agree bitwise
    s = np.stack([Y @ f for f in F]) if len(F) else np.zeros((0, Y.shape[0]))
    return s if t is None else sigmoid(t * s + b)


def top1_predictions(instances, fused, vocab_embeddings, class_ids, t=1.0, b=0.0,
                     point_sets=None) -> list:
    """One prediction per instance: argmax class (lowest id on ties)."""
    conf = confidence_matrix(fused, vocab_embeddings, t, b)
    ids = np.asarray(class_ids)
    preds = []
    for k, inst in enumerate(instances):
        row = conf[k]
        best = np.flatnonzero(row == row.max())
        j = best[np.argmin(ids[best])]
        pts = point_sets[k] if point_sets is not None else ()
        preds.append(Prediction(pts, int(ids[j]), float(row[j]), inst.instance_id))
    return preds


def topk_predictions(instances, fused, vocab_embeddings, class_ids, t=1.0, b=0.0,
                     k: int = 600, point_sets=None) -> list:
    """The ``k`` globally most confident (instance, class) pairs."""
    conf = confidence_matrix(fused, vocab_embeddings, t, b)
    ids = np.asarray(class_ids)
    n_inst, n_cls = conf.shape
    inst_idx = np.repeat(np.arange(n_inst), n_cls)
    cls_idx = np.tile(np.arange(n_cls), n_inst)
    flat = conf.ravel()
    order = np.lexsort((ids[cls_idx], inst_idx, -flat))[:k]
    preds = []
    for o in order:
        i = inst_idx[o]
        pts = point_sets[i] if point_sets is not None else ()
        preds.append(Prediction(pts, int(ids[cls_idx[o]]), float(flat[o]),
                                instances[i].instance_id))
    return preds


# ---------------------------------------------------------------------------
# semantic segmentation


def semantic_metrics(gt_labels, pred_labels, class_ids=None) -> dict:
    """Per-class IoU/Acc, their means over GT-present classes, and GT-point-weighted means."""
    gt = np.asarray(gt_labels, dtype=np.int64).ravel()
    pred = np.asarray(pred_labels, dtype=np.int64).ravel()
    if gt.size == 0:
        raise ValueError("no ground-truth points")
    if gt.shape != pred.shape:
        raise ValueError("gt and pred must label the same points")
    universe = np.unique(np.concatenate([gt, pred] + ([np.asarray(class_ids)] if class_ids is not None else [])))
    gi = np.searchsorted(universe, gt)
    pi = np.searchsorted(universe, pred)
    K = universe.size
    hist = np.bincount(gi * K + pi, minlength=K * K).reshape(K, K)
    tp = np.diag(hist).astype(np.float64)
    gt_count = hist.sum(axis=1).astype(np.float64)
    pred_count = hist.sum(axis=0).astype(np.float64)
    present = gt_count > 0
    iou = tp[present] / (gt_count[present] + pred_count[present] - tp[present])
    acc = tp[present] / gt_count[present]
    share = gt_count[present] / gt_count[present].sum()
    present_ids = universe[present]
    return {
        "iou": {int(c): float(v) for c, v in zip(present_ids, iou)},
        "acc": {int(c): float(v) for c, v in zip(present_ids, acc)},
        "mIoU": float(iou.mean()),
        "mAcc": float(acc.mean()),
        "f-IoU": float((share * iou).sum()),
        "f-Acc": float((share * acc).sum()),
    }


# ---------------------------------------------------------------------------
# instance classification


def make_tertiles(class_freqs: dict) -> dict:
    """class_id -> 'head' | 'common' | 'tail', by descending frequency (ties: lower id first)."""
    if len(class_freqs) < 3:
        raise ValueError("tertiles need at least 3 classes")
    order = sorted(class_freqs, key=lambda c: (-class_freqs[c], c))
    n = len(order)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    split = {}
    start = 0
    for name, size in zip(("head", "common", "tail"), sizes):
        for c in order[start:start + size]:
            split[c] = name
        start += size
    return split


def _pack(sets) -> tuple:
    lengths = np.array([len(s) for s in sets], dtype=np.int64)
    ptr = np.zeros(len(sets) + 1, dtype=np.int64)
    np.cumsum(lengths, out=ptr[1:])
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in sets]) if sets else np.zeros(0, np.int64)
    return flat, ptr


def iou_matrix(pred_sets, gt_sets) -> np.ndarray:
    if not pred_sets or not gt_sets:
        return np.zeros((len(pred_sets), len(gt_sets)))
    pf, pp = _pack(pred_sets)
    gf, gp = _pack(gt_sets)
    inter = _kernels.intersection_counts(pf, pp, gf, gp).astype(np.float64)
    sp = np.diff(pp).astype(np.float64)
    sg = np.diff(gp).astype(np.float64)
    union = sp[:, None] + sg[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def average_precision(tp_flags, num_gt: int) -> float:
    """Area under the raw precision-recall step curve: mean precision at each true positive."""
    if num_gt == 0:
        return float("nan")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if tp_flags.size == 0:
        return 0.0
    # exact rational sum, rounded once: hand-computed cases come out exactly
    ranks = np.flatnonzero(tp_flags) + 1
    return float(sum(Fraction(k + 1, int(r)) for k, r in enumerate(ranks)) / num_gt)


def _match_class(preds, gts, ious, thresholds) -> dict:
    """Greedy confidence-ordered matching for one class -> {τ: AP}."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    gt_ids = np.array([g.instance_id for g in gts])
    out = {}
    for tau in thresholds:
        matched = np.zeros(len(gts), dtype=bool)
        flags = []
        for i in order:
            if len(gts) == 0:
                flags.append(False)
                continue
            cand = np.where(matched, -1.0, ious[i])
            best = cand.max()
            if best < tau or best < 0:
                flags.append(False)
                continue
            tied = np.flatnonzero(cand == best)
            j = tied[np.argmin(gt_ids[tied])]
            matched[j] = True
            flags.append(True)
        out[tau] = average_precision(flags, len(gts))
    return out


def per_class_ap(preds, gts, thresholds, class_ids=None) -> dict:
    """{class_id: {τ: AP}} for classes present in ``gts``."""
    vocab = set(class_ids) if class_ids is not None else {g.class_id for g in gts}
    for p in preds:
        if p.class_id not in vocab:
            raise ValueError(f"prediction class {p.class_id} outside the evaluation vocabulary")
    result = {}
    for c in sorted({g.class_id for g in gts}):
        cg = [g for g in gts if g.class_id == c]
        cp = [p for p in preds if p.class_id == c]
        ious = iou_matrix([p.point_ids for p in cp], [g.point_ids for g in cg])
        result[c] = _match_class(cp, cg, ious, thresholds)
    return result


def instance_map(preds, gts, thresholds=None, split: dict | None = None, class_ids=None) -> dict:
    """mAP over [0.50:0.95], mAP50, mAP25 and tertile averages of the headline mAP.

    Classes absent from the ground truth are excluded; a tertile with no
    present classes reports NaN.
    """
    band = MAP_THRESHOLDS if thresholds is None else tuple(thresholds)
    taus = sorted(set(band) | {0.25, 0.5})
    if class_ids is None and split is not None:
        class_ids = list(split)
    ap = per_class_ap(preds, gts, taus, class_ids)
    if not ap:
        raise ValueError("no ground-truth instances")
    headline = {c: float(np.mean([v[t] for t in band])) for c, v in ap.items()}
    res = {
        "mAP": float(np.mean(list(headline.values()))),
        "mAP50": float(np.mean([v[0.5] for v in ap.values()])),
        "mAP25": float(np.mean([v[0.25] for v in ap.values()])),
    }
    for key, group in (("mAP_h", "head"), ("mAP_c", "common"), ("mAP_t", "tail")):
        vals = [headline[c] for c in headline if split is not None and split.get(c) == group]
        res[key] = float(np.mean(vals)) if vals else float("nan")
    return res


def top1_accuracy(pred_class_ids, gt_class_ids) -> float:
    p = np.asarray(pred_class_ids)
    g = np.asarray(gt_class_ids)
    return float((p == g).mean()) if g.size else float("nan")
