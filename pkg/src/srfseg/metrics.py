"""Segmentation quality measures: confusion matrix, IoU, boundary F-score."""

import numpy as np

from .errors import ConfigError, EmptyBatchError, ShapeError

IGNORE = 255


def confusion(pred, gt, num_classes, ignore=IGNORE):
    """Accumulate a [C,C] int64 matrix, rows = ground truth, cols = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    valid = gt != ignore
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes or g.min() < 0 or g.max() >= num_classes):
        raise ConfigError(f"labels outside [0, {num_classes})")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def miou(conf):
    """Per-class IoU and their mean.

    Classes with zero union (absent from both prediction and truth) carry
    NaN in the per-class vector and are excluded from the mean.  A matrix
    with no counts at all raises EmptyBatchError.
    """
    conf = np.asarray(conf, dtype=np.int64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {conf.shape}")
    if conf.sum() == 0:
        raise EmptyBatchError("confusion matrix has no counts")
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    per_class = np.full(conf.shape[0], np.nan)
    present = union > 0
    per_class[present] = tp[present] / union[present]
    return per_class, float(per_class[present].mean())


def _boundary(labels):
    """Pixels that differ from at least one 4-neighbor."""
    b = np.zeros(labels.shape, dtype=bool)
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    b[1:, :] |= labels[1:, :] != labels[:-1, :]
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    return b


def _dilate(mask, tol):
    """Chebyshev dilation by tol pixels."""
    if tol <= 0:
        return mask
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy in range(-tol, tol + 1):
        ys = slice(max(dy, 0), h + min(dy, 0))
        yd = slice(max(-dy, 0), h + min(-dy, 0))
        for dx in range(-tol, tol + 1):
            xs = slice(max(dx, 0), w + min(dx, 0))
            xd = slice(max(-dx, 0), w + min(-dx, 0))
            out[yd, xd] |= mask[ys, xs]
    return out


def boundary_f(pred, gt, tol=1):
    """F-score of boundary agreement within Chebyshev distance tol.

    Both maps boundary-free -> 1.0; exactly one boundary-free -> 0.0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.ndim != 2 or pred.shape != gt.shape:
        raise ShapeError(f"expected matching [H,W] maps, got {pred.shape} and {gt.shape}")
    if tol < 0:
        raise ConfigError(f"tol must be >= 0, got {tol}")
    bp = _boundary(pred)
    bg = _boundary(gt)
    np_, ng = int(bp.sum()), int(bg.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    precision = float((bp & _dilate(bg, tol)).sum()) / np_
    recall = float((bg & _dilate(bp, tol)).sum()) / ng
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)
