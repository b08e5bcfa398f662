"""Training objective: pixel cross-entropy plus a pixel-contrastive term.

The contrastive term operates on L2-normalized per-pixel embeddings from a
small projection head on the stride-4 decoder feature.  Anchors are sampled
per batch with a bias toward misclassified pixels, positives are anchors of
the same class, negatives are anchors of other classes, and similarities are
cosines over a temperature.  The head and the loss exist only at training
time; inference never touches them.
"""

import numpy as np

from .engine import ops
from .engine.tensor import Tensor, as_tensor
from .errors import ConfigError, EmptyBatchError, ShapeError

IGNORE = 255


def cross_entropy(logits, labels, ignore=IGNORE):
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    Computed in the log-sum-exp form with a detached per-pixel shift, so it
    is stable for logits of any magnitude.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    n, c = logits.shape[0], logits.shape[1]
    flat_labels = labels.reshape(-1)
    valid = np.nonzero(flat_labels != ignore)[0]
    if valid.size == 0:
        raise EmptyBatchError("cross_entropy: every pixel carries the ignore label")
    picked = flat_labels[valid].astype(np.int64)
    if picked.min() < 0 or picked.max() >= c:
        raise ConfigError(f"label values must lie in [0, {c}), got {picked.min()}..{picked.max()}")

    flat = ops.reshape(ops.transpose(logits, (0, 2, 3, 1)), (flat_labels.size, c))
    sel = ops.take_rows(flat, valid)                         # [V, C]
    shift = sel.data.max(axis=1, keepdims=True)              # constant: shift-invariant
    z = ops.sub(sel, Tensor(shift))
    lse = ops.log(ops.sum_(ops.exp(z), axis=1))              # [V]
    onehot = np.zeros((valid.size, c), dtype=z.data.dtype)
    onehot[np.arange(valid.size), picked] = 1.0
    zl = ops.sum_(ops.mul(z, Tensor(onehot)), axis=1)
    return ops.mean(ops.sub(lse, zl))


class EmbeddingHead:
    """1x1 projection to the embedding width, normalized per channel then
    per pixel, so each pixel's embedding is a unit vector."""

    def __init__(self, store, name, in_channels, dim=256):
        self.dim = dim
        p = store.add
        self.w = p(f"{name}.weight", (dim, in_channels, 1, 1))
        self.b = p(f"{name}.bias", (dim,), "zeros")
        self.g = p(f"{name}.norm_gain", (dim,), "ones")
        self.n = p(f"{name}.norm_bias", (dim,), "zeros")

    def forward(self, x):
        y = ops.channel_norm(ops.conv2d(x, self.w, self.b), self.g, self.n)
        sq = ops.sum_(ops.mul(y, y), axis=1, keepdims=True)
        return ops.mul(y, ops.pow_const(ops.add(sq, 1e-12), -0.5))


def downsample_labels(labels, factor):
    """Nearest-neighbor label downsampling (align-corners=false centers)."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"labels must be [N,H,W], got shape {labels.shape}")
    return labels[:, factor // 2::factor, factor // 2::factor]


class AnchorSet:
    """Sampled anchor embeddings with their classes and hardness flags."""

    def __init__(self, embeddings, classes, hard):
        self.embeddings = embeddings        # Tensor [A, D]
        self.classes = np.asarray(classes, dtype=np.int64)
        self.hard = np.asarray(hard, dtype=bool)

    def __len__(self):
        return self.classes.size


def sample_anchors(embeddings, labels, predictions, budget=1024, seed=0, ignore=IGNORE):
    """Pick up to `budget` anchor pixels, split evenly across present classes.

    Within each class, half the class budget comes from misclassified pixels
    and the rest uniformly from the remaining pixels of that class; a short
    pool is backfilled from the other.  Deterministic in `seed`.
    """
    embeddings = as_tensor(embeddings)
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if embeddings.ndim != 4:
        raise ShapeError(f"embeddings must be [N,D,h,w], got {embeddings.shape}")
    if labels.shape != predictions.shape or labels.shape != (embeddings.shape[0],) + embeddings.shape[2:]:
        raise ShapeError(
            f"labels {labels.shape} / predictions {predictions.shape} do not match embeddings {embeddings.shape}")
    n, d = embeddings.shape[0], embeddings.shape[1]
    flat_labels = labels.reshape(-1)
    flat_preds = predictions.reshape(-1)
    labeled = flat_labels != ignore
    if not labeled.any():
        raise EmptyBatchError("sample_anchors: no labeled pixels in the batch")

    present = np.unique(flat_labels[labeled])
    per_class = budget // present.size
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x616e6368]))

    chosen, chosen_hard = [], []
    for cls in present:                                       # sorted by np.unique
        pool = np.nonzero(flat_labels == cls)[0]
        wrong = pool[flat_preds[pool] != cls]
        right = pool[flat_preds[pool] == cls]
        take = min(per_class, pool.size)
        want_hard = min(take // 2, wrong.size)
        want_rand = take - want_hard                          # backfill either way
        hard_pick = rng.choice(wrong, size=want_hard, replace=False) if want_hard else np.empty(0, np.int64)
        rand_pool = right if want_rand <= right.size else np.setdiff1d(pool, hard_pick)
        rand_pick = rng.choice(rand_pool, size=want_rand, replace=False) if want_rand else np.empty(0, np.int64)
        chosen.append(np.concatenate([hard_pick, rand_pick]).astype(np.int64))
        chosen_hard.append(np.concatenate([np.ones(hard_pick.size, bool), np.zeros(rand_pick.size, bool)]))

    idx = np.concatenate(chosen)
    flat_emb = ops.reshape(ops.transpose(embeddings, (0, 2, 3, 1)), (flat_labels.size, d))
    return AnchorSet(ops.take_rows(flat_emb, idx), flat_labels[idx], np.concatenate(chosen_hard))


def contrastive_loss(anchors, tau=0.1):
    """Mean over anchors (with at least one positive) of the per-anchor mean
    over positives p of -log(exp(s_ip)/(exp(s_ip) + sum_negatives exp(s_in))),
    where s is cosine similarity over the temperature."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    a = anchors.embeddings
    cls = anchors.classes
    count = len(anchors)
    if count == 0:
        raise EmptyBatchError("contrastive_loss: empty anchor set")
    same = cls[:, None] == cls[None, :]
    pos_mask = (same & ~np.eye(count, dtype=bool))
    neg_mask = ~same
    pos_counts = pos_mask.sum(axis=1)
    scored = np.nonzero(pos_counts > 0)[0]
    if scored.size == 0:
        raise EmptyBatchError("contrastive_loss: no anchor has a positive")

    dtype = a.data.dtype
    s = ops.mul(ops.matmul(a, ops.transpose(a, (1, 0))), 1.0 / tau)       # [A, A]
    e = ops.exp(s)
    neg_sum = ops.sum_(ops.mul(e, Tensor(neg_mask.astype(dtype))), axis=1, keepdims=True)
    per_pair = ops.sub(ops.log(ops.add(e, neg_sum)), s)                   # -log of the fraction
    pos_w = pos_mask.astype(dtype)
    pos_w[scored] /= pos_counts[scored, None]
    per_anchor = ops.sum_(ops.mul(per_pair, Tensor(pos_w)), axis=1)       # [A]
    kept = ops.take_rows(ops.reshape(per_anchor, (count, 1)), scored)
    return ops.mean(kept)


class LossReport:
    """The combined objective and its parts (total = ce + lam * cl)."""

    def __init__(self, ce, cl, total, lam, tau):
        self.ce = ce
        self.cl = cl
        self.total = total
        self.lam = lam
        self.tau = tau


def total_loss(ce, cl, lam=1.0, tau=0.1):
    ce = as_tensor(ce)
    cl = as_tensor(cl)
    total = ops.add(ce, ops.mul(lam, cl))
    return LossReport(ce, cl, total, float(lam), float(tau))
