"""Batch-wise hard-negative-mining triplet loss.

A batch holds N positive pairs whose (speaker, phrase) keys are all distinct,
so every off-diagonal entry of ``S = Z1 @ Z2.T`` scores a negative pair built
on the fly.  Per row ``i``::

    p_i      = S_ii
    maxN_i   = max_j (S - I)_ij
    meanN_i  = sum_j (S - I)_ij / (N - 1)
    loss1_i  = max(0, m - p_i + maxN_i)
    loss2_i  = max(0, m - p_i + meanN_i)
    loss     = mean_i(w1 * loss1_i + w2 * loss2_i)

The formula is kept literally: the diagonal of ``S - I`` (``p_i - 1``) takes
part in the row max and in the row sum.
"""

from dataclasses import dataclass

import numpy as np

from . import ndcompute as nd
from .errors import ConstraintError, ShapeError

POSITIVE = 1
SAME_SPEAKER = 2
SAME_PHRASE = 3
DIFFERENT_BOTH = 4


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.5
    max_weight: float = 0.5
    mean_weight: float = 0.5

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if abs(self.max_weight + self.mean_weight - 1.0) > 1e-12:
            raise ValueError("loss term weights must sum to 1")


def similarity_matrix(z1, z2):
    """Cosine similarities between branch-1 rows and branch-2 rows."""
    if z1.ndim != 2 or z2.ndim != 2 or z1.shape[1] != z2.shape[1]:
        raise ShapeError(f"embedding shapes differ: {z1.shape} vs {z2.shape}")
    return nd.matmul(z1, z2.T)


def _terms(s, config):
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {s.shape}")
    n = s.shape[0]
    if n < 2:
        raise ShapeError("the loss needs N >= 2 pairs; a single pair has no negatives")
    p = np.diag(s).copy()
    shifted = s - np.eye(n, dtype=s.dtype)
    hardest = shifted.argmax(axis=1)
    max_neg = shifted[np.arange(n), hardest]
    mean_neg = shifted.sum(axis=1) / (n - 1)
    loss1 = np.maximum(0, config.margin - p + max_neg)
    loss2 = np.maximum(0, config.margin - p + mean_neg)
    return p, hardest, max_neg, mean_neg, loss1, loss2


def hnm_triplet_loss(s, config=LossConfig()):
    """Return ``(loss, diagnostics)`` for a square similarity matrix."""
    p, hardest, max_neg, mean_neg, loss1, loss2 = _terms(s, config)
    per_row = config.max_weight * loss1 + config.mean_weight * loss2
    diagnostics = {
        "p": p,
        "max_neg": max_neg,
        "mean_neg": mean_neg,
        "hardest": hardest,
        "loss1": loss1,
        "loss2": loss2,
        "per_row": per_row,
    }
    return float(per_row.mean()), diagnostics


def hnm_triplet_loss_backward(s, config=LossConfig()):
    """Gradient of the loss with respect to ``s``.

    The row max sends its subgradient to the lowest-index argmax; inactive
    hinges contribute nothing.
    """
    p, hardest, max_neg, mean_neg, loss1, loss2 = _terms(s, config)
    n = s.shape[0]
    rows = np.arange(n)
    ds = np.zeros_like(s)
    act1 = (loss1 > 0) * (config.max_weight / n)
    act2 = (loss2 > 0) * (config.mean_weight / n)
    ds[rows, rows] -= act1 + act2
    ds[rows, hardest] += act1
    ds += (act2 / (n - 1))[:, None]
    return ds


def loss_and_grads(z1, z2, config=LossConfig()):
    """Loss plus gradients with respect to both embedding matrices."""
    s = similarity_matrix(z1, z2)
    loss, diagnostics = hnm_triplet_loss(s, config)
    ds = hnm_triplet_loss_backward(s, config)
    dz1, dz2t = nd.matmul_backward(ds, z1, z2.T)
    return loss, dz1, dz2t.T, diagnostics


def pair_type(key_a, key_b):
    """Type 1..4 for two (speaker, phrase) keys."""
    same_speaker = key_a[0] == key_b[0]
    same_phrase = key_a[1] == key_b[1]
    if same_speaker and same_phrase:
        return POSITIVE
    if same_speaker:
        return SAME_SPEAKER
    if same_phrase:
        return SAME_PHRASE
    return DIFFERENT_BOTH


def batch_pair_types(row_keys, col_keys=None):
    """N x N matrix of pair types for a batch.

    The diagonal is always type 1 (the sampled positives).  Off-diagonal cells
    compare the keys of two different pairs; duplicate keys are rejected since
    they would make an off-diagonal cell a hidden positive.
    """
    col_keys = row_keys if col_keys is None else col_keys
    row_keys = [tuple(k) for k in row_keys]
    col_keys = [tuple(k) for k in col_keys]
    if len(row_keys) != len(col_keys):
        raise ShapeError("row and column key lists differ in length")
    if row_keys != col_keys:
        raise ConstraintError("row and column keys of a batch must agree per pair")
    if len(set(row_keys)) != len(row_keys):
        raise ConstraintError("batch contains duplicate (speaker, phrase) keys")
    n = len(row_keys)
    types = np.empty((n, n), dtype=np.int8)
    for i in range(n):
        for j in range(n):
            types[i, j] = POSITIVE if i == j else pair_type(row_keys[i], col_keys[j])
    return types
