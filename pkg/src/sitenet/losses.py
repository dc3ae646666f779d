"""Classification and contrastive embedding losses.

The contrastive loss treats same-class sample pairs within a batch as
positives. For an ordered positive pair (m, n):

    loss(m, n) = -log( exp(sim(m, n)/tau) / sum_k w(m, k) exp(sim(m, k)/tau) )

where sim is cosine similarity of the projected embeddings and w selects which
samples enter the denominator: only m's negatives (default), or every sample
except m itself. The batch loss averages over all ordered positive pairs.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    _record,
    exp,
    log,
    matmul,
    maximum_const,
    mul,
    sqrt,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

DENOMINATOR_MODES = ("negatives_only", "all_other")

# incidents counted for the life of the process; tests may reset
CLAMP_COUNT = 0
DEGENERATE_BATCH_COUNT = 0


class DegenerateEmbeddingError(ValueError):
    """Embedding norm too close to zero for a cosine similarity."""


@dataclass
class ContrastiveParams:
    tau: float = 0.05
    denominator_mode: str = "negatives_only"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(
                f"denominator_mode must be one of {DENOMINATOR_MODES}, "
                f"got {self.denominator_mode!r}"
            )


def cross_entropy(probs, onehot):
    """Mean negative log-likelihood of one-hot targets under given probabilities.

    Rows of ``probs`` must already sum to 1 (within 1e-6). The picked
    probability is clamped at 1e-12 before the log; clamping increments
    ``CLAMP_COUNT`` and logs a warning rather than producing Inf.
    """
    global CLAMP_COUNT
    if probs.data.ndim != 2:
        raise ShapeError(f"probs must be 2-D, got {probs.data.shape}")
    y = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=np.float64)
    if y.shape != probs.data.shape:
        raise ShapeError(
            f"targets shape {y.shape} does not match probs {probs.data.shape}"
        )
    sums = probs.data.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValueError("rows of probs must sum to 1 within 1e-6")
    n = probs.data.shape[0]
    clamped = np.maximum(probs.data, 1e-12)
    hits = int(((probs.data < 1e-12) & (y > 0)).sum())
    if hits:
        CLAMP_COUNT += hits
        logger.warning("cross_entropy clamped %d probabilities at 1e-12", hits)
    loss = -(y * np.log(clamped)).sum() / n

    def backward(g):
        return (g * (-y / clamped) / n,)

    return _record(loss, (probs,), backward)


def overall_loss(ce, con, alpha):
    """Total training objective: ce plus alpha times the contrastive term.

    alpha = 0 returns ce itself, so the combined objective degrades to the
    plain classification loss without even a zero-add on the graph.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return ce
    return ce + con * float(alpha)


def cosine_similarity(a, b):
    """Cosine of the angle between two 1-D vectors, as a plain float."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise ShapeError(f"expected equal-length 1-D vectors, got {av.shape} and {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na <= 1e-12 or nb <= 1e-12:
        raise DegenerateEmbeddingError(
            f"vector norm below 1e-12 (norms {na:.3e}, {nb:.3e})"
        )
    return float(av @ bv / (na * nb))


def contrastive_loss(z, labels, params):
    """Average pairwise contrastive loss over ordered same-class pairs.

    ``z`` is a [K, d] Tensor of projected embeddings, ``labels`` a length-K
    integer array. Pairs whose denominator would be empty are excluded from
    the average; a batch with no usable pair returns 0 and is counted in
    ``DEGENERATE_BATCH_COUNT``.
    """
    global DEGENERATE_BATCH_COUNT
    if z.data.ndim != 2:
        raise ShapeError(f"embeddings must be 2-D, got {z.data.shape}")
    k = z.data.shape[0]
    if k < 2:
        raise ShapeError(f"need at least 2 embeddings, got {k}")
    y = np.asarray(labels)
    if y.shape != (k,):
        raise ShapeError(f"labels must have shape ({k},), got {y.shape}")

    same = y[:, None] == y[None, :]
    off_diag = ~np.eye(k, dtype=bool)
    pos = same & off_diag
    if params.denominator_mode == "negatives_only":
        den_mask = (~same).astype(np.float64)
    else:
        den_mask = off_diag.astype(np.float64)
    has_den = den_mask.sum(axis=1) > 0
    valid = pos & has_den[:, None]
    n_pairs = int(valid.sum())
    if n_pairs == 0:
        DEGENERATE_BATCH_COUNT += 1
        logger.warning("contrastive batch had no usable positive pair; loss = 0")
        return Tensor(0.0)

    # cosine similarity matrix of the embedding rows
    sq = tensor_sum(mul(z, z), axis=1, keepdims=True)
    norms = sqrt(maximum_const(sq, 1e-24))  # guards all-zero rows
    zn = z / norms
    sims = matmul(zn, transpose(zn))

    anchors = valid.sum(axis=1).astype(np.float64)  # pairs anchored at each row
    expo = exp(mul(sims, Tensor(1.0 / params.tau)))
    den = tensor_sum(mul(expo, Tensor(den_mask)), axis=1)
    # rows that anchor no pair get a harmless +1 so log never sees 0
    den = den + Tensor((anchors == 0).astype(np.float64))
    den_term = tensor_sum(mul(log(den), Tensor(anchors)))
    num_term = tensor_sum(mul(sims, Tensor(valid / params.tau)))
    return (den_term - num_term) * (1.0 / n_pairs)
