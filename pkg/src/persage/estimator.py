"""Age prediction head: bias-free class scores, softmax, expectation decoding.

The head is deliberately bias-free: each class score is a plain inner product
between that class's weight row and the age-feature vector, so a weight matrix
is the entire head. Ages are decoded as the expectation of the class
distribution, never by rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mathcore import softmax


@dataclass
class AgeDistribution:
    probs: np.ndarray       # (K,) probabilities
    expected_age: float     # sum_k k * probs[k], in [0, K-1]


def class_scores(weights, age_feat):
    """scores[i] = <weights row i, age_feat>. weights: (K, D), age_feat: (D,)."""
    weights = np.asarray(weights, dtype=np.float64)
    age_feat = np.asarray(age_feat, dtype=np.float64)
    if weights.ndim != 2:
        raise ValueError(f"weight matrix must be 2-D, got shape {weights.shape}")
    if age_feat.shape != (weights.shape[1],):
        raise ValueError(
            f"age features have shape {age_feat.shape}, expected ({weights.shape[1]},)"
        )
    return weights @ age_feat


def class_scores_batch(weights_batch, age_feats):
    """Per-sample scores: weights_batch (B, K, D) x age_feats (B, D) -> (B, K)."""
    weights_batch = np.asarray(weights_batch, dtype=np.float64)
    age_feats = np.asarray(age_feats, dtype=np.float64)
    if weights_batch.ndim != 3 or age_feats.ndim != 2:
        raise ValueError(
            f"expected (B,K,D) weights and (B,D) features, got "
            f"{weights_batch.shape} and {age_feats.shape}"
        )
    if weights_batch.shape[0] != age_feats.shape[0] or weights_batch.shape[2] != age_feats.shape[1]:
        raise ValueError(
            f"batch/feature dims disagree: {weights_batch.shape} vs {age_feats.shape}"
        )
    return np.einsum("bkd,bd->bk", weights_batch, age_feats)


def expected_ages(probs):
    """Expectation over class indices for each row of a (B, K) probability array."""
    probs = np.asarray(probs, dtype=np.float64)
    k = np.arange(probs.shape[-1], dtype=np.float64)
    return probs @ k


def age_distribution(scores):
    """Softmax over class scores plus the expected age of the result."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be a vector, got shape {scores.shape}")
    probs = softmax(scores)
    k = np.arange(scores.shape[0], dtype=np.float64)
    return AgeDistribution(probs=probs, expected_age=float(probs @ k))


def argmax_class(scores):
    """Highest-scoring class index. Diagnostic only; metrics use expectations."""
    scores = np.asarray(scores, dtype=np.float64)
    return int(np.argmax(scores))


def predict(params, id_feat, age_feat):
    """Full pipeline for one sample: generate weights (eval mode), score, decode."""
    from .metalearner import generate_weights

    weights = generate_weights(params, id_feat, mode="eval")
    return age_distribution(class_scores(weights, age_feat))
