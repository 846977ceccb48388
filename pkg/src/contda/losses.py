"""Self-training objectives: IM-style losses, centroid pseudolabel
refinement, and the prototypical contrastive term.

Probability inputs are B x C softmax rows; features are L2-normalized
before any centroid or prototype computation and cosine similarity is the
distance throughout.
"""

from __future__ import annotations

import dataclasses
import math
import warnings

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputValidationError

METHODS = ("cshot", "conda", "uclgv")


def _check_probs(probs: torch.Tensor) -> torch.Tensor:
    if probs.ndim != 2:
        raise InputValidationError(f"probs must be B x C, got {tuple(probs.shape)}")
    if not torch.isfinite(probs).all():
        raise InputValidationError("probs contain non-finite values")
    if float(probs.min()) < -1e-7:
        raise InputValidationError("probs contain negative entries")
    sums = probs.sum(dim=1)
    if float((sums - 1.0).abs().max()) > 1e-5:
        raise InputValidationError("probability rows must sum to 1 within 1e-5")
    return probs


def entropy_loss(probs: torch.Tensor) -> torch.Tensor:
    """Mean per-sample Shannon entropy, in [0, ln C]."""
    probs = _check_probs(probs)
    return -torch.xlogy(probs, probs).sum(dim=1).mean()


def diversity_loss(probs: torch.Tensor) -> torch.Tensor:
    """Negative entropy of the batch-mean prediction, in [-ln C, 0];
    minimizing it spreads the mean prediction over classes."""
    probs = _check_probs(probs)
    mean = probs.mean(dim=0)
    return torch.xlogy(mean, mean).sum()


def equal_diversity_loss(probs: torch.Tensor) -> torch.Tensor:
    """KL(batch-mean prediction || uniform); zero iff the mean is uniform.

    Drives the mean prediction toward the exact class balance the replay
    buffer maintains."""
    probs = _check_probs(probs)
    return diversity_loss(probs) + math.log(probs.shape[1])


def pseudolabel_ce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of softmax rows against hard pseudolabels."""
    probs = _check_probs(probs)
    picked = probs.gather(1, labels.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(1e-30)).mean()


@dataclasses.dataclass
class PseudolabelAssignment:
    labels: np.ndarray  # (N,) int64
    confidences: np.ndarray  # (N,) max softmax probability
    centroids: np.ndarray  # (C, d)
    empty: np.ndarray  # (C,) bool, classes with no mass/members

    def __post_init__(self):
        if self.labels.min() < 0 or self.labels.max() >= len(self.centroids):
            raise InputValidationError("pseudolabels out of range")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def _assign_to_centroids(z: np.ndarray, centroids: np.ndarray, empty: np.ndarray) -> np.ndarray:
    # cosine distance; empty centroids are never assigned
    directions = _normalize_rows(centroids)
    dist = 1.0 - z @ directions.T
    dist[:, empty] = np.inf
    return dist.argmin(axis=1).astype(np.int64)


def refine_pseudolabels(
    features, probs, rounds: int = 2
) -> PseudolabelAssignment:
    """Centroid-based refinement of argmax pseudolabels.

    Round 0 builds soft centroids weighted by the prediction probabilities
    and assigns each sample to the nearest centroid by cosine distance;
    every further round recomputes centroids from the hard assignment and
    reassigns.
    """
    if rounds < 1:
        raise InputValidationError(f"rounds must be >= 1: {rounds}")
    feats = np.asarray(features.detach().numpy() if torch.is_tensor(features) else features, dtype=np.float64)
    p = probs.detach().numpy() if torch.is_tensor(probs) else probs
    p = np.asarray(p, dtype=np.float64)
    if feats.ndim != 2 or p.ndim != 2 or len(feats) != len(p):
        raise InputValidationError("features and probs must align as N x d and N x C")
    if len(feats) < 1:
        raise InputValidationError("need at least one sample")

    n, c = p.shape
    z = _normalize_rows(feats)

    mass = p.sum(axis=0)
    empty = mass == 0.0
    centroids = np.zeros((c, feats.shape[1]))
    nonzero = ~empty
    centroids[nonzero] = (p.T[nonzero] @ z) / mass[nonzero, None]
    labels = _assign_to_centroids(z, centroids, empty)

    for _ in range(rounds - 1):
        hard = np.zeros((n, c))
        hard[np.arange(n), labels] = 1.0
        counts = hard.sum(axis=0)
        empty = counts == 0.0
        centroids = np.zeros_like(centroids)
        nonzero = ~empty
        centroids[nonzero] = (hard.T[nonzero] @ z) / counts[nonzero, None]
        labels = _assign_to_centroids(z, centroids, empty)

    confidences = p.max(axis=1)
    return PseudolabelAssignment(labels, confidences, centroids, empty)


def class_prototypes(buffer_features: torch.Tensor, buffer_labels: torch.Tensor, class_count: int):
    """Unit-norm per-class means of unit-norm buffer features.

    Returns (prototypes C x d, present mask); absent classes hold zeros.
    """
    protos = torch.zeros(class_count, buffer_features.shape[1], dtype=buffer_features.dtype)
    present = torch.zeros(class_count, dtype=torch.bool)
    if len(buffer_features) == 0:
        return protos, present
    z = F.normalize(buffer_features, dim=1)
    for k in range(class_count):
        mask = buffer_labels == k
        if mask.any():
            protos[k] = F.normalize(z[mask].mean(dim=0), dim=0)
            present[k] = True
    return protos, present


def prototypical_contrastive_loss(
    incoming_features: torch.Tensor,
    incoming_labels: torch.Tensor,
    buffer_features: torch.Tensor,
    buffer_labels: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """InfoNCE between incoming samples and buffer class prototypes.

    Samples whose pseudolabel class has no buffer prototype are excluded;
    with nothing left the loss is 0 (warned).
    """
    if tau <= 0:
        raise InputValidationError(f"tau must be positive: {tau}")
    class_count = 0 if incoming_labels.numel() == 0 else int(incoming_labels.max()) + 1
    if buffer_labels.numel():
        class_count = max(class_count, int(buffer_labels.max()) + 1)
    protos, present = class_prototypes(buffer_features, buffer_labels, class_count)

    keep = present[incoming_labels] if incoming_labels.numel() else torch.zeros(0, dtype=torch.bool)
    if not bool(keep.any()):
        warnings.warn("no incoming sample has a buffer prototype; contrastive loss is 0")
        return torch.zeros((), dtype=incoming_features.dtype)

    z = F.normalize(incoming_features[keep], dim=1)
    sims = z @ protos[present].T / tau
    # map class index -> column in the prototype matrix
    col_of_class = torch.cumsum(present.long(), dim=0) - 1
    targets = col_of_class[incoming_labels[keep]]
    return F.cross_entropy(sims, targets)


def total_adaptation_loss(
    method: str,
    probs: torch.Tensor,
    features: torch.Tensor,
    pseudo_labels: torch.Tensor,
    buffer_features: torch.Tensor | None = None,
    buffer_labels: torch.Tensor | None = None,
    beta: float = 0.3,
    lam: float = 1.0,
    tau: float = 0.1,
    incoming_mask: torch.Tensor | None = None,
) -> tuple:
    """Combined objective for one minibatch; returns (total, term breakdown).

    cshot: beta*CE + entropy + diversity
    conda: beta*CE + entropy + equal diversity
    uclgv: conda total + lam * prototypical contrastive (incoming samples only)
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")
    has_buffer = buffer_features is not None and buffer_labels is not None
    if method == "cshot" and has_buffer:
        raise ConfigurationError("cshot takes no buffer")
    if method in ("conda", "uclgv") and not has_buffer:
        raise ConfigurationError(f"{method} requires buffer features and labels")

    terms = {}
    total = entropy_loss(probs)
    terms["entropy"] = float(total)

    if method == "cshot":
        div = diversity_loss(probs)
        terms["diversity"] = float(div)
    else:
        div = equal_diversity_loss(probs)
        terms["equal_diversity"] = float(div)
    total = total + div

    if beta != 0.0:
        ce = pseudolabel_ce(probs, pseudo_labels)
        terms["pseudo_ce"] = float(ce)
        total = total + beta * ce

    if method == "uclgv" and lam != 0.0:
        if incoming_mask is None:
            incoming_mask = torch.ones(len(features), dtype=torch.bool)
        contrastive = prototypical_contrastive_loss(
            features[incoming_mask],
            pseudo_labels[incoming_mask],
            buffer_features,
            buffer_labels,
            tau,
        )
        terms["contrastive"] = float(contrastive)
        total = total + lam * contrastive

    return total, terms
