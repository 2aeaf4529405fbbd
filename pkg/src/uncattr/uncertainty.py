"""Predictive entropy and its aleatoric/epistemic split under MC dropout.

A posterior draw is one dropout mask set; reusing the same draws for the
total, aleatoric, and epistemic terms makes the decomposition additive by
construction and keeps the epistemic term non-negative (entropy is concave,
so the entropy of the mean never falls below the mean entropy).
All entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .models import Classifier

DEFAULT_SAMPLES = 32
_SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class UncertaintyReport:
    total: float
    aleatoric: float
    epistemic: float


@dataclass
class PosteriorSamples:
    """N dropout mask sets drawn once and reused at every path point."""

    masks: list  # N entries, each a list of per-hidden-layer keep masks
    seed: int

    def __len__(self):
        return len(self.masks)


def sample_posterior(c: Classifier, n_samples=DEFAULT_SAMPLES, seed=0) -> PosteriorSamples:
    if n_samples < 1:
        raise ValueError("need at least one posterior sample")
    rng = np.random.default_rng(seed)
    return PosteriorSamples(
        masks=[c.sample_mask(rng) for _ in range(n_samples)], seed=seed
    )


def _validated_simplex(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -_SIMPLEX_TOL):
        raise ValueError(f"negative probability beyond tolerance: min={p.min()}")
    total = p.sum(axis=-1, keepdims=True)
    if np.any(np.abs(total - 1.0) > _SIMPLEX_TOL):
        raise ValueError("probabilities do not sum to 1 within tolerance")
    return np.clip(p, 0.0, None) / np.clip(p, 0.0, None).sum(axis=-1, keepdims=True)


def entropy(p) -> float:
    """Shannon entropy -sum p log p in nats of one distribution."""
    p = _validated_simplex(p)
    return float(-np.sum(p * np.log(np.maximum(p, dc.LOG_FLOOR))))


def entropy_rows(p_rows: np.ndarray) -> np.ndarray:
    """Row-wise entropies of a (B, |C|) stack of distributions."""
    p = _validated_simplex(p_rows)
    return -np.sum(p * np.log(np.maximum(p, dc.LOG_FLOOR)), axis=-1)


def _stacked_masks(s: PosteriorSamples):
    """Per-layer (N, width) mask matrices, one batched forward per draw set."""
    layers = len(s.masks[0])
    return [
        np.stack([draw[layer] for draw in s.masks]) for layer in range(layers)
    ]


def _sampled_probs(c: Classifier, x, s: PosteriorSamples) -> np.ndarray:
    """(N, |C|) per-draw membership probabilities for a single image."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    tiled = np.broadcast_to(x, (len(s), x.size))
    return c.forward_tensor(dc.Tensor(tiled), _stacked_masks(s)).data


def posterior_predictive(c: Classifier, x, s: PosteriorSamples) -> np.ndarray:
    """Mean of the per-draw membership vectors; lies on the simplex."""
    return _sampled_probs(c, x, s).mean(axis=0)


def decompose(c: Classifier, x, s: PosteriorSamples) -> UncertaintyReport:
    """Total/aleatoric/epistemic entropy from one shared draw set.

    total is the entropy of the sample-mean distribution, aleatoric the mean
    per-draw entropy, epistemic their difference (>= -1e-12 numerically).
    """
    probs = _sampled_probs(c, x, s)
    total = entropy(probs.mean(axis=0))
    aleatoric = float(entropy_rows(probs).mean())
    return UncertaintyReport(
        total=total, aleatoric=aleatoric, epistemic=total - aleatoric
    )
