"""Posterior over candidate illuminants and the soft-argmax estimate.

Per-candidate network scores are treated as log-likelihoods, mapped through a
per-candidate affine head (gain, bias) to log-posteriors, softmaxed, and the
illuminant estimate is the normalized probability-weighted mean of the
candidates.  Training minimizes the angle between that estimate and the truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, NonFiniteLogit

# beyond this cosine the arccos slope is frozen at its boundary value
COLINEAR_COS = 1.0 - 1e-7


@dataclass(frozen=True)
class PosteriorResult:
    log_posteriors: np.ndarray
    probs: np.ndarray
    estimate: np.ndarray
    weighted_sum: np.ndarray  # sum_i probs_i * candidate_i, before normalization

    def top(self, k: int = 5) -> list[tuple[int, float]]:
        """Highest-probability candidates as ``(index, prob)``; ties by lowest index."""
        order = np.argsort(-self.probs, kind="stable")[:k]
        return [(int(i), float(self.probs[i])) for i in order]

    @property
    def map_index(self) -> int:
        return int(np.argmax(self.probs))


def log_posterior(log_likelihoods, gains, biases) -> np.ndarray:
    ll = np.asarray(log_likelihoods)
    gains = np.asarray(gains)
    biases = np.asarray(biases)
    if not (ll.shape == gains.shape == biases.shape):
        raise LengthMismatch(
            f"log-likelihoods {ll.shape}, gains {gains.shape}, biases {biases.shape}"
        )
    return gains * ll + biases


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


def estimate_illuminant(candidates, log_posteriors) -> PosteriorResult:
    cands = np.asarray(candidates, dtype=np.float64)
    z = np.asarray(log_posteriors, dtype=np.float64)
    if z.shape != (len(cands),):
        raise LengthMismatch(f"{z.shape[0] if z.ndim else 0} logits for {len(cands)} candidates")
    if not np.all(np.isfinite(z)):
        raise NonFiniteLogit("log-posterior contains NaN or Inf")
    probs = softmax(z)
    e = probs @ cands
    return PosteriorResult(z, probs, e / np.linalg.norm(e), e)


def map_estimate(candidates, log_posteriors) -> np.ndarray:
    """Argmax candidate.  Diagnostic only; not differentiable."""
    return np.asarray(candidates, dtype=np.float64)[int(np.argmax(log_posteriors))]


def loss_and_grad(result: PosteriorResult, truth, candidates) -> tuple[float, np.ndarray]:
    """Angular error (radians) of the estimate and its gradient w.r.t. the logits."""
    cands = np.asarray(candidates, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    t = t / np.linalg.norm(t)
    u = result.estimate
    c = float(np.clip(t @ u, -1.0, 1.0))
    loss = float(np.arccos(c))

    if abs(c) > COLINEAR_COS:
        dl_dc = -1.0 / np.sqrt(1.0 - COLINEAR_COS**2)
    else:
        dl_dc = -1.0 / np.sqrt(1.0 - c * c)
    dc_de = (t - c * u) / np.linalg.norm(result.weighted_sum)
    dl_dp = dl_dc * (cands @ dc_de)
    p = result.probs
    dl_dz = p * (dl_dp - p @ dl_dp)
    return loss, dl_dz
