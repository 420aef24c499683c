"""Candidate illuminant selection: K-means (RGB), uniform chroma grid, GMM sampling."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import angular_error, chroma, inverse_chroma, normalize_illuminant
from .errors import (
    DegenerateComponent,
    DegenerateExtent,
    EmDidNotConverge,
    EmptyInput,
    TooFewDistinctPoints,
)
from .evaluation import ErrorStats, error_stats

FORMAT_VERSION = 1
METHODS = ("kmeans", "uniform", "gmm")
MAX_ITER = 300
DUPLICATE_DEG = 1e-6


@dataclass(frozen=True)
class CandidateSet:
    camera_id: str
    candidates: np.ndarray  # (n, 3) unit rows; index i aligns with head i
    method: str
    seed: int = 0

    def __len__(self) -> int:
        return len(self.candidates)

    def to_json(self) -> str:
        rows = ",\n  ".join(
            "[" + ", ".join(f"{v:.17g}" for v in row) + "]" for row in self.candidates
        )
        head = json.dumps(
            {"version": FORMAT_VERSION, "camera_id": self.camera_id,
             "method": self.method, "seed": int(self.seed)}
        )[:-1]
        return f"{head}, \"candidates\": [\n  {rows}\n]}}\n"

    @classmethod
    def from_json(cls, text: str) -> "CandidateSet":
        d = json.loads(text)
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported candidate-set version {d.get('version')!r}")
        if d["method"] not in METHODS:
            raise ValueError(f"unknown selection method {d['method']!r}")
        cands = np.array(d["candidates"], dtype=np.float64).reshape(-1, 3)
        return cls(str(d["camera_id"]), cands, d["method"], int(d["seed"]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "CandidateSet":
        with open(path) as f:
            return cls.from_json(f.read())

    def digest(self) -> str:
        """Hash of the ordered candidate values; heads are index-aligned to it."""
        text = ";".join(",".join(f"{v:.17g}" for v in row) for row in self.candidates)
        return hashlib.sha256(text.encode()).hexdigest()


def _as_points(illuminants) -> np.ndarray:
    x = np.asarray(illuminants, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise EmptyInput("no illuminants given")
    return normalize_illuminant(x)


def dedupe(cands: np.ndarray) -> np.ndarray:
    """Drop candidates within ``DUPLICATE_DEG`` of an earlier one (keeps order)."""
    c = np.asarray(cands, dtype=np.float64)
    # chord-based angle stays accurate where arccos of the dot product does not
    chord = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    dup = np.degrees(2 * np.arcsin(np.clip(chord / 2, 0, 1))) <= DUPLICATE_DEG
    keep: list[int] = []
    for i in range(len(c)):
        if not dup[i, keep].any():
            keep.append(i)
    return c[keep]


def wcss(x: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Within-cluster sum of squares with cluster means as centers."""
    total = 0.0
    for j in range(k):
        pts = x[labels == j]
        if len(pts):
            total += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return total


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


@dataclass
class LloydResult:
    centers: np.ndarray  # cluster means (not re-normalized)
    labels: np.ndarray
    wcss: float
    history: list[float]  # WCSS after each update step
    iterations: int


def lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = MAX_ITER) -> LloydResult:
    """Lloyd's algorithm from a k-means++ start.

    Stops when assignments no longer change.  Empty clusters take the point
    farthest from its current center.
    """
    centers = kmeans_pp_init(x, k, rng)
    labels = None
    history = []
    for it in range(1, max_iter + 1):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)  # ties -> lowest index
        for j in range(k):
            if not np.any(new == j):
                far = int(np.argmax(d2[np.arange(len(x)), new]))
                new[far] = j
                d2[far] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == j].mean(axis=0) for j in range(k)])
        history.append(wcss(x, labels, k))
    return LloydResult(centers, labels, history[-1], history, it)


def kmeans(x: np.ndarray, k: int, seed: int = 0, n_init: int = 10) -> LloydResult:
    """Best (lowest WCSS) of ``n_init`` Lloyd runs drawn from one seeded stream."""
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = lloyd(x, k, rng)
        if best is None or res.wcss < best.wcss:
            best = res
    return best


def kmeans_candidates(illuminants, k: int, seed: int = 0, camera_id: str = "",
                      n_init: int = 10) -> CandidateSet:
    """Cluster unit illuminants in RGB; candidates are the re-normalized centers.

    The best of ``n_init`` k-means++ restarts (lowest WCSS) is kept.
    """
    x = _as_points(illuminants)
    n_distinct = len(dedupe(x))
    if k < 1 or n_distinct < k:
        raise TooFewDistinctPoints(f"{n_distinct} distinct illuminants for k={k}")
    best = kmeans(x, k, seed, n_init)
    cands = dedupe(normalize_illuminant(best.centers))
    return CandidateSet(camera_id, cands, "kmeans", seed)


def uniform_candidates(illuminants, grid_side: int, camera_id: str = "") -> CandidateSet:
    """``grid_side x grid_side`` lattice over the chroma bounding box of the inputs."""
    if grid_side < 2:
        raise ValueError("grid_side must be >= 2")
    p = chroma(_as_points(illuminants))
    lo, hi = p.min(axis=0), p.max(axis=0)
    if np.any(hi - lo < 1e-9):
        raise DegenerateExtent(f"chroma extent too small: {hi - lo}")
    rg = np.linspace(lo[0], hi[0], grid_side)
    bg = np.linspace(lo[1], hi[1], grid_side)
    grid = np.stack(np.meshgrid(rg, bg, indexing="ij"), axis=-1).reshape(-1, 2)
    return CandidateSet(camera_id, inverse_chroma(grid), "uniform", 0)


def uniform_grid_side(k: int) -> int:
    side = math.isqrt(k)
    if side * side != k:
        raise ValueError(f"uniform selection needs a square candidate count, got {k}")
    return side


# ---------------------------------------------------------------------------
# Gaussian mixture in chroma space

COV_FLOOR = 1e-6
EM_MAX_ITER = 100
EM_DECREASE_TOL = 1e-9


def _log_gauss(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, (x - mean).T)
    log_det = 2 * np.log(np.diag(chol)).sum()
    return -0.5 * ((z**2).sum(0) + log_det + x.shape[1] * np.log(2 * np.pi))


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_likelihoods: list[float]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return np.array([rng.multivariate_normal(self.means[c], self.covs[c]) for c in comp])


def fit_gmm(x: np.ndarray, n_components: int, rng: np.random.Generator,
            max_iter: int = EM_MAX_ITER, tol: float = 1e-10) -> GaussianMixture:
    """Full-covariance EM with k-means++/Lloyd initialization."""
    n, d = x.shape
    if n < n_components:
        raise DegenerateComponent(f"{n} points for {n_components} components")
    init = lloyd(x, n_components, rng)
    resp = np.eye(n_components)[init.labels]
    history: list[float] = []
    for _ in range(max_iter):
        # M step
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-10):
            raise DegenerateComponent("a mixture component lost all its mass")
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((n_components, d, d))
        for j in range(n_components):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + COV_FLOOR * np.eye(d)
        # E step
        logp = np.stack(
            [np.log(weights[j]) + _log_gauss(x, means[j], covs[j]) for j in range(n_components)],
            axis=1,
        )
        top = logp.max(axis=1, keepdims=True)
        log_norm = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        resp = np.exp(logp - log_norm[:, None])
        ll = float(log_norm.sum())
        if history and ll < history[-1] - EM_DECREASE_TOL * max(1.0, abs(history[-1])):
            raise EmDidNotConverge(f"log-likelihood decreased {history[-1]} -> {ll}")
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * max(1.0, abs(ll)):
            break
    return GaussianMixture(weights, means, covs, history)


def gmm_candidates(illuminants, n_components: int = 10, n_samples: int = 120,
                   seed: int = 0, camera_id: str = "", max_retries: int = 1000) -> CandidateSet:
    """Fit a GMM in ``[r/g, b/g]`` and sample candidates from it."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    p = chroma(_as_points(illuminants))
    rng = np.random.default_rng(seed)
    gmm = fit_gmm(p, n_components, rng)
    out = []
    for _ in range(n_samples):
        for _ in range(max_retries):
            s = gmm.sample(1, rng)[0]
            if np.all(s > 0):
                out.append(s)
                break
        else:
            raise DegenerateComponent("could not draw a positive chroma sample")
    return CandidateSet(camera_id, dedupe(inverse_chroma(np.array(out))), "gmm", seed)


def quantization_floor(cands: CandidateSet | np.ndarray, truths) -> ErrorStats:
    """Error statistics of always answering with the nearest candidate."""
    c = np.asarray(getattr(cands, "candidates", cands), dtype=np.float64)
    t = _as_points(truths)
    if len(c) == 0:
        raise EmptyInput("empty candidate set")
    errs = angular_error(t[:, None, :], c[None, :, :]).min(axis=1)
    return error_stats(errs)
