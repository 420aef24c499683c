"""Angular-error statistics, cross-camera summaries and the CV driver.

Conventions: quantiles interpolate linearly between order statistics
(``pos = q * (n - 1)``); Best/Worst 25% average the ``ceil(n / 4)`` smallest /
largest errors; multi-camera summaries take the geometric mean of each
statistic across cameras.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInput, NonPositiveStatistic

STAT_NAMES = ("mean", "median", "trimean", "best25", "worst25")


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    median: float
    trimean: float
    best25: float
    worst25: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)

    def row(self) -> str:
        return "  ".join(f"{k} {getattr(self, k):.3f}" for k in STAT_NAMES) + f"  (n={self.n})"


def quantile(sorted_values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics of an ascending array."""
    n = len(sorted_values)
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return float(sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo]))


def error_stats(errors) -> ErrorStats:
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if e.size == 0:
        raise EmptyInput("no errors to summarize")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("angular errors must be finite and non-negative")
    n = e.size
    q1, q2, q3 = (quantile(e, q) for q in (0.25, 0.5, 0.75))
    m = math.ceil(n / 4)
    return ErrorStats(
        mean=float(e.mean()),
        median=q2,
        trimean=(q1 + 2 * q2 + q3) / 4,
        best25=float(e[:m].mean()),
        worst25=float(e[-m:].mean()),
        n=int(n),
    )


def cross_camera_summary(per_camera: dict[str, ErrorStats]) -> ErrorStats:
    """Geometric mean of every statistic across cameras."""
    if not per_camera:
        raise EmptyInput("no cameras to summarize")
    values = {}
    for name in STAT_NAMES:
        v = np.array([getattr(s, name) for s in per_camera.values()])
        if np.any(v <= 0):
            raise NonPositiveStatistic(f"{name} must be > 0 for a geometric mean")
        values[name] = float(np.exp(np.mean(np.log(v))))
    return ErrorStats(**values, n=int(sum(s.n for s in per_camera.values())))


def build_report(per_image: list[dict]) -> dict:
    """Evaluation report from rows holding ``camera_id`` and ``angular_error_deg``."""
    by_cam: dict[str, list[float]] = {}
    for row in per_image:
        by_cam.setdefault(row["camera_id"], []).append(row["angular_error_deg"])
    per_camera = {cam: error_stats(errs) for cam, errs in sorted(by_cam.items())}
    report = {
        "per_camera": {cam: s.as_dict() for cam, s in per_camera.items()},
        "pooled": error_stats([r["angular_error_deg"] for r in per_image]).as_dict(),
        "per_image": per_image,
    }
    if len(per_camera) > 1:
        report["summary"] = cross_camera_summary(per_camera).as_dict()
    else:
        report["summary"] = report["pooled"]
    return report


def write_report(report: dict, path: str | Path, csv_path: str | Path | None = None) -> None:
    Path(path).write_text(json.dumps(report, indent=1))
    if csv_path is not None:
        rows = report["per_image"]
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["image_id"])
            w.writeheader()
            w.writerows(rows)


def fold_stats(per_image: list[dict]) -> dict[int, ErrorStats]:
    """Statistics per held-out fold for rows carrying a ``fold`` field."""
    by_fold: dict[int, list[float]] = {}
    for row in per_image:
        by_fold.setdefault(int(row["fold"]), []).append(row["angular_error_deg"])
    return {f: error_stats(e) for f, e in sorted(by_fold.items())}


def cross_validate(records, folds, config, fit=None, progress=None) -> dict:
    """Scene-grouped cross-validation of the learned estimator.

    For every fold: fit K-means candidates per camera on the training split,
    train (one shared model in multi-device mode, one model per camera
    otherwise), and score the held-out split.  Pooled statistics are taken
    over the concatenation of every held-out error.  ``fit`` overrides the
    candidate fitter: ``fit(truths, camera_id) -> CandidateSet``.
    """
    from .candidates import kmeans_candidates
    from .core import angular_error
    from .training import Sample, predict, train

    if fit is None:
        def fit(truths, cam):
            return kmeans_candidates(truths, config.k_candidates, config.seed, cam)

    samples = [Sample.from_record(r) for r in records]
    scenes = [r.scene_id for r in records]
    rows = []
    for f in range(folds.n_folds):
        test_idx = [i for i, s in enumerate(scenes) if folds.fold_of(s) == f]
        train_idx = [i for i, s in enumerate(scenes) if folds.fold_of(s) != f]
        held_out = {scenes[i] for i in test_idx}
        assert not held_out & {scenes[i] for i in train_idx}, "scene leaked across folds"
        cams = sorted({samples[i].camera_id for i in train_idx})
        per_cam = {c: [samples[i] for i in train_idx if samples[i].camera_id == c] for c in cams}
        cand_sets = {}
        for cam, items in per_cam.items():
            fit_ids = {s.image_id for s in items}
            assert not fit_ids & {samples[i].image_id for i in test_idx}, "test truth in candidate fit"
            cand_sets[cam] = fit([s.truth for s in items], cam)
        if config.multi_device:
            params, _ = train(config, per_cam, cand_sets)
            models = {c: params for c in cams}
        else:
            models = {c: train(config, {c: per_cam[c]}, {c: cand_sets[c]})[0] for c in cams}
        for i in test_idx:
            s = samples[i]
            if s.camera_id not in models:
                continue
            res, _ = predict(models[s.camera_id], s, cand_sets[s.camera_id],
                             use_heads=not config.multi_device)
            rows.append({
                "image_id": s.image_id,
                "camera_id": s.camera_id,
                "fold": f,
                "estimate": [float(v) for v in res.estimate],
                "angular_error_deg": float(angular_error(res.estimate, s.truth)),
            })
        if progress is not None:
            progress(f, rows)
    report = build_report(rows)
    report["per_fold"] = {str(f): s.as_dict() for f, s in fold_stats(rows).items()}
    return report
