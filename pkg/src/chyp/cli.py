"""``chyp`` command line: candidates, train, infer, evaluate, synth.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``CHYP_THREADS`` caps BLAS worker threads (set before numpy loads).
"""

from __future__ import annotations

import os

if os.environ.get("CHYP_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["CHYP_THREADS"])

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .baselines import ESTIMATORS
from .candidates import (
    CandidateSet,
    gmm_candidates,
    kmeans_candidates,
    quantization_floor,
    uniform_candidates,
    uniform_grid_side,
)
from .core import LinearImage, angular_error, apply_correction
from .data import (
    SYNTH_PATCHES,
    FoldSpec,
    LabeledImage,
    load_manifest,
    read_image,
    write_chyp,
    write_synth_dataset,
)
from .errors import ChypError, ConfigError
from .evaluation import build_report, cross_validate, fold_stats, write_report
from .training import Sample, TrainConfig, predict, pretrain_finetune, train

log = logging.getLogger("chyp")

CONV1_NOTE = ("conv1 is He-normal initialized from the run seed and frozen; "
              "ImageNet-pretrained first-layer weights are not available")


class UsageError(Exception):
    """Bad flags or unresolvable inputs (exit code 2)."""


def _write_atomic(path: Path, text: str) -> None:
    checkpoint.atomic_write(path, text.encode())


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _by_camera(records) -> dict[str, list]:
    out: dict[str, list] = {}
    for r in records:
        out.setdefault(r.camera_id, []).append(r)
    return dict(sorted(out.items()))


def _load_records(paths) -> list[LabeledImage]:
    records = []
    for p in paths:
        records += load_manifest(p)
    return records


def _select_split(records, folds_path, holdout, want_test: bool):
    if folds_path is None:
        if holdout is not None:
            raise UsageError("--holdout needs --folds")
        return records
    folds = FoldSpec.from_json(Path(folds_path).read_text())
    if holdout is None:
        return records
    train_r, test_r = folds.split(records, holdout)
    return test_r if want_test else train_r


def _resolve_candidates(paths, cameras) -> dict[str, CandidateSet]:
    """Map every camera to its candidate set from files or directories of ``<camera>.json``."""
    found: dict[str, CandidateSet] = {}
    absent = []
    for p in map(Path, paths or []):
        if p.is_dir():
            for f in sorted(p.glob("*.json")):
                cs = CandidateSet.load(f)
                found.setdefault(cs.camera_id or f.stem, cs)
        elif p.exists():
            cs = CandidateSet.load(p)
            found.setdefault(cs.camera_id or p.stem, cs)
        else:
            absent.append(str(p))
    if not absent and len(found) == 1 and len(cameras) == 1 and cameras[0] not in found:
        return {cameras[0]: next(iter(found.values()))}
    missing = [c for c in cameras if c not in found]
    if missing:
        hint = f" (not found: {', '.join(absent)})" if absent else ""
        raise UsageError(f"no candidate set for camera {missing[0]}{hint}")
    return {c: found[c] for c in cameras}


# ---------------------------------------------------------------------------
# subcommands


def cmd_candidates(args) -> int:
    records = load_manifest(args.manifest)
    records = _select_split(records, args.folds, args.holdout, want_test=False)
    cams = _by_camera(records)
    if args.camera:
        if args.camera not in cams:
            raise UsageError(f"camera {args.camera} not in manifest")
        cams = {args.camera: cams[args.camera]}
    out = Path(args.out)
    to_dir = not (out.suffix == ".json" and len(cams) == 1)
    if to_dir:
        out.mkdir(parents=True, exist_ok=True)
    for cam, recs in cams.items():
        truths = np.array([r.truth for r in recs])
        if args.method == "kmeans":
            cs = kmeans_candidates(truths, args.k, args.seed, cam)
        elif args.method == "uniform":
            cs = uniform_candidates(truths, uniform_grid_side(args.k), cam)
        else:
            cs = gmm_candidates(truths, args.components, args.k, args.seed, cam)
        path = out / f"{cam}.json" if to_dir else out
        _write_atomic(path, cs.to_json())
        floor = quantization_floor(cs, truths)
        print(f"{cam}: k={len(cs)} ({args.method}) -> {path}")
        print(f"  quantization floor on fitting set: {floor.row()}")
    return 0


def _config_from_args(args) -> TrainConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from exc
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr0": args.lr0,
        "seed": args.seed,
        "dropout_p": args.dropout,
        "k_candidates": args.k,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.multi_device:
        base["multi_device"] = True
    if args.train_conv1:
        base["freeze_conv1"] = False
    return TrainConfig.from_dict(base)


def cmd_train(args) -> int:
    config = _config_from_args(args)
    records = _select_split(_load_records(args.manifest), args.folds, args.holdout, want_test=False)
    per_cam = _by_camera(records)
    if not per_cam:
        raise UsageError("no training images")
    if not config.multi_device and len(per_cam) > 1:
        raise ConfigError("multi_device: several cameras given; pass --multi-device")
    cand_sets = _resolve_candidates(args.candidates, list(per_cam))
    sizes = sorted({len(cs) for cs in cand_sets.values()})
    if args.k is None and config.k_candidates not in sizes:
        # the candidate files fix the head count; echo it rather than the default
        config = TrainConfig.from_dict({**config.to_dict(), "k_candidates": sizes[-1]})
    samples = {c: [Sample.from_record(r) for r in rs] for c, rs in per_cam.items()}

    def progress(epoch, hist):
        log.info("epoch %d/%d lr %.3g loss %.4f deg (%.1fs)", epoch + 1, config.epochs,
                 hist.lr[-1], hist.train_loss_deg[-1], hist.seconds[-1])

    if args.pretrained:
        params, hist = pretrain_finetune(args.pretrained, cand_sets, config, samples, progress=progress)
    else:
        params, hist = train(config, samples, cand_sets, conv1_weights=args.conv1_weights,
                             progress=progress)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {c: cs.digest() for c, cs in cand_sets.items()}
    meta = {
        "config": config.to_dict(),
        "candidate_hashes": hashes,
        "multi_device": config.multi_device,
        "cameras": sorted(per_cam),
    }
    checkpoint.save(out / "model.chkp", params, meta)
    run = {
        "config": config.to_dict(),
        "seeds": {"training": config.seed, "init": params.seed,
                  "candidates": {c: cs.seed for c, cs in cand_sets.items()}},
        "candidate_hashes": hashes,
        "candidate_counts": {c: len(cs) for c, cs in cand_sets.items()},
        "manifests": [{"path": str(p), "sha256": _sha256(p)} for p in args.manifest],
        "folds": {"path": args.folds, "holdout": args.holdout} if args.folds else None,
        "images_per_camera": {c: len(v) for c, v in per_cam.items()},
        "heads": ("gain 1, bias 0 (frozen, multi-device)" if config.multi_device
                  else "trained per candidate"),
        "pretrained": str(args.pretrained) if args.pretrained else None,
        "conv1": (f"loaded from {args.conv1_weights}" if args.conv1_weights else CONV1_NOTE),
        "history": {"train_loss_deg": hist.train_loss_deg, "lr": hist.lr},
        "checkpoint_sha256": hashlib.sha256((out / "model.chkp").read_bytes()).hexdigest(),
    }
    _write_atomic(out / "run.json", json.dumps(run, indent=1, sort_keys=True) + "\n")
    print(f"wrote {out / 'model.chkp'} and {out / 'run.json'}")
    return 0


def _load_model(path, cand_sets: dict[str, CandidateSet], allow_reset: bool):
    params, meta = checkpoint.load(path, {c: cs.digest() for c, cs in cand_sets.items()},
                                   allow_head_reset=allow_reset)
    if meta.get("heads_reset"):
        log.warning("candidate sets differ from training; heads reset to gain 1, bias 0")
    return params, meta


def _heads_for(params, cs: CandidateSet):
    return params if len(params.gains) == len(cs) else params.with_heads(len(cs))


def _preview(pixels: np.ndarray) -> np.ndarray:
    m = pixels.max()
    x = np.clip(pixels / m, 0, 1) if m > 0 else pixels
    return np.rint(255 * x ** (1 / 2.2)).astype(np.uint8)


def cmd_infer(args) -> int:
    if args.image:
        pixels = read_image(args.image)
        stem = Path(args.image).stem
        rec = LabeledImage.from_pixels(pixels, [1, 1, 1], args.camera or "", stem,
                                       saturation_level=args.saturation_level,
                                       black_level=args.black_level, image_id=stem)
        records, has_truth = [rec], False
    else:
        records = _select_split(load_manifest(args.manifest), args.folds, args.holdout, want_test=True)
        has_truth = True
    per_cam = _by_camera(records)
    cand_sets = _resolve_candidates(args.candidates, list(per_cam))
    params, _ = _load_model(args.checkpoint, cand_sets, args.allow_head_reset)
    emit = Path(args.emit_corrected) if args.emit_corrected else None
    if emit:
        emit.mkdir(parents=True, exist_ok=True)
    rows = []
    for cam, recs in per_cam.items():
        model = _heads_for(params, cand_sets[cam])
        for rec in recs:
            t0 = time.perf_counter()
            sample = Sample.from_record(rec)
            res, _ = predict(model, sample, cand_sets[cam], use_heads=True)
            ms = 1000 * (time.perf_counter() - t0)
            row = {
                "image_id": rec.image_id,
                "camera_id": cam,
                "estimate": [float(v) for v in res.estimate],
                "top5": [{"index": i, "prob": p} for i, p in res.top(5)],
            }
            if has_truth:
                row["angular_error_deg"] = float(angular_error(res.estimate, rec.truth))
            if args.time:
                row["ms"] = round(ms, 3)
            rows.append(row)
            if emit:
                img = rec.image
                corrected = apply_correction(LinearImage(img.pixels - rec.black_level, img.mask),
                                             res.estimate).pixels
                write_chyp(emit / f"{rec.image_id}.chyp", corrected)
                import cv2

                cv2.imwrite(str(emit / f"{rec.image_id}_preview.png"), _preview(corrected)[:, :, ::-1])
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if args.report:
        _write_atomic(Path(args.report), text)
    else:
        sys.stdout.write(text)
    if args.time and rows:
        ms = [r["ms"] for r in rows]
        print(f"per-image time: median {np.median(ms):.1f} ms, mean {np.mean(ms):.1f} ms",
              file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    records = _load_records(args.manifest)
    folds = FoldSpec.from_json(Path(args.folds).read_text()) if args.folds else None
    if args.cross_validate:
        if folds is None:
            raise UsageError("--cross-validate needs --folds")
        report = cross_validate(records, folds, _config_from_args(args))
    else:
        records = _select_split(records, args.folds, args.holdout, want_test=True)
        if args.estimator:
            estimate = ESTIMATORS[args.estimator]
            est = {id(r): estimate(r.image) for r in records}
        else:
            if not args.checkpoint:
                raise UsageError("give --checkpoint or --estimator")
            per_cam = _by_camera(records)
            cand_sets = _resolve_candidates(args.candidates, list(per_cam))
            params, _ = _load_model(args.checkpoint, cand_sets, args.allow_head_reset)
            est = {}
            for cam, recs in per_cam.items():
                model = _heads_for(params, cand_sets[cam])
                for r in recs:
                    est[id(r)] = predict(model, Sample.from_record(r), cand_sets[cam], use_heads=True)[0].estimate
        rows = []
        for r in records:
            row = {"image_id": r.image_id, "camera_id": r.camera_id,
                   "estimate": [float(v) for v in est[id(r)]],
                   "angular_error_deg": float(angular_error(est[id(r)], r.truth))}
            if folds is not None:
                row["fold"] = folds.fold_of(r)
            rows.append(row)
        if not rows:
            raise UsageError("nothing to evaluate")
        report = build_report(rows)
        if folds is not None:
            report["per_fold"] = {str(f): s.as_dict() for f, s in fold_stats(rows).items()}
    for cam, s in report["per_camera"].items():
        print(f"{cam}: " + "  ".join(f"{k} {s[k]:.3f}" for k in ("mean", "median", "trimean", "best25", "worst25")))
    if "per_fold" in report:
        for f, s in report["per_fold"].items():
            print(f"fold {f}: median {s['median']:.3f} (n={s['n']})")
    if len(report["per_camera"]) > 1:
        s = report["summary"]
        print("geometric mean: " + "  ".join(f"{k} {s[k]:.3f}" for k in ("mean", "median", "trimean", "best25", "worst25")))
    if args.summary:
        write_report(report, args.summary, args.csv)
    return 0


def cmd_synth(args) -> int:
    if args.scenes < 1 or args.cameras < 1:
        raise UsageError("--scenes and --cameras must be >= 1")
    manifest = write_synth_dataset(args.out, args.scenes, args.cameras, args.seed, tuple(args.patches))
    print(f"wrote {args.scenes * args.cameras} images and {manifest}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--k", type=int, help="candidate count (k_candidates)")
    p.add_argument("--multi-device", action="store_true",
                   help="one shared CNN, per-camera candidates, heads fixed at (1, 0)")
    p.add_argument("--train-conv1", action="store_true", help="do not freeze the first conv layer")


def _split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--folds", help="FoldSpec JSON")
    p.add_argument("--holdout", type=int, help="fold index held out for testing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chyp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("candidates", help="fit per-camera candidate illuminants")
    p.add_argument("manifest")
    p.add_argument("--method", choices=("kmeans", "uniform", "gmm"), default="kmeans")
    p.add_argument("--k", type=int, default=120, help="candidates (uniform: a square number)")
    p.add_argument("--components", type=int, default=10, help="GMM components")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--camera", help="only this camera")
    p.add_argument("--out", required=True, help="output .json (one camera) or directory")
    _split_flags(p)
    p.set_defaults(func=cmd_candidates)

    p = sub.add_parser("train", help="train the likelihood CNN")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--candidates", nargs="+", required=True,
                   help="candidate files or directories of <camera>.json")
    p.add_argument("--pretrained", help="checkpoint whose CNN is fine-tuned")
    p.add_argument("--conv1-weights", help="npz with w (3,3,3,64) and b (64,)")
    p.add_argument("--out", required=True, help="output directory")
    _train_flags(p)
    _split_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="estimate illuminants")
    p.add_argument("checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--image")
    p.add_argument("--candidates", nargs="+", required=True)
    p.add_argument("--camera", help="camera id of --image")
    p.add_argument("--black-level", type=float, default=0.0)
    p.add_argument("--saturation-level", type=float, default=65535.0)
    p.add_argument("--report", help="JSONL output (default stdout)")
    p.add_argument("--emit-corrected", help="directory for corrected images")
    p.add_argument("--allow-head-reset", action="store_true",
                   help="accept candidate sets the model was not trained with")
    p.add_argument("--time", action="store_true", help="report per-image milliseconds")
    _split_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="angular-error statistics")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--estimator", choices=sorted(ESTIMATORS))
    p.add_argument("--candidates", nargs="+")
    p.add_argument("--allow-head-reset", action="store_true")
    p.add_argument("--cross-validate", action="store_true",
                   help="fit candidates and train per fold (uses the training flags)")
    p.add_argument("--summary", help="JSON report path")
    p.add_argument("--csv", help="per-image CSV path")
    _split_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic multi-camera dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--cameras", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patches", type=int, nargs=2, default=list(SYNTH_PATCHES),
                   metavar=("MIN", "MAX"), help="Mondrian patch count range")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"chyp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ChypError, OSError, ValueError) as exc:
        print(f"chyp {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
