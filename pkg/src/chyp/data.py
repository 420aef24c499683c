"""Dataset ingestion, thumbnail preprocessing, synthetic scenes and CV folds."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import LinearImage, normalize_illuminant
from .errors import (
    AllMasked,
    BadIlluminant,
    BlackLevelExceedsSaturation,
    MissingImageFile,
    NegativeComponent,
    ParseError,
    TooFewScenes,
    ZeroVector,
)

log = logging.getLogger(__name__)

THUMB_SIZE = 64
CLIP_FRACTION = 0.95
LOG_EPS = 1e-4
CHYP_MAGIC = b"CHYP"
MANIFEST_FIELDS = (
    "path",
    "camera_id",
    "scene_id",
    "gt_r",
    "gt_g",
    "gt_b",
    "black_level",
    "saturation_level",
)


# ---------------------------------------------------------------------------
# image files


def write_chyp(path: str | Path, pixels: np.ndarray) -> None:
    """Write an ``H x W x C`` array as little-endian float32 planes."""
    pixels = np.asarray(pixels)
    h, w, c = pixels.shape
    planar = np.ascontiguousarray(np.moveaxis(pixels, 2, 0), dtype="<f4")
    with open(path, "wb") as f:
        f.write(CHYP_MAGIC + struct.pack("<III", h, w, c))
        f.write(planar.tobytes())


def read_chyp(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != CHYP_MAGIC:
            raise ValueError(f"{path}: not a CHYP file")
        h, w, c = struct.unpack("<III", header[4:])
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError(f"{path}: expected {h * w * c} floats, found {data.size}")
    return np.moveaxis(data.reshape(c, h, w), 0, 2).astype(np.float64)


def read_image(path: str | Path) -> np.ndarray:
    """Load a CHYP or 16-bit PNG file as float64 ``H x W x 3`` raw values."""
    path = Path(path)
    if not path.exists():
        raise MissingImageFile(str(path))
    if path.suffix.lower() == ".png":
        import cv2

        img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if img is None:
            raise ValueError(f"{path}: unreadable PNG")
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        return img[:, :, 2::-1].astype(np.float64)  # BGR(A) -> RGB
    return read_chyp(path)


def write_png16(path: str | Path, pixels: np.ndarray) -> None:
    import cv2

    rgb = np.clip(np.rint(pixels), 0, 65535).astype(np.uint16)
    cv2.imwrite(str(path), rgb[:, :, ::-1])


def read_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingImageFile(str(path))
    import cv2

    m = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if m is None:
        raise ValueError(f"{path}: unreadable mask")
    if m.ndim == 3:
        m = m.max(axis=2)
    return m > 0


# ---------------------------------------------------------------------------
# records


@dataclass
class LabeledImage:
    """One training/evaluation record.  Pixels load lazily from ``path`` when
    ``pixels`` is not supplied."""

    truth: np.ndarray
    camera_id: str
    scene_id: str
    black_level: np.ndarray = field(default_factory=lambda: np.zeros(3))
    saturation_level: float = 1.0
    path: Path | None = None
    mask_path: Path | None = None
    image_id: str = ""
    _image: LinearImage | None = field(default=None, repr=False)

    def __post_init__(self):
        self.black_level = np.broadcast_to(
            np.asarray(self.black_level, dtype=np.float64), (3,)
        ).copy()
        if not self.scene_id:
            raise ValueError("scene_id must be non-empty")
        if not self.image_id:
            self.image_id = self.path.stem if self.path is not None else self.scene_id

    @property
    def image(self) -> LinearImage:
        if self._image is None:
            if self.path is None:
                raise MissingImageFile(f"{self.image_id}: no pixels and no path")
            pixels = read_image(self.path)
            mask = read_mask(self.mask_path) if self.mask_path is not None else None
            self._image = LinearImage(pixels, mask)
        return self._image

    @classmethod
    def from_pixels(cls, pixels, truth, camera_id, scene_id, mask=None, **kw) -> "LabeledImage":
        rec = cls(normalize_illuminant(truth), camera_id, scene_id, **kw)
        rec._image = LinearImage(np.asarray(pixels, dtype=np.float64), mask)
        return rec


def _parse_truth(values, line: int) -> np.ndarray:
    try:
        v = np.array([float(x) for x in values])
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad illuminant value: {exc}", line) from exc
    if not np.all(np.isfinite(v)):
        raise BadIlluminant(f"line {line}: non-finite illuminant {v}")
    try:
        unit = normalize_illuminant(v)
    except (ZeroVector, NegativeComponent) as exc:
        raise BadIlluminant(f"line {line}: {exc}") from exc
    norm = float(np.linalg.norm(v))
    if 1e-9 < abs(norm - 1.0) < 1e-3:
        log.warning("line %d: illuminant norm %.6f re-normalized", line, norm)
    return unit


def _parse_black(value, line: int) -> np.ndarray:
    if isinstance(value, (list, tuple)):
        parts = value
    else:
        parts = str(value).replace(";", " ").replace(",", " ").split()
    try:
        b = np.array([float(x) for x in parts])
    except ValueError as exc:
        raise ParseError(f"bad black_level {value!r}", line) from exc
    if b.size not in (1, 3):
        raise ParseError(f"black_level needs 1 or 3 values, got {b.size}", line)
    return np.broadcast_to(b, (3,)).copy()


def _rows(path: Path):
    """Yield ``(line_number, dict)`` from a CSV or JSON-lines manifest."""
    text = path.read_text()
    if path.suffix.lower() in (".jsonl", ".ndjson", ".json"):
        for i, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                yield i, json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), i) from exc
        return
    reader = csv.DictReader(text.splitlines())
    for row in reader:
        yield reader.line_num, row


def load_manifest(path: str | Path, eager: bool = False) -> list[LabeledImage]:
    """Read a CSV or JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    for line, row in _rows(path):
        missing = [k for k in MANIFEST_FIELDS if row.get(k) in (None, "")]
        if missing:
            raise ParseError(f"missing field(s) {', '.join(missing)}", line)
        truth = _parse_truth([row["gt_r"], row["gt_g"], row["gt_b"]], line)
        try:
            sat = float(row["saturation_level"])
        except ValueError as exc:
            raise ParseError(f"bad saturation_level {row['saturation_level']!r}", line) from exc
        img_path = base / str(row["path"])
        if not img_path.exists():
            raise MissingImageFile(f"line {line}: {img_path}")
        mask_path = row.get("mask_path") or None
        if mask_path:
            mask_path = base / str(mask_path)
            if not mask_path.exists():
                raise MissingImageFile(f"line {line}: {mask_path}")
        rec = LabeledImage(
            truth,
            str(row["camera_id"]),
            str(row["scene_id"]),
            _parse_black(row["black_level"], line),
            sat,
            img_path,
            mask_path,
            image_id=str(row.get("image_id") or img_path.stem),
        )
        if eager:
            rec.image  # noqa: B018 - force the load
        records.append(rec)
    return records


def write_manifest(path: str | Path, records: list[LabeledImage]) -> None:
    """Write records as CSV (``.csv``) or JSON lines; image paths made relative."""
    path = Path(path)
    rows = []
    for r in records:
        row = {
            "path": _rel(r.path, path.parent),
            "camera_id": r.camera_id,
            "scene_id": r.scene_id,
            "gt_r": repr(float(r.truth[0])),
            "gt_g": repr(float(r.truth[1])),
            "gt_b": repr(float(r.truth[2])),
            "black_level": " ".join(repr(float(b)) for b in r.black_level),
            "saturation_level": repr(float(r.saturation_level)),
            "mask_path": _rel(r.mask_path, path.parent) if r.mask_path else "",
            "image_id": r.image_id,
        }
        rows.append(row)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else list(MANIFEST_FIELDS))
            w.writeheader()
            w.writerows(rows)
    else:
        with open(path, "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")


def _rel(p: Path | None, base: Path) -> str:
    if p is None:
        return ""
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# preprocessing


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` matrix averaging each output cell's footprint."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def area_resize(pixels: np.ndarray, size: int = THUMB_SIZE) -> np.ndarray:
    """Box-filter resize of an ``H x W x C`` array to ``size x size``."""
    rh = _area_weights(pixels.shape[0], size)
    rw = _area_weights(pixels.shape[1], size)
    return np.einsum("ih,hwc,jw->ijc", rh, pixels, rw, optimize=True)


def clip_saturated(pixels: np.ndarray, black_level, saturation_level: float) -> np.ndarray:
    """Black-level subtraction (clamped at 0) and the 95% saturation clip."""
    black = np.asarray(black_level, dtype=np.float64)
    if np.any(saturation_level <= black):
        raise BlackLevelExceedsSaturation(
            f"saturation level {saturation_level} <= black level {black}"
        )
    out = np.maximum(pixels - black, 0.0)
    return np.minimum(out, CLIP_FRACTION * (saturation_level - black))


def linear_thumbnail(rec: LabeledImage, size: int = THUMB_SIZE) -> np.ndarray:
    """Steps up to the resize: black level, clip, mask, area-average to ``size``."""
    img = rec.image
    if img.mask is not None and not img.mask.any():
        raise AllMasked(f"{rec.image_id}: every pixel is masked")
    px = clip_saturated(img.pixels, rec.black_level, rec.saturation_level)
    if img.mask is not None:
        px = px * img.mask[:, :, None]
    return area_resize(px, size)


def log_normalize(x: np.ndarray, axes=(-3, -2, -1)) -> np.ndarray:
    """Divide by the max (per item over ``axes``) then ``ln(x + eps)``."""
    m = np.max(x, axis=axes, keepdims=True)
    if np.any(m <= 0):
        raise AllMasked("thumbnail has no positive signal")
    return np.log(x / m + LOG_EPS)


def preprocess(rec: LabeledImage) -> np.ndarray:
    """Network-ready ``64 x 64 x 3`` thumbnail of the uncorrected image."""
    return log_normalize(linear_thumbnail(rec))


def candidate_inputs(thumb: np.ndarray, candidates: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Correct a linear thumbnail by every candidate: returns ``(n, 64, 64, 3)``."""
    cands = np.asarray(candidates, dtype=np.float64)
    x = thumb[None, :, :, :] / cands[:, None, None, :]
    return log_normalize(x).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# synthetic scenes


def synth_reflectance(seed: int, n_patches: int, size: int = THUMB_SIZE,
                      achromatic_mean: bool = False) -> np.ndarray:
    """Mondrian of axis-aligned rectangles, reflectances uniform in [0.05, 0.95]^3.

    Patch 0 covers the whole canvas so every pixel has a reflectance.  With
    ``achromatic_mean`` each channel is rescaled so the channel means agree.
    """
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    rng = np.random.default_rng(seed)
    refl = np.empty((size, size, 3))
    colors = rng.uniform(0.05, 0.95, size=(n_patches, 3))
    refl[:] = colors[0]
    lo, hi = max(1, size // 16), max(2, size // 2)
    for color in colors[1:]:
        h, w = rng.integers(lo, hi + 1, size=2)
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        refl[y : y + h, x : x + w] = color
    if achromatic_mean:
        means = refl.reshape(-1, 3).mean(axis=0)
        refl = refl * (means.mean() / means)
    return refl


def synth_scene(seed: int, n_patches: int, illuminant, camera_id: str = "synthetic",
                scene_id: str | None = None, achromatic_mean: bool = False) -> LabeledImage:
    """Render a Mondrian under ``illuminant`` with the diagonal model ``y = r * l``."""
    ell = normalize_illuminant(illuminant)
    refl = synth_reflectance(seed, n_patches, achromatic_mean=achromatic_mean)
    return LabeledImage.from_pixels(
        refl * ell,
        ell,
        camera_id,
        scene_id or f"scene-{seed}",
        saturation_level=1.0,
        image_id=f"{camera_id}-{scene_id or seed}",
    )


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSpec:
    n_folds: int
    assignment: dict[str, int]

    def fold_of(self, rec: LabeledImage | str) -> int:
        """Fold of a record or of a bare scene id."""
        return self.assignment[rec if isinstance(rec, str) else rec.scene_id]

    def split(self, dataset, fold: int):
        """``(train, test)`` lists for held-out ``fold``."""
        train = [r for r in dataset if self.assignment[r.scene_id] != fold]
        test = [r for r in dataset if self.assignment[r.scene_id] == fold]
        return train, test

    def to_json(self) -> str:
        return json.dumps(
            {"n_folds": self.n_folds, "assignment": dict(sorted(self.assignment.items()))},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldSpec":
        d = json.loads(text)
        return cls(int(d["n_folds"]), {str(k): int(v) for k, v in d["assignment"].items()})


def make_folds(dataset, n_folds: int, seed: int) -> FoldSpec:
    """Shuffle scene ids and deal them round-robin so a scene never straddles folds."""
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    scenes = sorted({r.scene_id for r in dataset})
    if len(scenes) < n_folds:
        raise TooFewScenes(f"{len(scenes)} scenes for {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(scenes))
    return FoldSpec(n_folds, {scenes[j]: i % n_folds for i, j in enumerate(order)})


# ---------------------------------------------------------------------------
# synthetic multi-camera datasets


@dataclass(frozen=True)
class SynthCamera:
    """Chroma-space Gaussian over illuminants plus per-channel sensor gains."""

    camera_id: str
    mean: np.ndarray  # (rg, bg)
    cov: np.ndarray  # 2 x 2
    gains: np.ndarray  # (r, g, b)

    def draw_illuminant(self, rng: np.random.Generator) -> np.ndarray:
        while True:
            p = rng.multivariate_normal(self.mean, self.cov)
            if np.all(p > 0.05):
                break
        return normalize_illuminant(self.gains * np.array([p[0], 1.0, p[1]]))


def synth_camera(seed: int, index: int) -> SynthCamera:
    """Camera ``index`` of a synthetic rig; independent of how many cameras exist."""
    rng = np.random.default_rng([seed, 7919, index])
    mean = np.array([0.65, 0.6]) + rng.uniform(-0.15, 0.15, size=2)
    angle = np.radians(-45.0 + rng.uniform(-15, 15))
    axis = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    sd = np.array([rng.uniform(0.08, 0.12), rng.uniform(0.02, 0.03)])
    cov = axis @ np.diag(sd**2) @ axis.T
    gains = np.array([rng.uniform(0.8, 1.25), 1.0, rng.uniform(0.8, 1.25)])
    return SynthCamera(f"cam{index}", mean, cov, gains)


SYNTH_PATCHES = (96, 192)  # rectangles per scene; dense enough that the scene pins the illuminant


def synth_records(n_scenes: int, n_cameras: int, seed: int,
                  patches: tuple[int, int] = SYNTH_PATCHES) -> list[LabeledImage]:
    """In-memory synthetic dataset: every scene is captured by every camera."""
    if n_scenes < 1 or n_cameras < 1:
        raise ValueError("need at least one scene and one camera")
    cams = [synth_camera(seed, m) for m in range(n_cameras)]
    records = []
    for m, cam in enumerate(cams):
        for s in range(n_scenes):
            srng = np.random.default_rng([seed, 31, s])
            refl_seed = int(srng.integers(2**31))
            n_patches = int(srng.integers(patches[0], patches[1] + 1))
            ell = cam.draw_illuminant(np.random.default_rng([seed, 104729, m, s]))
            refl = synth_reflectance(refl_seed, n_patches)
            scene_id = f"scene{s:04d}"
            records.append(
                LabeledImage.from_pixels(
                    (refl * ell).astype(np.float32).astype(np.float64),
                    ell,
                    cam.camera_id,
                    scene_id,
                    saturation_level=1.0,
                    image_id=f"{cam.camera_id}_{scene_id}",
                )
            )
    return records


def write_synth_dataset(out_dir: str | Path, n_scenes: int, n_cameras: int, seed: int,
                        patches: tuple[int, int] = SYNTH_PATCHES) -> Path:
    """Write CHYP images and ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = synth_records(n_scenes, n_cameras, seed, patches)
    for rec in records:
        rec.path = out / "images" / f"{rec.image_id}.chyp"
        write_chyp(rec.path, rec.image.pixels)
    manifest = out / "manifest.csv"
    write_manifest(manifest, records)
    return manifest
