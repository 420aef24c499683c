"""End-to-end training: candidate correction, CNN scoring, soft-argmax loss, Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import network
from .candidates import CandidateSet
from .data import LabeledImage, candidate_inputs, linear_thumbnail
from .errors import ConfigError, MixedCameraBatch, NonFiniteLoss
from .network import NetworkParams
from .posterior import estimate_illuminant, log_posterior, loss_and_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    lr0: float = 5e-3
    lr_drop_epochs: tuple[int, ...] = (10, 50, 80)
    lr_drop_factor: float = 0.5
    k_candidates: int = 120
    dropout_p: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    multi_device: bool = False
    freeze_conv1: bool = True

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if not self.lr0 > 0:
            raise ConfigError("lr0: must be > 0")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p: must be in [0, 1)")
        if self.k_candidates < 1:
            raise ConfigError("k_candidates: must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``; a drop listed at N applies from epoch N on."""
    drops = sum(1 for e in config.lr_drop_epochs if e <= epoch)
    return config.lr0 * config.lr_drop_factor**drops


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(t) for k, t in tensors.items()},
            {k: np.zeros_like(t) for k, t in tensors.items()},
        )


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place Adam step with bias correction over the tensors named in ``grads``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params[name] -= step.astype(params[name].dtype, copy=False)


def _param_view(params: NetworkParams, heads: bool) -> dict[str, np.ndarray]:
    view = {k: params.tensors[k] for k in params.trainable_names()}
    if heads:
        view["head.gain"] = params.gains
        view["head.bias"] = params.biases
    return view


def new_adam(params: NetworkParams, multi_device: bool) -> AdamState:
    return AdamState.zeros_like(_param_view(params, heads=not multi_device))


@dataclass
class Sample:
    """A record with its cached linear thumbnail."""

    thumb: np.ndarray
    truth: np.ndarray
    camera_id: str
    image_id: str = ""

    @classmethod
    def from_record(cls, rec: LabeledImage) -> "Sample":
        return cls(linear_thumbnail(rec), rec.truth, rec.camera_id, rec.image_id)


def image_loss_and_grads(params: NetworkParams, sample: Sample, cands: np.ndarray,
                         training: bool, rng, dropout_p: float, use_heads: bool):
    """Loss (radians) for one image and gradients of every trainable tensor."""
    x = candidate_inputs(sample.thumb, cands, dtype=params.dtype)
    scores, trace = network.forward_batch(params, x, training, rng, dropout_p)
    s = scores.astype(np.float64)
    gains = params.gains.astype(np.float64) if use_heads else np.ones(len(s))
    biases = params.biases.astype(np.float64) if use_heads else np.zeros(len(s))
    z = log_posterior(s, gains, biases)
    result = estimate_illuminant(cands, z)
    loss, dz = loss_and_grad(result, sample.truth, cands)
    grads = network.backward(params, trace, gains * dz)
    if use_heads:
        grads["head.gain"] = dz * s
        grads["head.bias"] = dz
    return loss, grads, result


def train_step(params: NetworkParams, adam: AdamState, batch: list[Sample],
               cands: CandidateSet | np.ndarray, config: TrainConfig, rng: np.random.Generator,
               lr: float | None = None) -> float:
    """One Adam update on a single-camera batch; returns the mean loss in radians.

    ``params`` and ``adam`` are updated in place.
    """
    c = np.asarray(getattr(cands, "candidates", cands), dtype=np.float64)
    cams = {s.camera_id for s in batch}
    if len(cams) > 1:
        raise MixedCameraBatch(f"batch mixes cameras {sorted(cams)}")
    if cands is not None and isinstance(cands, CandidateSet) and cands.camera_id and cams:
        if cands.camera_id not in cams:
            raise MixedCameraBatch(f"candidates for {cands.camera_id} used on {sorted(cams)}")
    use_heads = not config.multi_device
    if use_heads and len(params.gains) != len(c):
        raise ValueError(f"{len(params.gains)} heads for {len(c)} candidates")
    view = _param_view(params, heads=use_heads)
    total = {k: np.zeros(v.shape, dtype=np.float64) for k, v in view.items()}
    losses = []
    for sample in batch:
        loss, grads, _ = image_loss_and_grads(
            params, sample, c, True, rng, config.dropout_p, use_heads
        )
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss on {sample.image_id}")
        losses.append(loss)
        for k in total:
            total[k] += grads[k]
    n = len(batch)
    grads = {k: (g / n).astype(view[k].dtype) for k, g in total.items()}
    adam_update(view, grads, adam, lr_at(config, 0) if lr is None else lr,
                config.beta1, config.beta2, config.adam_eps)
    for k, v in view.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteLoss(f"parameter {k} became non-finite")
    return float(np.mean(losses))


def _batches(samples: list[Sample], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    return [[samples[i] for i in order[j : j + batch_size]]
            for j in range(0, len(order), batch_size)]


def epoch_schedule(per_camera: dict[str, list[Sample]], batch_size: int,
                   rng: np.random.Generator) -> list[tuple[str, list[Sample]]]:
    """Round-robin over cameras, one camera per batch; shorter cameras cycle."""
    cams = sorted(per_camera)
    batches = {c: _batches(per_camera[c], batch_size, rng) for c in cams}
    longest = max(len(b) for b in batches.values())
    schedule = []
    for i in range(longest):
        for c in cams:
            schedule.append((c, batches[c][i % len(batches[c])]))
    return schedule


@dataclass
class History:
    train_loss_deg: list[float] = field(default_factory=list)
    val_median_deg: list[float | None] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def train(config: TrainConfig, datasets: dict[str, list], cand_sets: dict[str, CandidateSet],
          params: NetworkParams | None = None, validation: dict[str, list] | None = None,
          conv1_weights=None, progress=None) -> tuple[NetworkParams, History]:
    """Train from scratch (or from ``params``) on per-camera datasets.

    ``datasets`` values may be ``LabeledImage`` or pre-thumbnailed ``Sample``
    lists.  Multi-device mode keeps every head at gain 1, bias 0.
    """
    config.validate()
    missing = sorted(set(datasets) - set(cand_sets))
    if missing:
        raise ConfigError(f"no candidate set for camera {missing[0]}")
    if not config.multi_device and len(datasets) != 1:
        raise ConfigError("single-device training needs exactly one camera")
    samples = {c: _as_samples(v) for c, v in sorted(datasets.items())}
    val = {c: _as_samples(v) for c, v in sorted((validation or {}).items())}
    n_heads = len(next(iter(cand_sets[c] for c in samples)))
    if params is None:
        params = network.init_params(config.seed, n_heads, conv1_weights, config.freeze_conv1)
    elif len(params.gains) != n_heads:
        params = params.with_heads(n_heads)
    frozen_before = {k: params.tensors[k].copy() for k in params.frozen}
    adam = new_adam(params, config.multi_device)
    rng = np.random.default_rng(config.seed)
    history = History()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(config, epoch)
        losses = []
        for cam, batch in epoch_schedule(samples, config.batch_size, rng):
            losses.append(train_step(params, adam, batch, cand_sets[cam], config, rng, lr))
        if config.multi_device:
            assert np.all(params.gains == 1) and np.all(params.biases == 0)
        history.train_loss_deg.append(float(np.degrees(np.mean(losses))))
        history.lr.append(lr)
        history.val_median_deg.append(
            float(np.median(evaluate_errors(params, val, cand_sets, config.multi_device)))
            if val else None
        )
        history.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d lr %.2e loss %.3f deg val %s", epoch, lr,
                 history.train_loss_deg[-1], history.val_median_deg[-1])
        if progress is not None:
            progress(epoch, history)
    for k, before in frozen_before.items():
        assert np.array_equal(before, params.tensors[k]), f"frozen tensor {k} changed"
    return params, history


def _as_samples(items) -> list[Sample]:
    return [s if isinstance(s, Sample) else Sample.from_record(s) for s in items]


def predict(params: NetworkParams, sample: Sample, cands, use_heads: bool | None = None):
    """Eval-mode posterior for one sample."""
    c = np.asarray(getattr(cands, "candidates", cands), dtype=np.float64)
    if use_heads is None:
        use_heads = len(params.gains) == len(c)
    x = candidate_inputs(sample.thumb, c, dtype=params.dtype)
    scores, _ = network.forward_batch(params, x, training=False)
    s = scores.astype(np.float64)
    if use_heads:
        s = log_posterior(s, params.gains.astype(np.float64), params.biases.astype(np.float64))
    return estimate_illuminant(c, s), scores


def evaluate_errors(params, per_camera: dict[str, list], cand_sets, multi_device=False) -> list[float]:
    from .core import angular_error

    errs = []
    for cam, items in sorted(per_camera.items()):
        for s in _as_samples(items):
            res, _ = predict(params, s, cand_sets[cam], use_heads=not multi_device)
            errs.append(angular_error(res.estimate, s.truth))
    return errs


def pretrain_finetune(base, cand_sets: dict[str, CandidateSet] | CandidateSet, config: TrainConfig,
                      datasets: dict[str, list] | None = None, epochs: int | None = None,
                      validation=None, progress=None) -> tuple[NetworkParams, History]:
    """Carry the CNN of ``base`` over to a new candidate set and optionally fine-tune.

    ``base`` is a checkpoint path or ``NetworkParams``.  Heads are always
    re-initialized to gain 1, bias 0 at the new candidate count.  With no
    data or ``epochs=0`` this is training-free adaptation.
    """
    from . import checkpoint

    if not isinstance(base, NetworkParams):
        base, _ = checkpoint.load(base)
    if isinstance(cand_sets, CandidateSet):
        cand_sets = {cand_sets.camera_id: cand_sets}
    sizes = {len(c) for c in cand_sets.values()}
    if not config.multi_device and len(sizes) != 1:
        raise ConfigError("k_candidates: single-device fine-tuning needs one candidate count")
    params = base.with_heads(min(sizes))
    params.frozen = frozenset(network.CONV1) if config.freeze_conv1 else frozenset()
    n_epochs = config.epochs if epochs is None else epochs
    if not datasets or n_epochs == 0:
        return params, History()
    cfg = TrainConfig(**{**config.to_dict(), "epochs": n_epochs})
    return train(cfg, datasets, cand_sets, params=params, validation=validation, progress=progress)
