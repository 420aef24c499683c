"""Shallow likelihood CNN with hand-written forward and backward passes.

Architecture (input ``64 x 64 x 3`` log-image, NHWC layout)::

    conv 3x3, 3 -> 64, zero pad 1   ReLU
    conv 1x1, 64 -> 64              ReLU
    conv 1x1, 64 -> 128             ReLU
    global average pool -> 128
    dropout (inverted, training only)
    fc 128 -> 64                    ReLU
    fc 64 -> 32                     ReLU
    fc 32 -> 1                      linear  (log-likelihood score)

Per-candidate affine heads (gain, bias) live alongside the CNN weights in
``NetworkParams`` because they are optimized jointly; they are applied by
``chyp.posterior.log_posterior``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadWeightFile, NonFiniteActivation, TraceMismatch

LAYER_SHAPES: dict[str, tuple[int, ...]] = {
    "conv1.w": (3, 3, 3, 64),
    "conv1.b": (64,),
    "conv2.w": (1, 1, 64, 64),
    "conv2.b": (64,),
    "conv3.w": (1, 1, 64, 128),
    "conv3.b": (128,),
    "fc1.w": (128, 64),
    "fc1.b": (64,),
    "fc2.w": (64, 32),
    "fc2.b": (32,),
    "fc3.w": (32, 1),
    "fc3.b": (1,),
}
CONV1 = ("conv1.w", "conv1.b")
HEADS = ("head.gain", "head.bias")
DEFAULT_DROPOUT = 0.5


@dataclass
class NetworkParams:
    """CNN weights plus per-candidate gain/bias heads.

    ``frozen`` names tensors that never receive gradient (conv1 by default).
    """

    tensors: dict[str, np.ndarray]
    gains: np.ndarray
    biases: np.ndarray
    frozen: frozenset[str] = frozenset(CONV1)
    seed: int = 0

    @property
    def n_candidates(self) -> int:
        return len(self.gains)

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["fc3.w"].dtype

    def trainable_names(self) -> list[str]:
        return [k for k in LAYER_SHAPES if k not in self.frozen]

    def count(self, names) -> int:
        return int(sum(self.tensors[k].size for k in names))

    def trainable_count(self) -> int:
        """Weights updated by the optimizer, excluding the per-candidate heads."""
        return self.count(self.trainable_names())

    def total_count(self) -> int:
        """All CNN weights including frozen ones, excluding the heads."""
        return self.count(LAYER_SHAPES)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.gains.copy(),
            self.biases.copy(),
            self.frozen,
            self.seed,
        )

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            self.gains.astype(dtype),
            self.biases.astype(dtype),
            self.frozen,
            self.seed,
        )

    def with_heads(self, n_candidates: int) -> "NetworkParams":
        """Same CNN weights with fresh identity heads of a new length."""
        out = self.copy()
        out.gains = np.ones(n_candidates, dtype=self.dtype)
        out.biases = np.zeros(n_candidates, dtype=self.dtype)
        return out


def init_params(
    seed: int,
    n_candidates: int,
    conv1_weights: str | Path | None = None,
    freeze_conv1: bool = True,
    dtype=np.float32,
) -> NetworkParams:
    """He-normal initialization; conv1 optionally loaded from an ``.npz`` file.

    The weight file must hold arrays ``w`` with shape ``(3, 3, 3, 64)`` (HWIO)
    and ``b`` with shape ``(64,)``.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in LAYER_SHAPES.items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[:-1]))
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    if conv1_weights is not None:
        try:
            with np.load(conv1_weights) as f:
                w, b = np.asarray(f["w"]), np.asarray(f["b"])
        except (OSError, KeyError, ValueError) as exc:
            raise BadWeightFile(f"cannot read conv1 weights from {conv1_weights}: {exc}") from exc
        if w.shape != LAYER_SHAPES["conv1.w"] or b.shape != LAYER_SHAPES["conv1.b"]:
            raise BadWeightFile(
                f"conv1 weight shapes {w.shape}, {b.shape} != "
                f"{LAYER_SHAPES['conv1.w']}, {LAYER_SHAPES['conv1.b']}"
            )
        tensors["conv1.w"], tensors["conv1.b"] = w.astype(np.float64), b.astype(np.float64)
    params = NetworkParams(
        tensors,
        np.ones(n_candidates),
        np.zeros(n_candidates),
        frozenset(CONV1) if freeze_conv1 else frozenset(),
        seed,
    )
    return params.astype(dtype)


@dataclass
class ForwardTrace:
    """Activations cached by ``forward_batch`` for ``backward``.

    Spatial activations are flattened to ``(N * H * W, C)``.
    """

    params_id: int
    shape: tuple[int, int, int]  # N, H, W
    cols: np.ndarray | None  # im2col patches, kept only if conv1 or input grads are needed
    a1: np.ndarray
    a2: np.ndarray
    m3: np.ndarray  # conv3 ReLU mask as 0/1 floats
    pooled: np.ndarray
    dropout_mask: np.ndarray | None
    h1: np.ndarray
    h2: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.shape[0]


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 3, 3, c), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy, dx, :] = xp[:, dy : dy + h, dx : dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, h, w, c = shape
    dcols = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + h, dx : dx + w, :] += dcols[:, :, :, dy, dx, :]
    return dxp[:, 1:-1, 1:-1, :]


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout multipliers: 0 with probability ``p``, else ``1 / (1 - p)``."""
    keep = 1.0 - p
    return (rng.random(shape) < keep).astype(dtype) / np.dtype(dtype).type(keep)


def head_forward(params: NetworkParams, pooled: np.ndarray, dropout_mask=None):
    """FC stack on pooled features; returns ``(scores, h1, h2)``."""
    t = params.tensors
    d = pooled if dropout_mask is None else pooled * dropout_mask
    h1 = np.maximum(d @ t["fc1.w"] + t["fc1.b"], 0)
    h2 = np.maximum(h1 @ t["fc2.w"] + t["fc2.b"], 0)
    scores = (h2 @ t["fc3.w"] + t["fc3.b"])[:, 0]
    return scores, h1, h2


def conv_forward(params: NetworkParams, xs: np.ndarray, keep_cols: bool = False):
    """Convolutional trunk; returns ``(pooled, cols, a1, a2, m3)``.

    ``m3`` is the 0/1 ReLU activity mask of conv3, not its activations.
    """
    t = params.tensors
    n, h, w, _ = xs.shape
    cols = _im2col(xs)
    a1 = cols @ t["conv1.w"].reshape(27, 64)
    a1 += t["conv1.b"]
    np.maximum(a1, 0, out=a1)
    a2 = a1 @ t["conv2.w"].reshape(64, 64)
    a2 += t["conv2.b"]
    np.maximum(a2, 0, out=a2)
    a3 = a2 @ t["conv3.w"].reshape(64, 128)
    a3 += t["conv3.b"]
    np.maximum(a3, 0, out=a3)
    pooled = np.matmul(np.ones(h * w, dtype=a3.dtype), a3.reshape(n, h * w, 128)) / (h * w)
    # only the ReLU pattern of conv3 is needed downstream; reuse the buffer
    m3 = np.greater(a3, 0, out=a3)
    return pooled, (cols if keep_cols else None), a1, a2, m3


def forward_batch(
    params: NetworkParams,
    xs: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_p: float = DEFAULT_DROPOUT,
    keep_cols: bool = False,
) -> tuple[np.ndarray, ForwardTrace]:
    """Score a batch ``xs`` of shape ``(N, H, W, 3)``; one scalar per item."""
    xs = np.asarray(xs, dtype=params.dtype)
    if xs.ndim != 4 or xs.shape[0] == 0 or xs.shape[3] != 3:
        raise ValueError(f"expected non-empty (N, H, W, 3) batch, got {xs.shape}")
    keep_cols = keep_cols or not params.frozen.issuperset(CONV1)
    pooled, cols, a1, a2, m3 = conv_forward(params, xs, keep_cols)

    mask = None
    if training and dropout_p > 0:
        if rng is None:
            raise ValueError("training mode needs an rng for dropout")
        mask = dropout_mask(pooled.shape, dropout_p, rng, params.dtype)
    scores, h1, h2 = head_forward(params, pooled, mask)
    if not np.all(np.isfinite(scores)):
        raise NonFiniteActivation("non-finite network output; training has diverged")
    trace = ForwardTrace(id(params), xs.shape[:3], cols, a1, a2, m3, pooled, mask, h1, h2)
    return scores, trace


def forward(params, x, training=False, rng=None, dropout_p=DEFAULT_DROPOUT):
    scores, trace = forward_batch(params, np.asarray(x)[None], training, rng, dropout_p)
    return float(scores[0]), trace


def backward(
    params: NetworkParams,
    trace: ForwardTrace,
    dl_dscores,
    input_grad: bool = False,
) -> dict[str, np.ndarray]:
    """Reverse pass; returns a gradient for every CNN tensor.

    Frozen tensors get zero arrays.  With ``input_grad`` the key ``"input"``
    holds ``dL/dx`` (requires the forward pass to have kept im2col patches).
    """
    if trace.params_id != id(params):
        raise TraceMismatch("trace was produced with a different parameter object")
    g = np.asarray(dl_dscores, dtype=params.dtype).reshape(-1)
    if g.shape[0] != trace.batch_size:
        raise TraceMismatch(f"{g.shape[0]} output grads for a batch of {trace.batch_size}")
    t = params.tensors
    n, h, w = trace.shape
    hw = h * w
    grads: dict[str, np.ndarray] = {}

    # fc3 (linear)
    g = g[:, None]
    grads["fc3.w"] = trace.h2.T @ g
    grads["fc3.b"] = g.sum(axis=0)
    # fc2
    g = (g @ t["fc3.w"].T) * (trace.h2 > 0)
    grads["fc2.w"] = trace.h1.T @ g
    grads["fc2.b"] = g.sum(axis=0)
    # fc1
    g = (g @ t["fc2.w"].T) * (trace.h1 > 0)
    dropped = trace.pooled if trace.dropout_mask is None else trace.pooled * trace.dropout_mask
    grads["fc1.w"] = dropped.T @ g
    grads["fc1.b"] = g.sum(axis=0)
    g = g @ t["fc1.w"].T
    if trace.dropout_mask is not None:
        g = g * trace.dropout_mask
    # global average pool + conv3
    # dL/dz3 = m3 * gp broadcast over pixels; never materialized
    gp = g / hw
    m3 = trace.m3.reshape(n, hw, 128)
    a2 = trace.a2.reshape(n, hw, 64)
    dw3 = np.zeros((64, 128), dtype=params.dtype)
    for i in range(n):
        dw3 += (a2[i].T @ m3[i]) * gp[i]
    grads["conv3.w"] = dw3.reshape(LAYER_SHAPES["conv3.w"])
    grads["conv3.b"] = (np.matmul(np.ones(hw, dtype=params.dtype), m3) * gp).sum(axis=0)
    # conv2
    w3 = t["conv3.w"].reshape(64, 128)
    g2 = np.matmul(m3, gp[:, :, None] * w3.T[None]).reshape(n * hw, 64)
    np.multiply(g2, trace.a2 > 0, out=g2)
    grads["conv2.w"] = (trace.a1.T @ g2).reshape(LAYER_SHAPES["conv2.w"])
    grads["conv2.b"] = g2.sum(axis=0)

    conv1_frozen = params.frozen.issuperset(CONV1)
    if conv1_frozen and not input_grad:
        grads["conv1.w"] = np.zeros_like(t["conv1.w"])
        grads["conv1.b"] = np.zeros_like(t["conv1.b"])
    else:
        if trace.cols is None:
            raise TraceMismatch("forward pass did not keep im2col patches")
        g1 = g2 @ t["conv2.w"].reshape(64, 64).T
        g1 *= trace.a1 > 0
        grads["conv1.w"] = (trace.cols.T @ g1).reshape(LAYER_SHAPES["conv1.w"])
        grads["conv1.b"] = g1.sum(axis=0)
        if input_grad:
            dcols = g1 @ t["conv1.w"].reshape(27, 64).T
            grads["input"] = _col2im(dcols, (n, h, w, 3))
    for name in params.frozen:
        grads[name] = np.zeros_like(t[name])
    return grads
