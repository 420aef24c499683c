"""Finite-difference oracle for the network + posterior composite.

The loss is recomputed with a forward pass written here from scratch (no
code shared with ``chyp.network``), so it checks the hand-written backward
pass independently.

ReLU networks are only piecewise smooth.  With 64x64 inputs a perturbation
of h = 1e-4 in a conv weight moves thousands of pre-activations and some of
them cross zero, so the plain central difference straddles a kink and stops
being a derivative estimate.  ``numeric`` detects this by comparing the ReLU
sign patterns at both stencil points with the base point.  When any unit
flips it re-evaluates the stencil with the gates held at the base pattern,
which is the central difference of the smooth piece the base point lies in
(the function the analytic gradient differentiates).  Callers get a flag so
they can report how often that happened.
"""

import numpy as np

from chyp.core import angular_error
from chyp.posterior import estimate_illuminant


def conv3x3(x, w, b):
    n, h, wd, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[3])) + b
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("nhwc,co->nhwo", xp[:, dy : dy + h, dx : dx + wd], w[dy, dx])
    return out


def relu(z):
    return np.where(z > 0, z, 0.0)


def gate(z, base, frozen):
    """ReLU, or multiplication by the base-point gates when ``frozen``."""
    if frozen:
        return z * base, False
    on = z > 0
    return np.where(on, z, 0.0), bool(np.any(on != base))


def trunk(t, a1):
    a2 = relu(a1 @ t["conv2.w"][0, 0] + t["conv2.b"])
    a3 = relu(a2 @ t["conv3.w"][0, 0] + t["conv3.b"])
    return a3.mean(axis=(1, 2))


def head(t, pooled):
    h1 = relu(pooled @ t["fc1.w"] + t["fc1.b"])
    h2 = relu(h1 @ t["fc2.w"] + t["fc2.b"])
    return (h2 @ t["fc3.w"] + t["fc3.b"])[:, 0]


def loss_from_logits(z, cands, truth):
    return np.radians(angular_error(estimate_illuminant(cands, z).estimate, truth))


def loss_from_scores(scores, gains, biases, cands, truth):
    return loss_from_logits(gains * scores + biases, cands, truth)


class CompositeLoss:
    """Loss of the full pipeline as a function of one coordinate at a time.

    Names are network tensor names, ``head.gain``, ``head.bias`` or
    ``logits``.  A perturbation only recomputes what it can change: a conv2
    column updates one channel of ``a2`` and feeds a rank-one change into
    conv3; a conv3 column updates one pooled feature.
    """

    def __init__(self, params, xs, cands, truth):
        self.t = {k: v.copy() for k, v in params.tensors.items()}
        self.gains = params.gains.copy()
        self.biases = params.biases.copy()
        self.xs, self.cands, self.truth = xs, cands, truth
        t = self.t
        self.z1 = conv3x3(xs, t["conv1.w"], t["conv1.b"])
        self.a1 = relu(self.z1)
        self.z2 = self.a1 @ t["conv2.w"][0, 0] + t["conv2.b"]
        self.a2 = relu(self.z2)
        self.z3 = self.a2 @ t["conv3.w"][0, 0] + t["conv3.b"]
        self.pooled = relu(self.z3).mean(axis=(1, 2))
        self.on = {"1": self.z1 > 0, "2": self.z2 > 0, "3": self.z3 > 0}
        zh1 = self.pooled @ t["fc1.w"] + t["fc1.b"]
        self.on_h1 = zh1 > 0
        self.on_h2 = (relu(zh1) @ t["fc2.w"] + t["fc2.b"]) > 0
        self.scores = head(t, self.pooled)
        self.logits = self.gains * self.scores + self.biases

    def _head(self, t, pooled, frozen):
        h1, c1 = gate(pooled @ t["fc1.w"] + t["fc1.b"], self.on_h1, frozen)
        h2, c2 = gate(h1 @ t["fc2.w"] + t["fc2.b"], self.on_h2, frozen)
        return (h2 @ t["fc3.w"] + t["fc3.b"])[:, 0], c1 or c2

    def _pooled(self, name, idx, delta, frozen):
        t = self.t
        layer, kind = name[4], name[-1]
        if layer == "1":
            t = dict(t)
            t[name] = t[name].copy()
            t[name][idx] += delta
            a1, c1 = gate(conv3x3(self.xs, t["conv1.w"], t["conv1.b"]), self.on["1"], frozen)
            a2, c2 = gate(a1 @ t["conv2.w"][0, 0] + t["conv2.b"], self.on["2"], frozen)
            a3, c3 = gate(a2 @ t["conv3.w"][0, 0] + t["conv3.b"], self.on["3"], frozen)
            return a3.mean(axis=(1, 2)), c1 or c2 or c3
        o = idx[-1]
        src = self.a1 if layer == "2" else self.a2
        step = delta * (src[..., idx[2]] if kind == "w" else 1.0)
        if layer == "3":
            a3o, crossed = gate(self.z3[..., o] + step, self.on["3"][..., o], frozen)
            pooled = self.pooled.copy()
            pooled[:, o] = a3o.mean(axis=(1, 2))
            return pooled, crossed
        a2o, c2 = gate(self.z2[..., o] + step, self.on["2"][..., o], frozen)
        diff = a2o - self.a2[..., o]
        pooled, c3 = self.pooled.copy(), False
        hw = diff[0].size
        for i in range(len(diff)):
            moved = diff[i] != 0
            z3 = self.z3[i][moved] + diff[i][moved][:, None] * t["conv3.w"][0, 0, o]
            a3, c = gate(z3, self.on["3"][i][moved], frozen)
            pooled[i] += (a3.sum(axis=0) - relu(self.z3[i][moved]).sum(axis=0)) / hw
            c3 = c3 or c
        return pooled, c2 or c3

    def value(self, name, idx, delta=0.0, frozen=False):
        """Loss with one coordinate shifted by ``delta``; also whether a gate flipped."""
        if name == "logits":
            z = self.logits.copy()
            z[idx] += delta
            return loss_from_logits(z, self.cands, self.truth), False
        if name in ("head.gain", "head.bias"):
            gains, biases = self.gains.copy(), self.biases.copy()
            (gains if name == "head.gain" else biases)[idx] += delta
            return loss_from_scores(self.scores, gains, biases, self.cands, self.truth), False
        if name.startswith("fc"):
            t = dict(self.t)
            t[name] = t[name].copy()
            t[name][idx] += delta
            pooled, crossed = self.pooled, False
        else:
            t = self.t
            pooled, crossed = self._pooled(name, idx, delta, frozen)
        scores, c_head = self._head(t, pooled, frozen)
        loss = loss_from_scores(scores, self.gains, self.biases, self.cands, self.truth)
        return loss, crossed or c_head

    def numeric(self, name, idx, h=1e-4):
        """Central difference; returns ``(derivative, crossed_a_kink)``."""
        up, c_up = self.value(name, idx, h)
        down, c_down = self.value(name, idx, -h)
        if not (c_up or c_down):
            return (up - down) / (2 * h), False
        up, _ = self.value(name, idx, h, frozen=True)
        down, _ = self.value(name, idx, -h, frozen=True)
        return (up - down) / (2 * h), True


def sample_indices(shape, k, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def rel_error(a, n, floor=1e-10):
    return abs(a - n) / max(abs(a), abs(n), floor)


def composite_check(seed, n_cands=4, size=64, coords=25, h=1e-4, freeze_conv1=True):
    """Compare analytic and numeric gradients of the composite loss for one seed.

    Returns ``(worst, kinks)``: worst relative error per tensor (plus
    ``logits``) and the number of sampled coordinates whose stencil crossed
    a ReLU kink.
    """
    from chyp.core import normalize_illuminant
    from chyp.data import candidate_inputs
    from chyp.network import backward, forward_batch, init_params
    from chyp.posterior import log_posterior, loss_and_grad

    rng = np.random.default_rng(seed)
    p = init_params(seed, n_cands, freeze_conv1=freeze_conv1, dtype=np.float64)
    for k in p.tensors:
        if k.endswith(".b"):
            p.tensors[k] = rng.normal(0, 0.1, size=p.tensors[k].shape)
    p.gains = rng.uniform(0.5, 2.0, n_cands)
    p.biases = rng.normal(0, 0.5, n_cands)
    cands = normalize_illuminant(rng.uniform(0.2, 1.0, (n_cands, 3)))
    truth = normalize_illuminant(rng.uniform(0.2, 1.0, 3))
    xs = candidate_inputs(rng.uniform(0.01, 1.0, (size, size, 3)), cands)

    scores, trace = forward_batch(p, xs)
    result = estimate_illuminant(cands, log_posterior(scores, p.gains, p.biases))
    _, dz = loss_and_grad(result, truth, cands)
    grads = backward(p, trace, p.gains * dz)
    grads["head.gain"] = dz * scores
    grads["head.bias"] = dz
    grads["logits"] = dz

    oracle = CompositeLoss(p, xs, cands, truth)
    worst, kinks = {}, 0
    for name in p.trainable_names() + ["head.gain", "head.bias", "logits"]:
        w = 0.0
        for idx in sample_indices(grads[name].shape, coords, rng):
            num, crossed = oracle.numeric(name, idx, h)
            kinks += crossed
            w = max(w, rel_error(grads[name][idx], num))
        worst[name] = w
    return worst, kinks
