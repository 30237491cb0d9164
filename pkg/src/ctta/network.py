"""Dense feed-forward classifier with hand-written reverse-mode gradients.

All network state lives in one flat float64 vector (``ParamVector``) whose
``Layout`` maps named layer tensors onto slices.  Normalization running
statistics ride along as non-trainable entries, so a parameter vector is a
self-contained snapshot of a network: forwards, gradients, importance
scores and moving averages all operate on the same flat representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import numpy.typing as npt

from .errors import NumericError

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

# Softmax outputs are clamped below at this floor before any log.
PROB_FLOOR = 1e-12
# Variance epsilon inside the batch-stat normalization layer.
NORM_EPS = 1e-5

FORWARD_MODES = ("train-stats", "frozen-stats", "recompute-stats")
ACTIVATIONS = ("relu", "tanh")
NORM_KINDS = ("none", "batch-stat")
LABEL_RULES = ("argmax-pseudo", "soft-expectation")

Probs = FloatArray
Logits = FloatArray


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of the classifier: sizes, per-layer normalization, activation."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    normalization: tuple[str, ...] | str = "none"
    activation: str = "relu"

    def __post_init__(self):
        hidden = tuple(int(h) for h in self.hidden_dims)
        object.__setattr__(self, "hidden_dims", hidden)
        if isinstance(self.normalization, str):
            object.__setattr__(self, "normalization", (self.normalization,) * len(hidden))
        else:
            object.__setattr__(self, "normalization", tuple(self.normalization))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not hidden:
            raise ValueError("hidden_dims must be non-empty")
        if any(h < 1 for h in hidden):
            raise ValueError(f"zero-size hidden layer in {hidden}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.normalization) != len(hidden):
            raise ValueError("normalization must give one entry per hidden layer")
        for n in self.normalization:
            if n not in NORM_KINDS:
                raise ValueError(f"unknown normalization {n!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def has_norm(self) -> bool:
        return any(n == "batch-stat" for n in self.normalization)


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Layout:
    """Ordered map from layer tensor names to slices of the flat vector."""

    entries: tuple[LayoutEntry, ...]

    @property
    def total_size(self) -> int:
        last = self.entries[-1]
        return last.offset + last.size

    def entry(self, name: str) -> LayoutEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def slice(self, name: str) -> slice:
        e = self.entry(name)
        return slice(e.offset, e.offset + e.size)

    def trainable_mask(self) -> npt.NDArray[np.bool_]:
        mask = np.zeros(self.total_size, dtype=bool)
        for e in self.entries:
            if e.trainable:
                mask[e.offset:e.offset + e.size] = True
        return mask

    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)


def build_layout(spec: NetworkSpec) -> Layout:
    entries = []
    offset = 0

    def add(name, shape, trainable=True):
        nonlocal offset
        entries.append(LayoutEntry(name, tuple(shape), offset, trainable))
        offset += int(np.prod(shape))

    fan_in = spec.input_dim
    for i, h in enumerate(spec.hidden_dims):
        add(f"layer{i}.W", (fan_in, h))
        add(f"layer{i}.b", (h,))
        if spec.normalization[i] == "batch-stat":
            add(f"layer{i}.norm_scale", (h,))
            add(f"layer{i}.norm_shift", (h,))
            add(f"layer{i}.norm_mean", (h,), trainable=False)
            add(f"layer{i}.norm_var", (h,), trainable=False)
        fan_in = h
    add("out.W", (fan_in, spec.num_classes))
    add("out.b", (spec.num_classes,))
    return Layout(tuple(entries))


@dataclass
class ParamVector:
    """Flat view of one network's parameters.

    Treat instances as immutable: operations that change parameters
    allocate a fresh values array, so vectors can be shared freely
    (e.g. a state keeping a reference to a previous step's student).
    """

    values: FloatArray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be 1-D")
        if self.values.size != self.layout.total_size:
            raise ValueError(
                f"values length {self.values.size} != layout size {self.layout.total_size}"
            )

    def view(self, name: str) -> FloatArray:
        e = self.layout.entry(name)
        return self.values[e.offset:e.offset + e.size].reshape(e.shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    @property
    def nbytes(self) -> int:
        return int(self.values.nbytes)

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass
class Batch:
    """One slice of the data stream: inputs, optional labels, provenance tag.

    Labels are only ever consumed for source pretraining and metric
    computation, never by the adaptation steps themselves.
    """

    inputs: FloatArray
    labels: IntArray | None = None
    domain_tag: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("batch inputs must be a non-empty 2-D array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ValueError("labels length must match batch size")

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


def init_network(spec: NetworkSpec, seed: int) -> ParamVector:
    """Deterministic scaled-uniform init: W ~ U(+-sqrt(6/(fan_in+fan_out))).

    Biases and normalization shifts start at zero, normalization scales at
    one, running statistics at mean 0 / variance 1.
    """
    layout = build_layout(spec)
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.total_size)
    for e in layout.entries:
        block = values[e.offset:e.offset + e.size]
        if e.name.endswith(".W"):
            fan_in, fan_out = e.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            block[:] = rng.uniform(-bound, bound, e.size)
        elif e.name.endswith(".norm_scale") or e.name.endswith(".norm_var"):
            block[:] = 1.0
        # biases, norm_shift and norm_mean stay zero
    return ParamVector(values, layout)


# ---------------------------------------------------------------------------
# forward / backward internals


@dataclass
class _HiddenCache:
    x_in: FloatArray          # layer input [B, fan_in]
    preact: FloatArray        # x_in @ W + b
    normalized: bool
    batch_stats: bool         # True when mu/var came from the batch
    mu: FloatArray | None
    var: FloatArray | None
    inv_std: FloatArray | None
    xhat: FloatArray | None   # (preact - mu) * inv_std
    y: FloatArray             # post-norm pre-activation
    h_out: FloatArray         # activation(y)


@dataclass
class _ForwardCache:
    hidden: list
    h_last: FloatArray
    logits: FloatArray
    p: FloatArray             # exact softmax rows
    probs: FloatArray         # floored softmax rows
    logp_floored: FloatArray
    unclamped: FloatArray     # 1.0 where the floor was inactive


def _activation(y: FloatArray, kind: str) -> FloatArray:
    if kind == "relu":
        return np.maximum(y, 0.0)
    return np.tanh(y)


def _activation_deriv(cache: _HiddenCache, kind: str) -> FloatArray:
    if kind == "relu":
        return (cache.y > 0.0).astype(np.float64)
    return 1.0 - cache.h_out * cache.h_out


def _forward_pass(params: ParamVector, spec: NetworkSpec, X: FloatArray, mode: str) -> _ForwardCache:
    if mode not in FORWARD_MODES:
        raise ValueError(f"unknown forward mode {mode!r}")
    hidden = []
    h = X
    for i in range(len(spec.hidden_dims)):
        W = params.view(f"layer{i}.W")
        b = params.view(f"layer{i}.b")
        a = h @ W + b
        if spec.normalization[i] == "batch-stat":
            if mode == "frozen-stats":
                mu = params.view(f"layer{i}.norm_mean")
                var = params.view(f"layer{i}.norm_var")
                batch_stats = False
            else:
                # train-stats and recompute-stats both normalize by the
                # current batch; stored statistics are left untouched.
                mu = a.mean(axis=0)
                var = a.var(axis=0)
                batch_stats = True
            inv_std = 1.0 / np.sqrt(var + NORM_EPS)
            xhat = (a - mu) * inv_std
            y = params.view(f"layer{i}.norm_scale") * xhat + params.view(f"layer{i}.norm_shift")
            cache = _HiddenCache(h, a, True, batch_stats, mu, var, inv_std, xhat, y, _activation(y, spec.activation))
        else:
            cache = _HiddenCache(h, a, False, False, None, None, None, None, a, _activation(a, spec.activation))
        hidden.append(cache)
        h = cache.h_out
    logits = h @ params.view("out.W") + params.view("out.b")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    probs = np.maximum(p, PROB_FLOOR)
    unclamped = (p > PROB_FLOOR).astype(np.float64)
    return _ForwardCache(hidden, h, logits, p, probs, np.log(probs), unclamped)


def _logp_to_logits_grad(cache: _ForwardCache, g_logp: FloatArray) -> FloatArray:
    # d logp_c / d z_k = delta_ck - p_k
    return g_logp - cache.p * g_logp.sum(axis=1, keepdims=True)


def _backward(params: ParamVector, spec: NetworkSpec, cache: _ForwardCache, g_logits: FloatArray) -> FloatArray:
    """Batch-summed gradient of sum_b <g_logits[b], z_b> w.r.t. the flat vector.

    In frozen-stats mode the stored running statistics act as constants in
    the forward, but they are still layout entries, so their true gradients
    are reported as well.
    """
    layout = params.layout
    grad = np.zeros(layout.total_size)
    g = g_logits
    grad[layout.slice("out.W")] = (cache.h_last.T @ g).ravel()
    grad[layout.slice("out.b")] = g.sum(axis=0)
    g_h = g @ params.view("out.W").T
    for i in reversed(range(len(spec.hidden_dims))):
        hc = cache.hidden[i]
        g_y = g_h * _activation_deriv(hc, spec.activation)
        if hc.normalized:
            gamma = params.view(f"layer{i}.norm_scale")
            grad[layout.slice(f"layer{i}.norm_scale")] = (g_y * hc.xhat).sum(axis=0)
            grad[layout.slice(f"layer{i}.norm_shift")] = g_y.sum(axis=0)
            g_xhat = g_y * gamma
            if hc.batch_stats:
                B = hc.preact.shape[0]
                centered = hc.preact - hc.mu
                g_var = (g_xhat * centered).sum(axis=0) * (-0.5) * hc.inv_std**3
                g_mu = -(g_xhat.sum(axis=0)) * hc.inv_std + g_var * (-2.0) * centered.mean(axis=0)
                g_a = g_xhat * hc.inv_std + g_var * (2.0 / B) * centered + g_mu / B
                # stored statistics were not used: their gradient is zero
            else:
                g_a = g_xhat * hc.inv_std
                grad[layout.slice(f"layer{i}.norm_mean")] = -(g_xhat.sum(axis=0)) * hc.inv_std
                grad[layout.slice(f"layer{i}.norm_var")] = (g_xhat * hc.xhat).sum(axis=0) * (-0.5) * hc.inv_std**2
        else:
            g_a = g_y
        grad[layout.slice(f"layer{i}.W")] = (hc.x_in.T @ g_a).ravel()
        grad[layout.slice(f"layer{i}.b")] = g_a.sum(axis=0)
        g_h = g_a @ params.view(f"layer{i}.W").T
    return grad


def _backward_persample_squares(params: ParamVector, spec: NetworkSpec, cache: _ForwardCache,
                                g_logits: FloatArray) -> FloatArray:
    """Sum over samples of the squared per-sample gradient, in one batched pass.

    Row b of ``g_logits`` is treated as the upstream gradient of an
    independent per-sample objective.  Valid only when the forward kept
    samples independent (frozen statistics), which makes the per-layer
    reductions exact: e.g. for a linear layer the per-sample weight
    gradient is the outer product x_b d_b, so the squared sum collapses
    to (X^2)^T (D^2).
    """
    layout = params.layout
    acc = np.zeros(layout.total_size)
    d = g_logits
    acc[layout.slice("out.W")] = ((cache.h_last**2).T @ (d**2)).ravel()
    acc[layout.slice("out.b")] = (d**2).sum(axis=0)
    g_h = d @ params.view("out.W").T
    for i in reversed(range(len(spec.hidden_dims))):
        hc = cache.hidden[i]
        if hc.batch_stats:
            raise ValueError("per-sample gradients require frozen statistics")
        g_y = g_h * _activation_deriv(hc, spec.activation)
        if hc.normalized:
            gamma = params.view(f"layer{i}.norm_scale")
            acc[layout.slice(f"layer{i}.norm_scale")] = ((g_y * hc.xhat)**2).sum(axis=0)
            acc[layout.slice(f"layer{i}.norm_shift")] = (g_y**2).sum(axis=0)
            g_xhat = g_y * gamma
            acc[layout.slice(f"layer{i}.norm_mean")] = (g_xhat**2).sum(axis=0) * hc.inv_std**2
            acc[layout.slice(f"layer{i}.norm_var")] = ((g_xhat * hc.xhat)**2).sum(axis=0) * 0.25 * hc.inv_std**4
            g_a = g_xhat * hc.inv_std
        else:
            g_a = g_y
        acc[layout.slice(f"layer{i}.W")] = ((hc.x_in**2).T @ (g_a**2)).ravel()
        acc[layout.slice(f"layer{i}.b")] = (g_a**2).sum(axis=0)
        g_h = g_a @ params.view(f"layer{i}.W").T
    return acc


def _check_batch(spec: NetworkSpec, batch: Batch):
    if batch.inputs.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch width {batch.inputs.shape[1]} != spec input_dim {spec.input_dim}"
        )
    if not np.isfinite(batch.inputs).all():
        raise ValueError("batch contains non-finite input values")


# ---------------------------------------------------------------------------
# public operations


def forward(params: ParamVector, spec: NetworkSpec, batch: Batch, mode: str = "frozen-stats") -> Probs:
    """Class probabilities for a batch; rows sum to 1 (floored at PROB_FLOOR).

    ``frozen-stats`` normalizes by the stored running statistics,
    ``train-stats`` and ``recompute-stats`` by the current batch's
    statistics.  The stored statistics are never mutated here; use
    :func:`commit_norm_stats` to write new ones.
    """
    _check_batch(spec, batch)
    return _forward_pass(params, spec, batch.inputs, mode).probs


def _ce_upstream(cache: _ForwardCache, targets: FloatArray, class_average: bool) -> tuple[float, FloatArray]:
    B, C = targets.shape
    scale = 1.0 / (C * B) if class_average else 1.0 / B
    loss = float(-(targets * cache.logp_floored).sum() * scale)
    g_logp = -targets * scale * cache.unclamped
    return loss, _logp_to_logits_grad(cache, g_logp)


def loss_and_grad(params: ParamVector, spec: NetworkSpec, batch: Batch, target_probs: FloatArray,
                  aux: tuple[float, ParamVector] | None = None,
                  mode: str = "train-stats") -> tuple[float, ParamVector]:
    """Averaged cross-entropy against target probabilities, plus optional aux term.

    The per-sample loss is -(1/C) sum_c t_c log y_c and the batch loss is
    its mean; ``aux`` is an already-weighted (value, gradient) pair that is
    added verbatim.  Returns the exact reverse-mode gradient in the same
    layout as ``params``.
    """
    _check_batch(spec, batch)
    targets = np.asarray(target_probs, dtype=np.float64)
    if targets.shape != (batch.size, spec.num_classes):
        raise ValueError(
            f"target shape {targets.shape} != ({batch.size}, {spec.num_classes})"
        )
    if not np.isfinite(targets).all():
        raise ValueError("NaN or Inf in target probabilities")
    cache = _forward_pass(params, spec, batch.inputs, mode)
    loss, g_logits = _ce_upstream(cache, targets, class_average=True)
    grad = _backward(params, spec, cache, g_logits)
    if aux is not None:
        aux_value, aux_grad = aux
        if aux_grad.layout != params.layout:
            raise ValueError("aux gradient layout does not match params")
        loss = loss + float(aux_value)
        grad = grad + aux_grad.values
    if not math.isfinite(loss):
        raise NumericError("loss_ce", f"batch {batch.domain_tag or '<untagged>'}")
    if not np.isfinite(grad).all():
        raise NumericError("grad", f"batch {batch.domain_tag or '<untagged>'}")
    return loss, ParamVector(grad, params.layout)


def _persample_upstream(cache: _ForwardCache, label_rule: str) -> FloatArray:
    """Upstream gradient rows at the logits for per-sample log-prob objectives."""
    if label_rule not in LABEL_RULES:
        raise ValueError(f"unknown label rule {label_rule!r}")
    B, C = cache.p.shape
    if label_rule == "argmax-pseudo":
        g_logp = np.zeros((B, C))
        g_logp[np.arange(B), cache.probs.argmax(axis=1)] = 1.0
        g_logp *= cache.unclamped
    else:
        # Probability-weighted sum of per-class log-prob gradients.  By the
        # zero-score identity this is ~0 for every sample (sum_c p_c
        # (e_c - p) = 0); kept as the literal alternative reading.
        g_logp = cache.probs * cache.unclamped
    return _logp_to_logits_grad(cache, g_logp)


def per_sample_logprob_grads(params: ParamVector, spec: NetworkSpec, batch: Batch,
                             label_rule: str = "argmax-pseudo") -> list[ParamVector]:
    """Gradient of each sample's pseudo-label log-likelihood, one backward per sample.

    Normalization always uses the stored running statistics so that sample
    b's gradient does not depend on the rest of the batch.
    """
    _check_batch(spec, batch)
    grads = []
    for b in range(batch.size):
        cache = _forward_pass(params, spec, batch.inputs[b:b + 1], "frozen-stats")
        g_logits = _persample_upstream(cache, label_rule)
        flat = _backward(params, spec, cache, g_logits)
        if not np.isfinite(flat).all():
            raise NumericError("per_sample_grad", f"sample {b}")
        grads.append(ParamVector(flat, params.layout))
    return grads


def persample_squared_grad_sum(params: ParamVector, spec: NetworkSpec, batch: Batch,
                               label_rule: str = "argmax-pseudo") -> FloatArray:
    """sum_b g_b**2 of per-sample log-prob gradients, computed in one batched pass."""
    _check_batch(spec, batch)
    cache = _forward_pass(params, spec, batch.inputs, "frozen-stats")
    g_logits = _persample_upstream(cache, label_rule)
    acc = _backward_persample_squares(params, spec, cache, g_logits)
    if not np.isfinite(acc).all():
        raise NumericError("per_sample_grad", "batched squared-gradient pass")
    return acc


def commit_norm_stats(params: ParamVector, spec: NetworkSpec, inputs: FloatArray) -> ParamVector:
    """Write the given data's normalization statistics into a fresh vector.

    This is the explicit commit step: a train-stats forward over ``inputs``
    is replayed layer by layer and each normalization layer's batch mean
    and variance over the full data are stored as the new running
    statistics.  Parameters are otherwise unchanged.
    """
    if not spec.has_norm:
        return params.copy()
    cache = _forward_pass(params, spec, np.asarray(inputs, dtype=np.float64), "train-stats")
    out = params.copy()
    for i in range(len(spec.hidden_dims)):
        hc = cache.hidden[i]
        if hc.normalized:
            out.values[out.layout.slice(f"layer{i}.norm_mean")] = hc.mu
            out.values[out.layout.slice(f"layer{i}.norm_var")] = hc.var
    return out
