"""Adaptation state machines: the parameter-selective mean teacher and baselines.

Each method consumes one unlabeled batch per step and emits predictions.
The selective method combines two mechanisms on top of a plain mean
teacher: a Fisher-weighted quadratic anchor on the student (selective
distillation) and a Fisher-quantile mask restricting which teacher entries
the moving average may update (selective EMA).
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError
from .fisher import FisherDiag, compute_mask, estimate_fisher_diag, student_regularizer
from .network import (
    Batch,
    FloatArray,
    NetworkSpec,
    ParamVector,
    Probs,
    _backward,
    _ce_upstream,
    _forward_pass,
    commit_norm_stats,
    forward,
    init_network,
    loss_and_grad,
)


@dataclass
class AdapterConfig:
    """Knobs of the adaptation loop.

    ``lam`` weights the student anchor term, ``xi`` sets the mask quantile,
    ``delta`` the teacher smoothing.  ``invert_mask`` flips which side of
    the quantile is frozen in the teacher; ``fisher_at`` picks the
    evaluation point of the student-side Fisher ("current" parameters on
    the cached previous batch, or the cached "previous" parameters);
    ``anchor`` selects the pull target ("previous" step or the "source"
    model).  ``optimizer`` is "adam" or "gd": with plain gradient descent
    the anchor term is a stiff quadratic (update overshoots whenever
    2*lam*lr*F_j > 1), so Adam's per-coordinate normalization is the
    default and "gd" is kept for analysis.
    """

    lam: float = 500.0
    xi: float = 0.03
    delta: float = 0.999
    learning_rate: float = 1e-3
    num_augs: int = 4
    aug_noise_scale: float = 0.1
    enable_sd: bool = True
    enable_sema: bool = True
    label_rule: str = "argmax-pseudo"
    invert_mask: bool = False
    fisher_at: str = "current"
    anchor: str = "previous"
    mask_scope: str = "global"
    forward_mode: str = "train-stats"
    optimizer: str = "adam"


@dataclass
class MeanTeacherState:
    """Paired student/teacher parameters plus the cached previous step.

    At step 0 student and teacher both equal the pretrained source
    parameters and the prev_* fields are absent.
    """

    student: ParamVector
    teacher: ParamVector
    prev_student: ParamVector | None = None
    prev_batch: Batch | None = None
    step: int = 0
    source: ParamVector | None = None
    opt_m: FloatArray | None = None   # Adam first moment
    opt_v: FloatArray | None = None   # Adam second moment


@dataclass
class StepDiagnostics:
    """Per-step record consumed by the harness exports."""

    loss_ce: float | None = None
    loss_stu: float | None = None
    loss_total: float | None = None
    mask_ones_fraction: float | None = None
    mask_bits: np.ndarray | None = None
    fisher_student_mean: float | None = None
    fisher_student_max: float | None = None
    fisher_teacher_mean: float | None = None
    fisher_teacher_max: float | None = None
    step_time_ms: float = 0.0
    param_bytes: int = 0


def init_adaptation_state(pretrained: ParamVector) -> MeanTeacherState:
    return MeanTeacherState(
        student=pretrained.copy(),
        teacher=pretrained.copy(),
        source=pretrained.copy(),
    )


def state_fingerprint(state: MeanTeacherState) -> str:
    """Stable hash of all parameter content; handy for no-mutation checks."""
    h = hashlib.sha256()
    for vec in (state.student, state.teacher, state.prev_student, state.source):
        h.update(b"\x00" if vec is None else vec.values.tobytes())
    for arr in (state.opt_m, state.opt_v):
        h.update(b"\x00" if arr is None else arr.tobytes())
    h.update(str(state.step).encode())
    return h.hexdigest()


def pretrain_source(spec: NetworkSpec, batches: list[Batch], epochs: int, lr: float,
                    seed: int) -> ParamVector:
    """Fit the source model by mini-batch gradient descent on labeled batches.

    Standard (non-averaged) cross-entropy, plain GD, batch order reshuffled
    each epoch; deterministic given the seed.  After the last epoch the
    normalization statistics of the full training data are committed so
    frozen-stats forwards see the source distribution.
    """
    if not batches:
        raise ValueError("no source batches given")
    for b in batches:
        if b.labels is None:
            raise ValueError("source batches must carry labels")
        if b.labels.min() < 0 or b.labels.max() >= spec.num_classes:
            raise ValueError("source labels out of range")
    params = init_network(spec, seed)
    rng = np.random.default_rng(seed)
    n_classes = spec.num_classes
    for _ in range(epochs):
        order = rng.permutation(len(batches))
        for bi in order:
            batch = batches[bi]
            onehot = np.zeros((batch.size, n_classes))
            onehot[np.arange(batch.size), batch.labels] = 1.0
            cache = _forward_pass(params, spec, batch.inputs, "train-stats")
            loss, g_logits = _ce_upstream(cache, onehot, class_average=False)
            if not np.isfinite(loss):
                raise NumericError("pretrain_loss", f"seed {seed}")
            grad = _backward(params, spec, cache, g_logits)
            mask = params.layout.trainable_mask()
            new_values = np.where(mask, params.values - lr * grad, params.values)
            if not np.isfinite(new_values).all():
                raise NumericError("pretrain_update", f"seed {seed}")
            params = ParamVector(new_values, params.layout)
    all_inputs = np.concatenate([b.inputs for b in batches], axis=0)
    return commit_norm_stats(params, spec, all_inputs)


def teacher_pseudolabel(state: MeanTeacherState, spec: NetworkSpec, batch: Batch,
                        cfg: AdapterConfig, rng: np.random.Generator) -> Probs:
    """Teacher probabilities averaged over augmented views of the batch.

    View 0 is the identity; the remaining num_augs - 1 views add Gaussian
    noise of scale aug_noise_scale.  Rows are renormalized to sum to 1.
    """
    if cfg.num_augs < 1:
        raise ValueError("num_augs must be >= 1")
    if cfg.num_augs == 1:
        return forward(state.teacher, spec, batch, cfg.forward_mode)
    total = forward(state.teacher, spec, batch, cfg.forward_mode)
    for _ in range(cfg.num_augs - 1):
        noisy = batch.inputs
        if cfg.aug_noise_scale > 0:
            noisy = batch.inputs + rng.normal(0.0, cfg.aug_noise_scale, batch.inputs.shape)
        view = Batch(noisy, domain_tag=batch.domain_tag)
        total = total + forward(state.teacher, spec, view, cfg.forward_mode)
    mean = total / cfg.num_augs
    return mean / mean.sum(axis=1, keepdims=True)


def _param_bytes(state: MeanTeacherState, *fishers: FisherDiag | None) -> int:
    total = 0
    for vec in (state.student, state.teacher, state.prev_student, state.source):
        if vec is not None:
            total += vec.nbytes
    for f in fishers:
        if f is not None:
            total += int(f.values.nbytes)
    return total


def psmt_step(state: MeanTeacherState, spec: NetworkSpec, batch: Batch,
              cfg: AdapterConfig, rng: np.random.Generator
              ) -> tuple[Probs, MeanTeacherState, StepDiagnostics]:
    """One adaptation step of the parameter-selective mean teacher.

    Order of operations: (i) teacher pseudo-labels from augmented views;
    (ii) student distillation loss against them; (iii) if selective
    distillation is armed and a previous batch is cached, add the
    Fisher-weighted quadratic anchor; (iv) plain gradient-descent update of
    the student; (v) teacher update by exponential moving average, masked
    so entries whose fresh Fisher value falls below the xi-quantile keep
    their old teacher values.  The returned predictions are the teacher's
    augmentation-averaged outputs.
    """
    t0 = time.perf_counter()
    pseudo = teacher_pseudolabel(state, spec, batch, cfg, rng)

    diag = StepDiagnostics()
    sd_active = cfg.enable_sd and cfg.lam > 0 and state.prev_batch is not None
    sd_armed = cfg.enable_sd and cfg.lam > 0

    loss_ce, grad_ce = loss_and_grad(state.student, spec, batch, pseudo, mode=cfg.forward_mode)

    fisher_stu = None
    if sd_active:
        eval_point = state.student if cfg.fisher_at == "current" else state.prev_student
        fisher_stu = estimate_fisher_diag(eval_point, spec, state.prev_batch, cfg.label_rule)
        anchor = state.prev_student if cfg.anchor == "previous" else state.source
        if anchor is None:
            raise ValueError(f"anchor {cfg.anchor!r} parameters are not available")
        loss_stu, reg_grad = student_regularizer(fisher_stu, state.student, anchor, 1.0)
        loss_total = loss_ce + cfg.lam * loss_stu
        grad_values = grad_ce.values + cfg.lam * reg_grad.values
        diag.fisher_student_mean = float(fisher_stu.values.mean())
        diag.fisher_student_max = float(fisher_stu.values.max())
    else:
        loss_stu = 0.0 if sd_armed else None
        loss_total = loss_ce
        grad_values = grad_ce.values

    if not np.isfinite(loss_total):
        raise NumericError("loss_stu" if sd_active else "loss_ce", f"step {state.step}")
    if not np.isfinite(grad_values).all():
        raise NumericError("grad", f"step {state.step}")

    trainable = state.student.layout.trainable_mask()
    if cfg.optimizer == "adam":
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        m = np.zeros_like(grad_values) if state.opt_m is None else state.opt_m
        v = np.zeros_like(grad_values) if state.opt_v is None else state.opt_v
        m = beta1 * m + (1.0 - beta1) * grad_values
        v = beta2 * v + (1.0 - beta2) * grad_values * grad_values
        t = state.step + 1
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        delta_values = cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        new_m, new_v = m, v
    elif cfg.optimizer == "gd":
        delta_values = cfg.learning_rate * grad_values
        new_m, new_v = state.opt_m, state.opt_v
    else:
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    new_student = ParamVector(
        np.where(trainable, state.student.values - delta_values, state.student.values),
        state.student.layout,
    )

    fisher_teacher = None
    if cfg.enable_sema:
        fisher_teacher = estimate_fisher_diag(new_student, spec, batch, cfg.label_rule)
        mask = compute_mask(fisher_teacher, cfg.xi, scope=cfg.mask_scope)
        bits = (1 - mask.bits) if cfg.invert_mask else mask.bits
        ema = cfg.delta * state.teacher.values + (1.0 - cfg.delta) * new_student.values
        new_teacher_values = np.where(bits.astype(bool), state.teacher.values, ema)
        diag.mask_ones_fraction = float(bits.mean())
        diag.mask_bits = bits
        diag.fisher_teacher_mean = float(fisher_teacher.values.mean())
        diag.fisher_teacher_max = float(fisher_teacher.values.max())
    else:
        new_teacher_values = cfg.delta * state.teacher.values + (1.0 - cfg.delta) * new_student.values

    new_state = MeanTeacherState(
        student=new_student,
        teacher=ParamVector(new_teacher_values, state.teacher.layout),
        prev_student=state.student,
        prev_batch=batch,
        step=state.step + 1,
        source=state.source,
        opt_m=new_m,
        opt_v=new_v,
    )

    diag.loss_ce = loss_ce
    diag.loss_stu = loss_stu
    diag.loss_total = loss_total
    diag.param_bytes = _param_bytes(new_state, fisher_stu, fisher_teacher)
    diag.step_time_ms = (time.perf_counter() - t0) * 1000.0
    return pseudo, new_state, diag


def plain_mt_step(state: MeanTeacherState, spec: NetworkSpec, batch: Batch,
                  cfg: AdapterConfig, rng: np.random.Generator
                  ) -> tuple[Probs, MeanTeacherState, StepDiagnostics]:
    """Unselective mean-teacher baseline: distillation loss only, EMA on all entries."""
    return psmt_step(state, spec, batch, replace(cfg, enable_sd=False, enable_sema=False), rng)


def source_only_step(state: MeanTeacherState, spec: NetworkSpec, batch: Batch) -> Probs:
    """Frozen source model: predict with stored statistics, change nothing."""
    return forward(state.student, spec, batch, "frozen-stats")


def bn_adapt_step(state: MeanTeacherState, spec: NetworkSpec, batch: Batch) -> Probs:
    """Batch-statistics baseline: normalization re-estimated from the current batch.

    Parameters stay frozen and no state is persisted across steps; batches
    of size one are rejected because their variance is degenerate.
    """
    if batch.size < 2:
        raise ValueError("bn_adapt needs batch size >= 2 (degenerate variance)")
    return forward(state.student, spec, batch, "recompute-stats")
