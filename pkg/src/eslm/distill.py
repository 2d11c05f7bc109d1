"""Risk-selected knowledge distillation from a frozen teacher.

Tokens are chosen from the *student's* own scores; the selected positions
get ``lam * KL(teacher_rho || student_rho) + (1 - lam) * CE`` where
``_rho`` denotes softmax of logits / rho.  No rho**2 rescaling is applied.
"""

from __future__ import annotations

import numpy as np

from eslm import numcore as nc
from eslm.config import Mode, TrainConfig
from eslm.model import ModelParams, TokenBatch, forward_logits, masked_mean_loss, token_stats
from eslm.numcore import Tensor
from eslm.risk import cvar
from eslm.trainer import FlopsLedger, StepStats, TrainingDiverged, choose_mask, score_values, _groups


def kl_per_token(student_logits: Tensor, teacher_logits: np.ndarray, temperature: float = 1.0) -> Tensor:
    """``KL(softmax(t / rho) || softmax(s / rho))`` per position; gradient only reaches the student."""
    t = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    if t.shape != student_logits.shape:
        raise ValueError(f"teacher logits {t.shape} do not match student logits {student_logits.shape}")
    with nc.no_grad():
        t_logp = nc.row_log_softmax(Tensor._wrap(t / t.dtype.type(temperature))).data
    p_t = np.exp(t_logp)
    neg_entropy_t = (p_t * t_logp).sum(axis=-1)
    s_logp = nc.row_log_softmax(nc.scale(student_logits, 1.0 / temperature))
    cross = nc.sum(nc.mul(s_logp, Tensor._wrap(p_t.astype(s_logp.data.dtype))), axis=-1)
    return nc.add(Tensor._wrap(neg_entropy_t.astype(s_logp.data.dtype)), nc.neg(cross))


def kd_loss(student_logits: Tensor, teacher_logits, targets, mask, lam: float = 0.5,
            temperature: float = 1.0, ce: Tensor | None = None) -> Tensor:
    """Mean over selected tokens of ``lam * KL + (1 - lam) * CE``.

    ``ce`` may carry per-token losses already computed from ``student_logits``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    if ce is None:
        ce = nc.neg(nc.pick(nc.row_log_softmax(student_logits), np.asarray(targets)))
    kl = kl_per_token(student_logits, teacher_logits, temperature)
    per_token = nc.add(nc.scale(kl, lam), nc.scale(ce, 1.0 - lam))
    return masked_mean_loss(per_token, mask)


def teacher_logits(teacher: ModelParams, batch: TokenBatch) -> np.ndarray:
    with nc.no_grad():
        return forward_logits(teacher, batch).data


def distill_step(student: ModelParams, teacher: ModelParams, batch: TokenBatch, cfg: TrainConfig,
                 ledger: FlopsLedger, alpha: float | None = None, rng=None):
    """One micro-batch: student-side selection, teacher forward, combined loss, backward."""
    alpha = cfg.risk.alpha if alpha is None else alpha
    for t in teacher.tensors.values():
        t.requires_grad = False
    t_logits = teacher_logits(teacher, batch)
    student.zero_grad()
    student.requires_grad_(True)
    try:
        with nc.Tape() as tape:
            logits = forward_logits(student, batch)
            losses, ent = token_stats(logits, batch.targets)
            raw = score_values(losses.data, ent.data, cfg.risk.kind)
            mask, tau = choose_mask(raw, cfg, alpha, rng, _groups(batch))
            loss = kd_loss(logits, t_logits, batch.targets, mask, cfg.kd.lam, cfg.kd.temperature, ce=losses)
    except nc.NonFiniteError as exc:
        raise TrainingDiverged(f"distill_step: {exc}") from exc
    tape.backward(loss)
    grads = student.grads()
    student.zero_grad()
    ledger.credit(batch.n_tokens, mask.selected_count, teacher_forward=batch.n_tokens)
    stats = StepStats(
        loss=loss.item(),
        clm_loss=float(losses.data.mean(dtype=np.float64)),
        selected_count=mask.selected_count,
        n_tokens=batch.n_tokens,
        tau=tau,
        cvar=cvar(raw, alpha if cfg.mode is not Mode.CLM else cfg.risk.alpha),
        alpha=alpha,
    )
    return grads, stats
