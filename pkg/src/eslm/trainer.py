"""Selective pretraining loop: score, threshold, mask, shaped loss, AdamW, evaluate."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from eslm import checkpoint as ckpt_io
from eslm import numcore as nc
from eslm.config import (
    REFERENCE_GRAD_ACCUM,
    REFERENCE_WARMUP_STEPS,
    Mode,
    TrainConfig,
    dump_config,
    to_flat,
)
from eslm.controller import ControllerState, on_eval_event
from eslm.data import TRAIN_STREAM, VAL_STREAM, Mixture, MixtureSpec, sample_batch
from eslm.metrics import MetricsWriter, RunMetrics, read_metrics
from eslm.model import (
    ModelParams,
    TokenBatch,
    forward_logits,
    init_params,
    masked_mean_loss,
    token_stats,
)
from eslm.optim import AdamW, optimizer_step
from eslm.risk import (
    ScoreKind,
    SelectionMask,
    cvar,
    random_mask,
    select,
    standardize_scores,
    tail_count,
)

log = logging.getLogger(__name__)

from eslm import __version__


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FlopsLedger:
    """Theoretical training FLOPs: ``fwd*N`` per forward token, ``bwd*N`` per backpropagated token."""

    n_params: int
    n_teacher_params: int = 0
    tokens_forward: int = 0
    tokens_backward: int = 0
    teacher_tokens_forward: int = 0
    forward_mult: int = 2
    backward_mult: int = 4

    @property
    def flops_total(self) -> int:
        return (
            self.forward_mult * self.n_params * self.tokens_forward
            + self.backward_mult * self.n_params * self.tokens_backward
            + self.forward_mult * self.n_teacher_params * self.teacher_tokens_forward
        )

    def credit(self, forward: int, backward: int, teacher_forward: int = 0) -> None:
        self.tokens_forward += int(forward)
        self.tokens_backward += int(backward)
        self.teacher_tokens_forward += int(teacher_forward)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FlopsLedger":
        return cls(**d)


@dataclass
class StepStats:
    loss: float
    clm_loss: float
    selected_count: int
    n_tokens: int
    tau: float
    cvar: float
    alpha: float

    @property
    def selected_frac(self) -> float:
        return self.selected_count / self.n_tokens


def score_values(losses: np.ndarray, entropies: np.ndarray, kind: ScoreKind) -> np.ndarray:
    src = entropies if ScoreKind(kind) is ScoreKind.ENTROPY else losses
    return np.asarray(src).reshape(-1)


def choose_mask(raw: np.ndarray, cfg: TrainConfig, alpha: float,
                rng: np.random.Generator | None = None, groups=None) -> tuple[SelectionMask, float]:
    """Selection mask for one set of raw scores, plus its threshold in raw units."""
    m = raw.size
    if cfg.mode is Mode.CLM:
        mask = SelectionMask(np.ones(m, dtype=bool), float(raw.min()), 0.0)
    elif cfg.mode is Mode.RANDOM_SELECT:
        if rng is None:
            raise ValueError("RandomSelect needs an rng")
        mask = random_mask(m, tail_count(m, alpha), rng)
        mask.alpha = alpha
    else:
        scores = raw
        if cfg.risk.standardize:
            scores = standardize_scores(raw, groups if cfg.risk.per_domain else None)
        mask = select(scores, alpha)
    if mask.selected_count == 0:
        # unreachable with ties included; keep the single riskiest token
        sel = np.zeros(m, dtype=bool)
        sel[int(np.argmax(raw))] = True
        mask = SelectionMask(sel, float(raw.max()), alpha)
    return mask, float(raw[mask.selected].min())


def _groups(batch: TokenBatch) -> np.ndarray | None:
    if batch.domains is None:
        return None
    return np.repeat(np.asarray(batch.domains), batch.inputs.shape[1])


def _step_rng(cfg: TrainConfig, step: int, micro: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, step, micro]))


def _forward(params: ModelParams, batch: TokenBatch, where: str):
    try:
        logits = forward_logits(params, batch)
        losses, ent = token_stats(logits, batch.targets)
    except nc.NonFiniteError as exc:
        raise TrainingDiverged(f"{where}: {exc}") from exc
    return logits, losses, ent


def train_step(params: ModelParams, batch: TokenBatch, cfg: TrainConfig, ledger: FlopsLedger,
               alpha: float | None = None, rng=None) -> tuple[dict[str, np.ndarray], StepStats]:
    """Forward all tokens, select, backpropagate the shaped loss of one micro-batch."""
    alpha = cfg.risk.alpha if alpha is None else alpha
    params.zero_grad()
    params.requires_grad_(True)
    with nc.Tape() as tape:
        _, losses, ent = _forward(params, batch, "train_step")
        raw = score_values(losses.data, ent.data, cfg.risk.kind)
        mask, tau = choose_mask(raw, cfg, alpha, rng, _groups(batch))
        shaped = masked_mean_loss(losses, mask)
    if not np.isfinite(shaped.data).all():
        raise TrainingDiverged(f"non-finite shaped loss {shaped.data}")
    tape.backward(shaped)
    grads = params.grads()
    params.zero_grad()
    ledger.credit(batch.n_tokens, mask.selected_count)
    stats = StepStats(
        loss=shaped.item(),
        clm_loss=float(losses.data.mean(dtype=np.float64)),
        selected_count=mask.selected_count,
        n_tokens=batch.n_tokens,
        tau=tau,
        cvar=cvar(raw, alpha if cfg.mode is not Mode.CLM else cfg.risk.alpha),
        alpha=alpha,
    )
    return grads, stats


@dataclass
class EvalResult:
    val_loss: float
    val_cvar: float
    val_entropy_mean: float
    tau: float
    selected_frac: float


def evaluate(params: ModelParams, val: Mixture, cfg: TrainConfig, alpha: float | None = None) -> EvalResult:
    """Full (unselected) CLM loss over fixed validation batches, plus CVaR of their scores."""
    alpha = cfg.risk.alpha if alpha is None else alpha
    loss_sum, ent_sum, count = 0.0, 0.0, 0
    cvars, taus, fracs = [], [], []
    with nc.no_grad():
        for i in range(cfg.eval.batches):
            batch = sample_batch(val, cfg.batch.micro_batch, cfg.model.seq_len, cfg.seed, i, VAL_STREAM)
            _, losses, ent = _forward(params, batch, f"evaluate batch {i}")
            loss_sum += float(losses.data.sum(dtype=np.float64))
            ent_sum += float(ent.data.sum(dtype=np.float64))
            count += batch.n_tokens
            raw = score_values(losses.data, ent.data, cfg.risk.kind)
            mask = select(raw, alpha)
            cvars.append(cvar(raw, alpha))
            taus.append(mask.threshold)
            fracs.append(mask.fraction)
    return EvalResult(
        val_loss=loss_sum / count,
        val_cvar=float(np.mean(cvars)),
        val_entropy_mean=ent_sum / count,
        tau=float(np.mean(taus)),
        selected_frac=float(np.mean(fracs)),
    )


def _accumulate_into(acc: dict | None, grads: dict, weight: float) -> dict:
    if acc is None:
        return {k: g * g.dtype.type(weight) for k, g in grads.items()}
    for k, g in grads.items():
        acc[k] += g * g.dtype.type(weight)
    return acc


class Trainer:
    """Owns the model, optimizer, controller and FLOPs ledger of one run."""

    def __init__(self, cfg: TrainConfig, mixture: MixtureSpec | None = None, run_dir=None,
                 params: ModelParams | None = None, teacher: ModelParams | None = None):
        self.cfg = cfg
        if mixture is None:
            if not cfg.data.manifest:
                raise ValueError("no mixture given and data.manifest is empty")
            mixture = MixtureSpec.load(cfg.data.manifest)
        self.mixture = mixture
        self.train_split, self.val_split = mixture.split(cfg.data.val_fraction)
        vocab = cfg.model.vocab_size
        for view in self.train_split.views + self.val_split.views:
            if view.tokens.size and view.tokens.max() >= vocab:
                raise ValueError(f"corpus token id {view.tokens.max()} >= vocab_size {vocab}")
        self.params = params if params is not None else init_params(cfg.model, cfg.seed)
        self.teacher = teacher
        if teacher is not None and teacher.config.vocab_size != vocab:
            raise ValueError("teacher and student vocabularies differ")
        self.opt = AdamW(self.params.state_arrays(), cfg.optim)
        self.controller: ControllerState | None = cfg.initial_controller()
        self.ledger = FlopsLedger(
            self.params.n_params,
            teacher.n_params if teacher is not None else 0,
            forward_mult=cfg.train.flops_forward,
            backward_mult=cfg.train.flops_backward,
        )
        self.step = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._writer: MetricsWriter | None = None
        self.history: list[RunMetrics] = []

    # -- state -------------------------------------------------------------

    @property
    def alpha(self) -> float:
        if self.cfg.mode is Mode.CLM:
            return 0.0
        return self.controller.alpha if self.controller is not None else self.cfg.risk.alpha

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        return ckpt_io.from_params(
            self.params,
            moments_m=self.opt.m, moments_v=self.opt.v, opt_step=self.opt.t,
            controller=self.controller.to_dict() if self.controller is not None else None,
            step=self.step,
            rng_state={"seed": self.cfg.seed, "sampler": "SeedSequence(seed, stream, step, index)"},
            extras={"ledger": self.ledger.to_dict(), "mode": self.cfg.mode.value},
        )

    def load_checkpoint(self, ck: ckpt_io.Checkpoint) -> None:
        if ck.config != self.cfg.model:
            raise ValueError(f"checkpoint model config {ck.config} differs from run config {self.cfg.model}")
        for k, t in self.params.items():
            t.data[...] = ck.params[k]
        for k in self.opt.m:
            self.opt.m[k][...] = ck.moments_m[k]
            self.opt.v[k][...] = ck.moments_v[k]
        self.opt.t = ck.opt_step
        self.controller = ControllerState.from_dict(ck.controller) if ck.controller else None
        self.step = ck.step
        if "ledger" in ck.extras:
            self.ledger = FlopsLedger.from_dict(ck.extras["ledger"])

    # -- one optimizer step ------------------------------------------------

    def _micro(self, batch: TokenBatch, step: int, micro: int):
        rng = _step_rng(self.cfg, step, micro) if self.cfg.mode is Mode.RANDOM_SELECT else None
        if self.teacher is not None:
            from eslm.distill import distill_step

            return distill_step(self.params, self.teacher, batch, self.cfg, self.ledger, self.alpha, rng)
        return train_step(self.params, batch, self.cfg, self.ledger, self.alpha, rng)

    def _batch(self, step: int, micro: int) -> TokenBatch:
        cfg = self.cfg
        return sample_batch(self.train_split, cfg.batch.micro_batch, cfg.model.seq_len, cfg.seed,
                            step * cfg.batch.grad_accum + micro, TRAIN_STREAM)

    def accumulate(self, step: int) -> tuple[dict[str, np.ndarray], list[StepStats]]:
        """Gradients of one optimizer step averaged over ``grad_accum`` micro-batches."""
        cfg = self.cfg
        if cfg.train.selection_scope == "window":
            return self._accumulate_window(step)
        a = cfg.batch.grad_accum
        parts = [self._micro(self._batch(step, i), step, i) for i in range(a)]
        if cfg.train.accum_weighting == "tokens":
            total = sum(s.selected_count for _, s in parts)
            weights = [s.selected_count / total for _, s in parts]
        else:
            weights = [1.0 / a] * a
        acc = None
        for (g, _), w in zip(parts, weights):
            acc = _accumulate_into(acc, g, w)
        return acc, [s for _, s in parts]

    def _accumulate_window(self, step: int):
        """Select over all ``grad_accum * B * T`` tokens of the step jointly."""
        cfg = self.cfg
        if self.teacher is not None:
            raise NotImplementedError("window-scope selection is not available for distillation")
        alpha = self.alpha
        params = self.params
        params.requires_grad_(True)
        params.zero_grad()
        tapes, all_losses, raws, groups, batches = [], [], [], [], []
        for i in range(cfg.batch.grad_accum):
            batch = self._batch(step, i)
            tape = nc.Tape()
            with tape:
                _, losses, ent = _forward(params, batch, f"step {step} micro {i}")
            tapes.append(tape)
            all_losses.append(losses)
            raws.append(score_values(losses.data, ent.data, cfg.risk.kind))
            g = _groups(batch)
            groups.append(g if g is not None else np.zeros(batch.n_tokens, dtype=np.int64))
            batches.append(batch)
        raw = np.concatenate(raws)
        rng = _step_rng(cfg, step, 0) if cfg.mode is Mode.RANDOM_SELECT else None
        mask, tau = choose_mask(raw, cfg, alpha, rng, np.concatenate(groups))
        total = mask.selected_count
        offsets = np.cumsum([0] + [r.size for r in raws])
        acc = None
        stats = []
        for i, (tape, losses) in enumerate(zip(tapes, all_losses)):
            sel = mask.selected[offsets[i] : offsets[i + 1]]
            c = int(sel.sum())
            self.ledger.credit(batches[i].n_tokens, c)
            if c:
                with tape:
                    part = nc.scale(masked_mean_loss(losses, sel), c / total)
                tape.backward(part)
                acc = _accumulate_into(acc, params.grads(), 1.0)
                params.zero_grad()
            stats.append(StepStats(
                loss=float(nc.masked_mean_value(losses.data.reshape(-1), sel)) if c else 0.0,
                clm_loss=float(losses.data.mean(dtype=np.float64)),
                selected_count=c, n_tokens=batches[i].n_tokens, tau=tau,
                cvar=cvar(raws[i], alpha if cfg.mode is not Mode.CLM else cfg.risk.alpha),
                alpha=alpha,
            ))
        return acc, stats

    def train_one(self) -> RunMetrics:
        t0 = time.perf_counter()
        k = self.step + 1
        alpha = self.alpha
        grads, stats = self.accumulate(k - 1)
        lr, _ = optimizer_step(self.params, grads, self.opt, k - 1)
        self.step = k
        n_tok = sum(s.n_tokens for s in stats)
        rec = RunMetrics(
            step=k, event="train",
            loss=float(np.mean([s.loss for s in stats])),
            val_loss=None,
            alpha=alpha,
            cvar=float(np.mean([s.cvar for s in stats])),
            tau=float(np.mean([s.tau for s in stats])),
            selected_frac=sum(s.selected_count for s in stats) / n_tok,
            flops_cum=float(self.ledger.flops_total),
            lr=lr,
            time_ms=self._elapsed(t0),
        )
        self._emit(rec)
        return rec

    def eval_event(self) -> RunMetrics:
        t0 = time.perf_counter()
        res = evaluate(self.params, self.val_split, self.cfg, self.alpha if self.cfg.mode is not Mode.CLM else None)
        if self.controller is not None and self.step > 0:
            before = self.controller.alpha
            self.controller = on_eval_event(self.controller, res.val_cvar)
            self._log_controller(before, res.val_cvar)
        rec = RunMetrics(
            step=self.step, event="eval", loss=res.val_loss, val_loss=res.val_loss,
            alpha=self.alpha, cvar=res.val_cvar, tau=res.tau, selected_frac=res.selected_frac,
            flops_cum=float(self.ledger.flops_total), lr=0.0, time_ms=self._elapsed(t0),
        )
        self._emit(rec)
        return rec

    def _elapsed(self, t0: float) -> int:
        return int((time.perf_counter() - t0) * 1000) if self.cfg.train.record_time else 0

    # -- run ---------------------------------------------------------------

    def _emit(self, rec: RunMetrics) -> None:
        self.history.append(rec)
        if self._writer is not None:
            self._writer.write(rec)

    def _log_controller(self, before: float, cvar_now: float) -> None:
        if self.run_dir is None:
            return
        line = {"step": self.step, "alpha_before": before, "alpha": self.controller.alpha,
                "delta": self.controller.last_delta, "cvar": cvar_now}
        with open(self.run_dir / "controller.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(line) + "\n")

    def checkpoint_path(self, step: int) -> Path:
        return self.run_dir / "checkpoints" / f"ckpt_{step:07d}.bin"

    def save_checkpoint(self) -> Path | None:
        if self.run_dir is None:
            return None
        path = self.checkpoint_path(self.step)
        path.parent.mkdir(parents=True, exist_ok=True)
        ckpt_io.save(path, self.to_checkpoint())
        return path

    def _write_run_files(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.cfg").write_text(dump_config(self.cfg))
        manifest = {
            "resolved_config": to_flat(self.cfg),
            "code_version": __version__,
            "seed": self.cfg.seed,
            "n_params": self.params.n_params,
            "n_teacher_params": self.ledger.n_teacher_params,
            "reference_profile": {
                "grad_accum": REFERENCE_GRAD_ACCUM,
                "warmup_steps": REFERENCE_WARMUP_STEPS,
            },
            "desk_profile": {
                "grad_accum": self.cfg.batch.grad_accum,
                "warmup_steps": self.cfg.optim.warmup_steps,
            },
            "flops_convention": {
                "forward_per_token": f"{self.cfg.train.flops_forward}*N",
                "backward_per_selected_token": f"{self.cfg.train.flops_backward}*N",
            },
            "domains": self.mixture.names,
            "domain_weights": self.mixture.weights.tolist(),
        }
        (self.run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def run(self, resume: bool = False) -> list[RunMetrics]:
        """Train to ``max_steps``; evaluates and checkpoints every interval."""
        cfg = self.cfg
        metrics_path = None
        if self.run_dir is not None:
            metrics_path = self.run_dir / "metrics.jsonl"
            if resume:
                self._truncate_metrics(metrics_path)
            else:
                self._write_run_files()
                for stale in ("metrics.jsonl", "controller.jsonl"):
                    (self.run_dir / stale).unlink(missing_ok=True)
            self._writer = MetricsWriter(metrics_path, "a")
        try:
            if self.step == 0 and cfg.eval.at_start and not resume:
                self.eval_event()
            while self.step < cfg.max_steps:
                self.train_one()
                k = self.step
                if k % cfg.eval.interval == 0 or k == cfg.max_steps:
                    self.eval_event()
                if k % cfg.checkpoint_interval == 0 or k == cfg.max_steps:
                    self.save_checkpoint()
        finally:
            if self._writer is not None:
                self._writer.close()
                self._writer = None
        return self.history

    def _truncate_metrics(self, path: Path) -> None:
        """Drop records written after the restored checkpoint step."""
        if path.exists():
            keep = [r for r in read_metrics(path) if r.step <= self.step]
            path.write_text("".join(r.to_line() for r in keep))
            self.history = keep
        ctl = self.run_dir / "controller.jsonl"
        if ctl.exists():
            lines = [ln for ln in ctl.read_text().splitlines() if ln and json.loads(ln)["step"] <= self.step]
            ctl.write_text("".join(ln + "\n" for ln in lines))

    @classmethod
    def resume(cls, cfg: TrainConfig, checkpoint_path, run_dir, mixture: MixtureSpec | None = None,
               teacher: ModelParams | None = None) -> "Trainer":
        tr = cls(cfg, mixture=mixture, run_dir=run_dir, teacher=teacher)
        tr.load_checkpoint(ckpt_io.load(checkpoint_path))
        return tr


def latest_checkpoint(run_dir) -> Path | None:
    paths = sorted((Path(run_dir) / "checkpoints").glob("ckpt_*.bin"))
    return paths[-1] if paths else None


def run(cfg: TrainConfig, run_dir=None, mixture: MixtureSpec | None = None) -> Trainer:
    tr = Trainer(cfg, mixture=mixture, run_dir=run_dir)
    tr.run()
    return tr
