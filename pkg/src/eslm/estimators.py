"""scikit-learn style wrappers around the trainer and the risk selector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from eslm import numcore as nc
from eslm.config import TrainConfig, desk_profile
from eslm.data import Domain, MixtureSpec, encode_bytes
from eslm.model import TokenBatch, forward_logits, token_stats
from eslm.risk import ScoreKind, check_alpha, select, standardize_scores
from eslm.trainer import Trainer

__all__ = ["SelectiveLM", "TokenRiskSelector", "check_token_array", "check_corpus", "check_is_fitted"]


def check_token_array(X, vocab_size: int = 256, min_len: int = 2, ndim: int = 2) -> np.ndarray:
    """Validate token ids: integer dtype, ``ndim`` dims, values in ``[0, vocab_size)``."""
    if isinstance(X, (bytes, bytearray, str)):
        raise TypeError("pass token ids as an array; use encode_bytes() for raw text")
    arr = np.asarray(X)
    if arr.ndim == ndim - 1 and ndim == 2:
        arr = arr[None, :]
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d token array, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError("token ids must be integers")
    arr = arr.astype(np.int64)
    if arr.shape[-1] < min_len:
        raise ValueError(f"sequences need at least {min_len} tokens, got {arr.shape[-1]}")
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise ValueError(f"token ids must lie in [0, {vocab_size}), got [{arr.min()}, {arr.max()}]")
    return arr


def check_corpus(X, vocab_size: int = 256) -> list[np.ndarray]:
    """Normalize training input to a list of 1-d token arrays, one per domain.

    Accepts raw ``bytes``/``str`` (byte-level encoded), a 1-d token array, or
    a list of either.
    """
    items = X if isinstance(X, (list, tuple)) else [X]
    if not items:
        raise ValueError("empty corpus")
    out = []
    for item in items:
        if isinstance(item, str):
            item = item.encode("utf-8")
        if isinstance(item, (bytes, bytearray)):
            item = encode_bytes(bytes(item))
        out.append(check_token_array(item, vocab_size, min_len=2, ndim=1))
    return out


class TokenRiskSelector(TransformerMixin, BaseEstimator):
    """Maps a batch of risk scores to the VaR selection mask.

    The whole input array is one selection pool, as in a training
    micro-batch.  Stateless: ``fit`` only records the input width.
    """

    def __init__(self, alpha: float = 0.1, standardize: bool = True):
        self.alpha = alpha
        self.standardize = standardize

    def fit(self, X, y=None):
        check_alpha(self.alpha)
        X = np.asarray(X, dtype=np.float64)
        self.n_features_in_ = X.shape[-1] if X.ndim else 1
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_in_")
        X = np.asarray(X, dtype=np.float64)
        if not np.all(np.isfinite(X)):
            raise ValueError("scores must be finite")
        s = standardize_scores(X.reshape(-1)) if self.standardize else X.reshape(-1)
        mask = select(s, self.alpha)
        self.threshold_ = float(X.reshape(-1)[mask.selected].min())
        return mask.selected.reshape(X.shape)


class SelectiveLM(BaseEstimator):
    """Byte-level decoder trained with risk-based token selection.

    ``fit`` runs the full training loop on an in-memory corpus.  Extra
    trainer keys go in ``overrides`` using dotted config names.
    """

    def __init__(self, mode: str = "ESLM_CVarLoss", alpha: float = 0.1, max_steps: int = 200,
                 n_layers: int = 2, n_heads: int = 2, d_embed: int = 64, seq_len: int = 64,
                 micro_batch: int = 8, grad_accum: int = 4, lr_max: float = 6e-4, eval_interval: int = 50,
                 seed: int = 0, run_dir=None, overrides: dict | None = None):
        self.mode = mode
        self.alpha = alpha
        self.max_steps = max_steps
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_embed = d_embed
        self.seq_len = seq_len
        self.micro_batch = micro_batch
        self.grad_accum = grad_accum
        self.lr_max = lr_max
        self.eval_interval = eval_interval
        self.seed = seed
        self.run_dir = run_dir
        self.overrides = overrides

    def _config(self) -> TrainConfig:
        flat = {
            "mode": self.mode, "risk.alpha": self.alpha, "max_steps": self.max_steps, "seed": self.seed,
            "model.n_layers": self.n_layers, "model.n_heads": self.n_heads, "model.d_embed": self.d_embed,
            "model.seq_len": self.seq_len, "batch.micro_batch": self.micro_batch,
            "batch.grad_accum": self.grad_accum, "optim.lr_max": self.lr_max,
            "optim.lr_min": self.lr_max / 10, "optim.decay_steps": self.max_steps,
            "optim.warmup_steps": max(1, self.max_steps // 100), "eval.interval": self.eval_interval,
        }
        flat.update(self.overrides or {})
        return desk_profile(**flat)

    def fit(self, X, y=None):
        cfg = self._config()
        corpus = check_corpus(X, cfg.model.vocab_size)
        mixture = MixtureSpec([Domain(f"d{i}", float(len(t)), tokens=t) for i, t in enumerate(corpus)])
        trainer = Trainer(cfg, mixture, run_dir=self.run_dir)
        trainer.run()
        self.config_ = cfg
        self.params_ = trainer.params
        self.history_ = trainer.history
        self.alpha_ = trainer.alpha
        self.flops_ = trainer.ledger.flops_total
        self.n_params_ = trainer.params.n_params
        return self

    def _stats(self, X):
        check_is_fitted(self, "params_")
        X = check_token_array(X, self.config_.model.vocab_size)
        if X.shape[1] > self.config_.model.seq_len + 1:
            raise ValueError(f"windows longer than seq_len + 1 = {self.config_.model.seq_len + 1}")
        batch = TokenBatch.from_windows(X)
        with nc.no_grad():
            logits = forward_logits(self.params_, batch)
            losses, ent = token_stats(logits, batch.targets)
        return logits.data, losses.data.astype(np.float64), ent.data.astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        """Next-token distribution after each context row, shape ``(n, vocab)``."""
        check_is_fitted(self, "params_")
        X = check_token_array(X, self.config_.model.vocab_size, min_len=1)
        # pad a dummy target so the full row is context
        logits, _, _ = self._stats(np.concatenate([X, np.zeros((X.shape[0], 1), np.int64)], axis=1))
        z = logits[:, -1, :].astype(np.float64)
        z -= z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=-1)

    def transform(self, X, kind: str = "loss") -> np.ndarray:
        """Per-token risk scores, shape ``(n, L - 1)``."""
        _, losses, ent = self._stats(X)
        return ent if ScoreKind(kind) is ScoreKind.ENTROPY else losses

    def score(self, X, y=None) -> float:
        """Negative mean next-token cross-entropy (nats); higher is better."""
        _, losses, _ = self._stats(X)
        return -float(losses.mean())
