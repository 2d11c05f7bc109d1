"""Render which tokens of a text a checkpoint would select for backpropagation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from eslm import numcore as nc
from eslm.model import ModelParams, TokenBatch, forward_logits, token_stats
from eslm.risk import ScoreKind, select, standardize_scores

OPEN, CLOSE = "«", "»"
# conditioning byte placed before the text so its first byte is scored too
PREFIX_ID = ord("\n")


@dataclass
class Inspection:
    tokens: list[bytes]
    scores: np.ndarray
    selected: np.ndarray
    threshold: float
    alpha: float
    kind: ScoreKind

    @property
    def n_selected(self) -> int:
        return int(self.selected.sum())

    def annotated(self) -> str:
        parts = []
        for tok, sel in zip(self.tokens, self.selected):
            text = _show(tok)
            parts.append(f"{OPEN}{text}{CLOSE}" if sel else text)
        return "".join(parts)

    def top_selected(self, k: int = 20) -> list[tuple[str, int]]:
        counts = Counter(_show(t) for t, s in zip(self.tokens, self.selected) if s)
        return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:k]

    def render(self, top_k: int = 20) -> str:
        lines = [
            f"# kind={self.kind.value} alpha={self.alpha} selected={self.n_selected}/{len(self.tokens)}"
            f" threshold={self.threshold:.6g}",
            self.annotated(),
            "",
            f"# top-{top_k} selected tokens",
        ]
        lines += [f"{count:6d}  {tok!r}" for tok, count in self.top_selected(top_k)]
        return "\n".join(lines) + "\n"


def _show(tok: bytes) -> str:
    return tok.decode("utf-8", errors="backslashreplace")


def score_text(params: ModelParams, data: bytes, kind=ScoreKind.LOSS) -> np.ndarray:
    """Per-byte risk scores; long texts are scored in consecutive ``seq_len`` chunks."""
    kind = ScoreKind(kind)
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    seq = np.concatenate([[PREFIX_ID], ids])
    t = params.config.seq_len
    out = []
    with nc.no_grad():
        for start in range(0, ids.size, t):
            window = seq[start : start + t + 1]
            batch = TokenBatch.from_windows(window[None, :])
            losses, ent = token_stats(forward_logits(params, batch), batch.targets)
            src = ent if kind is ScoreKind.ENTROPY else losses
            out.append(src.data.reshape(-1).astype(np.float64))
    return np.concatenate(out)


def inspect_selection(params: ModelParams, text, alpha: float = 0.1, kind=ScoreKind.LOSS,
                      standardize: bool = True) -> Inspection:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if len(data) < 2:
        raise ValueError(f"text must contain at least 2 tokens, got {len(data)}")
    kind = ScoreKind(kind)
    scores = score_text(params, data, kind)
    s = standardize_scores(scores) if standardize else scores
    mask = select(s, alpha)
    tokens = [data[i : i + 1] for i in range(len(data))]
    return Inspection(tokens, scores, mask.selected, float(scores[mask.selected].min()), alpha, kind)
