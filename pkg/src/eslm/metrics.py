"""Line-delimited JSON metrics: one self-describing record per train or eval event."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator


class MetricsParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass
class RunMetrics:
    step: int
    event: str  # "train" | "eval"
    loss: float
    val_loss: float | None
    alpha: float
    cvar: float
    tau: float
    selected_frac: float
    flops_cum: float
    lr: float
    time_ms: int = 0

    def __post_init__(self):
        if self.event not in ("train", "eval"):
            raise ValueError(f"event must be 'train' or 'eval', got {self.event!r}")

    def to_line(self) -> str:
        return json.dumps(asdict(self), allow_nan=False) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "RunMetrics":
        d = json.loads(line)
        missing = [f.name for f in fields(cls) if f.name not in d]
        if missing:
            raise ValueError(f"missing field(s) {missing}")
        d = {f.name: d[f.name] for f in fields(cls)}
        d["step"] = int(d["step"])
        d["time_ms"] = int(d["time_ms"])
        for k in ("loss", "alpha", "cvar", "tau", "selected_frac", "flops_cum", "lr"):
            d[k] = float(d[k])
            if not math.isfinite(d[k]):
                raise ValueError(f"field {k} is not finite")
        if d["val_loss"] is not None:
            d["val_loss"] = float(d["val_loss"])
        return cls(**d)


class MetricsWriter:
    """Append-only writer; flushes after every record so partial files stay parseable."""

    def __init__(self, path, mode: str = "a"):
        self.path = Path(path)
        self._fh = open(self.path, mode, encoding="utf-8")

    def write(self, rec: RunMetrics) -> None:
        self._fh.write(rec.to_line())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_metrics(path) -> Iterator[RunMetrics]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield RunMetrics.from_line(line)
            except (ValueError, TypeError, KeyError) as exc:
                raise MetricsParseError(path, lineno, str(exc)) from None


def read_metrics(path) -> list[RunMetrics]:
    return list(iter_metrics(path))


def eval_events(records: Iterable[RunMetrics]) -> list[RunMetrics]:
    return [r for r in records if r.event == "eval"]


def flops_to_target(records: Iterable[RunMetrics], target_loss: float) -> float | None:
    """Cumulative FLOPs at the first eval event with ``val_loss <= target_loss``."""
    for r in eval_events(records):
        if r.val_loss is not None and r.val_loss <= target_loss:
            return r.flops_cum
    return None
