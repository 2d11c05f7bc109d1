"""Training configuration and the flat ``key = value`` config file format.

Keys are dotted paths into :class:`TrainConfig`, e.g. ``risk.alpha = 0.2``
or ``optim.lr_max = 6e-4``; top-level keys are ``mode``, ``seed`` and
``max_steps``.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path

from eslm.controller import ControllerState
from eslm.model import ModelConfig
from eslm.optim import OptimConfig
from eslm.risk import RiskConfig, ScoreKind

# values of the reference setup that the desk profile scales down
REFERENCE_GRAD_ACCUM = 40
REFERENCE_WARMUP_STEPS = 2000
REFERENCE_DECAY_STEPS = 200_000


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


class Mode(str, enum.Enum):
    CLM = "CLM"
    ESLM_VAR_ENTROPY = "ESLM_VarEntropy"
    ESLM_CVAR_LOSS = "ESLM_CVarLoss"
    ADA_VAR_ENTROPY = "AdaESLM_VarEntropy"
    ADA_CVAR_LOSS = "AdaESLM_CVarLoss"
    RANDOM_SELECT = "RandomSelect"

    @property
    def adaptive(self) -> bool:
        return self in (Mode.ADA_VAR_ENTROPY, Mode.ADA_CVAR_LOSS)

    @property
    def score_kind(self) -> ScoreKind | None:
        if self in (Mode.ESLM_VAR_ENTROPY, Mode.ADA_VAR_ENTROPY):
            return ScoreKind.ENTROPY
        if self in (Mode.ESLM_CVAR_LOSS, Mode.ADA_CVAR_LOSS):
            return ScoreKind.LOSS
        return None


@dataclass
class BatchConfig:
    micro_batch: int = 12
    grad_accum: int = REFERENCE_GRAD_ACCUM


@dataclass
class EvalConfig:
    interval: int = 1000
    batches: int = 200
    at_start: bool = True


@dataclass
class AdaConfig:
    gamma: float = 0.5
    epsilon: float = 1e-8
    alpha_min: float = 0.01
    alpha_max: float = 0.5


@dataclass
class DataConfig:
    manifest: str = ""
    val_fraction: float = 0.1


@dataclass
class KdConfig:
    lam: float = 0.5
    temperature: float = 1.0
    teacher_checkpoint: str = ""

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"kd.lambda must lie in [0, 1], got {self.lam}")
        if self.temperature <= 0:
            raise ValueError(f"kd.temperature must be > 0, got {self.temperature}")


@dataclass
class LoopConfig:
    accum_weighting: str = "equal"  # "equal" | "tokens"
    selection_scope: str = "micro"  # "micro" | "window"
    checkpoint_interval: int = 0  # 0 -> eval interval
    record_time: bool = False
    flops_forward: int = 2
    flops_backward: int = 4

    def __post_init__(self):
        if self.accum_weighting not in ("equal", "tokens"):
            raise ValueError(f"train.accum_weighting must be 'equal' or 'tokens', got {self.accum_weighting!r}")
        if self.selection_scope not in ("micro", "window"):
            raise ValueError(f"train.selection_scope must be 'micro' or 'window', got {self.selection_scope!r}")


@dataclass
class TrainConfig:
    mode: Mode = Mode.ESLM_CVAR_LOSS
    seed: int = 0
    max_steps: int = 1000
    model: ModelConfig = field(default_factory=ModelConfig)
    risk: RiskConfig = field(default_factory=RiskConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    controller: AdaConfig = field(default_factory=AdaConfig)
    data: DataConfig = field(default_factory=DataConfig)
    kd: KdConfig = field(default_factory=KdConfig)
    train: LoopConfig = field(default_factory=LoopConfig)

    def __post_init__(self):
        self.mode = Mode(self.mode)
        kind = self.mode.score_kind
        if kind is not None and self.risk.kind != kind:
            self.risk = dataclasses.replace(self.risk, kind=kind)

    @property
    def checkpoint_interval(self) -> int:
        return self.train.checkpoint_interval or self.eval.interval

    def initial_controller(self) -> ControllerState | None:
        if not self.mode.adaptive:
            return None
        c = self.controller
        return ControllerState(
            alpha=self.risk.alpha, gamma=c.gamma, epsilon=c.epsilon,
            eval_interval=self.eval.interval, alpha_min=c.alpha_min, alpha_max=c.alpha_max,
        )

    def replace(self, **flat) -> "TrainConfig":
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"risk.alpha": 0.2})``."""
        d = to_flat(self)
        d.update({k: _fmt(v) for k, v in flat.items()})
        return from_flat(d)


def desk_profile(**overrides) -> TrainConfig:
    """Small CPU profile: 2 layers, d=64, T=64, B=8, accumulation 4, 2000 steps.

    Accumulation and warmup are scaled down from the reference values
    (40 and 2000 of 200k decay steps) by the same step-count ratio.
    """
    max_steps = 2000
    base = {
        "max_steps": max_steps,
        "model.n_layers": 2, "model.n_heads": 2, "model.d_embed": 64, "model.seq_len": 64,
        "batch.micro_batch": 8, "batch.grad_accum": 4,
        "optim.warmup_steps": max(1, round(REFERENCE_WARMUP_STEPS * max_steps / REFERENCE_DECAY_STEPS)),
        "optim.decay_steps": max_steps,
        "eval.interval": 100, "eval.batches": 16,
    }
    base.update(overrides)
    return TrainConfig().replace(**base)


# ---------------------------------------------------------------------------
# flat key/value form

_ALIASES = {"kd.lambda": "kd.lam"}
_ALIASES_OUT = {v: k for k, v in _ALIASES.items()}


def _fmt(v) -> str:
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def to_flat(cfg: TrainConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if dataclasses.is_dataclass(val):
            for sub in dataclasses.fields(val):
                key = f"{f.name}.{sub.name}"
                out[_ALIASES_OUT.get(key, key)] = _fmt(getattr(val, sub.name))
        else:
            out[f.name] = _fmt(val)
    return out


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(like, enum.Enum):
        return type(like)(raw.strip())
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw.strip()


def from_flat(flat: dict[str, str]) -> TrainConfig:
    """Build a config from string values, reporting every bad key at once."""
    default = TrainConfig()
    problems: list[str] = []
    top: dict = {}
    groups: dict[str, dict] = {}
    for key, raw in flat.items():
        path = _ALIASES.get(key, key)
        head, _, sub = path.partition(".")
        if not hasattr(default, head) or head.startswith("_"):
            problems.append(f"{key}: unknown key")
            continue
        target = getattr(default, head)
        if sub:
            if not dataclasses.is_dataclass(target) or sub not in {f.name for f in dataclasses.fields(target)}:
                problems.append(f"{key}: unknown key")
                continue
            like = getattr(target, sub)
        else:
            if dataclasses.is_dataclass(target):
                problems.append(f"{key}: is a section; use '{key}.<field>'")
                continue
            like = target
        try:
            value = _coerce(str(raw), like)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
            continue
        if sub:
            groups.setdefault(head, {})[sub] = value
        else:
            top[head] = value
    kwargs = dict(top)
    for head, vals in groups.items():
        base = getattr(default, head)
        try:
            kwargs[head] = dataclasses.replace(base, **vals)
        except (ValueError, TypeError) as exc:
            problems.append(f"{head}: {exc}")
    if problems:
        raise ConfigError(problems)
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None


def parse_config_text(text: str) -> dict[str, str]:
    out, problems = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            problems.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        out[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return out


def parse_overrides(items: list[str]) -> dict[str, str]:
    out, problems = {}, []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            problems.append(f"--set {item!r}: expected key=value")
            continue
        out[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return out


def load_config(path, overrides: dict[str, str] | None = None) -> TrainConfig:
    flat = parse_config_text(Path(path).read_text())
    flat.update(overrides or {})
    return from_flat(flat)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())
