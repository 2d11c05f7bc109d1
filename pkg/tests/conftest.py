import numpy as np
import pytest

from eslm.config import desk_profile
from eslm.data import Domain, MixtureSpec, local_corpus


@pytest.fixture(scope="session")
def corpus_bytes():
    return local_corpus()


@pytest.fixture
def tiny_mixture(corpus_bytes):
    doms = [Domain(name, 1.0, tokens=np.frombuffer(raw[:20_000], np.uint8).astype(np.int64))
            for name, raw in corpus_bytes.items()]
    return MixtureSpec(doms)


def tiny_config(**overrides):
    base = {
        "max_steps": 6, "model.n_layers": 1, "model.n_heads": 2, "model.d_embed": 16, "model.seq_len": 16,
        "batch.micro_batch": 4, "batch.grad_accum": 2, "optim.warmup_steps": 1, "optim.decay_steps": 6,
        "eval.interval": 3, "eval.batches": 2,
    }
    base.update(overrides)
    return desk_profile(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config


# acceptance verdicts, one line per criterion in the terminal summary
_VERDICTS: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        label = props.get("criterion", report.nodeid.split("::")[-1])
        verdict = "PASS" if report.outcome == "passed" else "FAIL"
        _VERDICTS.append((verdict, label, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, label, detail in _VERDICTS:
        terminalreporter.write_line(f"{verdict} {label}" + (f": {detail}" if detail else ""))
