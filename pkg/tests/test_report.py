import pytest

from eslm.metrics import MetricsWriter, RunMetrics
from eslm.report import load_runs, report, run_name


def _write(path, evals, train_frac=0.9):
    path.parent.mkdir(parents=True, exist_ok=True)
    with MetricsWriter(path, "w") as w:
        for step, (val, flops) in enumerate(evals):
            if step:
                w.write(RunMetrics(step, "train", 3.0, None, 0.1, 3.0, 1.0, train_frac, flops, 1e-3))
            w.write(RunMetrics(step, "eval", val, val, 0.1, 3.0, 1.0, 1.0, flops, 1e-3))
    return path


def test_single_run_defaults_to_own_final_loss(tmp_path):
    p = _write(tmp_path / "clm" / "metrics.jsonl", [(5.0, 0.0), (4.0, 6.0), (3.0, 12.0)])
    table, csv, (s,) = report([p])
    assert s.name == "clm" and s.flops_to_target == 12.0 and s.final_val_loss == 3.0
    assert s.mean_selected_frac == pytest.approx(0.9) and s.steps == 2
    assert "target val_loss <= 3" in table and "1.0000" in table
    assert csv.splitlines()[0] == "run,step,flops_cum,val_loss,alpha"
    assert len(csv.splitlines()) == 4


def test_synthetic_crossings_and_ratio(tmp_path):
    a = _write(tmp_path / "a" / "metrics.jsonl", [(5.0, 0.0), (3.5, 10.0), (2.9, 20.0)])
    b = _write(tmp_path / "b" / "metrics.jsonl", [(5.0, 0.0), (2.8, 8.0), (2.5, 16.0)])
    table, _, (sa, sb) = report([a, b], target_loss=3.0)
    assert (sa.flops_to_target, sb.flops_to_target) == (20.0, 8.0)
    assert "0.4000" in table


def test_not_reached(tmp_path):
    a = _write(tmp_path / "a" / "metrics.jsonl", [(5.0, 0.0), (2.0, 10.0)])
    b = _write(tmp_path / "b" / "metrics.jsonl", [(5.0, 0.0), (4.0, 10.0)])
    table, _, (_, sb) = report([a, b])
    assert sb.flops_to_target is None
    assert "not reached" in table.splitlines()[-1]


def test_names(tmp_path):
    assert run_name(tmp_path / "x" / "metrics.jsonl") == "x"
    assert run_name(tmp_path / "other.jsonl") == "other"
    p = _write(tmp_path / "x" / "metrics.jsonl", [(5.0, 0.0)])
    assert list(load_runs([p, p])) == ["x", "x#2"]
    with pytest.raises(ValueError):
        report([])
