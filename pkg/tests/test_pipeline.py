import json

import numpy as np
import pytest

from rmcdefense import pipeline
from rmcdefense.data import generate_dataset
from rmcdefense.errors import UsageError
from rmcdefense.evalkit import CSV_HEADER, SweepTable
from rmcdefense.numcore import RngStream
from rmcdefense.pipeline import (
    Lineage, PipelineConfig, PipelineError, run_rmc_optimization, sample_in, select_optimal_region,
    select_regions,
)


def sweep_of(ts, dlrs):
    body = "\n".join(f"{t},0.9,{d},{d},,{d},{d},{d},0.5" for t, d in zip(ts, dlrs))
    return SweepTable.from_csv(CSV_HEADER + "\n" + body)


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(n=90, seed=3)


def quick(**kw):
    base = dict(T=0, rmc_epochs=0, grid_n=3, eval_steps=2, train_steps=2, batch_size=16, hidden=[6])
    return PipelineConfig(**{**base, **kw})


def test_region_interior():
    lo, hi = select_optimal_region(sweep_of([0, 0.5, 1], [0.1, 0.5, 0.2]), 0.03)
    assert (lo, hi) == pytest.approx((0.47, 0.53))


def test_region_clipped_at_end():
    assert select_optimal_region(sweep_of([0, 0.5, 1], [0.1, 0.2, 0.5]), 0.03) == pytest.approx((0.97, 1.0))


def test_region_width_matches_published_windows():
    ts = [k / 10 for k in range(11)]
    for centre in (3, 8):
        dlrs = [0.4] * 11
        dlrs[centre] = 0.5
        lo, hi = select_optimal_region(sweep_of(ts, dlrs), 0.03)
        assert (lo, hi) == pytest.approx((centre / 10 - 0.03, centre / 10 + 0.03))
        assert hi - lo == pytest.approx(0.06)


def test_region_ties_take_smallest_t():
    assert select_optimal_region(sweep_of([0, 0.5, 1], [0.5, 0.2, 0.5]), 0.03) == (0.0, 0.03)


def test_empty_sweep_rejected():
    with pytest.raises(UsageError):
        select_optimal_region(SweepTable([], 0, ()), 0.03)


def test_two_regions_do_not_overlap():
    ts = [k / 10 for k in range(11)]
    regions = select_regions(sweep_of(ts, [0.1, 0.2, 0.3, 0.6, 0.59, 0.3, 0.2, 0.55, 0.4, 0.1, 0.1]), 0.03, 2)
    np.testing.assert_allclose(regions, [(0.27, 0.33), (0.67, 0.73)], rtol=1e-12)


def test_samples_stay_in_region():
    stream = RngStream(8)
    for _ in range(500):
        assert 0.27 <= sample_in((0.27, 0.33), stream) <= 0.33


def test_config_validation():
    with pytest.raises(UsageError):
        PipelineConfig(norms=["linf"])
    with pytest.raises(UsageError):
        PipelineConfig(region_width=0.5)
    with pytest.raises(UsageError):
        PipelineConfig(grid_n=2)
    with pytest.raises(UsageError):
        PipelineConfig.from_dict({"norms": ["l2", "l1"], "colour": 3})
    assert PipelineConfig(norms=[float("inf"), 2, 1]).pairs == [["l2", "l1"], ["linf", "l1"]]


def test_lineage_rejects_forward_parents():
    lin = Lineage()
    lin.add("at", [])
    with pytest.raises(UsageError):
        lin.add("rmc", [2])


def test_zero_epoch_smoke(tiny, tmp_path):
    train, test = tiny
    model, lin = run_rmc_optimization(quick(), train, test, tmp_path)
    assert [s.kind for s in lin.stages] == ["at", "rmc", "select", "at", "rmc", "select"]
    assert model.arch.dims() == [8, 6, 3] and np.all(np.isfinite(model.flat))
    saved = Lineage.from_dict(json.loads((tmp_path / "lineage.json").read_text()))
    assert saved.to_dict() == lin.to_dict()
    for s in lin.stages:
        assert (tmp_path / s.artifact_path / "metrics.json").exists()
    assert (tmp_path / lin.stages[-1].artifact_path / "checkpoint.json").exists()


def check_dag(lin):
    ids = [s.stage_id for s in lin.stages]
    assert ids == list(range(1, len(ids) + 1))
    for s in lin.stages:
        assert all(p < s.stage_id for p in s.parent_ids)
    return [s.stage_id for s in lin.stages if not s.parent_ids]


def test_three_norm_stage_graph(tiny):
    train, test = tiny
    _, lin = run_rmc_optimization(quick(norms=["linf", "l2", "l1"]), train, test)
    assert [(s.kind, s.parent_ids) for s in lin.stages] == [
        ("at", []), ("rmc", [1]), ("select", [2]), ("at", [3]), ("rmc", [4]), ("select", [5]),
    ]
    assert check_dag(lin) == [1]
    curves = lin.stages[1].metrics["curves"]
    assert list(curves) == ["l2_l1", "linf_l1"]
    assert list(lin.stages[3].metrics["models"]) == ["linf", "l2"]
    assert lin.stages[4].metrics["curves"]["linf_l2"]["attack_norms"] == ["linf", "l2", "l1"]


def test_srmc_roots(tiny):
    train, test = tiny
    _, lin = run_rmc_optimization(quick(srmc=True, srmc_epochs=1), train, test)
    assert [s.kind for s in lin.stages][:3] == ["at", "srmc", "rmc"]
    assert check_dag(lin) == [1]
    assert lin.stages[2].parent_ids == [1, 2]


def test_sampled_t_inside_regions(tiny):
    train, test = tiny
    _, lin = run_rmc_optimization(quick(grid_n=5, mid_points=2), train, test)
    sel = lin.stages[2]
    info = next(iter(sel.metrics["curves"].values()))
    assert len(sel.chosen_t) == 2 and sel.chosen_t[0] != sel.chosen_t[1]
    for t, (lo, hi) in zip(sel.chosen_t, info["regions"]):
        assert lo <= t <= hi
    starts = [m["start_t"] for m in lin.stages[3].metrics["models"].values()]
    assert starts == sel.chosen_t


def test_rerun_is_bit_identical(tiny, tmp_path):
    train, test = tiny
    cfg = quick(T=1, rmc_epochs=1)
    m1, l1 = run_rmc_optimization(cfg, train, test, tmp_path / "a")
    m2, l2 = run_rmc_optimization(cfg, train, test, tmp_path / "b", jobs=2)
    assert m1.equals(m2)
    assert l1.to_dict() == l2.to_dict()
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_failure_persists_partial_lineage(tiny, tmp_path, monkeypatch):
    train, test = tiny

    def broken(*args, **kwargs):
        raise RuntimeError("curve diverged")

    monkeypatch.setattr(pipeline, "rmc_train", broken)
    with pytest.raises(PipelineError) as info:
        run_rmc_optimization(quick(), train, test, tmp_path)
    kinds = [(s.kind, s.metrics["status"]) for s in info.value.lineage.stages]
    assert kinds == [("at", "ok"), ("rmc", "failed")]
    saved = json.loads((tmp_path / "lineage.json").read_text())
    assert saved["stages"][-1]["metrics"]["status"] == "failed"


def test_second_region_falls_back_to_non_peaks():
    regions = select_regions(sweep_of([0, 0.25, 0.5, 0.75, 1], [0.1, 0.2, 0.3, 0.4, 0.5]), 0.03, 2)
    np.testing.assert_allclose(regions, [(0.97, 1.0), (0.72, 0.78)], rtol=1e-12)
    assert select_regions(sweep_of([0, 0.5, 1], [0.5, 0.5, 0.5]), 0.03, 1) == [(0.0, 0.03)]
