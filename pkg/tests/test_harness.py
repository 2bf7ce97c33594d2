import json
import math
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from nmscm import harness
from nmscm.harness import (
    BRIDGE_COLUMNS,
    SWEEP_COLUMNS,
    BridgeRecord,
    GridConfig,
    SweepRecord,
    derive_seed,
    read_records,
    records_to_csv,
    render_sweep_report,
    run_bridge,
    run_counterexample,
    run_sampler_demo,
    run_sweep,
    splitmix64,
    sweep_summary,
    verify_manifest,
)
from nmscm.svg import Chart, nice_ticks

TINY = dict(families=["global_monotone", "threshold_flip", "smooth_flip"], noises=["skewed"], d=[3],
            n_train=[300], seeds=2, base_seed=7, train={"steps": 15, "batch_size": 64})


def test_splitmix64_reference_values():
    # first outputs of the reference generator seeded with state 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4


def test_derive_seed_stable_and_distinct():
    seeds = [derive_seed(7, k) for k in range(200)]
    assert len(set(seeds)) == 200
    assert seeds == [derive_seed(7, k) for k in range(200)]
    assert derive_seed(8, 0) != derive_seed(7, 0)
    assert all(0 <= s < 2**32 for s in seeds)


def test_default_grid_is_desk_scale():
    configs = GridConfig().configs()
    assert len(configs) == 3 * 2 * 2 * 3
    assert {c.n_train for c in configs} == {2000, 10000}
    assert [c.seed for c in configs] == [derive_seed(7, k) for k in range(len(configs))]


def test_grid_config_file_and_validation(tmp_path):
    path = tmp_path / "grid.json"
    path.write_text(json.dumps(TINY))
    grid = GridConfig.load(path)
    assert grid.to_dict()["families"][1] == {"tag": "threshold_flip", "strength": None}
    assert GridConfig.from_dict(grid.to_dict()).configs() == grid.configs()
    with pytest.raises(ValueError):
        GridConfig.from_dict({"familes": ["threshold_flip"]})
    with pytest.raises(ValueError):
        GridConfig.from_dict({"train": {"lr": -1}})
    with pytest.raises(ValueError):
        GridConfig.from_dict({"seeds": 0})


def test_bridge_family_in_grid():
    grid = GridConfig.from_dict({"families": [{"tag": "bridge", "strength": 0.3}], "noises": ["gaussian"],
                                 "n_train": [500], "seeds": 1})
    assert grid.configs()[0].family.strength == 0.3


def test_sweep_csv_round_trip(tmp_path):
    recs = [SweepRecord(0, "bridge", 0.3, "gaussian", 3, 100, 5, "ours", 0.1 + 1e-17, 1 / 3, 0.9, 0.25),
            SweepRecord(1, "threshold_flip", None, "mixture", 3, 100, 6, "anm", math.nan, math.nan, math.nan,
                        0.5, "failed: TrainingDivergence")]
    path = tmp_path / "records.csv"
    path.write_text(records_to_csv(recs, SWEEP_COLUMNS))
    back = read_records(path)
    assert back[0] == recs[0]
    assert back[1].strength is None and math.isnan(back[1].cf_mse) and back[1].status == recs[1].status
    assert "wall_time" not in path.read_text().splitlines()[0]


def test_bridge_csv_round_trip(tmp_path):
    rec = BridgeRecord(0, 0.3, "skewed", 11, 0.31, 0.5, 0.2, 0.3, "skew_gate")
    path = tmp_path / "b.csv"
    path.write_text(records_to_csv([rec], BRIDGE_COLUMNS))
    assert read_records(path, BridgeRecord) == [rec]


@pytest.fixture(scope="module")
def tiny_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    grid = GridConfig.from_dict(TINY)
    return run_sweep(grid, out), out, grid


def test_sweep_outputs(tiny_sweep):
    res, out, grid = tiny_sweep
    assert len(res.records) == 6 * 4
    assert all(r.status == "ok" for r in res.records)
    for name in ("records.csv", "report.md", "manifest.json", "figures/cf_mse_by_family.svg"):
        assert (out / name).is_file()
    assert verify_manifest(out) == []
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["format_version"] == harness.FORMAT_VERSION
    assert doc["seeds"] == [c.seed for c in grid.configs()]
    assert set(doc["files"]) == {"records.csv", "report.md", "figures/cf_mse_by_family.svg"}
    assert "wall" not in (out / "manifest.json").read_text()


def test_report_column_order(tiny_sweep):
    _, out, _ = tiny_sweep
    text = (out / "report.md").read_text()
    assert "| Family | ANM | TM-SCM | ContextualFlow | Ours | Ours dir. acc. |" in text


def test_report_recomputable_from_csv(tiny_sweep):
    res, out, grid = tiny_sweep
    records = read_records(out / "records.csv")
    assert render_sweep_report(grid, records, sweep_summary(records)) == (out / "report.md").read_text()


def test_sweep_rerun_is_byte_identical(tiny_sweep, tmp_path):
    _, out, grid = tiny_sweep
    again = tmp_path / out.name
    run_sweep(grid, again, jobs=2)
    for name in ("records.csv", "manifest.json", "report.md"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_manifest_detects_tampering(tiny_sweep, tmp_path):
    _, out, _ = tiny_sweep
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("records.csv", "report.md", "manifest.json"):
        (copy / name).write_bytes((out / name).read_bytes())
    (copy / "report.md").write_text("edited\n")
    assert set(verify_manifest(copy)) == {"report.md", "figures/cf_mse_by_family.svg"}


def test_failed_model_is_isolated(tmp_path, monkeypatch):
    real = harness.fit_models

    def flaky(bundle, cfg, models):
        if models == ("tmscm",):
            raise FloatingPointError("diverged")
        return real(bundle, cfg, models)

    monkeypatch.setattr(harness, "fit_models", flaky)
    grid = GridConfig.from_dict({**TINY, "families": ["threshold_flip"], "seeds": 1})
    res = run_sweep(grid, tmp_path)
    status = {r.model: r.status for r in res.records}
    assert status["tmscm"] == "failed: FloatingPointError"
    assert status["ours"] == "ok" and status["anm"] == "ok"
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["failures"] == ["config 0 tmscm: failed: FloatingPointError"]


def test_significance_uses_paired_runs():
    recs = []
    for k in range(6):
        for model, val in (("ours", 0.1 * k), ("tmscm", 0.1 * k + 0.5), ("contextual_flow", 1.0)):
            recs.append(SweepRecord(k, "threshold_flip", None, "gaussian", 3, 10, k, model, val, 0, 1, 0.5))
    res = harness.significance(recs, "threshold_flip", "tmscm")
    assert res["n"] == 6 and res["mean_diff"] == pytest.approx(-0.5)
    assert res["wilcoxon_p"] == pytest.approx(2 / 64)
    assert res["ci_hi"] < 0


def test_bridge_small(tmp_path):
    res = run_bridge([0.0, 0.5, 0.9], ["skewed"], 2, tmp_path, n_train=400,
                     train={"steps": 15, "batch_size": 64})
    assert len(res.records) == 6
    for r in res.records:
        assert r.gain == r.tmscm_cf_mse - r.ours_cf_mse
        assert abs(r.nms_synth - r.strength) <= 0.1
    assert (tmp_path / "figures" / "gain_vs_nms.svg").is_file()
    assert verify_manifest(tmp_path) == []
    seeds = {r.strength: sorted(x.seed for x in res.records if x.strength == r.strength) for r in res.records}
    assert len({tuple(s) for s in seeds.values()}) == 1
    with pytest.raises(ValueError):
        run_bridge([0.0, 0.5], ["skewed"], 1, tmp_path)


def test_counterexample_report(tmp_path):
    start = time.perf_counter()
    rows = run_counterexample(tmp_path)
    assert time.perf_counter() - start < 5
    text = (tmp_path / "report.md").read_text()
    assert "| (1.0, 0.7) do(X=-1.0) | -0.7000 | 0.7000 |" in text
    get = {(r.table, r.key): r.value for r in rows}
    assert get[("ks", "pass")] == 1.0
    assert get[("transport_variation", "EI control, mechanism 1")] < 1e-9
    assert get[("transport_variation", "EI control, mechanism 2")] < 1e-9
    assert get[("cf_disagreement", "EI control, 200 queries (max abs)")] < 1e-8
    assert get[("transport_variation", "mechanism 2, contexts {-1, 1}, grid {-1, 0, 1}")] == 2.0
    assert verify_manifest(tmp_path) == []


def test_sampler_demo_outputs(tmp_path):
    sel, st = run_sampler_demo(50, 32, 7, tmp_path)
    assert st.queries == 32 and st.change_rate == 0.5
    for name in ("queries.json", "sampler_stats.json", "records.csv", "report.md", "manifest.json"):
        assert (tmp_path / name).is_file()
    ids = [q["factual_id"] for q in json.loads((tmp_path / "queries.json").read_text())]
    assert len(ids) == len(set(ids)) == 32


# ---------------------------------------------------------------- svg


@pytest.mark.parametrize("lo,hi", [(0, 1), (-3.2, 17.9), (0.001, 0.0043), (5, 5), (-1e6, 2e6)])
def test_nice_ticks_cover_range(lo, hi):
    ticks = nice_ticks(lo, hi)
    assert ticks[0] <= lo and ticks[-1] >= hi
    steps = np.diff(ticks)
    np.testing.assert_allclose(steps, steps[0], rtol=1e-9)
    mantissa = steps[0] / 10 ** math.floor(math.log10(steps[0]))
    assert round(mantissa, 9) in (1, 2, 5)
    assert 3 <= len(ticks) <= 12


def test_nice_ticks_rejects_nonfinite():
    with pytest.raises(ValueError):
        nice_ticks(0, math.inf)


def test_chart_renders_valid_svg(tmp_path):
    chart = Chart("t <&>", "x", "y").add("a", [0, 1, 2], [1, math.nan, 3], "both").add("b", [0, 2], [0, 1])
    path = chart.save(tmp_path / "c.svg")
    root = ET.fromstring(path.read_text())
    assert root.get("viewBox") == "0 0 800 500"
    assert len(root.findall("{http://www.w3.org/2000/svg}circle")) == 2
    with pytest.raises(ValueError):
        Chart("empty", "x", "y").render()
