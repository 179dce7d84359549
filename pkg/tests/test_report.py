import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from lqpg.bench import ReportBundle, run_benchmark
from lqpg.config import preset_spec
from lqpg.model import NumericalError
from lqpg.pg import SweepTable
from lqpg.report import CONVERGENCE_COLUMNS, SWEEP_COLUMNS, emit_report, sweep_rows


def small_spec(**kw):
    base = dict(grid=16, iterations=80, mesh_family=[8, 16], unscaled_budget=400, tail=10)
    base.update(kw)
    return preset_spec(**base)


@pytest.fixture(scope="module")
def bundle():
    return run_benchmark(small_spec())


def test_model_based_bundle(bundle):
    assert bundle.status == "ok" and len(bundle.traces) == 1
    sub = np.array(bundle.traces[0]) - bundle.cstar
    assert np.all(np.diff(sub) < 0)
    assert [r.intervals for r in bundle.sweep.rows] == [8, 16]
    m = bundle.manifest()
    assert m["config_hash"] == bundle.spec.config_hash()
    assert m["cstar_riccati"] == bundle.cstar
    assert "min/max" in m["spread"]


def test_csv_only_has_no_svg(tmp_path, bundle):
    paths = emit_report(bundle, tmp_path, "csv")
    assert [p.name for p in paths] == ["manifest.json", "convergence.csv", "mesh_sweep.csv"]
    assert not list(tmp_path.glob("*.svg"))
    rows = (tmp_path / "convergence.csv").read_text().splitlines()
    assert rows[0] == CONVERGENCE_COLUMNS
    assert len(rows) == 82
    sub = [float(r.split(",")[4]) for r in rows[1:]]
    assert all(b < a for a, b in zip(sub, sub[1:]))
    assert (tmp_path / "mesh_sweep.csv").read_text().splitlines()[0] == SWEEP_COLUMNS


def test_same_bundle_twice_identical_bytes(tmp_path, bundle):
    a = emit_report(bundle, tmp_path / "a", "both")
    b = emit_report(bundle, tmp_path / "b", "both")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_end_to_end_determinism(tmp_path, bundle):
    again = run_benchmark(small_spec())
    a = emit_report(bundle, tmp_path / "a")
    b = emit_report(again, tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_svgs_are_valid_xml_with_log_axis(tmp_path, bundle):
    emit_report(bundle, tmp_path, "svg")
    for name in ("convergence.svg", "mesh_sweep.svg"):
        root = ET.parse(tmp_path / name).getroot()
        assert root.tag.endswith("svg")
    text = (tmp_path / "convergence.svg").read_text()
    assert "1e-" in text and "<polyline" in text


def test_empty_sweep_header_only(tmp_path):
    assert sweep_rows(None) == [SWEEP_COLUMNS]
    empty = SweepTable(rows=[], n_reference=None, reference_optimum=0.04, epsilon=0.01, optimum="converged")
    assert sweep_rows(empty) == [SWEEP_COLUMNS]
    b = ReportBundle(spec=small_spec())
    emit_report(b, tmp_path, "both")
    assert (tmp_path / "mesh_sweep.csv").read_text() == SWEEP_COLUMNS + "\n"
    assert (tmp_path / "convergence.csv").read_text() == CONVERGENCE_COLUMNS + "\n"
    ET.parse(tmp_path / "mesh_sweep.svg")


def test_dry_run_manifest_only(tmp_path):
    b = run_benchmark(small_spec(), dry_run=True)
    paths = emit_report(b, tmp_path)
    assert [p.name for p in paths] == ["manifest.json"]
    m = json.loads(paths[0].read_text())
    assert m["dry_run"] is True and "cstar_riccati" not in m


def test_unwritable_path(tmp_path, bundle):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write report"):
        emit_report(bundle, blocker / "sub")
    with pytest.raises(ValueError):
        emit_report(bundle, tmp_path, "pdf")


def test_failure_attaches_partial_bundle():
    with pytest.raises(NumericalError) as info:
        run_benchmark(small_spec(tau=0.6), sweep=False)
    b = info.value.bundle
    assert b.status == "failed" and b.cstar is not None and b.traces
    assert b.manifest()["error"].startswith("iteration 1")


def test_model_free_smoke_bundle():
    spec = small_spec(mode="model-free", num_paths=50, repetitions=2, seeds=[0, 1], mf_iterations=3, sim_steps=16)
    b = run_benchmark(spec, sweep=False)
    assert len(b.traces) == 2 and all(len(t) == 4 for t in b.traces)
    assert b.traces[0] != b.traces[1]
    assert b.manifest()["seeds"] == [0, 1]
