import csv
import json

import numpy as np
import pytest

from snowball import harness, imaging
from snowball.classifier import ClassLabel, Verdict
from snowball.errors import ConfigError, ManifestError
from snowball.harness import (
    Cell,
    ExperimentResults,
    build_tables,
    emit_tables,
    format_confidence,
    format_delta,
    format_timing,
    load_manifest,
    load_results,
    parse_manifest,
    round_half_away,
    run_experiment,
    stub_classifier,
)
from snowball.imaging import Raster
from snowball.mask import BinaryMask, write_mask
from snowball.search import AttackResult

from conftest import quadrant_sign, shape_sign, solid_patch


def write_fixture(tmp_path, patches=3, schedule=(1.0, 0.5), unreadable=None):
    """Two signs (one with an explicit mask) and ``patches`` solid patches."""
    imaging.write_png(quadrant_sign(48, 48, bright=0), tmp_path / "tl.png")
    write_mask(BinaryMask.full(48, 48), tmp_path / "tl_mask.png")
    imaging.write_png(shape_sign("octagon")[0], tmp_path / "oct.png")
    colors = [(255, 255, 255), (250, 250, 120), (120, 250, 250)]
    entries = []
    for i in range(patches):
        name = f"snow{i + 1}"
        path = tmp_path / f"{name}.png"
        if name == unreadable:
            path.write_bytes(b"not a png")
        else:
            imaging.write_png(solid_patch(8, colors[i % 3]).image, path)
        entries.append({"name": name, "image": path.name, "rotatable": i != 1})
    manifest = {
        "signs": [{"name": "TopLeft", "image": "tl.png", "mask": "tl_mask.png", "true_label": "top-left"},
                  {"name": "Octagon", "image": "oct.png"}],
        "patches": entries,
        "classifier": {"kind": "stub", "rule": "quadrant"},
        "search": {"stride": 4},
        "schedule": list(schedule),
        "output_dir": "out",
        "seed": 7,
        "workers": 2,
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def strip_timings(rows):
    return [[c.split(" ")[0] if i else c for i, c in enumerate(r)] for r in rows]


def test_stub_run_produces_full_grid(tmp_path):
    manifest = load_manifest(write_fixture(tmp_path))
    results = run_experiment(manifest)
    assert len(results.cells) == 12
    assert all(c.ok for c in results.cells.values())
    paths = emit_tables(results)
    assert sorted(p.name for p in paths) == ["confidence.csv", "labels.csv", "timing_0.50.csv", "timing_1.00.csv"]
    assert (tmp_path / "out" / "report.md").exists()
    assert (tmp_path / "out" / "TopLeft" / "mask.png").exists()
    labels = read_csv(tmp_path / "out" / "labels.csv")
    assert labels[0] == ["Adversarial Image", "snow1", "snow2", "snow3"]
    assert labels[1][0] == "TopLeft"
    for cell in results.cells.values():
        if cell.result.success:
            stored = imaging.read_png(tmp_path / "out" / cell.sign / cell.patch /
                                      harness.fraction_key(cell.fraction) / "adversarial.png")
            assert harness.QuadrantBrightnessOracle().classify(stored) == cell.result.best.verdict


def test_reruns_are_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir()
    b.mkdir()
    ra = run_experiment(load_manifest(write_fixture(a)))
    rb = run_experiment(load_manifest(write_fixture(b)), resume=False)
    for stem in ("confidence", "labels"):
        assert build_tables(ra)[stem] == build_tables(rb)[stem]
    for key, cell in ra.cells.items():
        other = rb.cells[key].result
        assert (cell.result.best, cell.result.evaluations) == (other.best, other.evaluations)


def test_resume_matches_clean_run(tmp_path):
    path = write_fixture(tmp_path)
    first = run_experiment(load_manifest(path))
    # damage one stored cell; resume must recompute exactly that one
    victim = tmp_path / "out" / "Octagon" / "snow2" / "0.50" / "result.json"
    victim.write_text("{broken")
    resumed = run_experiment(load_manifest(path))
    assert build_tables(resumed)["confidence"] == build_tables(first)["confidence"]
    # untouched cells are reused verbatim, timing included
    key = ("TopLeft", "snow1", "1.00")
    assert resumed.cells[key].result.elapsed == first.cells[key].result.elapsed
    reloaded = load_results(tmp_path / "out")
    assert build_tables(reloaded) == build_tables(resumed)


def test_unreadable_patch_errors_only_its_column(tmp_path):
    results = run_experiment(load_manifest(write_fixture(tmp_path, unreadable="snow3")))
    tables = build_tables(results)
    for row in tables["confidence"][1:]:
        assert row[3] == "error" and row[1] != "error"
    report = (emit_tables(results), (tmp_path / "out" / "report.md").read_text())[1]
    assert "Errored cells" in report and "snow3" in report


def test_manifest_validation(tmp_path):
    path = write_fixture(tmp_path)
    data = json.loads(path.read_text())
    with pytest.raises(ManifestError):
        parse_manifest({**data, "patches": []}, tmp_path)
    with pytest.raises(ManifestError):
        parse_manifest({**data, "signs": []}, tmp_path)
    with pytest.raises(ManifestError):
        parse_manifest({**data, "schedule": [0.5, 1.5]}, tmp_path)
    dup = dict(data, patches=data["patches"] + [data["patches"][0]])
    with pytest.raises(ManifestError):
        parse_manifest(dup, tmp_path)
    m = parse_manifest({**data, "schedule": [0.25, 0.25]}, tmp_path)
    assert m.schedule == (1.0, 0.25)
    assert m.signs[0].image == tmp_path / "tl.png"


def test_stub_rules():
    assert isinstance(stub_classifier("quadrant"), harness.QuadrantBrightnessOracle)
    assert stub_classifier({"rule": "mean-threshold", "threshold": 10}).threshold == 10
    fixed = stub_classifier({"rule": "fixed", "label_id": 2, "label_name": "stop", "confidence": 0.8})
    assert fixed.classify(None).label == ClassLabel(2, "stop")
    with pytest.raises(ConfigError):
        stub_classifier("nonsense")


def test_quadrant_oracle_confidence():
    img = quadrant_sign(10, 10, bright=3, level=120, base=60)
    v = harness.QuadrantBrightnessOracle().classify(img)
    assert v.label.id == 3
    assert v.confidence == pytest.approx(120 / (120 + 3 * 60))
    blank = harness.QuadrantBrightnessOracle().classify(Raster(np.zeros((4, 4, 3), dtype=np.uint8)))
    assert blank.label.id == 0 and blank.confidence == 0.25


def test_remote_endpoint_env_override(monkeypatch):
    monkeypatch.setenv(harness.ENDPOINT_ENV, "http://example.invalid/x")
    oracle = harness.build_oracle({"kind": "remote", "endpoint": "http://other/"})
    assert oracle.endpoint == "http://example.invalid/x"


# -- formatting ---------------------------------------------------------------

def test_round_half_away():
    assert [round_half_away(v) for v in (0.5, 1.5, -0.5, -2.5, 2.4999)] == [1, 2, -1, -3, 2]


def test_format_timing():
    assert format_timing(5110, 5630) == "5110 (-9%)"
    assert format_timing(5630, 5574) == "5630 (+1%)"
    assert format_timing(100, 100) == "100 (+0%)"
    assert format_timing(42.4) == "42"
    assert format_timing(42, 0) == "42"
    assert format_delta(105, 100) == "(+5%)"


def test_format_confidence():
    assert format_confidence(0.58905) == "58.91"
    assert format_confidence(1.0) == "100.00"
    assert format_confidence(0.12344) == "12.34"


def _cell(sign, patch, fraction, success, elapsed=10.0, error=None):
    if error:
        return Cell(sign, patch, fraction, error=error)
    from snowball.search import CandidateScore, Placement

    best = None
    if success:
        v = Verdict(ClassLabel(1, "Yield"), 0.5)
        best = CandidateScore(Placement(0, 0, 1.0, 0.0, 2, 2), v, True)
    return Cell(sign, patch, fraction, AttackResult(success, best, None, 5, elapsed))


def test_tables_render_failures_and_errors():
    cells = {}
    for f, t in ((1.0, 100.0), (0.5, 60.0)):
        for c in (_cell("Stop", "a", f, True, t), _cell("Stop", "b", f, False, t),
                  _cell("Stop", "c", f, False, error="boom")):
            cells[(c.sign, c.patch, harness.fraction_key(f))] = c
    tables = build_tables(ExperimentResults(["Stop"], ["a", "b", "c"], [1.0, 0.5], cells))
    assert tables["confidence"][1] == ["Stop", "50.00", "-", "error"]
    assert tables["labels"][1] == ["Stop", "Yield", "-", "error"]
    assert tables["timing_1.00"][1] == ["Stop", "100", "100", "error"]
    assert tables["timing_0.50"][1] == ["Stop", "60 (-40%)", "60 (-40%)", "error"]
