import csv
import json
import shutil
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from moleclue.clue import TERMS, ClueConfig
from moleclue.harness import (SweepConfig, aggregate_curves, emit_report, minmax, run_sweep,
                              traj_name)
from moleclue.training import TrainConfig

TINY_TRAIN = TrainConfig(epochs=1, batch_size=4, oc_max_steps=600)


def tiny(**over):
    base = dict(taus=(0.0,), clue_lrs=(0.1,), repeats=1, n_molecules=10, train=TINY_TRAIN,
                clue=ClueConfig(steps=3), fraction=0.1)
    base.update(over)
    return SweepConfig(**base)


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = tiny(taus=(0.0, 0.5), clue_lrs=(0.1, 1.0), repeats=2, n_molecules=20, fraction=0.25)
    run_sweep(cfg, out)
    return out, cfg


def snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(repeats=0)
    with pytest.raises(ValueError):
        SweepConfig(taus=(-0.1,))
    d = SweepConfig()
    assert d.taus == (0.0, 0.01, 0.1, 1.0) and d.clue_lrs == (1.0, 0.1, 0.01) and d.repeats == 3


def test_minimal_sweep_structure(tmp_path):
    m = run_sweep(tiny(), tmp_path)
    assert len(m["runs"]) == 1 and (tmp_path / m["runs"][0]["checkpoint"]).exists()
    cell = json.loads((tmp_path / "run-0" / "tau-0" / "cell.json").read_text())
    assert sorted(cell["selections"]) == sorted(TERMS)
    assert all(len(ids) == 1 for ids in cell["selections"].values())
    for name in cell["trajectories"]:
        assert (tmp_path / "run-0" / "tau-0" / "traj" / name).exists()


def test_rerun_is_byte_identical(tmp_path):
    run_sweep(tiny(), tmp_path / "a")
    run_sweep(tiny(), tmp_path / "b")
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")


def test_resume_skips_completed_cells(tmp_path, monkeypatch):
    run_sweep(tiny(taus=(0.0, 0.1)), tmp_path)
    before = snapshot(tmp_path)
    shutil.rmtree(tmp_path / "run-0" / "tau-0.1")
    import moleclue.harness as h
    calls = []
    real = h.run_cell
    monkeypatch.setattr(h, "run_cell", lambda *a, **k: calls.append(a[4]) or real(*a, **k))
    monkeypatch.setattr(h, "fit", lambda *a, **k: pytest.fail("checkpoint should be reused"))
    run_sweep(tiny(taus=(0.0, 0.1)), tmp_path)
    assert snapshot(tmp_path) == before
    assert calls == [0.0, 0.1]  # the done cell returns early from its marker


def test_failures_recorded_in_manifest(tmp_path, monkeypatch):
    import moleclue.harness as h

    def boom(*a, **k):
        raise RuntimeError("injected")

    monkeypatch.setattr(h, "initial_terms", boom)
    m = run_sweep(tiny(), tmp_path)
    assert m["runs"][0]["cells"][0]["status"].startswith("failed: injected")
    assert aggregate_curves(tmp_path).cells == {}


def test_worker_pool_matches_serial(tmp_path):
    run_sweep(tiny(taus=(0.0, 0.2)), tmp_path / "a")
    run_sweep(tiny(taus=(0.0, 0.2), workers=2), tmp_path / "b")
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    ma, mb = json.loads(a.pop("manifest.json")), json.loads(b.pop("manifest.json"))
    assert a == b and ma["runs"] == mb["runs"]


def test_minmax_rules():
    np.testing.assert_array_equal(minmax(np.array([5.0, 3.0, 1.0])), [1.0, 0.5, 0.0])
    np.testing.assert_array_equal(minmax(np.full(4, 2.5)), np.zeros(4))


def test_aggregated_curves_are_normalized(sweep_dir):
    out, cfg = sweep_dir
    cur = aggregate_curves(out)
    assert cur.cells
    for (term, tau, lr), (mean, std, n) in cur.cells.items():
        assert len(mean) == cfg.clue.steps + 1 and n == 2
        assert (mean >= 0).all() and (mean <= 1).all() and (std >= 0).all()


def test_identical_repeats_have_zero_std(sweep_dir, tmp_path):
    src, _ = sweep_dir
    out = tmp_path / "dup"
    shutil.copytree(src, out)
    shutil.rmtree(out / "run-1")
    shutil.copytree(out / "run-0", out / "run-1")
    m = json.loads((out / "manifest.json").read_text())
    m["runs"][1]["cells"] = [dict(c, dir=c["dir"].replace("run-0", "run-1")) for c in m["runs"][0]["cells"]]
    (out / "manifest.json").write_text(json.dumps(m))
    for mean, std, n in aggregate_curves(out).cells.values():
        assert n == 2 and not std.any()


def test_single_repeat_has_zero_std(tmp_path):
    run_sweep(tiny(), tmp_path)
    assert all(not std.any() for _, std, _ in aggregate_curves(tmp_path).cells.values())


def test_missing_trajectories_reported_absent(sweep_dir, tmp_path):
    src, _ = sweep_dir
    out = tmp_path / "holes"
    shutil.copytree(src, out)
    for f in out.glob("run-*/tau-0.5/traj/*__lr-1.json"):
        f.unlink()
    cur = aggregate_curves(out)
    assert all(cur.get(t, 0.5, 1.0) is None for t in TERMS)
    assert cur.get("L_e", 0.5, 0.1) is not None


def test_aggregation_order_flag(sweep_dir):
    out, _ = sweep_dir
    a, b = aggregate_curves(out), aggregate_curves(out, normalize_first=True)
    assert a.cells.keys() == b.cells.keys()


def test_report_files(sweep_dir, tmp_path):
    out, cfg = sweep_dir
    rep = emit_report(aggregate_curves(out), out, tmp_path / "rep")
    rows = list(csv.DictReader((rep / "curves.csv").open()))
    assert list(rows[0]) == ["term", "tau", "clue_lr", "step", "mean", "std"]
    assert len(rows) == len(TERMS) * len(cfg.taus) * len(cfg.clue_lrs) * (cfg.clue.steps + 1)
    for term in TERMS:
        for lr in cfg.clue_lrs:
            root = ET.parse(rep / f"{term}_lr-{lr:g}.svg").getroot()
            lines = root.findall("{http://www.w3.org/2000/svg}polyline")
            assert len(lines) == len(cfg.taus)
    assert len(list((rep / "trajectories").rglob("*.json"))) == len(list(out.glob("run-*/tau-*/traj/*.json")))


def test_summary_matches_independent_recount(sweep_dir, tmp_path):
    out, _ = sweep_dir
    rep = emit_report(aggregate_curves(out), out, tmp_path / "rep")
    counts = {}
    for f in (rep / "trajectories").rglob("*.json"):
        d = json.loads(f.read_text())
        key = (f"{d['tau']:g}", f"{d['clue_lr']:g}")
        good, tot = counts.get(key, (0, 0))
        counts[key] = (good + (d["steps"][-1]["L_total"] < d["steps"][0]["L_total"]), tot + 1)
    lines = (rep / "summary.txt").read_text().strip().splitlines()[1:]
    parsed = {(t, lr): (int(g), int(n)) for t, lr, g, n, _ in (l.split("\t") for l in lines)}
    assert parsed == counts


def test_plain_evaluation_bridge(tmp_path):
    cfg = tiny(fraction=1.0, clue=ClueConfig(steps=0))
    run_sweep(cfg, tmp_path)
    cell = tmp_path / "run-0" / "tau-0"
    evals = {e["id"]: e for e in json.loads((cell / "evaluations.json").read_text())}
    assert len(evals) == 2  # 20% of 10 molecules
    for mol_id, e in evals.items():
        (step,) = json.loads((cell / "traj" / traj_name(mol_id, 0.1)).read_text())["steps"]
        assert step["L_y"] == e["L_y"] and step["L_r"] == e["L_r"]
