import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moleclue import diffcore as dc
from moleclue.clue import (ClueConfig, ClueProblem, clue_objective, clue_optimize, initial_terms,
                           rank_worst)
from moleclue.decoder import reconstruct
from moleclue.molgraph import contaminate, distance_dx
from moleclue.training import Checkpoint
from moleclue.uncertainty import CertificateBank


@pytest.fixture
def example(small_data):
    ex = small_data[7]
    return ex, contaminate(ex.conformer, 0.1, 3)


def traj_z(t):
    return np.stack([r.z for r in t.records])


def test_config_validation():
    with pytest.raises(ValueError):
        ClueConfig(steps=-1)
    with pytest.raises(ValueError):
        ClueConfig(clue_lr=-0.1)
    with pytest.raises(ValueError):
        ClueConfig(uncertainty_mode="sideways")


def test_zero_lr_keeps_z_and_records(trained, example):
    ex, x0 = example
    t = clue_optimize(ex.graph, x0, trained, ClueConfig(steps=1, clue_lr=0.0))
    assert len(t.records) == 2
    a, b = t.records
    assert np.array_equal(a.z, b.z)
    assert (a.L_e, a.L_a, a.L_d, a.L_r, a.L_total) == (b.L_e, b.L_a, b.L_d, b.L_r, b.L_total)


def test_record_count_and_step0_distance(trained, example):
    ex, x0 = example
    t = clue_optimize(ex.graph, x0, trained, ClueConfig(steps=5))
    assert [r.step for r in t.records] == list(range(6))
    dec, dx = reconstruct(ex.graph, x0, trained.params)
    assert t.records[0].L_r == pytest.approx(math.sqrt(dx), rel=1e-12)
    assert np.allclose(t.records[0].positions, dec.positions, atol=1e-12)


def flat_checkpoint(trained):
    """Predictor variance independent of z, zero certificates: a flat objective at lambda_x = 0."""
    p = trained.params.copy()
    p.arrays["pred.logvar.w"] = np.zeros_like(p.arrays["pred.logvar.w"])
    C = np.zeros_like(trained.certificates.C)
    return Checkpoint(p, CertificateBank(C), trained.config, [])


def test_zero_gradient_keeps_z_constant(trained, example):
    ex, x0 = example
    t = clue_optimize(ex.graph, x0, flat_checkpoint(trained),
                      ClueConfig(steps=4, lambda_x=0.0, normalize_terms=False))
    z = traj_z(t)
    assert (z == z[0]).all()


def test_null_space_point_leaves_variance_floor(trained, example):
    ex, x0 = example
    p = trained.params.copy()
    p.arrays["pred.logvar.w"] = np.zeros_like(p.arrays["pred.logvar.w"])
    p.arrays["pred.logvar.b"] = np.full_like(p.arrays["pred.logvar.b"], -100.0)  # clamps at the floor
    prob0 = ClueProblem(ex.graph, x0, trained, ClueConfig())
    z = prob0.z0
    C = trained.certificates.C
    C = C - np.outer(C @ z, z) / (z @ z)  # every certificate orthogonal to z
    ck = Checkpoint(p, CertificateBank(C), trained.config, [])
    cfg = ClueConfig(lambda_x=0.0, uncertainty_mode="direct", normalize_terms=False)
    total, terms, _ = clue_objective(z, ClueProblem(ex.graph, x0, ck, cfg))
    floor = math.exp(-10.0) * p.label_std ** 2
    assert terms["L_a"].item() == pytest.approx(floor, rel=1e-12)
    assert total.item() == pytest.approx(floor, abs=2e-6)  # u_e is only the norm epsilon


def test_normalized_terms_start_at_one(trained, example):
    ex, x0 = example
    t = clue_optimize(ex.graph, x0, trained, ClueConfig(steps=2, normalize_terms=True))
    r = t.records[0]
    assert (r.L_e, r.L_a, r.L_d, r.L_total) == (1.0, 1.0, 1.0, 3.0)


@pytest.mark.parametrize("normalize", [False, True])
def test_total_equals_term_sum(trained, example, normalize):
    ex, x0 = example
    for r in clue_optimize(ex.graph, x0, trained, ClueConfig(steps=5, normalize_terms=normalize)).records:
        assert abs(r.L_total - (r.L_e + r.L_a + r.L_d)) <= 1e-12 * max(1.0, abs(r.L_total))


def test_labels_are_observation_only(trained, example):
    ex, x0 = example
    cfg = ClueConfig(steps=6)
    a = clue_optimize(ex.graph, x0, trained, cfg)
    b = clue_optimize(ex.graph, x0, trained, cfg, label=ex.label)
    assert traj_z(a).tobytes() == traj_z(b).tobytes()
    assert a.records[0].L_y is None and b.records[0].L_y is not None
    assert b.records[0].L_y == pytest.approx((b.records[0].raw["pred"] - ex.label) ** 2)


def test_normalization_keeps_step0_conformer(trained, example):
    ex, x0 = example
    a = clue_optimize(ex.graph, x0, trained, ClueConfig(steps=3, normalize_terms=False))
    b = clue_optimize(ex.graph, x0, trained, ClueConfig(steps=3, normalize_terms=True))
    assert np.array_equal(a.records[0].positions, b.records[0].positions)
    assert not np.array_equal(a.records[-1].z, b.records[-1].z)


def test_trajectories_are_deterministic(trained, example):
    ex, x0 = example
    cfg = ClueConfig(steps=4)
    a = clue_optimize(ex.graph, x0, trained, cfg, label=1.0)
    b = clue_optimize(ex.graph, x0, trained, cfg, label=1.0)
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("mode", ["re-encode", "direct"])
@pytest.mark.parametrize("normalize", [False, True])
def test_objective_gradient(trained, example, rng, mode, normalize):
    ex, x0 = example
    prob = ClueProblem(ex.graph, x0, trained, ClueConfig(uncertainty_mode=mode, normalize_terms=normalize))
    z = prob.z0 + 0.2 * rng.standard_normal(prob.z0.shape)
    _, terms, _ = clue_objective(z, prob)
    scales = {k: terms["raw"][k].item() for k in ("L_e", "L_a", "L_d")}
    res = dc.finite_difference_check(lambda t: clue_objective(t, prob, scales)[0], z)
    assert res.max_rel_error < 1e-4, res


def test_objective_rejects_wrong_length(trained, example):
    ex, x0 = example
    prob = ClueProblem(ex.graph, x0, trained, ClueConfig())
    with pytest.raises(ValueError):
        clue_objective(prob.z0[:-1], prob)


def test_descent_lowers_total(trained, example):
    ex, x0 = example
    t = clue_optimize(ex.graph, x0, trained, ClueConfig(steps=20, clue_lr=0.1))
    assert t.final.L_total < t.records[0].L_total


def test_nonfinite_gradient_truncates(trained, example, monkeypatch):
    ex, x0 = example
    import moleclue.clue as clue_mod
    real, calls = dc.grad, []

    def flaky(root, wrt):
        calls.append(1)
        g = real(root, wrt)
        return [np.full_like(g[0], np.nan)] if len(calls) == 3 else g

    monkeypatch.setattr(clue_mod.dc, "grad", flaky)
    t = clue_optimize(ex.graph, x0, trained, ClueConfig(steps=5))
    assert t.truncated and len(t.records) == 3
    assert all(np.isfinite(r.L_total) for r in t.records)


def test_json_export(trained, example):
    ex, x0 = example
    t = clue_optimize(ex.graph, x0, trained, ClueConfig(steps=2), label=0.5, tau=0.1)
    d = json.loads(t.to_json())
    assert {"id", "tau", "clue_lr", "steps"} <= set(d)
    assert d["id"] == ex.id and d["tau"] == 0.1 and len(d["steps"]) == 3
    for s in d["steps"]:
        assert {"step", "L_e", "L_a", "L_r", "L_y", "L_total", "positions"} <= set(s)
        assert len(s["positions"]) == ex.graph.n_atoms
    assert [tuple(b) for b in d["bonds"]] == list(ex.graph.bonds)


def test_initial_terms_match_step0(trained, example):
    ex, x0 = example
    cfg = ClueConfig(normalize_terms=False, steps=0)
    ev = initial_terms(ex.graph, x0, trained, cfg, label=ex.label, reference=ex.conformer)
    r = clue_optimize(ex.graph, x0, trained, cfg, label=ex.label, reference=ex.conformer).records[0]
    assert (ev["L_e"], ev["L_a"], ev["L_r"], ev["L_y"]) == (r.L_e, r.L_a, r.L_r, r.L_y)
    assert ev["L_r_ref"] == r.L_r_ref == pytest.approx(math.sqrt(distance_dx(r.positions, ex.conformer)))


def evals(values):
    return [{"id": f"m{i:02d}", "L_e": v, "L_a": v, "L_r": v, "L_y": v} for i, v in enumerate(values)]


def test_rank_worst_examples():
    vals = [0.1, 0.5, 0.9, 0.3, 0.2, 0.0, 0.4, 0.8, 0.7, 0.6]
    assert rank_worst(evals(vals), "L_e", 0.1) == ["m02"]
    assert rank_worst(evals([1.0] * 10), "L_a", 0.3) == ["m00", "m01", "m02"]
    assert len(rank_worst(evals([0.0] * 30), "L_r", 0.1)) == 3
    with pytest.raises(ValueError):
        rank_worst(evals(vals), "L_x", 0.1)
    with pytest.raises(ValueError):
        rank_worst(evals(vals), "L_y", 0.0)


@settings(max_examples=100, deadline=None)
@given(vals=st.lists(st.integers(0, 5).map(float), min_size=1, max_size=40),
       frac=st.floats(0.01, 1.0), perm=st.randoms())
def test_rank_worst_matches_naive_sort(vals, frac, perm):
    data = evals(vals)
    perm.shuffle(data)
    k = math.ceil(round(frac * len(data), 9))
    naive = []
    remaining = list(data)
    for _ in range(k):
        best = remaining[0]
        for e in remaining[1:]:
            if e["L_y"] > best["L_y"] or (e["L_y"] == best["L_y"] and e["id"] < best["id"]):
                best = e
        naive.append(best["id"])
        remaining.remove(best)
    assert rank_worst(data, "L_y", frac) == naive
