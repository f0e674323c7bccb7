import numpy as np
import pytest

from erm.attribution import make_unit
from erm.evolution import StepEvent
from erm.oracles import (PlantedScenario, audit_stability, check_consistency, check_equivalence,
                         check_expected_optimality, consistency_scenario, mc_estimate_mu, optimality_scenario)


def _two_unit_scenario(seed=0):
    mean = np.array([1.0, 0.2, 0.0])
    std = np.array([0.3, 0.3, 0.0])
    units = [make_unit("strong", np.array([0.9, 0.1, 0.0])),
             make_unit("weak", np.array([0.2, 0.0, 0.0])),
             make_unit("orthogonal", np.array([0.0, 0.0, 1.0]))]
    return PlantedScenario(np.array([0.1, 0.1, 0.1]), units, mean, std, 1.0, seed)


def test_orthogonal_unit_has_zero_mu():
    mu = mc_estimate_mu(_two_unit_scenario(), 20_000)
    oid = make_unit("orthogonal", np.array([0.0, 0.0, 1.0])).unit_id
    assert mu.mean[oid] == 0.0 and mu.stderr[oid] == 0.0


def test_dominant_unit_separates():
    sc = _two_unit_scenario()
    mu = mc_estimate_mu(sc, 20_000)
    strong, weak = sc.units[0].unit_id, sc.units[1].unit_id
    assert mu.mean[strong] - mu.mean[weak] > 3 * (mu.stderr[strong] + mu.stderr[weak])


def test_stderr_follows_root_n():
    sc = consistency_scenario(1)
    small, big = mc_estimate_mu(sc, 20_000, seed=11), mc_estimate_mu(sc, 80_000, seed=12)
    for uid in small.stderr:
        assert big.stderr[uid] / small.stderr[uid] == pytest.approx(0.5, rel=0.2)


def test_mc_is_deterministic():
    a, b = mc_estimate_mu(consistency_scenario(), 10_000), mc_estimate_mu(consistency_scenario(), 10_000)
    assert a.mean == b.mean


def test_consistency_short_horizon_not_asserted():
    r = check_consistency(consistency_scenario(), T=10)
    assert r.passed is None and "insufficient horizon" in r.flags


def test_consistency_full_selection_is_trivial():
    r = check_consistency(consistency_scenario(), T=2000, x=3, samples=10_000)
    assert "full selection: trivially converged" in r.flags


def test_consistency_high_unit_wins():
    r = check_consistency(_two_unit_scenario(), T=5000, samples=20_000)
    assert r.passed, r.violations
    assert r.details["expected_top"] == [_two_unit_scenario().units[0].unit_id]


def test_optimality_all_units_single_subset():
    sc = _two_unit_scenario()
    r = check_expected_optimality(sc, x=3, T=2000, samples=10_000)
    assert r.details["subsets_checked"] == 1 and r.passed


def test_optimality_symmetric_tie_passes():
    units = [make_unit("left", np.array([0.5, 0.0])), make_unit("right", np.array([0.0, 0.5]))]
    sc = PlantedScenario(np.zeros(2), units, np.array([1.0, 1.0]), 0.3, 1.0, 0)
    assert check_expected_optimality(sc, x=1, T=3000, samples=20_000).passed


def test_optimality_well_separated():
    r = check_expected_optimality(optimality_scenario(2), x=2, T=5000, samples=20_000)
    assert r.passed and r.details["subsets_checked"] == 6


def test_stability_detects_violation():
    trace = [StepEvent(1, "d0", 0, 1, 2.5, ("a",)), StepEvent(2, "d0", 1, 2, 3.5, ("b",))]
    r = audit_stability(trace, x=3, norm_bound=1.0)
    assert not r.passed and r.violations[0]["step"] == 2
    assert r.details["cumulative_displacement"] == {"d0": 6.0}


def test_stability_empty_trace():
    r = audit_stability([], 3, 1.0, noop_events=[])
    assert r.passed and r.details["total_displacement"] == 0.0


def test_stability_nonzero_post_convergence_fails():
    r = audit_stability([], 3, 1.0, noop_events=[StepEvent(3, "d1", 1, 2, 0.4, ("z",))])
    assert not r.passed


def test_equivalence_small_run_and_cosine_guard():
    assert check_equivalence(trials=300, seed=3).passed
    r = check_equivalence(trials=10, kind="cosine")
    assert r.passed is None and r.flags


def test_reports_serialize():
    r = check_equivalence(trials=5)
    assert '"name": "equivalence"' in r.to_json()
