import dataclasses
import itertools

import numpy as np
import pytest
from scipy.stats import spearmanr

from mfglab.forward import MfgBoundaryData
from mfglab.grid import build_grid
from mfglab.stability import (
    SWEEP_COLUMNS,
    default_base_p,
    default_setup,
    extract_observations,
    perturbation_family,
    record_dict,
    sweep_perturbations,
    theorem1_ratio,
)


def test_identical_solutions_give_zero_observations(base_pair):
    _, _, s1, _ = base_pair
    obs = extract_observations(s1, s1)
    assert not obs.y_omega.any() and not obs.z_omega.any() and not obs.y_slice_t0.any()


def test_noiseless_observations_are_masked_differences(base_pair, grid99):
    _, _, s1, s2 = base_pair
    obs = extract_observations(s1, s2)
    np.testing.assert_array_equal(obs.y_omega, (s1.u - s2.u) * grid99.omega_mask)
    np.testing.assert_array_equal(obs.y_slice_t0, (s1.u - s2.u)[grid99.t0_index])


def test_noise_is_seeded_and_bounded(base_pair, grid99):
    _, _, s1, s2 = base_pair
    a = extract_observations(s1, s2, noise_level=0.1, rng_seed=7)
    b = extract_observations(s1, s2, noise_level=0.1, rng_seed=7)
    c = extract_observations(s1, s2, noise_level=0.1, rng_seed=8)
    assert a.y_omega.tobytes() == b.y_omega.tobytes()
    assert a.y_omega.tobytes() != c.y_omega.tobytes()
    clean = extract_observations(s1, s2)
    scale = np.max(np.abs(clean.z_omega))
    assert np.max(np.abs(a.z_omega - clean.z_omega)) <= 0.1 * scale
    assert not a.y_omega[:, ~grid99.omega_mask].any()
    with pytest.raises(ValueError):
        extract_observations(s1, s2, noise_level=-1.0)


def test_equal_coefficients_give_zero_ratio(setup99, grid99):
    p = default_base_p(grid99)
    rec = theorem1_ratio(p, p, setup99)
    assert rec.lhs == 0.0 and rec.ratio == 0.0
    assert max(rec.rhs_h2, rec.rhs_y, rec.rhs_z) == 0.0


def test_ratio_is_amplitude_independent(setup99, grid99):
    p1 = default_base_p(grid99)
    x = grid99.coords[0]
    ratios = [theorem1_ratio(p1, p1 + eps * np.sin(2 * np.pi * x), setup99).ratio
              for eps in (0.1, 0.01, 0.001)]
    assert max(ratios) / min(ratios) < 10


def test_zero_traces_are_flagged_degenerate(grid99):
    setup = default_setup(grid99, traces="zero", support=(0.1, 0.9))
    setup_full = dataclasses.replace(setup, nondegeneracy_mask=np.ones(grid99.shape, bool))
    p = default_base_p(grid99)
    rec = theorem1_ratio(p, p + 0.05 * np.sin(np.pi * grid99.coords[0]) ** 2, setup_full)
    assert rec.degenerate
    assert "degenerate" in rec.flags


def test_adding_terms_never_increases_ratio(setup99, grid99):
    p = default_base_p(grid99)
    rec = theorem1_ratio(p, p + 0.05 * np.sin(3 * np.pi * grid99.coords[0]), setup99)
    terms = ("h2", "y", "z")
    for k in (1, 2):
        for subset in itertools.combinations(terms, k):
            assert rec.ratio <= rec.ratio_with(subset)


def test_sweep_record_counts(setup99, grid99):
    p = default_base_p(grid99)
    assert sweep_perturbations(p, {"kind": "fourier_modes", "k_max": 4}, [], setup99).records == []
    one = sweep_perturbations(p, {"kind": "localized_bump", "centers": [[0.5]]}, [0.1], setup99)
    assert len(one.records) == 1
    res = sweep_perturbations(p, {"kind": "fourier_modes", "k_max": 4}, [0.1, 0.02], setup99)
    assert len(res.records) == 8
    assert res.summary["empirical_C"] == max(r.ratio for r in res.records)
    assert set(record_dict(res.records[0])) >= set(SWEEP_COLUMNS)
    assert res.rows()[0][:3] == ["fourier_modes", "k=1", 0.1]


@pytest.mark.parametrize("spec", [
    {"kind": "fourier_modes", "k_max": 3},
    {"kind": "random_smooth", "seed": 4, "members": 3},
    {"kind": "localized_bump", "centers": [[0.3], [0.6]], "width": 0.1},
])
def test_family_members_are_normalised_and_supported(spec, grid99):
    members = perturbation_family(grid99, spec, support=(0.1, 0.9))
    x = grid99.coords[0]
    for _, f in members:
        assert np.max(np.abs(f)) == pytest.approx(1.0)
        assert not f[(x <= 0.1) | (x >= 0.9)].any()
    with pytest.raises(ValueError):
        perturbation_family(grid99, {"kind": "nope"})


def test_smaller_nondegeneracy_gives_larger_ratio():
    g = build_grid(1, 99, 1.0, 200)
    x = g.coords[0]
    base = default_base_p(g)
    members = perturbation_family(g, {"kind": "random_smooth", "seed": 0, "members": 3})
    deltas, ratios = [], []
    for a in (0.1, 0.4, 1.6):
        setup = default_setup(g)
        setup = dataclasses.replace(setup, bdata=MfgBoundaryData(
            u_T=a * x, v_0=setup.bdata.v_0, b_u=np.broadcast_to(a * x, g.st_shape).copy()))
        for _, m in members:
            rec = theorem1_ratio(base, base + 0.05 * m, setup)
            deltas.append(rec.delta_est)
            ratios.append(rec.ratio)
    rho, pval = spearmanr(deltas, ratios)
    assert not (rho > 0 and pval < 0.05)
    assert rho < 0
