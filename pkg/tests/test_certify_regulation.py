import math

import numpy as np
import pytest

from nhmpc.certify_regulation import (CertificateError, CertificateParams,
                                      alpha_N, alpha_curve, coeffs_N1, coeffs_N2,
                                      gamma_from_coeffs, maneuver_steps,
                                      minimal_horizon, table_sweep)


def params(delta=1.0, q2=2.0, **kw):
    base = dict(delta=delta, q1=1.0, q2=q2, q3=0.1,
                r1=delta / 2, r2=0.1 * delta / 2,
                x_bar=2.0, y_bar=2.0, v_bar=0.6, omega_bar=math.pi / 4)
    base.update(kw)
    return CertificateParams(**base)


def test_param_validation():
    with pytest.raises(CertificateError):
        params(delta=0.3)                        # 1/delta not integer
    with pytest.raises(CertificateError):
        params(r2=0.2)                           # violates r2 <= q3*delta/2
    with pytest.raises(CertificateError):
        params(r1=0.8)                           # violates r1 <= q1*delta/2
    # equality accepted
    params(r1=0.5, r2=0.05)


def test_far_maneuver_head_is_waiting_ones():
    p = params()
    c = coeffs_N2(p, 1.0)
    k2 = maneuver_steps(p, 1.0).k_star_n2
    assert np.all(c[:k2] == 1.0)


def test_far_maneuver_first_turn_coefficient():
    p = params()
    s = 0.7
    c = coeffs_N2(p, s)
    k2 = maneuver_steps(p, s).k_star_n2
    expected = 1.0 + p.q3 * math.pi ** 4 / (16 * k2 ** 4 * s) * (1 / (2 * p.delta ** 3))
    assert c[k2] == pytest.approx(expected, rel=1e-12)


def test_far_maneuver_large_s_limit():
    p = params()
    c = coeffs_N2(p, 1e12)
    ms = maneuver_steps(p, 1e12)
    drive = c[2 * ms.k_star_n2: 2 * ms.k_star_n2 + ms.l_star_n2]
    j = np.arange(ms.l_star_n2, dtype=float)
    pure_geometric = ((ms.l_star_n2 - j) / ms.l_star_n2) ** 2
    assert np.allclose(drive, pure_geometric, atol=1e-10)
    assert np.allclose(c[2 * ms.k_star_n2 + ms.l_star_n2:], 0.0, atol=1e-10)


def test_near_maneuver_structure():
    p = params(q2=5.0)
    s = 1.3
    c = coeffs_N1(p, s)
    ms = maneuver_steps(p, s)
    m = p.steps_per_second
    assert c.size == ms.k_star_n1 + ms.l_star_n1 + 4 * m
    assert np.all(c[1:ms.k_star_n1] == 1.0)
    assert c[0] > 1.0


def test_near_maneuver_third_anchor_formula():
    # issue of the wiggle's mid-point step: quarter position cost plus
    # the steering and speed contributions
    p = params(q2=5.0)
    s = 1.3
    c = coeffs_N1(p, s)
    ms = maneuver_steps(p, s)
    idx = ms.k_star_n1 + ms.l_star_n1 + 2 * p.steps_per_second
    s4 = (math.sqrt(s / p.q2) + 1.5) ** 4 / 64.0
    from nhmpc.certify_regulation import WIGGLE_SLACK
    expected = 0.25 + (p.r2 + (16 * p.q1 + p.r1) * s4) / p.q2 + WIGGLE_SLACK * s / p.q2
    assert c[idx] == pytest.approx(expected, rel=1e-12)


def test_near_maneuver_last_subsecond_has_no_extra():
    p = params(delta=0.25, q2=5.0)
    s = 1.0
    c = coeffs_N1(p, s)
    ms = maneuver_steps(p, s)
    m = p.steps_per_second
    base = ms.k_star_n1 + ms.l_star_n1
    block = c[base + 3 * m: base + 4 * m]
    assert np.allclose(block, block[0])


def test_coefficients_reject_bad_radius():
    p = params()
    with pytest.raises(CertificateError):
        coeffs_N2(p, 0.0)
    with pytest.raises(CertificateError):
        coeffs_N1(p, -1.0)


def test_gamma_from_coeffs_examples():
    assert np.allclose(gamma_from_coeffs([1, 1, 1]), [1, 2, 3])
    g = gamma_from_coeffs([1.0, 0.2, 0.9])
    assert np.allclose(g, [1.0, 1.9, 2.1])
    with pytest.raises(CertificateError):
        gamma_from_coeffs([1.0, -0.1])


def test_alpha_examples():
    assert alpha_N([1.0, 1.0, 1.0]) == 1.0
    # toy contraction example: gamma_2 from the two-term geometric series
    gamma2 = 1.025 * (1 + 0.25)
    assert alpha_N([gamma2]) == pytest.approx(0.9209, abs=5e-5)


def test_alpha_requires_valid_inputs():
    with pytest.raises(CertificateError):
        alpha_N([])
    with pytest.raises(CertificateError):
        alpha_N([0.5])


def test_minimal_horizon_reference_cells():
    assert minimal_horizon(params(delta=1.0, q2=10.0)).horizon == 8
    cert = minimal_horizon(params(delta=1.0, q2=2.0))
    assert cert.horizon == 12
    assert 0 < cert.alpha <= 1
    assert np.all(np.diff(cert.gamma) >= -1e-12)


def test_gamma_capped_by_index():
    cert = minimal_horizon(params(delta=1.0, q2=5.0))
    n_values = np.arange(2, cert.horizon + 1)
    assert np.all(cert.gamma <= n_values + 1e-12)


def test_weight_scaling_leaves_horizon_unchanged():
    base = params(delta=0.5, q2=5.0)
    scaled = CertificateParams(delta=0.5, q1=10.0, q2=50.0, q3=1.0, r1=2.5, r2=0.25,
                               x_bar=2.0, y_bar=2.0, v_bar=0.6, omega_bar=math.pi / 4)
    assert minimal_horizon(base).horizon == minimal_horizon(scaled).horizon


def test_s_monotonicity_diagnostic():
    # far-field bound should shrink and near-field bound grow with the
    # radius parameter; flagged as a diagnostic trend on a sampled grid
    p = params(q2=5.0)
    grid = np.geomspace(0.1, 10.0, 12)
    n = 9
    g2 = [gamma_from_coeffs(coeffs_N2(p, s))[min(n, len(coeffs_N2(p, s)) - 1)] for s in grid]
    g1 = [gamma_from_coeffs(coeffs_N1(p, s))[min(n, len(coeffs_N1(p, s)) - 1)] for s in grid]
    assert np.all(np.diff(g2) <= 1e-9)
    assert np.all(np.diff(g1) >= -1e-9)


def test_alpha_curve_converges_to_one():
    p = params(delta=1.0, q2=5.0)
    curve = alpha_curve(p, 200)
    n_hat = minimal_horizon(p).horizon
    tail = curve[n_hat - 2:]
    assert np.all(np.diff(tail) > 0)
    assert curve[-1] >= 0.99


def test_table_sweep_records_errors_instead_of_raising():
    rows = table_sweep({"q1": 1.0, "q3": 0.1, "x_bar": 2.0, "y_bar": 2.0,
                        "v_bar": 0.6, "omega_bar": math.pi / 4},
                       deltas=[1.0], q2s=[5.0], n_cap=3)
    assert rows[0]["N_hat"] == -1 and rows[0]["error"]
