import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpbridge import bridge
from dpbridge.bridge import bridge_coeffs
from dpbridge.schedule import make_vp_schedule, schedule_from_alpha
from dpbridge.tensor import Rng


def _oracle_coeffs(s):
    """Second, loop-based implementation of the marginal and step formulas."""
    T = s.T
    a = [float(v) for v in s.alpha]
    sg = [float(v) for v in s.sigma]
    snr = [a[t] ** 2 / sg[t] ** 2 for t in range(T + 1)]
    m, n, sb = [], [], []
    for t in range(T + 1):
        r = snr[T] / snr[t]
        m.append(a[t] * (1 - r))
        n.append(r * a[t] / a[T])
        sb.append(sg[t] * math.sqrt(max(1 - r, 0.0)))
    k1, k2, k3, ps = [math.nan] * 2, [math.nan] * 2, [math.nan] * 2, [math.nan] * 2
    for t in range(2, T):
        at = m[t] / m[t - 1]
        bt = n[t] - at * n[t - 1]
        d2 = sb[t] ** 2 - at ** 2 * sb[t - 1] ** 2
        q = sb[t - 1] ** 2 / sb[t] ** 2
        k1.append(q * at)
        k2.append(d2 / sb[t] ** 2 * m[t - 1])
        k3.append(d2 / sb[t] ** 2 * n[t - 1] - q * at * bt)
        ps.append(math.sqrt(q * d2))
    return m, n, sb, k1, k2, k3, ps


def test_endpoint_pinning(bc):
    assert bc.m[-1] == 0.0 and bc.n[-1] == 1.0 and bc.sbar[-1] == 0.0
    z0, zT = np.random.default_rng(0).normal(size=(2, 3, 5))
    z, _ = bridge.forward_sample(bc, bc.T, z0, zT, rng=Rng(0))
    assert z.tobytes() == zT.tobytes()


def test_substitution_example():
    # alpha_t = 0.9 and SNR_T / SNR_t = 1/2 pin alpha_T
    snr_t = 0.81 / 0.19
    snr_T = snr_t / 2
    alpha_T = math.sqrt(snr_T / (1 + snr_T))
    c = bridge_coeffs(schedule_from_alpha([1.0, 0.9, alpha_T]))
    assert c.m[1] == pytest.approx(0.45, abs=1e-14)
    assert c.sbar[1] == pytest.approx(math.sqrt(0.19) / math.sqrt(2), abs=1e-14)
    assert c.n[1] == pytest.approx(0.5 * 0.9 / alpha_T, abs=1e-14)


def test_full_arrays_match_second_implementation(schedule, bc):
    m, n, sb, k1, k2, k3, ps = _oracle_coeffs(schedule)
    T = bc.T
    assert np.max(np.abs(bc.m - m)) < 1e-14
    assert np.max(np.abs(bc.n - n)) < 1e-14
    assert np.max(np.abs(bc.sbar - sb)) < 1e-14
    sl = slice(2, T)
    for got, want in ((bc.k1, k1), (bc.k2, k2), (bc.k3, k3), (bc.post_std, ps)):
        assert np.max(np.abs(got[sl] - np.array(want[sl]))) < 1e-12


def test_small_t_limit(bc, schedule):
    ratio = schedule.snr(bc.T) / schedule.snr(1)
    assert ratio < 1e-8
    assert bc.m[1] == pytest.approx(schedule.alpha[1], rel=1e-8)
    assert abs(bc.n[1]) < 1e-6


def test_step_kernel_chain_identity(bc):
    for t in range(1, bc.T + 1):
        a, b, d = bridge.step_kernel(bc, t)
        assert abs(a * bc.m[t - 1] - bc.m[t]) < 1e-12
        assert abs(a * bc.n[t - 1] + b - bc.n[t]) < 1e-12
        assert abs(a * a * bc.sbar[t - 1] ** 2 + d * d - bc.sbar[t] ** 2) < 1e-12
        assert d >= 0


def test_step_kernel_composition_from_z0(bc):
    m, n, v = bc.m[0], bc.n[0], bc.sbar[0] ** 2
    for t in range(1, bc.T + 1):
        a, b, d = bridge.step_kernel(bc, t)
        m, n, v = a * m, a * n + b, a * a * v + d * d
        assert max(abs(m - bc.m[t]), abs(n - bc.n[t]), abs(v - bc.sbar[t] ** 2)) < 1e-10


def test_step_kernel_range(bc):
    for t in (0, bc.T + 1):
        with pytest.raises(ValueError):
            bridge.step_kernel(bc, t)


def test_forward_sample_mean_and_variance(bc):
    t, N = 400, 100_000
    z0, zT = np.array([0.7, -1.2]), np.array([-0.3, 0.9])
    zs, eps = bridge.forward_sample(bc, t, np.broadcast_to(z0, (N, 2)), np.broadcast_to(zT, (N, 2)),
                                    rng=Rng(3))
    sd = bc.sbar[t]
    mean = bc.m[t] * z0 + bc.n[t] * zT
    assert np.all(np.abs(zs.mean(0) - mean) < 3 * sd / np.sqrt(N))
    assert np.all(np.abs(zs.var(0) - sd ** 2) < 3 * sd ** 2 * np.sqrt(2 / N))
    assert np.allclose(zs, mean + sd * eps, atol=1e-15)


def test_forward_sample_zero_eps_and_shape_errors(bc):
    z0, zT = np.ones(4), 2 * np.ones(4)
    z, _ = bridge.forward_sample(bc, 10, z0, zT, eps=np.zeros(4))
    assert np.array_equal(z, bc.m[10] * z0 + bc.n[10] * zT)
    with pytest.raises(ValueError, match="shape mismatch"):
        bridge.forward_sample(bc, 10, np.ones(3), np.ones(4), eps=np.zeros(3))


def test_forward_sample_per_sample_timesteps(bc):
    z0, zT = np.ones((3, 2)), np.zeros((3, 2))
    t = np.array([1, 500, 999])
    z, _ = bridge.forward_sample(bc, t, z0, zT, eps=np.zeros((3, 2)))
    assert np.allclose(z[:, 0], bc.m[t])


def test_posterior_noiseless_fixed_line_all_t(bc):
    z0, zT = np.array([0.4, -1.1, 2.0]), np.array([1.5, 0.2, -0.7])
    for t in range(2, bc.T + 1):
        z_t = bc.m[t] * z0 + bc.n[t] * zT
        mean, _ = bridge.posterior(bc, t, z_t, z0, zT)
        assert np.max(np.abs(mean - (bc.m[t - 1] * z0 + bc.n[t - 1] * zT))) < 1e-10


def test_posterior_marginalization_closed_form(bc):
    t = np.arange(2, bc.T)
    total = bc.k1[t] ** 2 * bc.sbar[t] ** 2 + bc.post_std[t] ** 2
    assert np.max(np.abs(total - bc.sbar[t - 1] ** 2)) < 1e-10
    assert np.all(bc.post_std[2:] >= 0)
    assert bc.post_std[2] < 0.02


def test_posterior_range(bc):
    with pytest.raises(ValueError):
        bridge.posterior(bc, 1, np.zeros(2), np.zeros(2), np.zeros(2))


@given(t=st.integers(2, 999), seed=st.integers(0, 2 ** 32 - 1))
def test_posterior_fixed_line_property(bc, t, seed):
    r = np.random.default_rng(seed)
    z0, zT = r.normal(size=(2, 6))
    mean, _ = bridge.posterior(bc, t, bc.m[t] * z0 + bc.n[t] * zT, z0, zT)
    assert np.allclose(mean, bc.m[t - 1] * z0 + bc.n[t - 1] * zT, atol=1e-10, rtol=0)


def test_dan_unit_norm_and_exact_map(bc):
    c, s = bridge.dan_coefficients(bc, np.arange(1, bc.T))
    assert np.max(np.abs(c * c + s * s - 1)) < 1e-12
    z0, zT = np.array([0.3, -0.8]), np.array([1.0, 2.0])
    for t in (1, 300, 999):
        z = bc.m[t] * z0 + bc.n[t] * zT
        ct, _ = bridge.dan_coefficients(bc, t)
        assert np.allclose(bridge.dan_normalize(bc, t, z, zT), ct * z0, atol=1e-14, rtol=0)


def test_dan_unit_variance_monte_carlo(bc):
    N = 100_000
    r = Rng(9)
    for t in (5, 500, 995):
        z0, zT = r.randn((N, 2)), r.randn((N, 2))
        z, _ = bridge.forward_sample(bc, t, z0, zT, rng=r)
        v = bridge.dan_normalize(bc, t, z, zT).var(axis=0, ddof=1)
        assert np.all(np.abs(v - 1) < 3 * np.sqrt(2 / (N - 1)))


def test_dan_guards(bc):
    with pytest.raises(ValueError):
        bridge.dan_normalize(bc, bc.T, np.zeros(2), np.zeros(2))
    s = make_vp_schedule(4, 0.1, 0.2)
    c = bridge_coeffs(s)
    assert np.isfinite(bridge.dan_normalize(c, 3, np.ones(2), np.ones(2))).all()


def test_recover_z0_round_trip_and_amplification(bc):
    r = np.random.default_rng(2)
    z0, zT, eps = r.normal(size=(3, 8))
    for t in (1, 250, 750, 990):
        z, _ = bridge.forward_sample(bc, t, z0, zT, eps=eps)
        assert np.max(np.abs(bridge.recover_z0(bc, t, z, zT, eps) - z0)) < 1e-10
        delta = 1e-3 * r.normal(size=8)
        err = bridge.recover_z0(bc, t, z, zT, eps + delta) - z0
        gain = bc.sbar[t] / bc.m[t]
        assert np.linalg.norm(err) == pytest.approx(gain * np.linalg.norm(delta), rel=1e-8)
    z = bc.m[300] * z0 + bc.n[300] * zT
    assert np.allclose(bridge.recover_z0(bc, 300, z, zT, np.zeros(8)), z0, atol=1e-12, rtol=0)


def test_recover_z0_guard(bc):
    with pytest.raises(ValueError, match="z0 recovery singular"):
        bridge.recover_z0(bc, bc.T, np.zeros(2), np.zeros(2), np.zeros(2))
    t_bad = int(np.argmax(bc.m < 1e-4))
    assert t_bad > 0
    with pytest.raises(ValueError, match="z0 recovery singular"):
        bridge.recover_z0(bc, t_bad, np.zeros(2), np.zeros(2), np.zeros(2))


def test_h_drift_zero_and_direction(schedule):
    x = np.array([0.5, -1.0, 2.0])
    for t in (0, 100, 700, 999):
        rho = schedule.alpha[-1] / schedule.alpha[t]
        assert np.allclose(bridge.h_drift(schedule, t, x / rho, x), 0, atol=1e-9)
        z = np.array([1.0, 1.0, 1.0])
        h = bridge.h_drift(schedule, t, z, x)
        assert np.all(np.sign(h) == np.sign(x - rho * z))
        denom = schedule.sigma[-1] ** 2 - rho ** 2 * schedule.sigma[t] ** 2
        assert np.allclose(h, rho * (x - rho * z) / denom, rtol=1e-9)
    with pytest.raises(ValueError):
        bridge.h_drift(schedule, schedule.T, x, x)


def test_incompatible_schedule_detected(monkeypatch):
    s = make_vp_schedule(10, 0.01, 0.2)
    # a bogus sigma breaks the bridge variance recursion
    sigma = s.sigma.copy()
    sigma[5] *= 1.5
    alpha = np.sqrt(1 - sigma ** 2)
    from dpbridge.schedule import Schedule

    bad = Schedule(T=s.T, alpha=alpha, sigma=sigma, beta=s.beta)
    with pytest.raises(ValueError, match="schedule incompatible with bridge"):
        bridge_coeffs(bad)
