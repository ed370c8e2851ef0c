"""Brute-force oracles for the closed-form bridge results, each paired with a negative control.

Every check returns a list of ``VerificationReport``. A report *passes* when
its residual is within tolerance. Negative controls deliberately corrupt the
implementation and are expected to fail; ``ok`` is true when the outcome
matches the expectation.
"""

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import bridge
from .bridge import BridgeCoefficients
from .codec import LinearCodec, _block_mean
from .denoiser import Denoiser
from .sampler import SamplerConfig, accelerated_latent, ancestral_latent, jump_posterior_std
from .schedule import Schedule, schedule_from_alpha
from .tensor import Rng, atomic_write
from .trainer import TrainConfig, composite_loss_and_grad

CLOSED_FORM_TOL = 1e-10
UNIT_NORM_TOL = 1e-12
MC_SIGMAS = 3.0
TERMINAL_RMS_TOL = 0.02
GRAD_REL_TOL = 1e-5

# stream keys per check, so each check owns its randomness
_STREAMS = {"sde": 11, "dan": 12, "sampler": 13, "grad": 14}


@dataclass
class VerificationReport:
    name: str
    residual: float
    tolerance: float
    n_samples: int = 0
    wall_s: float = 0.0
    control: bool = False
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tolerance)

    @property
    def ok(self) -> bool:
        """True when a regular check passes or a negative control fails."""
        return self.passed != self.control

    def to_json(self) -> str:
        d = asdict(self)
        d["pass"] = self.passed
        d["ok"] = self.ok
        return json.dumps(d, sort_keys=True, default=float)


class _Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def _finish(reports, timer):
    for r in reports:
        r.wall_s = timer.elapsed
    return reports


# ---------------------------------------------------------------- composition

def composition_residuals(bc: BridgeCoefficients, k1_factor=1.0):
    """Max residuals of the posterior identities over t in [2, T-1].

    Posterior coefficients are rebuilt from Bayes' rule in precision form
    (prior N(m z0 + n zT, sbar^2) times likelihood N(a z + b zT, delta^2)),
    independently of the k1/k2/k3 formulas.
    """
    t = np.arange(2, bc.T)
    m_p, n_p, v_p = bc.m[t - 1], bc.n[t - 1], bc.sbar[t - 1] ** 2
    a, b, d2 = bc.a[t], bc.b[t], bc.delta[t] ** 2
    k1, k2, k3 = bc.k1[t] * k1_factor, bc.k2[t], bc.k3[t]
    post_var = 1.0 / (1.0 / v_p + a * a / d2)
    mean_res = max(np.max(np.abs(k1 - post_var * a / d2)),
                   np.max(np.abs(k2 - post_var * m_p / v_p)),
                   np.max(np.abs(k3 - post_var * (n_p / v_p - a * b / d2))))
    var_res = np.max(np.abs(bc.post_std[t] ** 2 - post_var))
    # integrating the posterior against q(z_t | z0, zT) must give q(z_{t-1} | z0, zT)
    closure = max(np.max(np.abs(k1 * bc.m[t] + k2 - m_p)),
                  np.max(np.abs(k1 * bc.n[t] + k3 - n_p)),
                  np.max(np.abs(k1 ** 2 * bc.sbar[t] ** 2 + bc.post_std[t] ** 2 - v_p)))
    return float(mean_res), float(var_res), float(closure)


def check_composition(bc: BridgeCoefficients, include_controls=True):
    with _Timer() as timer:
        mean_res, var_res, closure = composition_residuals(bc)
        n = bc.T - 2
        reports = [
            VerificationReport("composition.posterior_mean", mean_res, CLOSED_FORM_TOL, n),
            VerificationReport("composition.posterior_var", var_res, CLOSED_FORM_TOL, n),
            VerificationReport("composition.closure", closure, CLOSED_FORM_TOL, n),
        ]
        small = bridge.bridge_coeffs(schedule_from_alpha([1.0, 0.8, 0.6, 0.4]))
        reports.append(VerificationReport("composition.three_step", max(composition_residuals(small)),
                                          1e-12, small.T - 2))
        if include_controls:
            reports.append(VerificationReport("composition.control_k1_scaled",
                                              max(composition_residuals(bc, k1_factor=1.01)),
                                              CLOSED_FORM_TOL, n, control=True))
    return _finish(reports, timer)


def step_chain_residual(bc: BridgeCoefficients):
    """Iterate (m, n, sbar^2) through the one-step kernels from t=0 and compare at every t."""
    m, n, v = bc.m[0], bc.n[0], bc.sbar[0] ** 2
    worst = 0.0
    for t in range(1, bc.T + 1):
        a, b, d = bridge.step_kernel(bc, t)
        m, n, v = a * m, a * n + b, a * a * v + d * d
        worst = max(worst, abs(m - bc.m[t]), abs(n - bc.n[t]), abs(v - bc.sbar[t] ** 2))
    return float(worst)


def check_step_chain(bc: BridgeCoefficients):
    with _Timer() as timer:
        reports = [VerificationReport("step_chain", step_chain_residual(bc), CLOSED_FORM_TOL, bc.T)]
    return _finish(reports, timer)


# ---------------------------------------------------------------- bridge SDE

def euler_grid(T, substeps=4, terminal_levels=30):
    """Uniform ``substeps`` per unit on [0, T-1], then halving steps towards T.

    The drift of the conditioned process grows like 1/(T - t); halving keeps
    each step a fixed fraction of the remaining time, so the last step
    leaves noise of order sqrt(beta * 2**-terminal_levels).
    """
    body = np.linspace(0.0, T - 1.0, (T - 1) * substeps + 1)
    tail = T - 2.0 ** -np.arange(1, terminal_levels + 1)
    return np.concatenate([body, tail, [float(T)]])


def simulate_bridge_sde(s: Schedule, z0, x, n_traj, rng: Rng, h_scale=1.0, grid=None,
                        record=()):
    """Euler-Maruyama for dz = [f z + g^2 h(z, t)] dt + g dW started at ``z0``.

    Uses the continuous piecewise-constant-beta view of the schedule
    (f = -beta/2, g^2 = beta). Returns the terminal states and a dict of
    states at the integer times in ``record``.
    """
    grid = euler_grid(s.T) if grid is None else np.asarray(grid, dtype=np.float64)
    z0, x = np.asarray(z0, dtype=np.float64), np.asarray(x, dtype=np.float64)
    z = np.broadcast_to(z0, (n_traj,) + z0.shape).copy()
    wanted = {float(t) for t in record}
    snaps = {}
    for t0, t1 in zip(grid[:-1], grid[1:]):
        dt = t1 - t0
        beta = float(s.beta_rate_at(t0))
        drift = -0.5 * beta * z
        if h_scale != 0.0:
            drift = drift + beta * h_scale * bridge.h_drift(s, t0, z, x)
        z = z + drift * dt + np.sqrt(beta * dt) * rng.randn(z.shape)
        if t1 in wanted:
            snaps[int(t1)] = z.copy()
    return z, snaps


def _marginal_zscores(bc, snaps, z0, x):
    """Worst |z| of per-dimension means and of the dimension-pooled variance."""
    worst_mean, worst_var = 0.0, 0.0
    for t, z in snaps.items():
        N = z.shape[0]
        sd = bc.sbar[t]
        mean_err = z.mean(axis=0) - (bc.m[t] * z0 + bc.n[t] * x)
        worst_mean = max(worst_mean, float(np.max(np.abs(mean_err)) / (sd / np.sqrt(N))))
        pooled = float(np.mean(z.var(axis=0, ddof=1)))
        se = sd ** 2 * np.sqrt(2.0 / ((N - 1) * z.shape[1]))
        worst_var = max(worst_var, abs(pooled - sd ** 2) / se)
    return worst_mean, worst_var


def check_sde_bridge(s: Schedule, bc: BridgeCoefficients, z0=None, x=None, n_traj=10_000,
                     dim=4, seed=0, include_controls=True):
    rng = Rng(seed).spawn(_STREAMS["sde"])
    if z0 is None:
        z0 = rng.randn(dim)
    if x is None:
        x = rng.randn(dim)
    z0, x = np.asarray(z0, dtype=np.float64), np.asarray(x, dtype=np.float64)
    marks = (s.T // 4, s.T // 2, 3 * s.T // 4)
    reports = []
    with _Timer() as timer:
        zT, snaps = simulate_bridge_sde(s, z0, x, n_traj, rng.spawn(0), record=marks)
        rms = float(np.sqrt(np.mean((zT - x) ** 2)))
        zm, zv = _marginal_zscores(bc, snaps, z0, x)
        reports += [
            VerificationReport("sde_bridge.terminal_rms", rms, TERMINAL_RMS_TOL, n_traj),
            VerificationReport("sde_bridge.marginal_mean_z", zm, MC_SIGMAS, n_traj),
            VerificationReport("sde_bridge.marginal_var_z", zv, MC_SIGMAS, n_traj),
        ]
        _, snaps_eq = simulate_bridge_sde(s, x, x, n_traj, rng.spawn(1), record=marks)
        zm_eq, zv_eq = _marginal_zscores(bc, snaps_eq, x, x)
        reports.append(VerificationReport("sde_bridge.start_at_target_z", max(zm_eq, zv_eq),
                                          MC_SIGMAS, n_traj))
        if include_controls:
            free, _ = simulate_bridge_sde(s, z0, x, n_traj, rng.spawn(2), h_scale=0.0)
            reports.append(VerificationReport("sde_bridge.control_no_h",
                                              float(np.sqrt(np.mean((free - x) ** 2))),
                                              TERMINAL_RMS_TOL, n_traj, control=True))
    return _finish(reports, timer)


# ---------------------------------------------------------------- DAN

def literal_swapped_dan(bc: BridgeCoefficients, t, z_t, zT):
    """The normalization with the z0/zT weights exchanged; kept only as a negative control."""
    return (z_t - bc.m[t] * zT) / np.sqrt(bc.n[t] ** 2 + bc.sbar[t] ** 2)


DAN_TIMESTEPS = (1, 10, 100, 250, 500, 750, 900, 990, 999)


def dan_variance_z(bc, n_samples, dim, rng, normalize):
    """Worst |Var(z') - 1| / SE over the probe timesteps, with z0, zT ~ N(0, I)."""
    worst = 0.0
    se = np.sqrt(2.0 / (n_samples - 1))
    for t in DAN_TIMESTEPS:
        if t >= bc.T:
            continue
        z0 = rng.randn((n_samples, dim))
        zT = rng.randn((n_samples, dim))
        z_t, _ = bridge.forward_sample(bc, t, z0, zT, rng=rng)
        zp = normalize(bc, t, z_t, zT)
        worst = max(worst, float(np.max(np.abs(zp.var(axis=0, ddof=1) - 1.0))) / se)
    return worst


def check_dan(bc: BridgeCoefficients, n_samples=100_000, dim=4, seed=0, include_controls=True):
    rng = Rng(seed).spawn(_STREAMS["dan"])
    with _Timer() as timer:
        c, s_ = bridge.dan_coefficients(bc, np.arange(1, bc.T))
        reports = [
            VerificationReport("dan.unit_norm", float(np.max(np.abs(c * c + s_ * s_ - 1.0))),
                               UNIT_NORM_TOL, bc.T - 1),
            VerificationReport("dan.variance_z",
                               dan_variance_z(bc, n_samples, dim, rng.spawn(0), bridge.dan_normalize),
                               MC_SIGMAS, n_samples),
        ]
        if include_controls:
            reports.append(VerificationReport(
                "dan.control_swapped_weights",
                dan_variance_z(bc, n_samples, dim, rng.spawn(1), literal_swapped_dan),
                MC_SIGMAS, n_samples, control=True))
    return _finish(reports, timer)


# ---------------------------------------------------------------- samplers

class OracleDenoiser:
    """Returns the exact noise of a DAN-normalized state for a known z0."""

    def __init__(self, bc: BridgeCoefficients, z0):
        self.bc, self.z0, self.T = bc, np.asarray(z0, dtype=np.float64), bc.T

    def __call__(self, z_prime, zT, t):
        c, s = bridge.dan_coefficients(self.bc, t)
        return (z_prime - c * self.z0) / s


class BiasedDenoiser(OracleDenoiser):
    """Oracle plus a smooth state-dependent error, so predicted z0 differs from z0."""

    def __call__(self, z_prime, zT, t):
        return super().__call__(z_prime, zT, t) + 0.1 * np.tanh(z_prime + zT)


def coefficient_residual(bc: BridgeCoefficients):
    """Max gap between the full-grid accelerated update and (k1, k2, k3, post_std)."""
    worst = 0.0
    for t in range(2, bc.T):
        g = jump_posterior_std(bc, t - 1, t)
        c_z = np.sqrt(max(bc.sbar[t - 1] ** 2 - g * g, 0.0)) / bc.sbar[t]
        worst = max(worst, abs(c_z - bc.k1[t]), abs(bc.m[t - 1] - c_z * bc.m[t] - bc.k2[t]),
                    abs(bc.n[t - 1] - c_z * bc.n[t] - bc.k3[t]), abs(g - bc.post_std[t]))
    return float(worst)


def _trajectory(fn, model, bc, zT, cfg, seed):
    traj = []
    z0_hat = fn(model, bc, zT, cfg, rng=Rng(seed).spawn(_STREAMS["sampler"]), trajectory=traj)
    return np.stack(traj + [z0_hat])


def check_sampler_equivalence(bc: BridgeCoefficients, seed=0, dim=16, include_controls=True):
    rng = Rng(seed).spawn(_STREAMS["sampler"]).spawn(99)
    z0 = rng.randn((1, dim))
    zT = rng.randn((1, dim))
    model = BiasedDenoiser(bc, z0)
    full = SamplerConfig(grid=tuple(range(1, bc.T)), g_mode="markov")
    reports = []
    with _Timer() as timer:
        anc = _trajectory(ancestral_latent, model, bc, zT, full, seed)
        acc = _trajectory(accelerated_latent, model, bc, zT, full, seed)
        reports.append(VerificationReport("sampler.markov_equivalence",
                                          float(np.max(np.abs(anc - acc))), CLOSED_FORM_TOL,
                                          bc.T - 1, detail={"steps": bc.T - 1, "dim": dim}))
        reports.append(VerificationReport("sampler.coefficients", coefficient_residual(bc),
                                          CLOSED_FORM_TOL, bc.T - 2))
        det = replace(full, g_mode="deterministic")
        a = _trajectory(accelerated_latent, model, bc, zT, det, seed)
        b = _trajectory(accelerated_latent, model, bc, zT, det, seed + 1)
        reports.append(VerificationReport("sampler.deterministic_seed_free",
                                          float(np.max(np.abs(a - b))), 0.0, 2))
        oracle = OracleDenoiser(bc, z0)
        out = accelerated_latent(oracle, bc, zT, full, rng=Rng(seed))
        reports.append(VerificationReport("sampler.oracle_recovers_z0",
                                          float(np.max(np.abs(out - z0))), 1e-8, 1))
        if include_controls:
            half = replace(full, grid=tuple(range(1, bc.T, 2)))
            acc_half = _trajectory(accelerated_latent, model, bc, zT, half, seed)
            n = min(len(anc), len(acc_half))
            reports.append(VerificationReport("sampler.control_mismatched_grid",
                                              float(np.max(np.abs(anc[-n:] - acc_half[-n:]))),
                                              CLOSED_FORM_TOL, bc.T - 1, control=True))
    return _finish(reports, timer)


# ---------------------------------------------------------------- gradients

def small_problem(seed=0, image_shape=(8, 8, 1), width=16, n_blocks=2, temb_dim=8, batch=4):
    """A model under 10^4 parameters with a fixed micro-batch mixing gated and ungated t."""
    from .schedule import make_vp_schedule

    rng = Rng(seed).spawn(_STREAMS["grad"])
    bc = bridge.bridge_coeffs(make_vp_schedule())
    codec = LinearCodec(image_shape=image_shape, n_calibration=256, random_state=seed).fit()
    model = Denoiser(codec.latent_shape_, width=width, n_blocks=n_blocks, temb_dim=temb_dim)
    model.T = bc.T
    model.init_params(rng.spawn(0), zero_output=False)
    x = np.tanh(rng.randn((batch,) + image_shape))
    y = np.tanh(rng.randn((batch,) + image_shape))
    t = np.array([5, 200, 600, 990][:batch] + [300] * max(0, batch - 4))
    eps = rng.randn((batch,) + codec.latent_shape_)
    return model, bc, codec, x, y, t, eps


def gradient_rel_error(model, bc, codec, x, y, t, eps, cfg, n_params=200, h=1e-5, seed=0,
                       decode_adjoint=None):
    """Worst per-parameter relative error between backprop and central differences."""
    _, grad = composite_loss_and_grad(model, bc, codec, x, y, t, eps, cfg, decode_adjoint)
    rng = Rng(seed).spawn(_STREAMS["grad"]).spawn(1)
    idx = rng.generator.choice(model.n_params, size=min(n_params, model.n_params), replace=False)
    worst = 0.0
    for i in idx:
        keep = model.theta[i]
        model.theta[i] = keep + h
        up, _ = composite_loss_and_grad(model, bc, codec, x, y, t, eps, cfg)
        model.theta[i] = keep - h
        down, _ = composite_loss_and_grad(model, bc, codec, x, y, t, eps, cfg)
        model.theta[i] = keep
        fd = (up["total"] - down["total"]) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-7))
    return float(worst), len(idx)


def check_gradients(seed=0, n_params=200, h=1e-5, include_controls=True):
    model, bc, codec, x, y, t, eps = small_problem(seed)
    reports = []
    with _Timer() as timer:
        for name, omega2 in (("gradients.elbo_only", 0.0), ("gradients.full", 0.1)):
            cfg = TrainConfig(omega2=omega2)
            err, n = gradient_rel_error(model, bc, codec, x, y, t, eps, cfg, n_params, h, seed)
            reports.append(VerificationReport(name, err, GRAD_REL_TOL, n,
                                              detail={"n_params_model": model.n_params}))
        if include_controls:
            f = int(codec.factor)
            err, n = gradient_rel_error(model, bc, codec, x, y, t, eps, TrainConfig(omega2=0.1),
                                        n_params, h, seed,
                                        decode_adjoint=lambda G: _block_mean(G, f))
            reports.append(VerificationReport("gradients.control_wrong_transpose", err,
                                              GRAD_REL_TOL, n, control=True))
    return _finish(reports, timer)


# ---------------------------------------------------------------- suite

def run_suite(s: Schedule, seed=0, n_traj=10_000, n_dan=100_000, include_controls=True):
    bc = bridge.bridge_coeffs(s)
    reports = []
    reports += check_composition(bc, include_controls)
    reports += check_step_chain(bc)
    reports += check_dan(bc, n_dan, seed=seed, include_controls=include_controls)
    reports += check_sde_bridge(s, bc, n_traj=n_traj, seed=seed, include_controls=include_controls)
    reports += check_sampler_equivalence(bc, seed=seed, include_controls=include_controls)
    reports += check_gradients(seed=seed, include_controls=include_controls)
    return reports


def write_jsonl(path, reports):
    atomic_write(path, "".join(r.to_json() + "\n" for r in reports).encode())


def format_table(reports) -> str:
    lines = [f"{'check':<38} {'residual':>12} {'tol':>9}  {'kind':<8} result"]
    for r in reports:
        kind = "control" if r.control else "check"
        lines.append(f"{r.name:<38} {r.residual:>12.3e} {r.tolerance:>9.1e}  {kind:<8} "
                     f"{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)


COEFF_COLUMNS = ("t", "alpha", "sigma", "snr", "m", "n", "sbar", "a", "b", "delta",
                 "k1", "k2", "k3", "post_std")


def dump_coefficients(path, bc: BridgeCoefficients):
    s = bc.schedule
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COEFF_COLUMNS)
    snr = s.snr_array
    for t in range(bc.T + 1):
        w.writerow([t] + [repr(float(v)) for v in (
            s.alpha[t], s.sigma[t], snr[t], bc.m[t], bc.n[t], bc.sbar[t], bc.a[t], bc.b[t],
            bc.delta[t], bc.k1[t], bc.k2[t], bc.k3[t], bc.post_std[t])])
    atomic_write(path, buf.getvalue().encode())
