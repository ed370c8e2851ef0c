"""Dense-prediction metrics (affine-aligned depth, angular normal error) and evaluation sweeps."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import NOISE_KINDS, decode_depth, perturb
from .sampler import SamplerConfig, accelerated_sample
from .tensor import Rng, as_tensor, atomic_write
from .trainer import STREAM_SAMPLE

DEPTH_FLOOR = 1e-6
ANGLE_THRESHOLD_DEG = 11.25
STREAM_NOISE = 7

# noise grid of the robustness sweep: kind -> levels (0 is the clean row)
ROBUSTNESS_GRID = {
    "gaussian": (0.05, 0.1, 0.2, 0.5),
    "uniform": (0.05, 0.1, 0.2, 0.5),
    "poisson": (0.05, 0.1),
    "salt_pepper": (0.05, 0.1),
}
CSV_COLUMNS = ("task", "n_steps", "noise_kind", "noise_level", "absrel", "delta1",
               "mean_angle", "pct11_25", "n_samples", "seed")


@dataclass(frozen=True)
class DepthEvalResult:
    absrel: float
    delta1: float
    scale: float
    shift: float
    n_valid: int
    degenerate: bool = False


@dataclass(frozen=True)
class NormalEvalResult:
    mean_angle_deg: float
    pct_below_11_25: float
    n_valid: int
    n_excluded: int


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def align_affine(pred, gt, mask=None):
    """Least-squares ``(s, b)`` minimizing ``sum (s*pred + b - gt)^2`` over the mask.

    Returns ``(s, b, degenerate)``; a constant prediction gives ``s = 0``,
    ``b = mean(gt)`` and ``degenerate = True``.
    """
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mask = _mask(mask, pred.shape)
    p, g = pred[mask], gt[mask]
    if p.size < 2:
        raise ValueError("alignment needs at least 2 valid pixels")
    # centred normal equations are better conditioned than the raw 2x2 system
    p_mean, g_mean = p.mean(), g.mean()
    dp = p - p_mean
    var = float(dp @ dp)
    if var <= 1e-24 * max(1.0, float(p @ p)):
        return 0.0, float(g_mean), True
    s = float(dp @ (g - g_mean)) / var
    return s, float(g_mean - s * p_mean), False


def depth_metrics(pred, gt, mask=None, fit_mask=None, align=True) -> DepthEvalResult:
    """AbsRel and delta1 of a positive depth prediction after affine alignment.

    ``fit_mask`` restricts the pixels used to fit the alignment (defaults to
    ``mask``); metrics are always reported over ``mask``.
    """
    pred, gt = as_tensor(pred), as_tensor(gt)
    mask = _mask(mask, gt.shape)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    if np.any(gt[mask] <= 0):
        raise ValueError("ground-truth depth must be positive on the mask")
    s, b, degenerate = 1.0, 0.0, False
    if align:
        s, b, degenerate = align_affine(pred, gt, mask if fit_mask is None else fit_mask)
    aligned = np.maximum(s * pred[mask] + b, DEPTH_FLOOR)
    d = gt[mask]
    absrel = float(np.mean(np.abs(d - aligned) / d))
    ratio = np.maximum(d / aligned, aligned / d)
    delta1 = float(np.mean(ratio < 1.25))
    return DepthEvalResult(absrel=absrel, delta1=delta1, scale=s, shift=b,
                           n_valid=int(mask.sum()), degenerate=degenerate)


def normal_metrics(pred, gt, mask=None) -> NormalEvalResult:
    """Mean angular error (degrees) and fraction of pixels under 11.25 degrees.

    Pixels where either vector has zero norm are excluded and counted.
    """
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"expected matching (..., 3) normals, got {pred.shape} and {gt.shape}")
    mask = _mask(mask, pred.shape[:-1])
    pn = np.linalg.norm(pred, axis=-1)
    gn = np.linalg.norm(gt, axis=-1)
    valid = mask & (pn > 0) & (gn > 0)
    n_excluded = int(mask.sum() - valid.sum())
    if not valid.any():
        raise ValueError("no valid normal pixels")
    cos = np.sum(pred[valid] * gt[valid], axis=-1) / (pn[valid] * gn[valid])
    angle = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return NormalEvalResult(mean_angle_deg=float(angle.mean()),
                            pct_below_11_25=float(np.mean(angle < ANGLE_THRESHOLD_DEG)),
                            n_valid=int(valid.sum()), n_excluded=n_excluded)


def per_image_metrics(task, Y_hat, Y, depth_range=(0.1, 10.0)):
    """Metric arrays with one entry per image; ``Y_hat``/``Y`` in the encoded [-1, 1] space."""
    Y_hat, Y = as_tensor(Y_hat), as_tensor(Y)
    if Y_hat.shape != Y.shape:
        raise ValueError(f"shape mismatch: {Y_hat.shape} vs {Y.shape}")
    if task == "depth":
        res = [depth_metrics(decode_depth(p[..., 0], depth_range), decode_depth(g[..., 0], depth_range))
               for p, g in zip(Y_hat, Y)]
        return {"absrel": np.array([r.absrel for r in res]),
                "delta1": np.array([r.delta1 for r in res])}
    if task == "normal":
        res = [normal_metrics(p, g) for p, g in zip(Y_hat, Y)]
        return {"mean_angle": np.array([r.mean_angle_deg for r in res]),
                "pct11_25": np.array([r.pct_below_11_25 for r in res])}
    raise ValueError(f"unknown task {task!r}")


def evaluate_maps(task, Y_hat, Y, depth_range=(0.1, 10.0)):
    """Per-image metrics averaged over a batch; keys of the other task are NaN."""
    out = {"absrel": np.nan, "delta1": np.nan, "mean_angle": np.nan, "pct11_25": np.nan}
    out.update({k: float(v.mean()) for k, v in per_image_metrics(task, Y_hat, Y, depth_range).items()})
    return out


def mean_depth_baseline(Y_train, Y_test, depth_range=(0.1, 10.0)):
    """AbsRel of a constant prediction equal to the training-set mean depth.

    A constant map is degenerate under affine alignment, so each test image
    is effectively scored against its own mean depth.
    """
    level = float(np.mean(as_tensor(Y_train)))
    preds = np.full(np.shape(Y_test), level)
    return evaluate_maps("depth", preds, Y_test, depth_range)["absrel"]


def predict_batch(model, bc, codec, X, cfg: SamplerConfig):
    """Sample every input with a shared sampler config; returns decoded maps."""
    X = as_tensor(X)
    rng = Rng(cfg.seed).spawn(STREAM_SAMPLE)
    y_hat, _ = accelerated_sample(model, bc, codec, X, cfg, rng=rng)
    return y_hat


def metrics_row(task, n_steps, kind, level, metrics, n, seed):
    return {"task": task, "n_steps": n_steps, "noise_kind": kind, "noise_level": level,
            **metrics, "n_samples": n, "seed": seed}


def step_sweep(model, bc, codec, X, Y, task, steps=(1, 2, 5, 10, 20, 50), g_mode="deterministic",
               seed=0, use_dan=True, depth_range=(0.1, 10.0), **sampler_options):
    """One metrics row per sampling-step count on clean inputs.

    ``sampler_options`` are extra ``SamplerConfig`` fields (``clip_z0``, ``t_start``).
    """
    rows = []
    for n in steps:
        cfg = SamplerConfig(n_steps=int(n), g_mode=g_mode, seed=seed, use_dan=use_dan,
                            **sampler_options)
        y_hat = predict_batch(model, bc, codec, X, cfg)
        rows.append(metrics_row(task, int(n), "none", 0.0,
                                evaluate_maps(task, y_hat, Y, depth_range), len(X), seed))
    return rows


def robustness_sweep(model, bc, codec, X, Y, task, grid=None, n_steps=50, g_mode="deterministic",
                     seed=0, use_dan=True, depth_range=(0.1, 10.0), **sampler_options):
    """Metrics on inputs corrupted by each (kind, level); the first row is the clean input."""
    grid = ROBUSTNESS_GRID if grid is None else grid
    X = as_tensor(X)
    cfg = SamplerConfig(n_steps=n_steps, g_mode=g_mode, seed=seed, use_dan=use_dan,
                        **sampler_options)
    settings = [("none", 0.0)] + [(k, float(lv)) for k in grid for lv in grid[k]]
    rows = []
    for i, (kind, level) in enumerate(settings):
        if kind == "none":
            Xp = X
        else:
            if kind not in NOISE_KINDS:
                raise ValueError(f"unknown noise kind {kind!r}")
            # every setting owns its own stream so adding kinds does not shift others
            rng = Rng(seed).spawn(STREAM_NOISE).spawn(i)
            Xp = perturb(X, kind, level, rng)
        y_hat = predict_batch(model, bc, codec, Xp, cfg)
        rows.append(metrics_row(task, n_steps, kind, level,
                                evaluate_maps(task, y_hat, Y, depth_range), len(X), seed))
    return rows


def write_rows_csv(path, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})
    atomic_write(path, buf.getvalue().encode())


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6g}"
    return v
