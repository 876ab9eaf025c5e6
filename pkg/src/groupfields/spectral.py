"""Spectral stability margin and rolling early-warning statistics.

The stability margin is computed directly on the interaction matrix (the
margin of the influence-transfer operator): St = -Re(lambda_max(W)). For
nonnegative W the dominant eigenvalue is real and reachable by plain power
iteration; a dense eigensolver backs the rare non-converging cases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .interaction import InteractionMatrix

__all__ = [
    "SpectralReport",
    "EwsReport",
    "power_iteration",
    "relaxation_time",
    "rolling_ews",
]


@dataclass(frozen=True)
class SpectralReport:
    lambda_max: float                  # 1/s
    stability_margin: float            # St = -lambda_max under the W proxy
    relaxation_time: float             # s, inf at the critical point
    dominant_mode: np.ndarray          # unit vector, one entry per agent
    iterations: int
    converged: bool
    used_fallback: bool = False

    def __post_init__(self):
        m = np.array(self.dominant_mode, dtype=float)  # owned copy, frozen below
        m.setflags(write=False)
        object.__setattr__(self, "dominant_mode", m)


def relaxation_time(st: float) -> float:
    """1 / |St|; diverges (critical slowing down) as the margin vanishes."""
    return 1.0 / abs(st) if abs(st) > 1e-12 else float("inf")


def _as_matrix(W) -> np.ndarray:
    w = getattr(W, "weights", W)
    return np.asarray(w, dtype=float)


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def _dense_dominant(w: np.ndarray) -> tuple[float, np.ndarray]:
    vals, vecs = np.linalg.eig(w)
    i = int(np.argmax(vals.real))
    lam = float(vals[i].real)
    vec = vecs[:, i]
    if np.max(np.abs(vec.imag)) > 1e-9 * max(1.0, np.max(np.abs(vec.real))):
        mode = np.abs(vec)             # complex dominant pair: report moduli
    else:
        mode = vec.real
    nrm = np.linalg.norm(mode)
    mode = mode / nrm if nrm > 0 else np.full(w.shape[0], 1.0 / math.sqrt(w.shape[0]))
    return lam, _fix_sign(mode)


def power_iteration(
    W: InteractionMatrix | np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 500,
    x0: np.ndarray | None = None,
) -> SpectralReport:
    """Dominant eigenvalue of W by power iteration from a uniform start.

    The default start vector is uniform, so repeated runs agree bit-for-bit;
    callers tracking a slowly varying matrix may pass the previous mode as
    ``x0`` to warm-start (still deterministic). Convergence is declared when
    successive Rayleigh quotients differ by less than ``tol``; if
    ``max_iter`` is exhausted (complex dominant pair or a vanishing spectral
    gap) the dense eigensolver takes over and the report is flagged.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    w = _as_matrix(W)
    n = w.shape[0]
    if n == 0:
        raise ValueError("power iteration needs at least one agent")

    if x0 is not None and x0.shape == (n,):
        nrm0 = math.sqrt(float(x0 @ x0))
        x = x0 / nrm0 if nrm0 > 0 else np.full(n, 1.0 / math.sqrt(n))
    else:
        x = np.full(n, 1.0 / math.sqrt(n))
    lam_prev = None
    for it in range(1, max_iter + 1):
        y = w @ x
        lam = float(x @ y)             # Rayleigh quotient of the previous iterate
        nrm = math.sqrt(float(y @ y))
        if nrm < 1e-300:
            # W annihilated the iterate: spectrum is {0} on this subspace
            return SpectralReport(
                lambda_max=0.0,
                stability_margin=0.0,
                relaxation_time=relaxation_time(0.0),
                dominant_mode=_fix_sign(x),
                iterations=it,
                converged=True,
            )
        x = y / nrm
        if lam_prev is not None and abs(lam - lam_prev) < tol:
            return SpectralReport(
                lambda_max=lam,
                stability_margin=-lam,
                relaxation_time=relaxation_time(lam),
                dominant_mode=_fix_sign(x),
                iterations=it,
                converged=True,
            )
        lam_prev = lam

    lam, mode = _dense_dominant(w)
    return SpectralReport(
        lambda_max=lam,
        stability_margin=-lam,
        relaxation_time=relaxation_time(lam),
        dominant_mode=mode,
        iterations=max_iter,
        converged=False,
        used_fallback=True,
    )


# ---------------------------------------------------------------------------
# Rolling early-warning statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EwsReport:
    """Per-component rolling variance and lag autocorrelation with trend flags.

    Trend flags are +1 (rising), -1 (falling), or 0 (flat or undefined) and
    carry the classic early-warning signature: variance and autocorrelation
    both rising as the stability margin collapses.
    """

    variance: np.ndarray
    autocorrelation: np.ndarray        # NaN where undefined (constant input)
    variance_trend: np.ndarray
    autocorr_trend: np.ndarray
    valid: np.ndarray
    lag_steps: int
    window: int


def _residual_projector(k: int) -> np.ndarray:
    """Orthogonal projector onto the complement of {constant, linear}."""
    t = np.arange(k, dtype=float)
    t = (t - t.mean()) / max(1.0, t.std())
    b = np.stack([np.ones(k), t], axis=1)
    return np.eye(k) - b @ np.linalg.pinv(b)


def _window_stats(res: np.ndarray, lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Variance (ddof=2) and lag autocorrelation from detrended residuals.

    ``res`` has shape (..., k); statistics are taken along the last axis.
    """
    k = res.shape[-1]
    var = np.sum(res ** 2, axis=-1) / max(1, k - 2)
    a = res[..., :-lag]
    b = res[..., lag:]
    num = np.sum(a * b, axis=-1)
    den = np.sqrt(np.sum(a * a, axis=-1) * np.sum(b * b, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(den > 0, num / np.maximum(den, 1e-300), np.nan)
    return var, np.clip(rho, -1.0, 1.0)


def _slope_sign(series: np.ndarray) -> np.ndarray:
    """Sign of the least-squares slope along axis 0, with a deadband.
    Columns without finite data flag 0."""
    nw, m = series.shape
    t = np.arange(nw, dtype=float)
    t = t - t.mean()
    denom = float(np.sum(t * t))
    out = np.zeros(m, dtype=int)
    finite = np.isfinite(series)
    usable = finite.all(axis=0)
    if not usable.any():
        return out
    s = series[:, usable]
    slope = np.sum(t[:, None] * (s - s.mean(axis=0)), axis=0) / denom
    scale = np.maximum(np.max(np.abs(s), axis=0), 1e-12)
    sig = np.zeros(slope.shape, dtype=int)
    sig[slope > 1e-9 * scale] = 1
    sig[slope < -1e-9 * scale] = -1
    out[usable] = sig
    return out


def rolling_ews(
    history: np.ndarray,
    timestamps: np.ndarray | None = None,
    lag_seconds: float | None = None,
    min_samples: int = 16,
) -> EwsReport:
    """Early-warning statistics over a rolling window of state vectors.

    ``history`` is (k, m), time-ordered. Each component is linearly detrended
    over the full window before the variance and lag autocorrelation are
    taken. Trend flags fit a least-squares slope to the same statistics
    recomputed over half-length sub-windows whose endpoints sweep the second
    half of the window.
    """
    h = np.asarray(history, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    k, m = h.shape
    if k < min_samples:
        raise ValueError(f"rolling EWS needs >= {min_samples} samples, got {k}")

    lag = 1
    if lag_seconds is not None:
        if timestamps is None:
            raise ValueError("lag_seconds requires timestamps")
        dt = float(np.median(np.diff(np.asarray(timestamps, dtype=float))))
        lag = max(1, int(round(lag_seconds / dt)))
    if lag >= k - 2:
        raise ValueError(f"lag of {lag} steps does not fit a window of {k}")

    res = _residual_projector(k) @ h
    variance, rho = _window_stats(res.T, lag)
    # a numerically constant component carries no autocorrelation signal
    scale = np.maximum(np.max(np.abs(h), axis=0), 1.0)
    flat = np.sqrt(variance) < 1e-9 * scale
    rho = np.where(flat, np.nan, rho)
    valid = np.isfinite(rho)

    sub = k // 2
    n_windows = k - sub + 1
    idx = np.arange(sub)[None, :] + np.arange(n_windows)[:, None]
    windows = h[idx]                                   # (nw, sub, m)
    q = _residual_projector(sub)
    res_w = np.einsum("st,wtm->wsm", q, windows)
    sub_lag = min(lag, sub - 2)
    var_series, rho_series = _window_stats(np.moveaxis(res_w, 1, 2), max(1, sub_lag))

    return EwsReport(
        variance=variance,
        autocorrelation=rho,
        variance_trend=_slope_sign(var_series),
        autocorr_trend=_slope_sign(rho_series),
        valid=valid,
        lag_steps=lag,
        window=k,
    )
