"""Subject-level random-effects posterior: log posterior, gradient, Hessian,
Newton mode finding, Laplace approximation, and Gaussian conditioning on the
treatment-heterogeneity component.

All core routines are batched over subjects (leading axis B); the
single-subject API wraps a batch of one.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .design import HistoryBatch, likelihood_data

LOG2PI = math.log(2.0 * math.pi)


class LaplaceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LaplaceSummary:
    mode: np.ndarray
    cov: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool


@dataclass(frozen=True)
class ConditionalGaussian:
    mean: np.ndarray
    cov: np.ndarray


def _chol_inv(G):
    q = G.shape[0]
    if q == 0:
        return np.zeros((0, 0)), 0.0
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as e:
        raise LaplaceError("G is singular or not positive definite") from e
    Ginv = np.linalg.inv(G)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return Ginv, logdet


def _eta(X, beta, Z, b):
    # X: (B,J,p), beta: (p,), Z: (B,J,q), b: (B,q) -> (B,J)
    out = X @ beta if X.shape[2] else np.zeros(X.shape[:2])
    if Z.shape[2]:
        out = out + np.einsum("bjq,bq->bj", Z, b)
    return out


def log_post_b_batch(b, ld, params, Ginv, logdetG):
    """Batched log posterior of b_i (full constants included)."""
    b = np.atleast_2d(b)
    q = b.shape[1]
    out = np.zeros(b.shape[0])
    if q:
        out += -0.5 * np.einsum("bi,ij,bj->b", b, Ginv, b) - 0.5 * (logdetG + q * LOG2PI)
    sY, sM, sA = ld.slices
    sig2 = params.sigma ** 2
    etaY = _eta(ld.XY, params.beta_Y, ld.ZY, b[:, sY])
    with np.errstate(over="ignore"):
        out += np.sum(ld.wY * (-0.5 * (ld.yv - etaY) ** 2 / sig2
                               - 0.5 * (LOG2PI + math.log(sig2))), axis=1)
    if ld.XM.shape[2] or ld.ZM.shape[2]:
        etaM = _eta(ld.XM, params.beta_M, ld.ZM, b[:, sM])
        out += np.sum(ld.wM * (ld.mv * etaM - np.logaddexp(0.0, etaM)), axis=1)
    etaA = _eta(ld.XA, params.beta_A, ld.ZA, b[:, sA])
    out += np.sum(ld.wA * (ld.av * etaA - np.logaddexp(0.0, etaA)), axis=1)
    return out


def grad_log_post_b_batch(b, ld, params, Ginv):
    b = np.atleast_2d(b)
    sY, sM, sA = ld.slices
    sig2 = params.sigma ** 2
    parts = []
    etaY = _eta(ld.XY, params.beta_Y, ld.ZY, b[:, sY])
    if ld.ZY.shape[2]:
        parts.append(np.einsum("bj,bjq->bq", ld.wY * (ld.yv - etaY) / sig2, ld.ZY))
    if ld.ZM.shape[2]:
        etaM = _eta(ld.XM, params.beta_M, ld.ZM, b[:, sM])
        parts.append(np.einsum("bj,bjq->bq", ld.wM * (ld.mv - expit(etaM)), ld.ZM))
    if ld.ZA.shape[2]:
        etaA = _eta(ld.XA, params.beta_A, ld.ZA, b[:, sA])
        parts.append(np.einsum("bj,bjq->bq", ld.wA * (ld.av - expit(etaA)), ld.ZA))
    lik = np.concatenate(parts, axis=1) if parts else np.zeros_like(b)
    return lik - b @ Ginv


def hess_log_post_b_batch(b, ld, params, Ginv):
    b = np.atleast_2d(b)
    B, q = b.shape
    sY, sM, sA = ld.slices
    H = np.zeros((B, q, q))
    sig2 = params.sigma ** 2
    if ld.ZY.shape[2]:
        w = ld.wY / sig2
        H[:, sY, sY] -= np.einsum("bj,bjp,bjq->bpq", w, ld.ZY, ld.ZY)
    if ld.ZM.shape[2]:
        etaM = _eta(ld.XM, params.beta_M, ld.ZM, b[:, sM])
        p = expit(etaM)
        H[:, sM, sM] -= np.einsum("bj,bjp,bjq->bpq", ld.wM * p * (1 - p), ld.ZM, ld.ZM)
    if ld.ZA.shape[2]:
        etaA = _eta(ld.XA, params.beta_A, ld.ZA, b[:, sA])
        p = expit(etaA)
        H[:, sA, sA] -= np.einsum("bj,bjp,bjq->bpq", ld.wA * p * (1 - p), ld.ZA, ld.ZA)
    return H - Ginv


def laplace_batch(ld, params, Ginv, logdetG, max_iter=100, tol=1e-6, b0=None):
    """Newton mode finding with backtracking; returns (mode, cov, converged, iters).

    The negative Hessian is G^{-1} plus a sum of PSD curvature terms, so it is
    positive definite everywhere; a small ridge guards round-off only.  ``b0``
    warm-starts the iteration (e.g. the previous sweep's modes).
    """
    B = ld.B
    q = Ginv.shape[0]
    b = np.zeros((B, q)) if b0 is None else np.array(b0, float)
    if q == 0:
        return b, np.zeros((B, 0, 0)), np.ones(B, bool), 0
    f = log_post_b_batch(b, ld, params, Ginv, logdetG)
    converged = np.zeros(B, bool)
    stalled = np.zeros(B, bool)   # at the numerical floor: no ascent possible
    it = 0
    for it in range(1, max_iter + 1):
        g = grad_log_post_b_batch(b, ld, params, Ginv)
        converged = np.max(np.abs(g), axis=1) <= tol * (1.0 + np.max(np.abs(b), axis=1))
        converged |= stalled
        if converged.all():
            break
        H = hess_log_post_b_batch(b, ld, params, Ginv)
        negH = -H
        ridge = 0.0
        for _ in range(6):
            try:
                step = np.linalg.solve(negH + ridge * np.eye(q), g[:, :, None])[:, :, 0]
                break
            except np.linalg.LinAlgError:
                ridge = max(ridge * 10.0, 1e-8)
        else:
            break
        step[converged] = 0.0
        alpha = np.ones(B)
        gd = np.sum(g * step, axis=1)
        accepted = converged.copy()
        for _ in range(40):
            trial = b + alpha[:, None] * step
            f_new = log_post_b_batch(trial, ld, params, Ginv, logdetG)
            ok = (~accepted) & (f_new >= f + 1e-4 * alpha * gd) & np.isfinite(f_new)
            b[ok] = trial[ok]
            f[ok] = f_new[ok]
            accepted |= ok
            if accepted.all():
                break
            alpha = np.where(accepted, alpha, alpha * 0.5)
        stalled |= ~accepted
    g = grad_log_post_b_batch(b, ld, params, Ginv)
    converged = stalled | (np.max(np.abs(g), axis=1)
                           <= tol * (1.0 + np.max(np.abs(b), axis=1)))
    negH = -hess_log_post_b_batch(b, ld, params, Ginv)
    cov = np.linalg.inv(negH)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return b, cov, converged, it


def _attach_slices(ld, spec):
    ld.slices = spec.block_slices()
    return ld


def prepare_likelihood(spec, histories):
    """LikelihoodData (with block slices) for a HistoryBatch or History list."""
    hb = histories if isinstance(histories, HistoryBatch) else \
        HistoryBatch.from_histories(histories)
    return _attach_slices(likelihood_data(spec, hb), spec)


# ---------------------------------------------------------------------------
# single-subject API


def log_post_b(b, history, params, spec):
    ld = prepare_likelihood(spec, [history])
    Ginv, logdet = _chol_inv(params.G)
    return float(log_post_b_batch(np.asarray(b, float), ld, params, Ginv, logdet)[0])


def grad_log_post_b(b, history, params, spec):
    ld = prepare_likelihood(spec, [history])
    Ginv, _ = _chol_inv(params.G)
    return grad_log_post_b_batch(np.asarray(b, float), ld, params, Ginv)[0]


def hess_log_post_b(b, history, params, spec):
    ld = prepare_likelihood(spec, [history])
    Ginv, _ = _chol_inv(params.G)
    return hess_log_post_b_batch(np.asarray(b, float), ld, params, Ginv)[0]


def laplace_approx(history, params, spec, max_iter=100):
    ld = prepare_likelihood(spec, [history])
    Ginv, logdet = _chol_inv(params.G)
    mode, cov, conv, iters = laplace_batch(ld, params, Ginv, logdet, max_iter=max_iter)
    g = grad_log_post_b_batch(mode, ld, params, Ginv)
    return LaplaceSummary(mode[0], cov[0], iters, float(np.max(np.abs(g))), bool(conv[0]))


def condition_on_bA(summary, c, spec):
    """Gaussian conditioning of (b^Y, b^M) on b^A = c."""
    sY, sM, sA = spec.block_slices()
    if spec.q_treatment != 1:
        raise ValueError("conditioning requires a one-dimensional treatment block")
    ia = sA.start
    keep = np.r_[np.arange(sY.start, sY.stop), np.arange(sM.start, sM.stop)]
    V = summary.cov
    vA = V[ia, ia]
    if vA <= 0:
        raise LaplaceError("treatment-block variance must be positive to condition")
    cross = V[keep, ia]
    mean = summary.mode[keep] + cross * ((c - summary.mode[ia]) / vA)
    cov = V[np.ix_(keep, keep)] - np.outer(cross, cross) / vA
    cov = 0.5 * (cov + cov.T)
    return ConditionalGaussian(mean, cov)


def condition_on_bA_batch(mode, cov, c, spec):
    """Batched conditioning: mode (B,q), cov (B,q,q), c (B,)."""
    sY, sM, sA = spec.block_slices()
    ia = sA.start
    keep = np.r_[np.arange(sY.start, sY.stop), np.arange(sM.start, sM.stop)]
    vA = cov[:, ia, ia]
    if np.any(vA <= 0):
        raise LaplaceError("treatment-block variance must be positive to condition")
    cross = cov[:, keep, ia]
    mean = mode[:, keep] + cross * ((c - mode[:, ia]) / vA)[:, None]
    cc = cov[np.ix_(np.arange(cov.shape[0]), keep, keep)]
    cond = cc - cross[:, :, None] * cross[:, None, :] / vA[:, None, None]
    return mean, 0.5 * (cond + np.swapaxes(cond, 1, 2))


def psd_clamp(M, tol=1e-10):
    """Symmetrize and floor tiny negative eigenvalues; larger violations raise."""
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, U = np.linalg.eigh(M)
    if np.min(w) < -tol:
        raise LaplaceError(f"covariance has eigenvalue {np.min(w):.3e} below -{tol}")
    w = np.clip(w, 0.0, None)
    return (U * w[..., None, :]) @ np.swapaxes(U, -1, -2)


def sample_bA_given_history(history, params, spec, v, rng):
    """Draw the treatment-heterogeneity value used to stratify projections.

    h = 0 draws from the population prior N(0, v); with accumulated history the
    draw comes from the treatment-block marginal of the Laplace approximation.
    v = 0 returns exactly 0.
    """
    if v < 0:
        raise ValueError("v must be nonnegative")
    if v == 0.0:
        return 0.0
    if history.h == 0 and history.t == 0:
        return float(rng.normal(0.0, math.sqrt(v)))
    summary = laplace_approx(history, params, spec)
    if not summary.converged:
        return float(rng.normal(0.0, math.sqrt(v)))
    _, _, sA = spec.block_slices()
    ia = sA.start
    return float(rng.normal(summary.mode[ia], math.sqrt(summary.cov[ia, ia])))
