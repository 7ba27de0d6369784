"""Posterior sampling for the joint outcome/confounder/treatment model.

One blocked Metropolis-within-Gibbs sweep updates, in order: the outcome
coefficients (exact conjugate Gaussian), the outcome noise sd (Metropolis on
the log scale), the confounder and treatment coefficients (adaptive
random-walk Metropolis with a Fisher preconditioner), the subject random
effects (independence Metropolis with a Laplace proposal), and the
random-effects covariance G (Metropolis on log-sds and unconstrained
correlation parameters, with the treatment-block sd pinned at sqrt(v)).
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.base import BaseEstimator

from . import rng as rngmod
from .design import HistoryBatch
from .heterogeneity import (_chol_inv, grad_log_post_b_batch, laplace_batch,
                            log_post_b_batch, prepare_likelihood)
from .model import LongDataset, ParamsDraw, validate_dataset


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class McmcConfig:
    n_warmup: int = 2000
    n_draws: int = 2000
    thin: int = 1
    seed: int = 0
    target_scalar: float = 0.44
    target_vector: float = 0.234

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_warmup < 0:
            raise ValueError("n_warmup must be >= 0")


@dataclass
class PosteriorDraws:
    """Retained draws stacked along the first axis."""

    beta_Y: np.ndarray          # (S, pY)
    sigma: np.ndarray           # (S,)
    beta_M: np.ndarray          # (S, pM)
    beta_A: np.ndarray          # (S, pA)
    G: np.ndarray               # (S, q, q)
    acceptance: dict = field(default_factory=dict)
    spec_digest: str = ""
    seed: int = 0

    def __len__(self):
        return self.sigma.shape[0]

    def __getitem__(self, s):
        return ParamsDraw(self.beta_Y[s], float(self.sigma[s]),
                          self.beta_M[s], self.beta_A[s], self.G[s])

    def __iter__(self):
        for s in range(len(self)):
            yield self[s]

    def ess(self):
        """Effective sample size per scalar component."""
        out = {"sigma": effective_sample_size(self.sigma)}
        for j in range(self.beta_Y.shape[1]):
            out[f"beta_Y[{j}]"] = effective_sample_size(self.beta_Y[:, j])
        for j in range(self.beta_M.shape[1]):
            out[f"beta_M[{j}]"] = effective_sample_size(self.beta_M[:, j])
        for j in range(self.beta_A.shape[1]):
            out[f"beta_A[{j}]"] = effective_sample_size(self.beta_A[:, j])
        q = self.G.shape[1]
        for i in range(q):
            for j in range(i + 1):
                out[f"G[{i},{j}]"] = effective_sample_size(self.G[:, i, j])
        return out

    # ---- persistence: one row per draw, G flattened lower triangle ----

    def to_frame(self):
        cols = {}
        for j in range(self.beta_Y.shape[1]):
            cols[f"beta_Y_{j}"] = self.beta_Y[:, j]
        cols["sigma"] = self.sigma
        for j in range(self.beta_M.shape[1]):
            cols[f"beta_M_{j}"] = self.beta_M[:, j]
        for j in range(self.beta_A.shape[1]):
            cols[f"beta_A_{j}"] = self.beta_A[:, j]
        q = self.G.shape[1]
        for i in range(q):
            for j in range(i + 1):
                cols[f"G_{i}_{j}"] = self.G[:, i, j]
        return pd.DataFrame(cols)

    def save(self, csv_path, manifest_path=None):
        self.to_frame().to_csv(csv_path, index=False)
        if manifest_path is not None:
            doc = {"spec_digest": self.spec_digest, "seed": int(self.seed),
                   "n_draws": len(self), "q": int(self.G.shape[1]),
                   "acceptance": {k: float(v) for k, v in self.acceptance.items()}}
            with open(manifest_path, "w") as fh:
                json.dump(doc, fh, indent=2)

    @staticmethod
    def load(csv_path, manifest_path=None):
        df = pd.read_csv(csv_path)
        def block(prefix):
            names = sorted((c for c in df.columns if c.startswith(prefix)),
                           key=lambda c: int(c[len(prefix):]))
            return df[names].to_numpy() if names else np.zeros((len(df), 0))
        bY = block("beta_Y_")
        bM = block("beta_M_")
        bA = block("beta_A_")
        gcols = [c for c in df.columns if c.startswith("G_")]
        q = 0
        while q * (q + 1) // 2 < len(gcols):
            q += 1
        G = np.zeros((len(df), q, q))
        for i in range(q):
            for j in range(i + 1):
                G[:, i, j] = G[:, j, i] = df[f"G_{i}_{j}"].to_numpy()
        acc, digest, seed = {}, "", 0
        if manifest_path is not None:
            with open(manifest_path) as fh:
                doc = json.load(fh)
            acc = doc.get("acceptance", {})
            digest = doc.get("spec_digest", "")
            seed = doc.get("seed", 0)
        return PosteriorDraws(bY, df["sigma"].to_numpy(), bM, bA, G,
                              acceptance=acc, spec_digest=digest, seed=seed)


def effective_sample_size(x):
    """ESS from the autocorrelation sequence (Geyer initial positive pairs)."""
    x = np.asarray(x, float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    nf = int(2 ** math.ceil(math.log2(2 * n)))
    f = np.fft.rfft(xc, nf)
    acov = np.fft.irfft(f * np.conj(f), nf)[:n].real / n
    rho = acov / acov[0]
    tau = 1.0
    for k in range(1, n - 1, 2):
        pair = rho[k] + rho[k + 1] if k + 1 < n else rho[k]
        if pair < 0:
            break
        tau += 2.0 * pair
    return float(min(n, n / max(tau, 1e-12)))


def loglik_joint(data, spec, params, reffects):
    """Exact log joint likelihood of the data given parameters and b's."""
    params.check(spec)
    hb = data if isinstance(data, HistoryBatch) else HistoryBatch.from_dataset(data)
    ld = prepare_likelihood(spec, hb)
    b = np.atleast_2d(np.asarray(reffects, float))
    if b.shape != (hb.B, spec.q_total):
        raise ValueError(f"reffects must be {(hb.B, spec.q_total)}")
    # log_post includes the b prior and its normalizer; strip both
    Ginv, logdetG = _chol_inv(params.G) if spec.q_total else (np.zeros((0, 0)), 0.0)
    lp = log_post_b_batch(b, ld, params, Ginv, logdetG)
    q = spec.q_total
    if q:
        prior = (-0.5 * np.einsum("bi,ij,bj->b", b, Ginv, b)
                 - 0.5 * (logdetG + q * math.log(2 * math.pi)))
        lp = lp - prior
    total = float(np.sum(lp))
    if not math.isfinite(total):
        bad = int(np.argmax(~np.isfinite(lp)))
        raise FitError(f"non-finite likelihood contribution for subject index {bad}")
    return total


# ---------------------------------------------------------------------------
# correlation-matrix parameterization


def corr_from_cpc(p):
    """Correlation matrix from canonical partial correlations (strict lower)."""
    q = p.shape[0]
    C = np.eye(q)
    for i in range(1, q):
        for j in range(i):
            rho = p[i, j]
            for k in range(j - 1, -1, -1):
                rho = (rho * math.sqrt((1 - p[i, k] ** 2) * (1 - p[j, k] ** 2))
                       + p[i, k] * p[j, k])
            C[i, j] = C[j, i] = rho
    return C


def log_jac_cpc_to_corr(p):
    """log |d vech(C) / d vech(p)| for the map above."""
    q = p.shape[0]
    out = 0.0
    for j in range(q - 1):
        for i in range(j + 1, q):
            out += 0.5 * (q - j - 2) * math.log1p(-p[i, j] ** 2)
    return out


def _unpack_G_params(theta, q, free_sd, pinned_sd):
    """theta = (log free sds, atanh cpcs) -> (G, log prior + Jacobian terms)."""
    nf = int(free_sd.sum())
    log_sd = theta[:nf]
    w = theta[nf:]
    sd = np.empty(q)
    sd[free_sd] = np.exp(log_sd)
    sd[~free_sd] = pinned_sd[~free_sd]
    gamma = np.tanh(w)
    P = np.zeros((q, q))
    idx = 0
    for i in range(1, q):
        for j in range(i):
            P[i, j] = gamma[idx]
            idx += 1
    C = corr_from_cpc(P)
    G = C * np.outer(sd, sd)
    # uniform-over-correlation-matrices prior expressed in w-space
    logjac = log_jac_cpc_to_corr(P) + np.sum(np.log1p(-gamma ** 2))
    # log-sd reparameterization Jacobian
    logjac += float(np.sum(log_sd))
    return G, sd, logjac


# ---------------------------------------------------------------------------
# initialization


def _wls(X, y, w, ridge=1e-8):
    Xw = X * w[:, None]
    A = X.T @ Xw + ridge * np.eye(X.shape[1])
    return np.linalg.solve(A, Xw.T @ y)


def _logistic_mle(X, y, w, tau, max_iter=50):
    """Penalized logistic regression (ridge = prior precision 1/tau^2)."""
    p = X.shape[1]
    beta = np.zeros(p)
    lam = 1.0 / tau ** 2
    for _ in range(max_iter):
        eta = X @ beta
        mu = expit(eta)
        g = X.T @ (w * (y - mu)) - lam * beta
        Wd = w * mu * (1 - mu)
        H = X.T @ (X * Wd[:, None]) + lam * np.eye(p)
        step = np.linalg.solve(H, g)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    eta = X @ beta
    mu = expit(eta)
    fisher = X.T @ (X * (w * mu * (1 - mu))[:, None]) + lam * np.eye(p)
    return beta, fisher


def _flat(X, w):
    """(B,J,p) -> (B*J, p) rows; weights flatten alongside."""
    B, J, p = X.shape
    return X.reshape(B * J, p), w.reshape(B * J)


# ---------------------------------------------------------------------------
# the sampler


class _AdaptiveScale:
    """Robbins-Monro adaptation of a log proposal scale during warmup."""

    def __init__(self, target, init=1.0):
        self.log_s = math.log(init)
        self.target = target
        self.n_prop = 0
        self.n_acc = 0

    @property
    def s(self):
        return math.exp(self.log_s)

    def update(self, accepted, it, adapting):
        self.n_prop += 1
        self.n_acc += int(accepted)
        if adapting:
            gamma = (it + 1) ** -0.6
            self.log_s += gamma * ((1.0 if accepted else 0.0) - self.target)

    @property
    def rate(self):
        return self.n_acc / max(self.n_prop, 1)


def fit_mglmm(data, spec, mcmc=None):
    """Sample the posterior of the joint model; deterministic given the seed."""
    mcmc = mcmc or McmcConfig()
    problems = validate_dataset(data, spec)
    if problems:
        v0 = problems[0]
        raise FitError(f"dataset fails validation ({len(problems)} problems; first: "
                       f"subject {v0.subject} interval {v0.interval}: {v0.message})")
    hb = HistoryBatch.from_dataset(data)
    ld = prepare_likelihood(spec, hb)
    n = hb.B
    q = spec.q_total
    sY, sM, sA = spec.block_slices()
    priors = spec.priors
    tau = priors.beta_scale

    if not ld.wY.any():
        raise FitError("no usable outcome observations")
    if spec.confounder_enabled and not ld.wM.any():
        raise FitError("no usable confounder observations")
    if not ld.wA.any():
        raise FitError("no usable treatment observations")

    rng = rngmod.keyed_rng(mcmc.seed, rngmod.CHAIN, 0)

    # --- initialization: per-channel fits ignoring random effects ---
    XYf, wYf = _flat(ld.XY, ld.wY)
    yf = ld.yv.reshape(-1)
    beta_Y = _wls(XYf, yf * wYf, wYf)
    resid = (yf - XYf @ beta_Y)
    sigma = float(np.sqrt(np.sum(wYf * resid ** 2) / max(wYf.sum() - len(beta_Y), 1)))
    sigma = max(sigma, 1e-3)

    if spec.confounder_enabled and len(spec.confounder_features):
        XMf, wMf = _flat(ld.XM, ld.wM)
        beta_M, fisher_M = _logistic_mle(XMf, ld.mv.reshape(-1), wMf, tau)
    else:
        beta_M, fisher_M = np.zeros(0), np.zeros((0, 0))
    XAf, wAf = _flat(ld.XA, ld.wA)
    beta_A, fisher_A = _logistic_mle(XAf, ld.av.reshape(-1), wAf, tau)

    free_sd = np.ones(q, bool)
    pinned_sd = np.zeros(q)
    if spec.q_treatment:
        free_sd[sA] = False
        pinned_sd[sA.start] = math.sqrt(spec.v)
    n_free = int(free_sd.sum())
    n_corr = q * (q - 1) // 2
    theta_G = np.concatenate([np.full(n_free, math.log(0.5)), np.zeros(n_corr)])
    G, sd_vec, _ = _unpack_G_params(theta_G, q, free_sd, pinned_sd) if q else \
        (np.zeros((0, 0)), np.zeros(0), 0.0)
    b = np.zeros((n, q))

    params = ParamsDraw(beta_Y, sigma, beta_M, beta_A, G if q else np.zeros((0, 0)))
    Ginv, logdetG = _chol_inv(G) if q else (np.zeros((0, 0)), 0.0)
    lp0 = log_post_b_batch(b, ld, params, Ginv, logdetG)
    if not np.all(np.isfinite(lp0)):
        bad = int(np.argmax(~np.isfinite(lp0)))
        raise FitError(f"non-finite likelihood at initialization for subject "
                       f"{data.subjects[bad].id}")

    # proposal preconditioners: inverse-Fisher Cholesky factors
    def prop_chol(F):
        if F.shape[0] == 0:
            return np.zeros((0, 0))
        return np.linalg.cholesky(np.linalg.inv(F + 1e-8 * np.eye(F.shape[0])))

    LM = prop_chol(fisher_M)
    LA = prop_chol(fisher_A)
    sc_sigma = _AdaptiveScale(mcmc.target_scalar, 0.3)
    sc_M = _AdaptiveScale(mcmc.target_vector, 1.0)
    sc_A = _AdaptiveScale(mcmc.target_vector, 1.0)
    sc_G = _AdaptiveScale(mcmc.target_vector if n_free + n_corr > 1
                          else mcmc.target_scalar, 0.3)
    b_acc = 0
    b_prop = 0
    laplace_fail_streak = np.zeros(n, int)
    warm_mode = None

    n_sweeps = mcmc.n_warmup + mcmc.n_draws * mcmc.thin
    S = mcmc.n_draws
    out_bY = np.zeros((S, len(beta_Y)))
    out_sig = np.zeros(S)
    out_bM = np.zeros((S, len(beta_M)))
    out_bA = np.zeros((S, len(beta_A)))
    out_G = np.zeros((S, q, q))
    kept = 0

    ZYf = ld.ZY.reshape(-1, ld.ZY.shape[2])
    sqrt_v = math.sqrt(spec.v)

    for it in range(n_sweeps):
        adapting = it < mcmc.n_warmup

        # (a) outcome coefficients: exact conjugate Gaussian
        etab = np.einsum("bjq,bq->bj", ld.ZY, b[:, sY]) if ld.ZY.shape[2] else 0.0
        ry = (ld.yv - etab).reshape(-1)
        prec = XYf.T @ (XYf * wYf[:, None]) / sigma ** 2 + np.eye(len(beta_Y)) / tau ** 2
        rhs = XYf.T @ (wYf * ry) / sigma ** 2
        Lp = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, rhs)
        beta_Y = mean + np.linalg.solve(Lp.T, rng.normal(size=len(beta_Y)))

        # (b) outcome noise sd: Metropolis on log sigma
        fit_res = ld.yv - np.einsum("bjp,p->bj", ld.XY, beta_Y) - etab
        ss = float(np.sum(ld.wY * fit_res ** 2))
        ny = float(ld.wY.sum())

        def sigma_logpost(lsig):
            s2 = math.exp(2 * lsig)
            return (-0.5 * ny * (math.log(2 * math.pi) + 2 * lsig) - 0.5 * ss / s2
                    - 0.5 * math.exp(2 * lsig) / priors.sigma_scale ** 2 + lsig)

        lsig = math.log(sigma)
        lsig_new = lsig + sc_sigma.s * rng.normal()
        acc = math.log(rng.random()) < sigma_logpost(lsig_new) - sigma_logpost(lsig)
        if acc:
            sigma = math.exp(lsig_new)
        sc_sigma.update(acc, it, adapting)

        # (c) confounder and treatment coefficients: preconditioned RWM
        def rwm_logistic(beta, Xf, yv, wf, off, L, sc):
            def target(be):
                eta = Xf @ be + off
                ll = float(np.sum(wf * (yv * eta - np.logaddexp(0.0, eta))))
                return ll - 0.5 * float(be @ be) / tau ** 2
            prop = beta + sc.s * (L @ rng.normal(size=len(beta)))
            a = math.log(rng.random()) < target(prop) - target(beta)
            sc.update(a, it, adapting)
            return prop if a else beta

        if len(beta_M):
            offM = (np.einsum("bjq,bq->bj", ld.ZM, b[:, sM]).reshape(-1)
                    if ld.ZM.shape[2] else 0.0)
            XMf2, wMf2 = _flat(ld.XM, ld.wM)
            beta_M = rwm_logistic(beta_M, XMf2, ld.mv.reshape(-1), wMf2, offM, LM, sc_M)
        if len(beta_A):
            offA = (np.einsum("bjq,bq->bj", ld.ZA, b[:, sA]).reshape(-1)
                    if ld.ZA.shape[2] else 0.0)
            beta_A = rwm_logistic(beta_A, XAf, ld.av.reshape(-1), wAf, offA, LA, sc_A)

        params = ParamsDraw(beta_Y, sigma, beta_M, beta_A, G if q else np.zeros((0, 0)))

        # (d) subject random effects: independence Metropolis via Laplace,
        # per-subject random-walk fallback after 3 consecutive failures
        if q:
            Ginv, logdetG = _chol_inv(G)
            mode, cov, conv, _ = laplace_batch(ld, params, Ginv, logdetG,
                                               b0=warm_mode)
            warm_mode = mode
            laplace_fail_streak = np.where(conv, 0, laplace_fail_streak + 1)
            rwm_mask = laplace_fail_streak >= 3
            lp_cur = log_post_b_batch(b, ld, params, Ginv, logdetG)
            cov_r = cov + 1e-12 * np.eye(q)
            Lc = np.linalg.cholesky(cov_r)
            Pinv = np.linalg.inv(cov_r)
            _, ldet = np.linalg.slogdet(cov_r)
            z = rng.normal(size=(n, q))
            prop_ind = mode + np.einsum("bpq,bq->bp", Lc, z)
            step_sd = np.sqrt(np.maximum(np.diagonal(cov, axis1=1, axis2=2), 1e-6))
            prop_rwm = b + 0.5 * step_sd * z
            prop = np.where(rwm_mask[:, None], prop_rwm, prop_ind)

            def q_dens(x):
                d = x - mode
                quad = np.einsum("bi,bij,bj->b", d, Pinv, d)
                return -0.5 * (quad + ldet + q * math.log(2 * math.pi))

            lp_prop = log_post_b_batch(prop, ld, params, Ginv, logdetG)
            log_alpha = np.where(rwm_mask, lp_prop - lp_cur,
                                 (lp_prop - lp_cur) - (q_dens(prop) - q_dens(b)))
            u = np.log(rng.random(size=n))
            take = u < log_alpha
            b[take] = prop[take]
            b_acc += int(take.sum())
            b_prop += n

            # (e) covariance G: Metropolis on the unconstrained parameterization
            if n_free + n_corr > 0:
                def g_target(theta):
                    Gp, sdp, logjac = _unpack_G_params(theta, q, free_sd, pinned_sd)
                    try:
                        Gi, ldet = _chol_inv(Gp)
                    except Exception:
                        return -np.inf, None
                    ll = (-0.5 * n * ldet
                          - 0.5 * float(np.einsum("bi,ij,bj->", b, Gi, b)))
                    lpri = -0.5 * float(np.sum(
                        (sdp[free_sd] / priors.reff_sd_scale) ** 2))
                    return ll + lpri + logjac, Gp

                cur_t, _ = g_target(theta_G)
                prop_t = theta_G + sc_G.s * rng.normal(size=len(theta_G))
                new_t, G_new = g_target(prop_t)
                acc = math.log(rng.random()) < new_t - cur_t
                if acc and G_new is not None:
                    theta_G = prop_t
                    G = G_new
                sc_G.update(acc, it, adapting)

        if not adapting and (it - mcmc.n_warmup) % mcmc.thin == 0 and kept < S:
            out_bY[kept] = beta_Y
            out_sig[kept] = sigma
            out_bM[kept] = beta_M
            out_bA[kept] = beta_A
            if q:
                out_G[kept] = G
                if spec.q_treatment:
                    out_G[kept, sA.start, sA.start] = sqrt_v ** 2
            kept += 1

    acceptance = {"sigma": sc_sigma.rate, "beta_M": sc_M.rate, "beta_A": sc_A.rate,
                  "b": b_acc / max(b_prop, 1), "G": sc_G.rate}
    return PosteriorDraws(out_bY, out_sig, out_bM, out_bA, out_G,
                          acceptance=acceptance, spec_digest=spec.digest(),
                          seed=mcmc.seed)


def conjugate_outcome_moments(spec, ld, b, sigma):
    """Closed-form mean/covariance of the outcome-coefficient conditional."""
    sY, _, _ = spec.block_slices()
    XYf, wYf = _flat(ld.XY, ld.wY)
    etab = np.einsum("bjq,bq->bj", ld.ZY, b[:, sY]) if ld.ZY.shape[2] else 0.0
    ry = (ld.yv - etab).reshape(-1)
    tau = spec.priors.beta_scale
    prec = XYf.T @ (XYf * wYf[:, None]) / sigma ** 2 + np.eye(XYf.shape[1]) / tau ** 2
    mean = np.linalg.solve(prec, XYf.T @ (wYf * ry) / sigma ** 2)
    return mean, np.linalg.inv(prec)


class BayesianMglmm(BaseEstimator):
    """Estimator-style wrapper: configure, fit on a LongDataset, read draws_."""

    def __init__(self, spec=None, n_warmup=2000, n_draws=2000, thin=1, seed=0):
        self.spec = spec
        self.n_warmup = n_warmup
        self.n_draws = n_draws
        self.thin = thin
        self.seed = seed

    def fit(self, X, y=None):
        if self.spec is None:
            raise ValueError("spec must be provided")
        data = X if isinstance(X, LongDataset) else LongDataset.from_frame(X)
        cfg = McmcConfig(n_warmup=self.n_warmup, n_draws=self.n_draws,
                         thin=self.thin, seed=self.seed)
        self.draws_ = fit_mglmm(data, self.spec, cfg)
        return self
