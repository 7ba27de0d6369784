"""Forward simulation: the two-visit benchmark DGP and generic joint-model
simulation with known truth."""

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .design import HistoryBatch, rows_at, _RowState
from .model import (LongDataset, ModelSpec, ParamsDraw, SpecError, SubjectRecord,
                    baseline, dose_indicator, intercept, lagged_outcome, time_term)


@dataclass(frozen=True)
class DgpConfig:
    """Benchmark data-generating process: n subjects, two follow-up visits."""

    n: int
    s_A: float = 0.0
    s_Y: float = 0.8
    rho: float = 0.0
    nu: str = "per_dose"        # per_dose: nu_k = k; null: nu_k = 0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.nu not in ("per_dose", "null"):
            raise ValueError("nu must be per_dose or null")
        if self.s_A < 0 or self.s_Y < 0:
            raise ValueError("random-intercept sds must be nonnegative")
        if self.s_A > 0 and abs(self.rho) >= 1:
            raise ValueError("need |rho| < 1 when s_A > 0 (G must be positive definite)")

    def G2(self):
        """2x2 covariance of (b^A, b^Y)."""
        rho = 0.0 if self.s_A == 0 else self.rho
        return np.array([
            [self.s_A ** 2, rho * self.s_A * self.s_Y],
            [rho * self.s_A * self.s_Y, self.s_Y ** 2],
        ])


# fixed coefficients of the benchmark DGP
_BETA_Y_BASE = {"const": 0.4, "V": -0.3, "t": -0.1, "lag": 0.4}
_BETA_A = {"V": -0.1, "t": -0.5, "lag": -0.35}
_SIGMA_Y = 0.4


def _nu(config, k):
    return float(k) if config.nu == "per_dose" else 0.0


def dgp_model_spec(config):
    """The benchmark DGP written as a ModelSpec (v = s_A^2)."""
    return ModelSpec(
        outcome_features=(intercept(), baseline(0), time_term(),
                          dose_indicator(1), dose_indicator(2), lagged_outcome()),
        treatment_features=(baseline(0), time_term(), lagged_outcome()),
        outcome_reff=(intercept(),),
        treatment_reff=(intercept(),),
        confounder_enabled=False,
        v=config.s_A ** 2,
    )


def dgp_truth(config):
    """True ParamsDraw matching dgp_model_spec(config)."""
    spec = dgp_model_spec(config)
    beta_Y = np.array([_BETA_Y_BASE["const"], _BETA_Y_BASE["V"], _BETA_Y_BASE["t"],
                       _nu(config, 1) / 2.0, _nu(config, 2) / 2.0, _BETA_Y_BASE["lag"]])
    beta_A = np.array([_BETA_A["V"], _BETA_A["t"], _BETA_A["lag"]])
    G2 = config.G2()
    if spec.q_treatment:
        # block order is (b^Y, b^A)
        G = np.array([[G2[1, 1], G2[0, 1]], [G2[1, 0], G2[0, 0]]])
    else:
        G = np.array([[G2[1, 1]]])
    return ParamsDraw(beta_Y, _SIGMA_Y, np.zeros(0), beta_A, G).check(spec)


def simulate_dgp(config):
    """Simulate the benchmark DGP directly from its equations.

    Each subject's draws come from a stream keyed by (seed, subject), so the
    output is independent of generation order.
    """
    G2 = config.G2()
    try:
        L = np.linalg.cholesky(G2 + 1e-300 * np.eye(2)) if G2.any() else np.zeros((2, 2))
    except np.linalg.LinAlgError as e:
        raise ValueError("random-effects covariance is not positive definite") from e
    subjects = []
    for i in range(config.n):
        g = rngmod.keyed_rng(config.seed, rngmod.SUBJECT, i)
        V = float(g.random() < 0.5)
        y0 = g.normal()
        bA, bY = L @ g.normal(size=2)
        eY = g.normal(size=2) * _SIGMA_Y
        uA = g.random(size=2)
        y, m, a = [], [], []
        prev_a = 0
        prev_y = y0
        dose = 0
        for t in (1, 2):
            if prev_a == 0:
                haz = expit(_BETA_A["V"] * V + _BETA_A["t"] * t
                            + _BETA_A["lag"] * prev_y + bA)
                at = int(uA[t - 1] < haz)
            else:
                at = 1
            dose += at
            yt = (_BETA_Y_BASE["const"] + _BETA_Y_BASE["V"] * V + _BETA_Y_BASE["t"] * t
                  + sum(_nu(config, k) / 2.0 * (dose == k) for k in (1, 2))
                  + _BETA_Y_BASE["lag"] * prev_y + bY + eY[t - 1])
            y.append(yt)
            m.append(1)
            a.append(at)
            prev_a, prev_y = at, yt
        subjects.append(SubjectRecord(str(i), (V,), y0, tuple(y), tuple(m), tuple(a)))
    return LongDataset(tuple(subjects))


def simulate_mglmm(spec, truth, n, T, seed):
    """Simulate a LongDataset from an arbitrary joint-model spec and truth.

    Baseline covariates are Bernoulli(0.5) for every declared baseline index
    and the baseline outcome is N(0,1).  Within an interval the order is
    treatment hazard, confounder, outcome.  Deterministic given seed.
    """
    truth.check(spec)
    n_base = 1 + max([t.index for t in _iter_baseline_terms(spec)] or [0])
    q = spec.q_total
    Lg = np.linalg.cholesky(truth.G + 1e-12 * np.eye(q)) if q else np.zeros((0, 0))
    sY, sM, sA = spec.block_slices()

    V = np.zeros((n, n_base))
    y0 = np.zeros(n)
    b = np.zeros((n, q))
    uA = np.zeros((n, T))
    uM = np.zeros((n, T))
    eY = np.zeros((n, T))
    for i in range(n):
        g = rngmod.keyed_rng(seed, rngmod.SUBJECT, i)
        V[i] = (g.random(size=n_base) < 0.5).astype(float)
        y0[i] = g.normal()
        if q:
            b[i] = Lg @ g.normal(size=q)
        uA[i] = g.random(size=T)
        uM[i] = g.random(size=T)
        eY[i] = g.normal(size=T)

    hb = HistoryBatch(V, y0, T)
    hb.h[:] = T
    state = _RowState(hb)
    K = spec.max_dose
    treated = np.zeros(n, bool)
    for t in range(1, T + 1):
        xa = rows_at(spec.treatment_features, state, K)
        eta_a = xa @ truth.beta_A
        if spec.q_treatment:
            za = rows_at(spec.treatment_reff, state, K)
            eta_a = eta_a + np.sum(za * b[:, sA], axis=1)
        a_new = np.where(treated, 1, (uA[:, t - 1] < expit(eta_a)).astype(int))
        treated = a_new == 1
        # treatment decision must be visible to the M and Y rows at t
        hb.a[np.arange(n), hb.t] = a_new
        if spec.confounder_enabled:
            xm = rows_at(spec.confounder_features, state, K)
            eta_m = xm @ truth.beta_M
            if spec.q_confounder:
                zm = rows_at(spec.confounder_reff, state, K)
                eta_m = eta_m + np.sum(zm * b[:, sM], axis=1)
            m_new = (uM[:, t - 1] < expit(eta_m)).astype(int)
        else:
            m_new = np.ones(n, int)
        xy = rows_at(spec.outcome_features, state, K)
        eta_y = xy @ truth.beta_Y
        if spec.q_outcome:
            zy = rows_at(spec.outcome_reff, state, K)
            eta_y = eta_y + np.sum(zy * b[:, sY], axis=1)
        y_new = eta_y + truth.sigma * eY[:, t - 1]
        hb.append_step(a_new, m_new, y_new, present=m_new == 1)
        state.advance()

    subjects = []
    for i in range(n):
        y = tuple(None if not np.isfinite(hb.y[i, t]) else float(hb.y[i, t])
                  for t in range(T))
        subjects.append(SubjectRecord(str(i), tuple(V[i]), float(y0[i]), y,
                                      tuple(hb.m[i, :T]), tuple(hb.a[i, :T])))
    return LongDataset(tuple(subjects))


def _iter_baseline_terms(spec):
    def walk(term):
        if term.kind == "baseline":
            yield term
        elif term.kind == "interaction":
            yield from walk(term.left)
            yield from walk(term.right)
    for t in (spec.outcome_features + spec.confounder_features
              + spec.treatment_features + spec.outcome_reff
              + spec.confounder_reff + spec.treatment_reff):
        yield from walk(t)


def truth_to_json(spec, truth, seed, extra=None):
    doc = {
        "spec": spec.to_dict(),
        "beta_Y": list(map(float, truth.beta_Y)),
        "sigma": float(truth.sigma),
        "beta_M": list(map(float, truth.beta_M)),
        "beta_A": list(map(float, truth.beta_A)),
        "G": [list(map(float, row)) for row in np.atleast_2d(truth.G)],
        "seed": int(seed),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2)


def warn_if_rho_ignored(config):
    if config.s_A == 0 and config.rho != 0:
        warnings.warn("s_A = 0: rho has no effect and is ignored", stacklevel=2)
        return True
    return False
