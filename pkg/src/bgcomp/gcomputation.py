"""Counterfactual trajectory projection and causal contrasts.

Per posterior draw and projection step, the engine re-approximates each
subject's random-effects posterior on the accumulated (observed plus
counterfactual) history, draws the outcome/confounder effects conditional on
the subject's fixed treatment-heterogeneity value, then advances the
confounder and outcome channels one interval under the regime's treatment
decision.  Both regimes in a contrast consume the same noise panel, so equal
regimes cancel exactly and swapped regimes negate exactly.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from . import rng as rngmod
from .design import History, HistoryBatch, rows_at, _RowState
from .heterogeneity import (_chol_inv, condition_on_bA_batch, laplace_batch,
                            prepare_likelihood, psd_clamp)
from .model import SpecError
from .regimes import parse_regime


class TrajectoryError(RuntimeError):
    def __init__(self, subject, t, draw):
        super().__init__(f"random-effects approximation failed for subject "
                         f"{subject} at interval {t} (draw {draw})")
        self.subject = subject
        self.t = t
        self.draw = draw


@dataclass(frozen=True)
class NoisePanel:
    """Shared innovations for one posterior draw across all subjects/steps.

    psi_Y: outcome normals (B, tau); psi_M, psi_A: uniforms (B, tau); psi_b:
    normals (B, tau, qYM) for the conditional random-effect draw; psi_bA:
    normals (B,) for the treatment-heterogeneity draw.  psi_A is carried for
    interface completeness; regimes fix the treatment path so it is unused.
    """

    psi_Y: np.ndarray
    psi_M: np.ndarray
    psi_A: np.ndarray
    psi_b: np.ndarray
    psi_bA: np.ndarray


def build_noise_panel(seed, draw_index, n_subjects, tau, q_ym):
    g = rngmod.keyed_rng(seed, rngmod.NOISE_PANEL, draw_index)
    return NoisePanel(
        psi_Y=g.normal(size=(n_subjects, tau)),
        psi_M=g.random(size=(n_subjects, tau)),
        psi_A=g.random(size=(n_subjects, tau)),
        psi_b=g.normal(size=(n_subjects, tau, q_ym)),
        psi_bA=g.normal(size=n_subjects),
    )


def _chol_psd(C):
    """Cholesky-like factor of a PSD matrix batch (eigendecomposition based)."""
    C = psd_clamp(C)
    w, U = np.linalg.eigh(C)
    return U * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def project_batch(hb, regime, tau, params, bA, noise, spec, draw_index=0,
                  subject_ids=None):
    """Advance every subject tau counterfactual steps under ``regime``.

    Returns (Y, M, present): Y (B, tau) latent outcomes, M (B, tau) indicators,
    present (B, tau) bools marking observed outcomes.  ``hb`` is not modified.
    """
    hb = hb.copy(extra=tau)
    B = hb.B
    q = spec.q_total
    sY, sM, sA = spec.block_slices()
    q_ym = spec.q_outcome + spec.q_confounder
    Ginv, logdetG = _chol_inv(params.G) if q else (np.zeros((0, 0)), 0.0)
    Y_out = np.zeros((B, tau))
    M_out = np.zeros((B, tau), int)
    present = np.zeros((B, tau), bool)
    warm = None
    K = spec.max_dose
    for step in range(tau):
        # Step 1: random-effects posterior on the history so far (treatment
        # likelihood stays capped at the observed horizon h)
        if q:
            ld = prepare_likelihood(spec, hb)
            mode, cov, conv, _ = laplace_batch(ld, params, Ginv, logdetG, b0=warm)
            if not conv.all():
                bad = int(np.argmax(~conv))
                sid = subject_ids[bad] if subject_ids is not None else bad
                raise TrajectoryError(sid, int(hb.t[bad]) + 1, draw_index)
            warm = mode
            # Step 2: draw the outcome/confounder effects given b^A
            if spec.q_treatment:
                m_c, c_c = condition_on_bA_batch(mode, cov, np.asarray(bA, float), spec)
            else:
                m_c = mode[:, :q_ym]
                c_c = cov[:, :q_ym, :q_ym]
            if q_ym:
                L = _chol_psd(c_c)
                b_ym = m_c + np.einsum("bpq,bq->bp", L, noise.psi_b[:, step, :])
            else:
                b_ym = np.zeros((B, 0))
            b = np.zeros((B, q))
            b[:, sY] = b_ym[:, :spec.q_outcome]
            b[:, sM] = b_ym[:, spec.q_outcome:]
            if spec.q_treatment:
                b[:, sA.start] = bA
        else:
            b = np.zeros((B, 0))

        # regime decision for this interval (visible to dose/treatment terms)
        t_vec = hb.t + 1
        a_new = regime.path_step_batch(t_vec, hb)
        hb.a[np.arange(B), hb.t] = a_new

        state = _replayed_state(hb)

        # Step 3: confounder indicator
        if spec.confounder_enabled:
            xm = rows_at(spec.confounder_features, state, K)
            eta_m = xm @ params.beta_M
            if spec.q_confounder:
                zm = rows_at(spec.confounder_reff, state, K)
                eta_m = eta_m + np.sum(zm * b[:, sM], axis=1)
            m_new = (noise.psi_M[:, step] <= expit(eta_m)).astype(int)
        else:
            m_new = np.ones(B, int)
        # Step 4: outcome (always generated; flagged absent when M = 0)
        xy = rows_at(spec.outcome_features, state, K)
        eta_y = xy @ params.beta_Y
        if spec.q_outcome:
            zy = rows_at(spec.outcome_reff, state, K)
            eta_y = eta_y + np.sum(zy * b[:, sY], axis=1)
        y_new = eta_y + params.sigma * noise.psi_Y[:, step]
        # Step 5: append and extend
        pres = m_new == 1 if spec.confounder_enabled else np.ones(B, bool)
        hb.append_step(a_new, m_new, y_new, present=pres)
        Y_out[:, step] = y_new
        M_out[:, step] = m_new
        present[:, step] = pres
    return Y_out, M_out, present


def _replayed_state(hb):
    """Row state positioned at interval t+1 for every subject.

    Subjects may sit at different t; the per-term evaluation indexes lag
    columns per subject, so we advance a shared state to the max t and rely on
    per-subject columns.  With a common t (the projection engine's case after
    copy) this is a plain replay.
    """
    state = _RowState(hb)
    t_min = int(hb.t.min())
    if t_min != int(hb.t.max()):
        raise ValueError("projection requires a common interval count per step")
    for _ in range(t_min):
        state.advance()
    return state


def project_counterfactual(history, regime, tau, params, bA, noise_row, spec,
                           draw_index=0):
    """Single-subject projection; ``noise_row`` is a NoisePanel of one subject."""
    hb = HistoryBatch.from_histories([history], extra=tau)
    Y, M, present = project_batch(hb, regime, tau, params, np.array([bA]),
                                  noise_row, spec, draw_index=draw_index)
    return Y[0], M[0], present[0]


@dataclass(frozen=True)
class ContrastRequest:
    data: object                 # LongDataset
    spec: object                 # ModelSpec
    subgroup: tuple              # ((subject id, h_i), ...)
    regimes: tuple               # (q1, q2) Regime objects or parseable strings
    tau: int
    v: float
    draws: object                # PosteriorDraws
    seed: int = 0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.v < 0:
            raise ValueError("v must be nonnegative")
        if not self.subgroup:
            raise ValueError("subgroup must be nonempty")
        regs = tuple(parse_regime(r) if isinstance(r, str) else r
                     for r in self.regimes)
        object.__setattr__(self, "regimes", regs)
        object.__setattr__(self, "subgroup",
                           tuple((str(s), int(h)) for s, h in self.subgroup))


@dataclass
class ContrastResult:
    D: np.ndarray                # (S, tau) per-draw subgroup-mean differences
    regimes: tuple
    tau: int
    v: float
    seed: int
    spec_digest: str = ""

    @property
    def mean(self):
        return self.D.mean(axis=0)

    @property
    def lo95(self):
        return np.quantile(self.D, 0.025, axis=0)

    @property
    def hi95(self):
        return np.quantile(self.D, 0.975, axis=0)

    def samples_frame(self):
        S, tau = self.D.shape
        j = np.repeat(np.arange(tau), S)
        d = np.tile(np.arange(S), tau)
        return pd.DataFrame({"j": j, "draw": d,
                             "D_j": self.D[d, j]})

    def summary_frame(self):
        return pd.DataFrame({"j": np.arange(self.tau), "mean": self.mean,
                             "lo95": self.lo95, "hi95": self.hi95})

    def save(self, samples_csv=None, summary_csv=None, manifest_path=None):
        if samples_csv:
            self.samples_frame().to_csv(samples_csv, index=False)
        if summary_csv:
            self.summary_frame().to_csv(summary_csv, index=False)
        if manifest_path:
            doc = {"regimes": [getattr(r, "name", str(r)) for r in self.regimes],
                   "v": float(self.v), "tau": int(self.tau),
                   "seed": int(self.seed), "spec_digest": self.spec_digest}
            with open(manifest_path, "w") as fh:
                json.dump(doc, fh, indent=2)


def _subgroup_batch(data, subgroup, tau):
    histories = []
    ids = []
    for sid, h in subgroup:
        rec = data.by_id(sid)
        if not 0 <= h <= rec.T:
            raise ValueError(f"subject {sid}: conditioning horizon {h} outside record")
        histories.append(History.from_record(rec, t=h, h=h))
        ids.append(sid)
    return HistoryBatch.from_histories(histories, extra=tau), ids


def _draw_bA(hb, params, spec, v, noise):
    """Treatment-heterogeneity values, one per subject, stratified by history.

    Subjects with no accumulated history draw from the population prior
    N(0, v); the rest from the treatment-block marginal of their Laplace
    posterior.  v = 0 gives exactly 0.
    """
    B = hb.B
    if v == 0.0 or spec.q_treatment == 0:
        return np.zeros(B)
    fresh = (hb.h == 0) & (hb.t == 0)
    bA = math.sqrt(v) * noise.psi_bA
    if not fresh.all():
        Ginv, logdetG = _chol_inv(params.G)
        ld = prepare_likelihood(spec, hb)
        mode, cov, conv, _ = laplace_batch(ld, params, Ginv, logdetG)
        _, _, sA = spec.block_slices()
        ia = sA.start
        sd = np.sqrt(np.maximum(cov[:, ia, ia], 0.0))
        post = mode[:, ia] + sd * noise.psi_bA
        # non-converged subjects fall back to the prior draw
        bA = np.where(fresh | ~conv, bA, post)
    return bA


def _slice_noise(noise, idx):
    return NoisePanel(noise.psi_Y[idx], noise.psi_M[idx], noise.psi_A[idx],
                      noise.psi_b[idx], noise.psi_bA[idx])


def subgroup_contrast(req):
    """Posterior samples of the subgroup-averaged outcome difference D_j.

    Subjects are grouped by conditioning horizon so each projection batch
    advances a common absolute interval per step.
    """
    if req.spec.v != req.v:
        raise ValueError("request v must match the spec the draws were fit under")
    spec = req.spec
    q1, q2 = req.regimes
    S = len(req.draws)
    q_ym = spec.q_outcome + spec.q_confounder
    B = len(req.subgroup)
    groups = {}
    for pos, (sid, h) in enumerate(req.subgroup):
        groups.setdefault(h, []).append(pos)
    batches = {}
    for h, positions in sorted(groups.items()):
        sub = tuple(req.subgroup[p] for p in positions)
        batches[h] = (positions, *_subgroup_batch(req.data, sub, req.tau))
    D = np.zeros((S, req.tau))
    for ell in range(S):
        params = req.draws[ell]
        noise = build_noise_panel(req.seed, ell, B, req.tau, q_ym)
        diff = np.zeros((B, req.tau))
        for h, (positions, hb0, ids) in sorted(batches.items()):
            nz = _slice_noise(noise, np.asarray(positions))
            bA = _draw_bA(hb0, params, spec, req.v, nz)
            Y1, _, _ = project_batch(hb0, q1, req.tau, params, bA, nz, spec,
                                     draw_index=ell, subject_ids=ids)
            Y2, _, _ = project_batch(hb0, q2, req.tau, params, bA, nz, spec,
                                     draw_index=ell, subject_ids=ids)
            diff[positions] = Y1 - Y2
        D[ell] = diff.mean(axis=0)
    return ContrastResult(D, req.regimes, req.tau, req.v, req.seed,
                          spec_digest=spec.digest())


def mixed_ate(data, spec, regimes, tau, draws, v, seed=0):
    """Posterior samples of the population mixed ATE at the final horizon.

    All subjects are conditioned at baseline only (h = 0); the
    treatment-heterogeneity value is drawn from its prior N(0, v).
    """
    subgroup = tuple((rec.id, 0) for rec in data)
    req = ContrastRequest(data=data, spec=spec, subgroup=subgroup,
                          regimes=regimes, tau=tau, v=v, draws=draws, seed=seed)
    res = subgroup_contrast(req)
    return res.D[:, -1], res
