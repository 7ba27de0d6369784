"""Design-row evaluation over observed or counterfactual histories.

Histories live on the integer interval grid.  ``HistoryBatch`` holds many
subjects as padded arrays so design rows and likelihood tensors can be built
vectorized; the single-subject ``History`` is a batch of one.
"""

from dataclasses import dataclass

import numpy as np

from .model import SpecError

BIG = 10 ** 9  # "never initiated" sentinel on the interval grid


@dataclass(frozen=True)
class History:
    """One subject's (possibly counterfactual) history.

    y/m cover intervals 1..t; the treatment path ``a`` may extend beyond t
    (regime-determined future values).  ``h`` is the horizon through which the
    treatment-assignment likelihood applies (observed treatment decisions).
    """

    V: tuple
    y0: float
    y: tuple          # None = absent
    m: tuple
    a: tuple
    h: int

    def __post_init__(self):
        if len(self.m) != len(self.y):
            raise ValueError("y and m must have equal length")
        if len(self.a) < len(self.y):
            raise ValueError("treatment path must cover the biomarker horizon")
        if not 0 <= self.h <= len(self.y):
            raise ValueError("need 0 <= h <= t")

    @property
    def t(self):
        return len(self.y)

    @staticmethod
    def from_record(rec, t=None, h=None):
        t = rec.T if t is None else t
        h = t if h is None else h
        return History(rec.V, rec.y0, rec.y[:t], rec.m[:t], rec.a[:t], h)


class HistoryBatch:
    """Padded per-subject histories; columns j-1 hold interval j."""

    def __init__(self, V, y0, t_alloc):
        V = np.atleast_2d(np.asarray(V, float))
        self.B = V.shape[0]
        self.V = V
        self.y0 = np.asarray(y0, float)
        self.y = np.full((self.B, t_alloc), np.nan)
        self.m = np.zeros((self.B, t_alloc), int)
        self.a = np.zeros((self.B, t_alloc), int)
        self.t = np.zeros(self.B, int)
        self.h = np.zeros(self.B, int)
        self.s = np.full(self.B, BIG, int)     # initiation interval within 1..h

    @property
    def t_max(self):
        return int(self.t.max()) if self.B else 0

    @staticmethod
    def from_histories(histories, extra=0):
        hs = list(histories)
        t_alloc = max(len(h.a) for h in hs) + extra
        hb = HistoryBatch([h.V for h in hs], [h.y0 for h in hs], t_alloc)
        for i, h in enumerate(hs):
            for j, (yv, mv) in enumerate(zip(h.y, h.m)):
                hb.y[i, j] = np.nan if yv is None else yv
                hb.m[i, j] = mv
            for j, av in enumerate(h.a):
                hb.a[i, j] = av
            hb.t[i] = h.t
            hb.h[i] = h.h
            for j in range(h.h):
                if h.a[j] == 1:
                    hb.s[i] = j + 1
                    break
        return hb

    @staticmethod
    def from_dataset(data):
        return HistoryBatch.from_histories(History.from_record(r) for r in data)

    def copy(self, extra=0):
        out = HistoryBatch(self.V, self.y0, self.y.shape[1] + extra)
        out.y[:, :self.y.shape[1]] = self.y
        out.m[:, :self.m.shape[1]] = self.m
        out.a[:, :self.a.shape[1]] = self.a
        out.t = self.t.copy()
        out.h = self.h.copy()
        out.s = self.s.copy()
        return out

    def append_step(self, a_new, m_new, y_new, present):
        """Write one more interval per subject (column self.t) and advance."""
        rows = np.arange(self.B)
        self.a[rows, self.t] = a_new
        self.m[rows, self.t] = m_new
        self.y[rows, self.t] = np.where(present, y_new, np.nan)
        self.t = self.t + 1


class _RowState:
    """Running per-subject state while walking intervals 1..J."""

    def __init__(self, hb):
        self.hb = hb
        # carry-forward of the last present outcome; NaN until one exists
        self.carry = np.where(np.isfinite(hb.y0), hb.y0, np.nan)
        self.m_prev = np.ones(hb.B)          # M_0 is structurally 1
        self.cumdose = np.zeros(hb.B, int)
        self.j = 0

    def advance(self):
        """Consume interval j's realized values into the lag state."""
        hb, j = self.hb, self.j
        yj = hb.y[:, j]
        present = np.isfinite(yj) & (j < hb.t)
        self.carry = np.where(present, yj, self.carry)
        valid = j < hb.t
        self.m_prev = np.where(valid, hb.m[:, j], self.m_prev)
        self.cumdose = self.cumdose + np.where(j < hb.a.shape[1], hb.a[:, j], 0)
        self.j = j + 1


def _term_values(term, state, j, K):
    hb = state.hb
    if term.kind == "intercept":
        return np.ones(hb.B)
    if term.kind == "baseline":
        if term.index >= hb.V.shape[1]:
            raise SpecError(f"baseline index {term.index} out of range")
        return hb.V[:, term.index]
    if term.kind == "time":
        return np.full(hb.B, float(j))
    if term.kind == "lagged_outcome":
        return np.where(np.isfinite(state.carry), state.carry, term.fill)
    if term.kind == "lagged_confounder":
        return state.m_prev.astype(float)
    if term.kind == "treatment_indicator":
        return hb.a[:, j - 1].astype(float)
    if term.kind == "cumulative_dose_indicator":
        dose = np.minimum(state.cumdose + hb.a[:, j - 1], K)
        return (dose == term.dose).astype(float)
    if term.kind == "interaction":
        return _term_values(term.left, state, j, K) * _term_values(term.right, state, j, K)
    raise SpecError(f"unknown feature term kind {term.kind!r}")


def rows_at(terms, state, K):
    """Design rows for interval j = state.j + 1, shape (B, len(terms))."""
    j = state.j + 1
    if not terms:
        return np.zeros((state.hb.B, 0))
    return np.stack([_term_values(t, state, j, K) for t in terms], axis=1)


def build_design_row(spec, channel, history, t):
    """Design row for one subject's ``channel`` regression at interval ``t``."""
    if channel == "Y":
        terms = spec.outcome_features
    elif channel == "M":
        if not spec.confounder_enabled:
            raise SpecError("confounder channel is disabled in this spec")
        terms = spec.confounder_features
    elif channel == "A":
        terms = spec.treatment_features
    else:
        raise SpecError(f"unknown channel {channel!r}")
    if t < 1:
        raise ValueError("intervals start at 1")
    hb = HistoryBatch.from_histories([history])
    if t > hb.a.shape[1]:
        raise ValueError(f"history does not reach interval {t}")
    state = _RowState(hb)
    for _ in range(t - 1):
        state.advance()
    return rows_at(terms, state, spec.max_dose)[0]


@dataclass
class LikelihoodData:
    """Per-interval design tensors and masks for the three channels.

    Shapes: X* are (B, J, p), Z* are (B, J, q); weights w* are (B, J) in
    {0, 1}.  wY marks present outcomes, wM marks intervals where the
    confounder likelihood applies, wA marks intervals j <= min(h, s).
    """

    XY: np.ndarray
    ZY: np.ndarray
    yv: np.ndarray
    wY: np.ndarray
    XM: np.ndarray
    ZM: np.ndarray
    mv: np.ndarray
    wM: np.ndarray
    XA: np.ndarray
    ZA: np.ndarray
    av: np.ndarray
    wA: np.ndarray

    @property
    def B(self):
        return self.XY.shape[0]


def likelihood_data(spec, hb, t_cap=None):
    """Build LikelihoodData from a HistoryBatch.

    ``t_cap`` (B,) optionally caps the biomarker horizon below hb.t (used when
    conditioning on trajectories up to t-1 mid-projection).
    """
    t_eff = hb.t if t_cap is None else np.minimum(hb.t, t_cap)
    J = int(max(t_eff.max(), hb.h.max())) if hb.B else 0
    K = spec.max_dose
    B = hb.B
    qa_on = spec.q_treatment > 0

    def alloc(p):
        return np.zeros((B, J, p))

    XY, ZY = alloc(len(spec.outcome_features)), alloc(len(spec.outcome_reff))
    XM = alloc(len(spec.confounder_features))
    ZM = alloc(len(spec.confounder_reff) if spec.confounder_enabled else 0)
    XA, ZA = alloc(len(spec.treatment_features)), alloc(len(spec.treatment_reff) if qa_on else 0)
    yv = np.zeros((B, J))
    wY = np.zeros((B, J))
    mv = np.zeros((B, J))
    wM = np.zeros((B, J))
    av = np.zeros((B, J))
    wA = np.zeros((B, J))

    state = _RowState(hb)
    for j in range(1, J + 1):
        col = j - 1
        bio = j <= t_eff
        XY[:, col, :] = rows_at(spec.outcome_features, state, K)
        ZY[:, col, :] = rows_at(spec.outcome_reff, state, K)
        yj = hb.y[:, col]
        pres = bio & np.isfinite(yj)
        yv[:, col] = np.where(pres, yj, 0.0)
        wY[:, col] = pres
        if spec.confounder_enabled:
            XM[:, col, :] = rows_at(spec.confounder_features, state, K)
            ZM[:, col, :] = rows_at(spec.confounder_reff, state, K)
            mv[:, col] = np.where(bio, hb.m[:, col], 0)
            wM[:, col] = bio
        trt = (j <= np.minimum(hb.h, hb.s))
        XA[:, col, :] = rows_at(spec.treatment_features, state, K)
        if qa_on:
            ZA[:, col, :] = rows_at(spec.treatment_reff, state, K)
        av[:, col] = np.where(trt, hb.a[:, col], 0)
        wA[:, col] = trt
        state.advance()

    return LikelihoodData(XY, ZY, yv, wY, XM, ZM, mv, wM, XA, ZA, av, wA)
