"""Deterministic treatment regimes.

A regime maps (interval t, baseline V, histories strictly before t) to the
treatment decision in {0, 1}.  Once a path has initiated, it stays at 1
(monotone treatment); the engine enforces this regardless of the rule.
"""

import numpy as np


class Regime:
    name = "regime"

    def decide(self, t, V, a_hist, y_hist, m_hist):
        """Treatment decision at interval t given history through t-1."""
        raise NotImplementedError

    def path_step(self, t, V, a_hist, y_hist, m_hist):
        """Monotone-enforced decision: treated stays treated."""
        if len(a_hist) and a_hist[-1] == 1:
            return 1
        return 1 if self.decide(t, V, a_hist, y_hist, m_hist) else 0

    def path_step_batch(self, t_vec, hb):
        """Vectorized decision for a HistoryBatch at per-subject intervals."""
        rows = np.arange(hb.B)
        out = np.empty(hb.B, int)
        for i in rows:
            t = int(t_vec[i])
            a_hist = tuple(hb.a[i, :t - 1])
            y_hist = tuple(hb.y[i, :t - 1])
            m_hist = tuple(hb.m[i, :t - 1])
            out[i] = self.path_step(t, tuple(hb.V[i]), a_hist, y_hist, m_hist)
        return out

    def __repr__(self):
        return self.name


class AlwaysTreat(Regime):
    name = "always"

    def decide(self, t, V, a_hist, y_hist, m_hist):
        return 1

    def path_step_batch(self, t_vec, hb):
        return np.ones(hb.B, int)


class NeverTreat(Regime):
    name = "never"

    def decide(self, t, V, a_hist, y_hist, m_hist):
        return 0

    def path_step_batch(self, t_vec, hb):
        # monotone: subjects already initiated stay treated
        prev = np.where(hb.t > 0, hb.a[np.arange(hb.B), np.maximum(hb.t - 1, 0)], 0)
        return prev.astype(int)


class InitiateAt(Regime):
    def __init__(self, t0):
        self.t0 = int(t0)
        self.name = f"initiate_at:{self.t0}"

    def decide(self, t, V, a_hist, y_hist, m_hist):
        return 1 if t >= self.t0 else 0

    def path_step_batch(self, t_vec, hb):
        prev = np.where(hb.t > 0, hb.a[np.arange(hb.B), np.maximum(hb.t - 1, 0)], 0)
        return np.maximum(prev, (np.asarray(t_vec) >= self.t0).astype(int))


class AsObservedThen(Regime):
    """Follow a recorded path where available, then hand off to ``rule``."""

    def __init__(self, observed_path, rule):
        self.observed = tuple(int(a) for a in observed_path)
        self.rule = rule
        self.name = f"as_observed_then:{rule.name}"

    def decide(self, t, V, a_hist, y_hist, m_hist):
        if t <= len(self.observed):
            return self.observed[t - 1]
        return self.rule.decide(t, V, a_hist, y_hist, m_hist)


def parse_regime(text):
    text = text.strip()
    if text == "always":
        return AlwaysTreat()
    if text == "never":
        return NeverTreat()
    if text.startswith("initiate_at:"):
        return InitiateAt(int(text.split(":", 1)[1]))
    raise ValueError(f"unknown regime {text!r}; use always, never, or initiate_at:T")
