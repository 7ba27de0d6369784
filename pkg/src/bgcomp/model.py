"""Domain types: feature terms, model specification, datasets, parameter draws."""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


class SpecError(ValueError):
    """Invalid model specification or feature-term usage."""


TERM_KINDS = (
    "intercept",
    "baseline",
    "time",
    "lagged_outcome",
    "lagged_confounder",
    "treatment_indicator",
    "cumulative_dose_indicator",
    "interaction",
)

# treatment-dependent kinds are not allowed in the treatment channel (the
# hazard model conditions on A_{t-1} = 0, so they would be degenerate)
_TREATMENT_DEPENDENT = {"treatment_indicator", "cumulative_dose_indicator"}


@dataclass(frozen=True)
class FeatureTerm:
    """One regressor in a channel's linear predictor."""

    kind: str
    index: int = 0          # baseline covariate index
    dose: int = 0           # k for cumulative_dose_indicator
    fill: float = 0.0       # value used by lagged_outcome when nothing observed yet
    left: "FeatureTerm | None" = None
    right: "FeatureTerm | None" = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise SpecError(f"unknown feature term kind {self.kind!r}")
        if self.kind == "cumulative_dose_indicator" and self.dose < 1:
            raise SpecError("cumulative_dose_indicator requires dose k >= 1")
        if self.kind == "baseline" and self.index < 0:
            raise SpecError("baseline index must be >= 0")
        if self.kind == "interaction":
            if self.left is None or self.right is None:
                raise SpecError("interaction needs two sub-terms")
            if self.left.kind == "interaction" or self.right.kind == "interaction":
                raise SpecError("interaction nesting depth is limited to 2")

    def depends_on_treatment(self):
        if self.kind in _TREATMENT_DEPENDENT:
            return True
        if self.kind == "interaction":
            return self.left.depends_on_treatment() or self.right.depends_on_treatment()
        return False

    def depends_on_confounder(self):
        if self.kind == "lagged_confounder":
            return True
        if self.kind == "interaction":
            return self.left.depends_on_confounder() or self.right.depends_on_confounder()
        return False

    def max_dose(self):
        if self.kind == "cumulative_dose_indicator":
            return self.dose
        if self.kind == "interaction":
            return max(self.left.max_dose(), self.right.max_dose())
        return 0

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "baseline":
            d["index"] = self.index
        elif self.kind == "cumulative_dose_indicator":
            d["dose"] = self.dose
        elif self.kind == "lagged_outcome":
            d["fill"] = self.fill
        elif self.kind == "interaction":
            d["left"] = self.left.to_dict()
            d["right"] = self.right.to_dict()
        return d

    @staticmethod
    def from_dict(d):
        kind = d["kind"]
        if kind == "interaction":
            return FeatureTerm(kind, left=FeatureTerm.from_dict(d["left"]),
                               right=FeatureTerm.from_dict(d["right"]))
        return FeatureTerm(kind, index=int(d.get("index", 0)), dose=int(d.get("dose", 0)),
                           fill=float(d.get("fill", 0.0)))


# convenience constructors
def intercept():
    return FeatureTerm("intercept")


def baseline(j):
    return FeatureTerm("baseline", index=j)


def time_term():
    return FeatureTerm("time")


def lagged_outcome(fill=0.0):
    return FeatureTerm("lagged_outcome", fill=fill)


def lagged_confounder():
    return FeatureTerm("lagged_confounder")


def treatment_indicator():
    return FeatureTerm("treatment_indicator")


def dose_indicator(k):
    return FeatureTerm("cumulative_dose_indicator", dose=k)


def interaction(a, b):
    return FeatureTerm("interaction", left=a, right=b)


@dataclass(frozen=True)
class PriorSpec:
    """Weakly informative defaults; every scale is overridable."""

    beta_scale: float = 10.0       # Normal(0, beta_scale^2) on each coefficient
    sigma_scale: float = 5.0       # half-Normal on the outcome noise sd
    reff_sd_scale: float = 2.5     # half-Normal on each free random-effect sd

    def __post_init__(self):
        if min(self.beta_scale, self.sigma_scale, self.reff_sd_scale) <= 0:
            raise SpecError("prior scales must be strictly positive")

    def to_dict(self):
        return {"beta_scale": self.beta_scale, "sigma_scale": self.sigma_scale,
                "reff_sd_scale": self.reff_sd_scale}


@dataclass(frozen=True)
class ModelSpec:
    """Declarative joint model: feature maps, random-effect designs, sensitivity v.

    Links are fixed: identity for the outcome, logit for the confounder and
    treatment channels.
    """

    outcome_features: tuple
    treatment_features: tuple
    confounder_features: tuple = ()
    outcome_reff: tuple = (FeatureTerm("intercept"),)
    confounder_reff: tuple = ()
    treatment_reff: tuple = (FeatureTerm("intercept"),)
    confounder_enabled: bool = False
    v: float = 0.0
    priors: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        object.__setattr__(self, "outcome_features", tuple(self.outcome_features))
        object.__setattr__(self, "treatment_features", tuple(self.treatment_features))
        object.__setattr__(self, "confounder_features", tuple(self.confounder_features))
        object.__setattr__(self, "outcome_reff", tuple(self.outcome_reff))
        object.__setattr__(self, "confounder_reff", tuple(self.confounder_reff))
        object.__setattr__(self, "treatment_reff", tuple(self.treatment_reff))
        if self.v < 0:
            raise SpecError("sensitivity variance v must be nonnegative")
        if len(self.treatment_reff) > 1:
            raise SpecError("treatment random-effects block must have dimension <= 1")
        for name, reff, fixed in (
            ("outcome", self.outcome_reff, self.outcome_features),
            ("confounder", self.confounder_reff, self.confounder_features),
            ("treatment", self.treatment_reff, self.treatment_features),
        ):
            for term in reff:
                if term not in fixed and term != FeatureTerm("intercept"):
                    raise SpecError(
                        f"{name} random-effects design must be a subset of its "
                        f"fixed-effects feature list")
        if not self.confounder_enabled and self.confounder_features:
            raise SpecError("confounder channel disabled but confounder features given")
        if self.confounder_enabled and not self.confounder_features:
            raise SpecError("confounder channel enabled but no features given")
        for term in self.treatment_features + self.treatment_reff:
            if term.depends_on_treatment():
                raise SpecError("treatment channel features may not depend on treatment")
        if not self.confounder_enabled:
            for term in (self.outcome_features + self.treatment_features
                         + self.outcome_reff + self.treatment_reff):
                if term.depends_on_confounder():
                    raise SpecError("feature references the disabled confounder channel")

    # ---- random-effect block layout (b^Y, b^M, b^A concatenated) ----

    @property
    def q_outcome(self):
        return len(self.outcome_reff)

    @property
    def q_confounder(self):
        return len(self.confounder_reff) if self.confounder_enabled else 0

    @property
    def q_treatment(self):
        # v = 0 removes the treatment heterogeneity block entirely
        return len(self.treatment_reff) if self.v > 0 else 0

    @property
    def q_total(self):
        return self.q_outcome + self.q_confounder + self.q_treatment

    def block_slices(self):
        qy, qm, qa = self.q_outcome, self.q_confounder, self.q_treatment
        return slice(0, qy), slice(qy, qy + qm), slice(qy + qm, qy + qm + qa)

    @property
    def max_dose(self):
        all_terms = (self.outcome_features + self.confounder_features
                     + self.treatment_features)
        return max((t.max_dose() for t in all_terms), default=0)

    def to_dict(self):
        return {
            "outcome_features": [t.to_dict() for t in self.outcome_features],
            "treatment_features": [t.to_dict() for t in self.treatment_features],
            "confounder_features": [t.to_dict() for t in self.confounder_features],
            "outcome_reff": [t.to_dict() for t in self.outcome_reff],
            "confounder_reff": [t.to_dict() for t in self.confounder_reff],
            "treatment_reff": [t.to_dict() for t in self.treatment_reff],
            "confounder_enabled": self.confounder_enabled,
            "v": self.v,
            "priors": self.priors.to_dict(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @staticmethod
    def from_dict(d):
        terms = lambda key: tuple(FeatureTerm.from_dict(x) for x in d.get(key, []))
        return ModelSpec(
            outcome_features=terms("outcome_features"),
            treatment_features=terms("treatment_features"),
            confounder_features=terms("confounder_features"),
            outcome_reff=terms("outcome_reff"),
            confounder_reff=terms("confounder_reff"),
            treatment_reff=terms("treatment_reff"),
            confounder_enabled=bool(d.get("confounder_enabled", False)),
            v=float(d.get("v", 0.0)),
            priors=PriorSpec(**d.get("priors", {})),
        )

    @staticmethod
    def from_json(s):
        return ModelSpec.from_dict(json.loads(s))

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_v(self, v):
        d = self.to_dict()
        d["v"] = float(v)
        return ModelSpec.from_dict(d)


NEVER = None  # sentinel for "never initiated"


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's longitudinal record on the integer interval grid.

    ``y0`` is the baseline outcome (interval 0); ``y``, ``m``, ``a`` cover
    intervals 1..T.  Absent outcomes are None.
    """

    id: str
    V: tuple
    y0: float
    y: tuple
    m: tuple
    a: tuple

    def __post_init__(self):
        object.__setattr__(self, "V", tuple(float(v) for v in self.V))
        object.__setattr__(self, "y", tuple(None if v is None else float(v) for v in self.y))
        object.__setattr__(self, "m", tuple(int(v) for v in self.m))
        object.__setattr__(self, "a", tuple(int(v) for v in self.a))
        if not (len(self.y) == len(self.m) == len(self.a)):
            raise ValueError(f"subject {self.id}: channel lengths differ")
        if len(self.y) < 1:
            raise ValueError(f"subject {self.id}: needs at least one interval")

    @property
    def T(self):
        return len(self.y)

    @property
    def s(self):
        """Treatment initiation interval, or None if never initiated."""
        for t, at in enumerate(self.a, start=1):
            if at == 1:
                return t
        return NEVER


@dataclass(frozen=True)
class LongDataset:
    subjects: tuple

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def by_id(self, sid):
        for rec in self.subjects:
            if rec.id == str(sid):
                return rec
        raise KeyError(sid)

    @property
    def n_baseline(self):
        return len(self.subjects[0].V) if self.subjects else 0

    # ---- long-format CSV round trip: id,interval,V1..Vp,Y,M,A ----

    def to_frame(self):
        p = self.n_baseline
        rows = []
        for rec in self.subjects:
            base = {f"V{j + 1}": rec.V[j] for j in range(p)}
            rows.append({"id": rec.id, "interval": 0, **base,
                         "Y": rec.y0, "M": np.nan, "A": np.nan})
            for t in range(1, rec.T + 1):
                yv = rec.y[t - 1]
                rows.append({"id": rec.id, "interval": t, **base,
                             "Y": np.nan if yv is None else yv,
                             "M": rec.m[t - 1], "A": rec.a[t - 1]})
        return pd.DataFrame(rows)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @staticmethod
    def from_frame(df):
        p = sum(1 for c in df.columns if c.startswith("V") and c[1:].isdigit())
        subjects = []
        for sid, g in df.groupby("id", sort=False):
            g = g.sort_values("interval")
            base_row = g[g["interval"] == 0]
            if len(base_row) != 1:
                raise ValueError(f"subject {sid}: expected exactly one interval-0 row")
            V = tuple(float(base_row.iloc[0][f"V{j + 1}"]) for j in range(p))
            y0 = float(base_row.iloc[0]["Y"])
            follow = g[g["interval"] > 0]
            y, m, a = [], [], []
            for _, row in follow.iterrows():
                y.append(None if pd.isna(row["Y"]) else float(row["Y"]))
                m.append(int(row["M"]))
                a.append(int(row["A"]))
            subjects.append(SubjectRecord(str(sid), V, y0, tuple(y), tuple(m), tuple(a)))
        return LongDataset(tuple(subjects))

    @staticmethod
    def from_csv(path):
        return LongDataset.from_frame(pd.read_csv(path))


@dataclass(frozen=True)
class Violation:
    subject: str
    interval: int
    message: str


def validate_dataset(data, spec):
    """Report every violated dataset invariant; empty list iff admissible."""
    report = []
    p = None
    for rec in data:
        if p is None:
            p = len(rec.V)
        elif len(rec.V) != p:
            report.append(Violation(rec.id, 0, "baseline covariate length differs"))
        if not math.isfinite(rec.y0):
            report.append(Violation(rec.id, 0, "baseline outcome not finite"))
        for t in range(2, rec.T + 1):
            if rec.a[t - 1] < rec.a[t - 2]:
                report.append(Violation(rec.id, t, "treatment path not monotone"))
        for t in range(1, rec.T + 1):
            yv = rec.y[t - 1]
            if yv is not None and not math.isfinite(yv):
                report.append(Violation(rec.id, t, "outcome not finite"))
            if rec.m[t - 1] not in (0, 1):
                report.append(Violation(rec.id, t, "confounder indicator not in {0,1}"))
            if rec.a[t - 1] not in (0, 1):
                report.append(Violation(rec.id, t, "treatment not in {0,1}"))
            if spec.confounder_enabled:
                if (yv is not None) != (rec.m[t - 1] == 1):
                    report.append(Violation(
                        rec.id, t, "outcome presence must match confounder indicator"))
            else:
                if rec.m[t - 1] != 1:
                    report.append(Violation(
                        rec.id, t, "confounder channel disabled; M must be 1"))
                if yv is None:
                    report.append(Violation(
                        rec.id, t, "confounder channel disabled; outcome must be present"))
    return report


@dataclass(frozen=True)
class ParamsDraw:
    """One draw of the population-level parameters."""

    beta_Y: np.ndarray
    sigma: float
    beta_M: np.ndarray
    beta_A: np.ndarray
    G: np.ndarray           # over the concatenated (b^Y, b^M, b^A) blocks

    def __post_init__(self):
        object.__setattr__(self, "beta_Y", np.asarray(self.beta_Y, float))
        object.__setattr__(self, "beta_M", np.asarray(self.beta_M, float))
        object.__setattr__(self, "beta_A", np.asarray(self.beta_A, float))
        object.__setattr__(self, "G", np.asarray(self.G, float))
        # sigma = 0 is admitted for noise-free projection; likelihood
        # evaluation requires sigma > 0 and errors there if violated
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def check(self, spec, tol=1e-10):
        """Raise unless dimensions and the G constraints hold for ``spec``."""
        if len(self.beta_Y) != len(spec.outcome_features):
            raise SpecError("beta_Y length mismatch")
        if len(self.beta_M) != len(spec.confounder_features):
            raise SpecError("beta_M length mismatch")
        if len(self.beta_A) != len(spec.treatment_features):
            raise SpecError("beta_A length mismatch")
        q = spec.q_total
        if self.G.shape != (q, q):
            raise SpecError(f"G must be {q}x{q} for this spec")
        if q:
            if not np.allclose(self.G, self.G.T, atol=tol):
                raise SpecError("G must be symmetric")
            if np.linalg.eigvalsh(self.G).min() < -tol:
                raise SpecError("G must be positive semidefinite")
            _, _, sa = spec.block_slices()
            if spec.q_treatment:
                if abs(self.G[sa, sa][0, 0] - spec.v) > tol:
                    raise SpecError("G treatment-block variance must equal v")
        return self
