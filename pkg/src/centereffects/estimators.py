"""Center-specific treatment-effect estimators.

Implements four families of estimators of the mean potential outcome in the
population underlying one center of a multicenter randomized trial, plus
their arm contrasts and conventional regression comparators:

* ``tau``  — crude within-cell outcome mean,
* ``phi``  — center-conditional augmented weighting estimator (nuisances may
  use center indicators),
* ``psi``  — pooled doubly robust estimator that borrows information across
  centers via a center-membership model,
* ``chi``  — transport-style estimator that uses outcome data only from the
  *other* centers, reweighted to the target center,
* ``pooled``/``fe1``/``fe2`` — single-number OLS treatment coefficients.

Every tau/phi/psi/chi estimate carries a vector of per-observation influence
contributions whose sample mean is zero (the estimator solves its own
estimating equation); downstream variance estimation consumes that vector.
Weighting uses raw probabilities — no truncation unless an explicit
``weight_floor`` is configured.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .dataset import TrialDataset
from .errors import (
    ComparatorError,
    ConfigError,
    DivisionError,
    InsufficientDataError,
    NoDonorError,
    ParameterError,
    PositivityError,
    SpecError,
)
from .nuisance import (
    DesignSpec,
    build_design,
    fit_logistic,
    fit_multinomial,
    fit_ols,
    predict,
)

MEAN_ESTIMATORS = ("tau", "phi", "psi", "chi")
VARIANTS = ("dr", "ipw", "om")
COMPARATORS = ("pooled", "fe1", "fe2")


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnownProbabilities:
    """Arm-assignment probabilities known by design, per center.

    ``table`` has one row per center (or a single row applying to every
    center) and one column per arm, each row summing to 1 with all entries in
    the open interval (0,1).
    """

    table: np.ndarray
    arms: tuple = (0, 1)

    def __post_init__(self):
        table = np.atleast_2d(np.asarray(self.table, dtype=np.float64))
        arms = tuple(int(a) for a in self.arms)
        if table.ndim != 2 or table.shape[1] != len(arms):
            raise SpecError(
                f"probability table must have one column per arm "
                f"(got shape {table.shape} for arms {arms})"
            )
        if not np.all((table > 0.0) & (table < 1.0)):
            raise SpecError("known arm probabilities must lie strictly in (0,1)")
        if not np.allclose(table.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
            raise SpecError("known arm probabilities must sum to 1 per center")
        table = table.copy()
        table.flags.writeable = False
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "arms", arms)

    @classmethod
    def constant(cls, prob_of_arm_one=0.5, arms=(0, 1)):
        """Same two-arm assignment probability in every center."""
        return cls(np.array([[1.0 - prob_of_arm_one, prob_of_arm_one]]), arms)

    def _arm_index(self, a):
        try:
            return self.arms.index(int(a))
        except ValueError:
            raise ParameterError(f"arm {a} not covered by known probabilities") from None

    def per_center(self, a, m):
        """Length-m vector of Pr[A=a | C=c], c = 1..m."""
        j = self._arm_index(a)
        if self.table.shape[0] == 1:
            return np.full(m, self.table[0, j])
        if self.table.shape[0] != m:
            raise SpecError(
                f"probability table has {self.table.shape[0]} center rows, data has {m}"
            )
        return self.table[:, j].copy()

    def for_rows(self, center_ids, a):
        """Per-observation Pr[A=a | C=center_i]."""
        m = int(center_ids.max(initial=1))
        return self.per_center(a, m)[center_ids - 1]

    def constant_across_centers(self, a):
        j = self._arm_index(a)
        col = self.table[:, j]
        return bool(np.all(col == col[0]))


def _coerce_spec(value, what):
    if value is None or isinstance(value, (DesignSpec, KnownProbabilities)):
        return value
    if isinstance(value, (list, tuple)):
        return DesignSpec.parse(value)
    raise SpecError(f"{what} must be a DesignSpec, a term list, or known probabilities")


@dataclass(frozen=True)
class NuisanceConfig:
    """Model specifications for the nuisance functions the estimators need.

    ``treatment_decomposition`` computes the marginal arm probability used by
    ``psi`` as the membership-weighted mixture of known per-center arm
    probabilities. ``weight_floor`` (default 0 = off) truncates probabilities
    entering weight denominators from below; exploratory use only, since
    truncation changes the estimand.
    """

    outcome_spec: DesignSpec = None
    treatment_spec: object = None  # DesignSpec or KnownProbabilities
    membership_spec: DesignSpec = None
    treatment_decomposition: bool = False
    weight_floor: float = 0.0
    ridge: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "outcome_spec", _coerce_spec(self.outcome_spec, "outcome_spec"))
        object.__setattr__(
            self, "treatment_spec", _coerce_spec(self.treatment_spec, "treatment_spec")
        )
        ms = self.membership_spec
        if isinstance(ms, KnownProbabilities):
            raise SpecError("membership_spec must be a design, not arm probabilities")
        object.__setattr__(self, "membership_spec", _coerce_spec(ms, "membership_spec"))
        if not 0.0 <= self.weight_floor < 1.0:
            raise ParameterError("weight_floor must lie in [0, 1)")
        if self.ridge < 0.0:
            raise ParameterError("ridge must be nonnegative")


def _spec_uses_centers(spec):
    for term in spec.terms:
        if term.kind == "center":
            return True
        if term.kind == "interaction" and any(p.kind == "center" for p in term.parts):
            return True
    return False


# ---------------------------------------------------------------------------
# estimate record
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateRecord:
    """One point estimate, its target, and (when available) its influence vector."""

    estimand: str  # "mean" or "contrast"
    estimator: str
    center: int
    arms: tuple
    value: float
    influence: np.ndarray = None
    se: float = None
    ci_low: float = None
    ci_high: float = None
    alpha: float = None
    method: str = None

    def __post_init__(self):
        if self.influence is not None:
            inf = np.asarray(self.influence, dtype=np.float64)
            inf.flags.writeable = False
            object.__setattr__(self, "influence", inf)

    def to_dict(self):
        return {
            "estimand": self.estimand,
            "estimator": self.estimator,
            "center": self.center,
            "arms": list(self.arms),
            "value": self.value,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def _record(estimand, estimator, center, arms, value, influence):
    return EstimateRecord(
        estimand=estimand,
        estimator=estimator,
        center=center,
        arms=arms,
        value=float(value),
        influence=influence,
    )


# ---------------------------------------------------------------------------
# fitted nuisance bundle
# ---------------------------------------------------------------------------


class FittedNuisances:
    """Lazily fitted, cached nuisance evaluations for one (data, config) pair.

    All methods return per-observation vectors aligned with the full dataset;
    estimators index into them as needed. Reusing one bundle across centers
    and arms avoids refitting shared models.
    """

    def __init__(self, data: TrialDataset, cfg: NuisanceConfig):
        if cfg is None:
            raise ConfigError("nuisance configuration required")
        self.data = data
        self.cfg = cfg
        self._outcome = {}
        self._donor_outcome = {}
        self._donor_treatment = {}
        self._treatment_fit = None
        self._membership_probs = None
        self._design_cache = {}

    # -- designs ------------------------------------------------------------

    def _design(self, spec):
        key = id(spec)
        if key not in self._design_cache:
            self._design_cache[key] = build_design(spec, self.data)
        return self._design_cache[key]

    # -- outcome models -----------------------------------------------------

    def outcome_mean(self, arm):
        """Fitted E[Y | ·, A=arm] for every row, from a within-arm fit."""
        if arm not in self._outcome:
            if self.cfg.outcome_spec is None:
                raise ConfigError("outcome model specification missing")
            X, names = self._design(self.cfg.outcome_spec)
            rows = self.data.arm == arm
            fit = fit_ols(X[rows], self.data.outcome[rows], column_names=names)
            self._outcome[arm] = predict(fit, X)
        return self._outcome[arm]

    def donor_outcome_mean(self, c, arm):
        """Within-arm outcome fit on all centers except c, evaluated everywhere."""
        key = (c, arm)
        if key not in self._donor_outcome:
            if self.cfg.outcome_spec is None:
                raise ConfigError("outcome model specification missing")
            X, names = self._design(self.cfg.outcome_spec)
            rows = (self.data.center != c) & (self.data.arm == arm)
            fit = fit_ols(X[rows], self.data.outcome[rows], column_names=names)
            self._donor_outcome[key] = predict(fit, X)
        return self._donor_outcome[key]

    # -- treatment models ---------------------------------------------------

    def _fitted_treatment_probability(self, rows=None):
        """Logistic Pr[A=1 | design], fit on ``rows`` (all rows when None)."""
        ts = self.cfg.treatment_spec
        if ts is None:
            raise ConfigError("treatment model specification missing")
        if set(self.data.arms) != {0, 1}:
            raise SpecError("fitted treatment models require arms coded {0,1}")
        X, names = self._design(ts)
        if rows is None:
            fit = self._treatment_fit
            if fit is None:
                fit = fit_logistic(
                    X, self.data.arm.astype(np.float64), ridge=self.cfg.ridge,
                    column_names=names,
                )
                self._treatment_fit = fit
        else:
            fit = fit_logistic(
                X[rows], self.data.arm[rows].astype(np.float64), ridge=self.cfg.ridge,
                column_names=names,
            )
        return predict(fit, X)

    def arm_probability(self, arm):
        """Pr[A=arm | X, C] per row: known by design or from the fitted model."""
        ts = self.cfg.treatment_spec
        if isinstance(ts, KnownProbabilities):
            return ts.for_rows(self.data.center, arm)
        p1 = self._fitted_treatment_probability()
        return p1 if arm == 1 else 1.0 - p1

    def marginal_arm_probability(self, arm):
        """Pr[A=arm | X] per row, marginal over centers.

        With ``treatment_decomposition`` set this is the membership-weighted
        mixture of known per-center probabilities; otherwise it comes from
        constant known probabilities or the fitted treatment model.
        """
        ts = self.cfg.treatment_spec
        if self.cfg.treatment_decomposition:
            if not isinstance(ts, KnownProbabilities):
                raise ConfigError(
                    "treatment_decomposition requires known per-center arm probabilities"
                )
            per_center = ts.per_center(arm, self.data.m)
            P = self.membership()
            total = P.sum(axis=1)
            return (P @ per_center) / total
        if isinstance(ts, KnownProbabilities):
            if not ts.constant_across_centers(arm):
                raise ConfigError(
                    "per-center known probabilities vary across centers; enable "
                    "treatment_decomposition to form the marginal arm probability"
                )
            return np.full(self.data.n, ts.per_center(arm, self.data.m)[0])
        p1 = self._fitted_treatment_probability()
        return p1 if arm == 1 else 1.0 - p1

    def donor_arm_probability(self, c, arm):
        """Pr[A=arm | X] per row from the donor pool (all centers except c)."""
        ts = self.cfg.treatment_spec
        if isinstance(ts, KnownProbabilities):
            return ts.for_rows(self.data.center, arm)
        key = (c,)
        if key not in self._donor_treatment:
            rows = self.data.center != c
            self._donor_treatment[key] = self._fitted_treatment_probability(rows)
        p1 = self._donor_treatment[key]
        return p1 if arm == 1 else 1.0 - p1

    # -- membership model ---------------------------------------------------

    def membership(self):
        """(n, m) matrix of fitted Pr[C=c | X]; identically 1 when m = 1."""
        if self._membership_probs is None:
            if self.data.m == 1:
                self._membership_probs = np.ones((self.data.n, 1))
            else:
                if self.cfg.membership_spec is None:
                    raise ConfigError("membership model specification missing")
                X, names = self._design(self.cfg.membership_spec)
                fit = fit_multinomial(
                    X, self.data.center, ridge=self.cfg.ridge, column_names=names
                )
                self._membership_probs = predict(fit, X)
        return self._membership_probs


class FixedNuisances:
    """Nuisance values supplied directly as per-row vectors (no fitting).

    Intended for algebraic checks and worked examples where ĝ, ê, or p̂ are
    pinned to known values. Each mapping is keyed by arm (outcome and arm
    probabilities) or by (center, arm) for donor-pool quantities.
    """

    def __init__(
        self,
        outcome=None,
        arm_probabilities=None,
        marginal_arm_probabilities=None,
        membership=None,
        donor_outcome=None,
        donor_arm_probabilities=None,
    ):
        self._outcome = dict(outcome or {})
        self._arm_prob = dict(arm_probabilities or {})
        self._marginal = dict(marginal_arm_probabilities or {})
        self._membership = membership
        self._donor_outcome = dict(donor_outcome or {})
        self._donor_arm_prob = dict(donor_arm_probabilities or {})

    @staticmethod
    def _get(mapping, key, what):
        if key not in mapping:
            raise ConfigError(f"{what} not supplied for {key}")
        return np.asarray(mapping[key], dtype=np.float64)

    def outcome_mean(self, arm):
        return self._get(self._outcome, arm, "outcome values")

    def arm_probability(self, arm):
        return self._get(self._arm_prob, arm, "arm probabilities")

    def marginal_arm_probability(self, arm):
        if arm in self._marginal:
            return np.asarray(self._marginal[arm], dtype=np.float64)
        return self.arm_probability(arm)

    def membership(self):
        if self._membership is None:
            raise ConfigError("membership probabilities not supplied")
        return np.asarray(self._membership, dtype=np.float64)

    def donor_outcome_mean(self, c, arm):
        if (c, arm) in self._donor_outcome:
            return self._get(self._donor_outcome, (c, arm), "donor outcome values")
        return self.outcome_mean(arm)

    def donor_arm_probability(self, c, arm):
        if (c, arm) in self._donor_arm_prob:
            return self._get(self._donor_arm_prob, (c, arm), "donor arm probabilities")
        return self.arm_probability(arm)


def fit_nuisances(data, cfg):
    """Build a reusable lazily fitted nuisance bundle for (data, cfg)."""
    return FittedNuisances(data, cfg)


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------


def _check_center(data, c):
    c = int(c)
    if not 1 <= c <= data.m:
        raise ParameterError(f"center {c} outside 1..{data.m}")
    return c

def _check_arm(data, a):
    a = int(a)
    if a not in data.arms:
        raise ParameterError(f"arm {a} not present in data (arms: {data.arms})")
    return a


def _require_cell(data, c, a):
    cell = (data.center == c) & (data.arm == a)
    if not np.any(cell):
        raise PositivityError(f"empty cell: center {c}, arm {a}", cells=[(c, a)])
    return cell


def _floor(values, cfg):
    floor = 0.0 if cfg is None else cfg.weight_floor
    if floor > 0.0:
        return np.maximum(values, floor)
    return values


def _check_positive(values, mask, what):
    bad = mask & (values <= 0.0)
    if np.any(bad):
        row = int(np.nonzero(bad)[0][0])
        raise DivisionError(f"{what} is 0 at row {row}")


def _resolve_nuisances(data, cfg, nuisances):
    if nuisances is not None:
        return nuisances
    return FittedNuisances(data, cfg)


def _finalize_mean(estimator, data, c, a, term, n_c):
    n = data.n
    value = float(term.sum() / n_c)
    center_ind = (data.center == c).astype(np.float64)
    influence = (n / n_c) * (term - center_ind * value)
    return _record("mean", estimator, c, (a,), value, influence)


# ---------------------------------------------------------------------------
# mean estimators
# ---------------------------------------------------------------------------


def estimate_tau(data, c, a):
    """Crude estimator: mean outcome among center-c participants in arm a."""
    c = _check_center(data, c)
    a = _check_arm(data, a)
    cell = _require_cell(data, c, a)
    n_cell = int(cell.sum())
    y_cell = data.outcome[cell]
    value = float(y_cell.sum() / n_cell)
    influence = np.zeros(data.n)
    influence[cell] = (data.n / n_cell) * (y_cell - value)
    return _record("mean", "tau", c, (a,), value, influence)


def estimate_phi(data, c, a, cfg, variant="dr", nuisances=None):
    """Augmented weighting estimator of the center-c mean under arm a.

    ``variant``: "dr" uses both nuisances, "ipw" sets the outcome model to
    zero, "om" keeps only the outcome-model term.
    """
    c = _check_center(data, c)
    a = _check_arm(data, a)
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cell = _require_cell(data, c, a)
    nuis = _resolve_nuisances(data, cfg, nuisances)
    center_ind = (data.center == c).astype(np.float64)
    n_c = int(center_ind.sum())

    if variant == "om":
        ghat = nuis.outcome_mean(a)
        term = center_ind * ghat
    else:
        ghat = nuis.outcome_mean(a) if variant == "dr" else 0.0
        e = _floor(nuis.arm_probability(a), cfg)
        _check_positive(e, cell, "arm probability")
        w = np.zeros(data.n)
        w[cell] = 1.0 / e[cell]
        term = w * (data.outcome - ghat) + center_ind * ghat
    return _finalize_mean(_variant_name("phi", variant), data, c, a, term, n_c)


def estimate_psi(data, c, a, cfg, variant="dr", nuisances=None):
    """Pooled doubly robust estimator of the center-c mean under arm a.

    The outcome model is pooled across centers (no center terms) and weights
    combine the center-membership probability with the marginal arm
    probability, so information is shared across all centers.
    """
    c = _check_center(data, c)
    a = _check_arm(data, a)
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    nuis = _resolve_nuisances(data, cfg, nuisances)
    if cfg is not None and cfg.outcome_spec is not None and _spec_uses_centers(cfg.outcome_spec):
        raise SpecError("pooled outcome model must not contain center terms")
    arm_ind = data.arm == a
    if not np.any(arm_ind):
        raise PositivityError(f"no rows in arm {a}")
    center_ind = (data.center == c).astype(np.float64)
    n_c = int(center_ind.sum())

    if variant == "om":
        gtilde = nuis.outcome_mean(a)
        term = center_ind * gtilde
    else:
        gtilde = nuis.outcome_mean(a) if variant == "dr" else 0.0
        p_c = nuis.membership()[:, c - 1]
        e = _floor(nuis.marginal_arm_probability(a), cfg)
        _check_positive(e, arm_ind, "marginal arm probability")
        w = np.zeros(data.n)
        w[arm_ind] = p_c[arm_ind] / e[arm_ind]
        term = w * (data.outcome - gtilde) + center_ind * gtilde
    return _finalize_mean(_variant_name("psi", variant), data, c, a, term, n_c)


def estimate_chi(data, c, a, cfg, nuisances=None):
    """Transport-style estimator: outcome information only from other centers.

    Donor-pool (all centers except c) outcome and treatment models are
    reweighted to the covariate distribution of center c via the membership
    odds p̂_c / (1 − p̂_c).
    """
    c = _check_center(data, c)
    a = _check_arm(data, a)
    if data.m < 2:
        raise NoDonorError("transport estimator needs at least two centers")
    nuis = _resolve_nuisances(data, cfg, nuisances)
    donor_ind = data.center != c
    cell = donor_ind & (data.arm == a)
    if not np.any(cell):
        raise PositivityError(f"donor pool has no rows in arm {a}")
    center_ind = (data.center == c).astype(np.float64)
    n_c = int(center_ind.sum())

    ghat = nuis.donor_outcome_mean(c, a)
    p_c = nuis.membership()[:, c - 1]
    one_minus = _floor(1.0 - p_c, cfg)
    if np.any(cell & (one_minus <= 0.0)):
        row = int(np.nonzero(cell & (one_minus <= 0.0))[0][0])
        raise DivisionError(
            f"membership probability for center {c} is 1 at donor row {row} "
            "(no overlap)"
        )
    e = _floor(nuis.donor_arm_probability(c, a), cfg)
    _check_positive(e, cell, "donor arm probability")
    w = np.zeros(data.n)
    w[cell] = p_c[cell] / (one_minus[cell] * e[cell])
    term = w * (data.outcome - ghat) + center_ind * ghat
    return _finalize_mean("chi", data, c, a, term, n_c)


def _variant_name(base, variant):
    return base if variant == "dr" else f"{base}_{variant}"


# ---------------------------------------------------------------------------
# contrasts and comparators
# ---------------------------------------------------------------------------


def _mean_estimate(data, estimator, c, a, cfg, variant, nuisances):
    if estimator == "tau":
        return estimate_tau(data, c, a)
    if estimator == "phi":
        return estimate_phi(data, c, a, cfg, variant=variant, nuisances=nuisances)
    if estimator == "psi":
        return estimate_psi(data, c, a, cfg, variant=variant, nuisances=nuisances)
    if estimator == "chi":
        return estimate_chi(data, c, a, cfg, nuisances=nuisances)
    raise ParameterError(
        f"unknown estimator {estimator!r}; expected one of {MEAN_ESTIMATORS}"
    )


def estimate_contrast(data, estimator, c, a, a_prime, cfg=None, variant="dr", nuisances=None):
    """Center-specific average treatment effect: mean(c, a) − mean(c, a′)."""
    rec_a = _mean_estimate(data, estimator, c, a, cfg, variant, nuisances)
    rec_b = _mean_estimate(data, estimator, c, a_prime, cfg, variant, nuisances)
    value = rec_a.value - rec_b.value
    influence = rec_a.influence - rec_b.influence
    return _record(
        "contrast", rec_a.estimator, rec_a.center, (int(a), int(a_prime)), value, influence
    )


def estimate_comparators(data, which, covariates=None):
    """OLS treatment-coefficient comparators reporting one number for all centers.

    pooled: Y ~ 1 + A; fe1 adds center indicators; fe2 adds covariates and
    center indicators. The influence field is empty; the standard error is
    the homoskedastic OLS one.
    """
    if which not in COMPARATORS:
        raise ParameterError(f"unknown comparator {which!r}; expected one of {COMPARATORS}")
    if set(data.arms) != {0, 1}:
        raise ComparatorError("comparators require arms coded {0,1}")
    for a in (0, 1):
        if int((data.arm == a).sum()) < 2:
            raise InsufficientDataError(f"comparators need at least 2 rows in arm {a}")
    tokens = ["1", "A"]
    if which == "fe2":
        tokens += list(covariates) if covariates is not None else list(data.covariate_names)
    if which in ("fe1", "fe2"):
        tokens.append("C")
    X, names = build_design(DesignSpec.parse(tokens), data)
    fit = fit_ols(X, data.outcome, column_names=names)
    arm_col = names.index("A")
    if arm_col in fit.dropped_columns:
        raise ComparatorError("treatment column aliased by other regressors")
    if fit.df_residual <= 0:
        raise ComparatorError("saturated comparator regression: no residual degrees of freedom")
    value = float(fit.coefficients[arm_col])
    se = float(np.sqrt(fit.unscaled_variance[arm_col] * fit.rss / fit.df_residual))
    return EstimateRecord(
        estimand="contrast",
        estimator=which,
        center=0,
        arms=(1, 0),
        value=value,
        influence=None,
        se=se,
        method="ols",
    )


def with_interval_fields(record, se, ci_low, ci_high, alpha, method):
    """Return a copy of ``record`` with interval fields attached."""
    return dataclasses.replace(
        record,
        se=float(se),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        alpha=float(alpha),
        method=method,
    )
