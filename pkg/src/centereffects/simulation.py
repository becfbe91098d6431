"""Monte Carlo study: data generation, true-effect oracle, and replication.

The generative model draws three independent standard normal covariates,
assigns each subject to one of m centers through a reference-category
multinomial logit on (1, X1, X2, X3), randomizes treatment Bernoulli(0.5),
and produces a linear outcome with an X1-by-treatment interaction. A second
"strong" configuration doubles the designated center-selection column and the
outcome interaction, strengthening the separation between centers.

True center-specific effects are not available in closed form (the covariate
distribution within a center is a softmax-tilted normal), so an oracle
computes them by large-sample Monte Carlo, cross-checkable against an
independent Gauss-Hermite quadrature implementation.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import numpy as np

from .dataset import TrialDataset
from .errors import (
    CenterEffectsError,
    InsufficientDataError,
    ParameterError,
    StudyError,
)
from .estimators import (
    FittedNuisances,
    KnownProbabilities,
    NuisanceConfig,
    estimate_comparators,
    estimate_contrast,
)
from .inference import se_from_influence, wald_ci
from .nuisance import reference_softmax

#: center-selection coefficients, rows k = 2..10, columns (1, X1, X2, X3)
DEFAULT_MEMBERSHIP_COEFFS = (
    (0.75, -0.36, -0.14, 0.36),
    (1.03, -0.18, 0.01, 0.18),
    (0.36, -0.32, -0.04, 0.44),
    (0.48, -0.13, -0.18, 0.35),
    (0.75, -0.47, 0.15, 0.34),
    (0.65, -0.42, -0.24, 0.37),
    (0.76, -0.52, -0.12, 0.34),
    (-0.09, -0.40, -0.09, 0.26),
    (1.46, -0.19, -0.16, 0.28),
)

#: outcome model (intercept, X1, X2, X3, A, X1:A)
DEFAULT_OUTCOME_COEFFS = (161.0, 62.0, -1.0, -1.0, -43.0, -21.0)

STRENGTHS = ("baseline", "strong")
DOUBLING_COLUMNS = {"x1": 1, "x3": 3}


def _nested_tuple(matrix):
    return tuple(tuple(float(v) for v in row) for row in matrix)


@dataclass(frozen=True)
class Scenario:
    """Complete description of one generative configuration.

    ``strength`` "strong" doubles (a) the center-selection coefficients in
    the column named by ``strong_doubles`` ("x1" by default — the reading
    that reproduces the published operating characteristics) and (b) the
    magnitude of the outcome interaction.
    """

    n: int = 1000
    m: int = 10
    membership_coeffs: tuple = DEFAULT_MEMBERSHIP_COEFFS
    outcome_coeffs: tuple = DEFAULT_OUTCOME_COEFFS
    noise_sd: float = 36.0
    arm_prob: float = 0.5
    strength: str = "baseline"
    strong_doubles: str = "x1"

    def __post_init__(self):
        object.__setattr__(self, "membership_coeffs", _nested_tuple(self.membership_coeffs))
        object.__setattr__(
            self, "outcome_coeffs", tuple(float(v) for v in self.outcome_coeffs)
        )
        if self.n < 1:
            raise ParameterError("scenario needs n >= 1")
        if self.m < 1:
            raise ParameterError("scenario needs m >= 1")
        rows = len(self.membership_coeffs)
        if rows != self.m - 1 or any(len(r) != 4 for r in self.membership_coeffs):
            raise ParameterError(
                f"membership coefficients must be (m-1) x 4; got {rows} rows for m={self.m}"
            )
        if len(self.outcome_coeffs) != 6:
            raise ParameterError("outcome coefficients must have 6 entries")
        if not 0.0 < self.arm_prob < 1.0:
            raise ParameterError("arm_prob must lie in (0,1)")
        if self.noise_sd < 0.0:
            raise ParameterError("noise_sd must be nonnegative")
        if self.strength not in STRENGTHS:
            raise ParameterError(f"strength must be one of {STRENGTHS}")
        if self.strong_doubles not in DOUBLING_COLUMNS:
            raise ParameterError(
                f"strong_doubles must be one of {tuple(DOUBLING_COLUMNS)}"
            )

    # -- effective (strength-adjusted) parameters ----------------------------

    def effective_membership_coeffs(self):
        """(m-1, 4) array with the strong-scenario doubling applied."""
        coeffs = np.asarray(self.membership_coeffs, dtype=np.float64)
        if self.strength == "strong" and coeffs.size:
            coeffs = coeffs.copy()
            coeffs[:, DOUBLING_COLUMNS[self.strong_doubles]] *= 2.0
        return coeffs

    def effective_outcome_coeffs(self):
        """(intercept, x1, x2, x3, arm, x1:arm) with the interaction doubled when strong."""
        out = list(self.outcome_coeffs)
        if self.strength == "strong":
            out[5] *= 2.0
        return tuple(out)

    @classmethod
    def baseline(cls, **overrides):
        return cls(strength="baseline", **overrides)

    @classmethod
    def strong(cls, **overrides):
        return cls(strength="strong", **overrides)

    def to_dict(self):
        return {
            "n": self.n,
            "m": self.m,
            "membership_coeffs": [list(r) for r in self.membership_coeffs],
            "outcome_coeffs": list(self.outcome_coeffs),
            "noise_sd": self.noise_sd,
            "arm_prob": self.arm_prob,
            "strength": self.strength,
            "strong_doubles": self.strong_doubles,
        }

    @classmethod
    def from_dict(cls, d):
        allowed = {
            "n", "m", "membership_coeffs", "outcome_coeffs", "noise_sd",
            "arm_prob", "strength", "strong_doubles",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ParameterError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------


def _membership_probabilities(scenario, X):
    """(n, m) center probabilities at covariate rows X (n, 3)."""
    coeffs = scenario.effective_membership_coeffs()
    if scenario.m == 1:
        return np.ones((X.shape[0], 1))
    design = np.concatenate([np.ones((X.shape[0], 1)), X], axis=1)
    return reference_softmax(design @ coeffs.T)


def _draw_centers(probs, u):
    """Inverse-CDF center draw from per-row probabilities."""
    cum = np.cumsum(probs, axis=1)
    ids = 1 + (u[:, None] > cum).sum(axis=1)
    return np.minimum(ids, probs.shape[1]).astype(np.int64)


def generate_dataset(scenario, seed):
    """One simulated trial. Deterministic given ``seed``.

    Draw order: covariates (n x 3 standard normal), center-assignment
    uniforms, treatment uniforms, outcome noise.
    """
    rng = np.random.default_rng(seed)
    n = scenario.n
    X = rng.standard_normal((n, 3))
    centers = _draw_centers(_membership_probabilities(scenario, X), rng.random(n))
    arm = (rng.random(n) < scenario.arm_prob).astype(np.int64)
    noise = scenario.noise_sd * rng.standard_normal(n)
    b0, b1, b2, b3, barm, binter = scenario.effective_outcome_coeffs()
    y = (
        b0
        + b1 * X[:, 0]
        + b2 * X[:, 1]
        + b3 * X[:, 2]
        + barm * arm
        + binter * X[:, 0] * arm
        + noise
    )
    return TrialDataset(
        covariates=X,
        covariate_names=("x1", "x2", "x3"),
        center=centers,
        arm=arm,
        outcome=y,
        center_labels=tuple(range(1, scenario.m + 1)),
    )


# ---------------------------------------------------------------------------
# true-effect oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleReport:
    """True center-specific average treatment effects and their precision."""

    values: tuple  # per center 1..m
    mc_se: tuple  # Monte Carlo SE per center (0 for quadrature)
    draws: int
    seed: int
    method: str  # "monte_carlo" | "quadrature"

    def to_dict(self):
        return {
            "true_ate": list(self.values),
            "mc_se": list(self.mc_se),
            "draws": self.draws,
            "seed": self.seed,
            "method": self.method,
        }


_ORACLE_CHUNK = 1_000_000


@functools.lru_cache(maxsize=32)
def true_center_ates(scenario, oracle_n=10_000_000, seed=0):
    """True ATE per center by large-sample Monte Carlo.

    The effect in center c is arm_coeff + interaction · E[X1 | C=c]; the
    conditional mean is accumulated over ``oracle_n`` draws in fixed-size
    chunks (deterministic given ``seed``). Cached per (scenario, n, seed).
    """
    rng = np.random.default_rng(seed)
    m = scenario.m
    count = np.zeros(m)
    sum_x1 = np.zeros(m)
    sum_x1sq = np.zeros(m)
    remaining = int(oracle_n)
    while remaining > 0:
        size = min(_ORACLE_CHUNK, remaining)
        remaining -= size
        X = rng.standard_normal((size, 3))
        centers = _draw_centers(_membership_probabilities(scenario, X), rng.random(size))
        x1 = X[:, 0]
        count += np.bincount(centers - 1, minlength=m)
        sum_x1 += np.bincount(centers - 1, weights=x1, minlength=m)
        sum_x1sq += np.bincount(centers - 1, weights=x1 * x1, minlength=m)
    if np.any(count == 0):
        empty = [int(c + 1) for c in np.nonzero(count == 0)[0]]
        raise InsufficientDataError(f"no oracle draws fell in centers {empty}")
    _, _, _, _, barm, binter = scenario.effective_outcome_coeffs()
    mean_x1 = sum_x1 / count
    var_x1 = np.maximum(sum_x1sq / count - mean_x1 ** 2, 0.0)
    values = barm + binter * mean_x1
    mc_se = abs(binter) * np.sqrt(var_x1 / count)
    return OracleReport(
        values=tuple(float(v) for v in values),
        mc_se=tuple(float(s) for s in mc_se),
        draws=int(oracle_n),
        seed=int(seed),
        method="monte_carlo",
    )


def true_center_ate(scenario, c, oracle_n=10_000_000, seed=0):
    """True ATE of one center (Monte Carlo oracle; see true_center_ates)."""
    if not 1 <= c <= scenario.m:
        raise ParameterError(f"center {c} outside 1..{scenario.m}")
    return true_center_ates(scenario, oracle_n, seed).values[c - 1]


def true_center_ates_quadrature(scenario, nodes=40):
    """Independent oracle: tensor-product Gauss-Hermite quadrature.

    Computes E[X1 | C=c] = E[X1 p_c(X)] / E[p_c(X)] over the standard normal
    covariate law on a ``nodes``³ grid; no randomness involved. Used to
    cross-check the Monte Carlo oracle.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()  # normalize the N(0,1) weights exactly
    g1, g2, g3 = np.meshgrid(x, x, x, indexing="ij")
    X = np.column_stack([g1.ravel(), g2.ravel(), g3.ravel()])
    w1, w2, w3 = np.meshgrid(w, w, w, indexing="ij")
    weights = (w1 * w2 * w3).ravel()
    probs = _membership_probabilities(scenario, X)
    mass = weights @ probs  # E[p_c(X)] per center
    tilted = (weights * X[:, 0]) @ probs  # E[X1 p_c(X)] per center
    _, _, _, _, barm, binter = scenario.effective_outcome_coeffs()
    values = barm + binter * (tilted / mass)
    return OracleReport(
        values=tuple(float(v) for v in values),
        mc_se=tuple(0.0 for _ in range(scenario.m)),
        draws=nodes ** 3,
        seed=0,
        method="quadrature",
    )


# ---------------------------------------------------------------------------
# study configuration
# ---------------------------------------------------------------------------

CONTRAST_ESTIMATORS = ("tau", "phi", "psi", "chi")
COMPARATOR_ESTIMATORS = ("pooled", "fe1", "fe2")
DEFAULT_ESTIMATORS = ("tau", "phi", "psi", "pooled", "fe1", "fe2")


def default_nuisance_configs(covariate_names, known_arm_prob=None):
    """Per-estimator nuisance specifications used by the study and the CLI.

    phi: within-arm outcome model with covariates and center indicators,
    intercept-only fitted treatment model. psi/chi: pooled covariate-only
    outcome model plus a covariate membership model; chi's treatment model is
    the known randomization probability when supplied, else fitted.
    """
    covs = list(covariate_names)
    main = ["1"] + covs
    if known_arm_prob is None:
        chi_treatment = ["1"]
    else:
        chi_treatment = KnownProbabilities.constant(known_arm_prob)
    return {
        "phi": NuisanceConfig(outcome_spec=main + ["C"], treatment_spec=["1"]),
        "psi": NuisanceConfig(
            outcome_spec=main, treatment_spec=["1"], membership_spec=main
        ),
        "chi": NuisanceConfig(
            outcome_spec=main, treatment_spec=chi_treatment, membership_spec=main
        ),
    }


# ---------------------------------------------------------------------------
# replication harness
# ---------------------------------------------------------------------------


def _replicate_records(data, estimators, arms, configs, alpha):
    """All requested contrast estimates on one dataset.

    Returns (records, center_sizes); records maps (center, estimator) to a
    (value, se, ci_low, ci_high) tuple, with center 0 for the single-number
    comparators.
    """
    a, a_prime = arms
    records = {}
    for estimator in estimators:
        if estimator in COMPARATOR_ESTIMATORS:
            rec = estimate_comparators(data, estimator)
            value = rec.value if (a, a_prime) == (1, 0) else -rec.value
            ci = wald_ci(value, rec.se, alpha=alpha, method="ols")
            records[(0, estimator)] = (value, rec.se, ci.ci_low, ci.ci_high)
            continue
        cfg = configs.get(estimator)
        nuis = FittedNuisances(data, cfg) if cfg is not None else None
        for c in range(1, data.m + 1):
            rec = estimate_contrast(
                data, estimator, c, a, a_prime, cfg, nuisances=nuis
            )
            se = se_from_influence(rec.influence)
            ci = wald_ci(rec.value, se, alpha=alpha, method="influence_curve")
            records[(c, estimator)] = (rec.value, se, ci.ci_low, ci.ci_high)
    sizes = np.bincount(data.center - 1, minlength=data.m)
    return records, sizes


def _run_one(scenario, master_seed, r, estimators, arms, configs, alpha):
    data = generate_dataset(scenario, seed=(master_seed, r))
    return _replicate_records(data, estimators, arms, configs, alpha)


def _worker(args):
    r = args[2]
    try:
        return r, _run_one(*args)
    except (CenterEffectsError, np.linalg.LinAlgError) as exc:
        return r, exc


@dataclass(frozen=True)
class CellSummary:
    """Operating characteristics of one estimator in one center."""

    center: int
    estimator: str
    true_value: float
    bias: float
    mse: float
    coverage: float
    avg_ci_width: float
    avg_se: float
    empirical_sd: float  # None when replicates == 1
    avg_n_c: float
    bias_mc_se: float  # Monte Carlo SE of the bias estimate

    def to_dict(self):
        return {
            "center": self.center,
            "estimator": self.estimator,
            "true_value": self.true_value,
            "bias": self.bias,
            "mse": self.mse,
            "coverage": self.coverage,
            "avg_ci_width": self.avg_ci_width,
            "avg_se": self.avg_se,
            "empirical_sd": self.empirical_sd,
            "avg_n_c": self.avg_n_c,
            "bias_mc_se": self.bias_mc_se,
        }


@dataclass(frozen=True)
class StudyReport:
    """Aggregated simulation results.

    ``cells`` maps (center, estimator) to a CellSummary. ``generator``
    documents the random stream: each replicate r draws from a fresh
    generator seeded with (master_seed, r), so results are identical under
    any execution order or worker count.
    """

    scenario: Scenario
    cells: dict
    replicates: int
    seed: int
    arms: tuple
    alpha: float
    estimators: tuple
    failures: int
    oracle: OracleReport
    generator: str = "numpy default_rng(PCG64), seeded (master_seed, replicate)"

    def cell(self, center, estimator):
        return self.cells[(center, estimator)]

    def metric_table(self, metric):
        """(header, rows): one row per center, one column per estimator."""
        header = ["center"] + list(self.estimators)
        rows = []
        for c in range(1, self.scenario.m + 1):
            row = [c]
            for est in self.estimators:
                cell = self.cells[(c, est)]
                row.append(getattr(cell, metric))
            rows.append(row)
        return header, rows

    def to_dict(self):
        return {
            "scenario": self.scenario.to_dict(),
            "replicates": self.replicates,
            "seed": self.seed,
            "arms": list(self.arms),
            "alpha": self.alpha,
            "estimators": list(self.estimators),
            "failures": self.failures,
            "generator": self.generator,
            "oracle": self.oracle.to_dict(),
            "cells": [self.cells[k].to_dict() for k in sorted(self.cells)],
        }


def run_study(
    scenario,
    replicates=1000,
    estimators=DEFAULT_ESTIMATORS,
    master_seed=0,
    arms=(1, 0),
    alpha=0.05,
    oracle_n=10_000_000,
    oracle_seed=0,
    oracle=None,
    workers=1,
):
    """Replicate the design ``replicates`` times and aggregate per center.

    Per replicate r: generate a dataset seeded by (master_seed, r), estimate
    the requested center-specific contrasts with influence-curve SEs and
    (1−alpha) intervals, and compare against the oracle truth. Replicates on
    which any estimator fails are dropped and counted; more than 2% failures
    aborts the study. Deterministic given master_seed, for any ``workers``.
    """
    estimators = tuple(estimators)
    for est in estimators:
        if est not in CONTRAST_ESTIMATORS + COMPARATOR_ESTIMATORS:
            raise ParameterError(f"unknown study estimator {est!r}")
    arms = (int(arms[0]), int(arms[1]))
    if any(est in COMPARATOR_ESTIMATORS for est in estimators):
        if arms not in ((1, 0), (0, 1)):
            raise ParameterError("comparators require the contrast arms to be 0 and 1")
    if replicates < 1:
        raise ParameterError("study needs at least 1 replicate")

    configs = default_nuisance_configs(
        ("x1", "x2", "x3"), known_arm_prob=scenario.arm_prob
    )
    if oracle is None:
        oracle = true_center_ates(scenario, oracle_n, oracle_seed)
    truths = np.asarray(oracle.values)
    if arms == (0, 1):
        truths = -truths
        oracle = replace(
            oracle, values=tuple(float(v) for v in truths)
        )

    args = [
        (scenario, master_seed, r, estimators, arms, configs, alpha)
        for r in range(replicates)
    ]
    if workers > 1:
        import concurrent.futures

        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = dict(pool.map(_worker, args, chunksize=8))
        results = [outcomes[r] for r in range(replicates)]
    else:
        results = [_worker(a)[1] for a in args]

    failures = sum(1 for res in results if isinstance(res, Exception))
    if failures > 0.02 * replicates:
        raise StudyError(
            f"{failures} of {replicates} replicates failed (>2%); "
            "the scenario appears incompatible with the requested estimators"
        )
    kept = [res for res in results if not isinstance(res, Exception)]

    m = scenario.m
    size_sum = np.zeros(m)
    for _, sizes in kept:
        size_sum += sizes
    avg_sizes = size_sum / len(kept)

    cells = {}
    for estimator in estimators:
        comparator = estimator in COMPARATOR_ESTIMATORS
        for c in range(1, m + 1):
            key = (0, estimator) if comparator else (c, estimator)
            vals = np.array([rec[key][0] for rec, _ in kept])
            ses = np.array([rec[key][1] for rec, _ in kept])
            lows = np.array([rec[key][2] for rec, _ in kept])
            highs = np.array([rec[key][3] for rec, _ in kept])
            truth = float(truths[c - 1])
            covered = (lows <= truth) & (truth <= highs)
            R = len(vals)
            cells[(c, estimator)] = CellSummary(
                center=c,
                estimator=estimator,
                true_value=truth,
                bias=float(vals.mean() - truth),
                mse=float(((vals - truth) ** 2).mean()),
                coverage=float(covered.mean()),
                avg_ci_width=float((highs - lows).mean()),
                avg_se=float(ses.mean()),
                empirical_sd=float(vals.std(ddof=1)) if R > 1 else None,
                avg_n_c=float(avg_sizes[c - 1]),
                bias_mc_se=float(vals.std(ddof=1) / np.sqrt(R)) if R > 1 else None,
            )

    return StudyReport(
        scenario=scenario,
        cells=cells,
        replicates=replicates,
        seed=int(master_seed),
        arms=arms,
        alpha=alpha,
        estimators=estimators,
        failures=failures,
        oracle=oracle,
    )
