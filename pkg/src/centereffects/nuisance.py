"""Design matrices and nuisance-model fitting.

Three model families cover every nuisance the effect estimators need: linear
outcome regressions (OLS), binary logistic treatment models (IRLS), and
multinomial logistic center-membership models (Newton with step-halving).
Designs are declared as ordered term lists ("1", covariate names, "C" for
center indicators, "A" for the arm indicator, "a:b" products) so model
specifications can round-trip through config files.

All fits are deterministic: rank handling uses pivoted QR, aliased columns are
dropped with a warning and recorded with structurally zero coefficients, and
no regularization is applied unless a ridge jitter is explicitly requested.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

from .errors import (
    AliasedColumnsWarning,
    ConvergenceWarning,
    DegenerateFitError,
    EmptyFitError,
    SeparationWarning,
    ShapeError,
    SpecError,
)

INTERCEPT_TOKEN = "1"
CENTER_TOKEN = "C"
ARM_TOKEN = "A"


@dataclass(frozen=True)
class Term:
    """One design term: intercept, covariate, center/arm indicators, or product."""

    kind: str  # "intercept" | "covariate" | "center" | "arm" | "interaction"
    name: str = ""
    parts: tuple = ()

    def __str__(self):
        if self.kind == "intercept":
            return INTERCEPT_TOKEN
        if self.kind == "center":
            return CENTER_TOKEN
        if self.kind == "arm":
            return ARM_TOKEN
        if self.kind == "covariate":
            return self.name
        return ":".join(str(p) for p in self.parts)


def _parse_atom(token):
    token = token.strip()
    if not token:
        raise SpecError("empty design term")
    if token == INTERCEPT_TOKEN:
        return Term("intercept")
    if token == CENTER_TOKEN:
        return Term("center")
    if token == ARM_TOKEN:
        return Term("arm")
    return Term("covariate", name=token)


def parse_term(token):
    """Parse one term string such as "1", "x1", "C", "A", "x1:A"."""
    if isinstance(token, Term):
        return token
    if ":" in token:
        parts = tuple(_parse_atom(t) for t in token.split(":"))
        if any(p.kind == "intercept" for p in parts):
            raise SpecError(f"intercept cannot appear in an interaction: {token!r}")
        return Term("interaction", parts=parts)
    return _parse_atom(token)


@dataclass(frozen=True)
class DesignSpec:
    """Ordered, declarative description of a regression design."""

    terms: tuple = ()

    def __post_init__(self):
        terms = tuple(parse_term(t) for t in self.terms)
        if sum(t.kind == "intercept" for t in terms) > 1:
            raise SpecError("at most one intercept term allowed")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def parse(cls, tokens):
        return cls(tuple(tokens))

    def to_strings(self):
        return [str(t) for t in self.terms]

    def __str__(self):
        return " + ".join(self.to_strings()) or "<empty>"


def main_effects(covariate_names, intercept=True, centers=False, arm=False):
    """Convenience spec: intercept + covariate main effects (+ C and/or A)."""
    tokens = ([INTERCEPT_TOKEN] if intercept else []) + list(covariate_names)
    if centers:
        tokens.append(CENTER_TOKEN)
    if arm:
        tokens.append(ARM_TOKEN)
    return DesignSpec.parse(tokens)


def _atom_columns(term, data):
    """Expand an atomic term to (n x k matrix, names)."""
    n = data.n
    if term.kind == "intercept":
        return np.ones((n, 1)), [INTERCEPT_TOKEN]
    if term.kind == "covariate":
        if term.name not in data.covariate_names:
            raise SpecError(f"unknown covariate {term.name!r} in design")
        return data.covariate(term.name).reshape(-1, 1), [term.name]
    if term.kind == "center":
        m = data.m
        cols = np.zeros((n, max(m - 1, 0)))
        names = []
        for c in range(2, m + 1):
            cols[:, c - 2] = data.center == c
            names.append(f"{CENTER_TOKEN}{c}")
        return cols, names
    if term.kind == "arm":
        if not set(data.arms) <= {0, 1}:
            raise SpecError("arm indicator term requires arms coded {0,1}")
        return data.arm.astype(np.float64).reshape(-1, 1), [ARM_TOKEN]
    raise SpecError(f"not an atomic term: {term}")


def build_design(spec, data, arm_filter=None):
    """Expand a DesignSpec on a dataset.

    Returns (matrix, column names). With ``arm_filter`` set, only rows with
    that arm are returned (columns are identical to the unfiltered design).
    """
    blocks = []
    names = []
    for term in spec.terms:
        if term.kind == "interaction":
            cols, nm = _atom_columns(term.parts[0], data)
            for part in term.parts[1:]:
                pcols, pnames = _atom_columns(part, data)
                cols = np.concatenate(
                    [cols[:, [i]] * pcols for i in range(cols.shape[1])], axis=1
                )
                nm = [f"{a}:{b}" for a in nm for b in pnames]
        else:
            cols, nm = _atom_columns(term, data)
        blocks.append(cols)
        names.extend(nm)
    if blocks:
        X = np.concatenate(blocks, axis=1)
    else:
        X = np.zeros((data.n, 0))
    if arm_filter is not None:
        X = X[data.arm == arm_filter]
    return X, names


# ---------------------------------------------------------------------------
# rank handling
# ---------------------------------------------------------------------------


def _pivoted_rank(X):
    """Pivoted QR rank detection. Returns (rank, pivot order)."""
    if X.shape[1] == 0:
        return 0, np.array([], dtype=int)
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return 0, piv
    tol = diag[0] * max(X.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(diag > tol))
    return rank, piv


def _warn_dropped(dropped, column_names, model):
    if len(dropped) == 0:
        return
    if column_names:
        what = ", ".join(column_names[j] for j in dropped)
    else:
        what = ", ".join(str(j) for j in dropped)
    warnings.warn(
        f"{model}: dropped aliased design column(s) {what}",
        AliasedColumnsWarning,
        stacklevel=3,
    )


# ---------------------------------------------------------------------------
# linear model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearFit:
    """OLS fit; dropped (aliased) columns carry structurally zero coefficients."""

    coefficients: np.ndarray
    dropped_columns: tuple
    rss: float
    df_residual: int
    column_names: tuple = ()
    #: unscaled sampling variance of each coefficient, diag of (X'X)^-1 on the
    #: retained columns (NaN for dropped ones); multiply by rss/df_residual.
    unscaled_variance: np.ndarray = field(default=None, repr=False)


def fit_ols(design, y, column_names=None):
    """Least squares with pivoted-QR rank detection.

    Aliased columns are dropped (warning), recorded in ``dropped_columns``,
    and given coefficient 0 so predictions use the full design width.
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("design must be 2-dimensional")
    n, p = X.shape
    if n == 0:
        raise EmptyFitError("cannot fit a linear model on zero rows")
    if y.shape != (n,):
        raise ShapeError(f"y has shape {y.shape}, expected ({n},)")

    if p == 0:
        rss = float(y @ y)
        return LinearFit(np.zeros(0), (), rss, n, tuple(column_names or ()), np.zeros(0))

    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        rank = 0
    else:
        tol = diag[0] * max(n, p) * np.finfo(np.float64).eps
        rank = int(np.sum(diag > tol))

    coef = np.zeros(p)
    unscaled = np.full(p, np.nan)
    if rank > 0:
        qty = Q.T @ y
        beta = scipy.linalg.solve_triangular(R[:rank, :rank], qty[:rank])
        coef[piv[:rank]] = beta
        rinv = scipy.linalg.solve_triangular(
            R[:rank, :rank], np.eye(rank), lower=False
        )
        unscaled[piv[:rank]] = np.sum(rinv * rinv, axis=1)
    dropped = tuple(sorted(int(j) for j in piv[rank:]))
    _warn_dropped(dropped, column_names, "fit_ols")

    resid = y - X @ coef
    rss = float(resid @ resid)
    return LinearFit(
        coefficients=coef,
        dropped_columns=dropped,
        rss=rss,
        df_residual=n - rank,
        column_names=tuple(column_names or ()),
        unscaled_variance=unscaled,
    )


# ---------------------------------------------------------------------------
# binary logistic model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    dropped_columns: tuple = ()
    separated: bool = False
    log_likelihood: float = np.nan
    column_names: tuple = ()


def _bernoulli_loglik(eta, y):
    # sum y*eta - log(1 + exp(eta)), stable
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


#: a fitted probability this close to 0 or 1 at an observed point marks the
#: point as perfectly classified, i.e. (quasi-)complete separation
_SEPARATION_PROB = 1e-14


def fit_logistic(
    design,
    y,
    ridge=0.0,
    max_iter=100,
    score_tol=1e-8,
    ll_tol=1e-10,
    separation_bound=1e3,
    column_names=None,
):
    """Bernoulli maximum likelihood via iteratively reweighted least squares.

    Convergence: max |score| < score_tol or relative log-likelihood change
    < ll_tol. Step-halving keeps the log-likelihood non-decreasing. A
    coefficient sup-norm above ``separation_bound`` is treated as complete
    separation: a SeparationWarning is issued and the fit is returned with
    converged=False.
    """
    X = np.asarray(design, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("design must be 2-dimensional")
    n, p = X.shape
    if n == 0:
        raise EmptyFitError("cannot fit a logistic model on zero rows")
    if yv.shape != (n,):
        raise ShapeError(f"y has shape {yv.shape}, expected ({n},)")
    if not np.all((yv == 0.0) | (yv == 1.0)):
        raise ShapeError("logistic outcome must be coded 0/1")
    if yv.min() == yv.max():
        raise DegenerateFitError("logistic outcome has a single class")

    rank, piv = _pivoted_rank(X)
    keep = np.sort(piv[:rank])
    dropped = tuple(sorted(int(j) for j in piv[rank:]))
    _warn_dropped(dropped, column_names, "fit_logistic")
    Xk = X[:, keep]

    beta = np.zeros(rank)
    eta = Xk @ beta
    ll = _bernoulli_loglik(eta, yv)
    converged = False
    separated = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        prob = scipy.special.expit(eta)
        score = Xk.T @ (yv - prob)
        if np.max(np.abs(score), initial=0.0) < score_tol:
            converged = True
            iterations -= 1
            break
        w = prob * (1.0 - prob)
        H = (Xk * w[:, None]).T @ Xk
        if ridge > 0.0:
            H = H + ridge * np.eye(rank)
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]

        new_beta = beta + step
        new_eta = Xk @ new_beta
        new_ll = _bernoulli_loglik(new_eta, yv)
        halvings = 0
        while new_ll < ll and halvings < 50:
            step *= 0.5
            new_beta = beta + step
            new_eta = Xk @ new_beta
            new_ll = _bernoulli_loglik(new_eta, yv)
            halvings += 1
        beta, eta = new_beta, new_eta

        if np.max(np.abs(beta), initial=0.0) > separation_bound:
            separated = True
            warnings.warn(
                "complete separation suspected: coefficient norm exceeds "
                f"{separation_bound:g}",
                SeparationWarning,
                stacklevel=2,
            )
            break
        if abs(new_ll - ll) < ll_tol * (1.0 + abs(ll)):
            ll = new_ll
            converged = True
            break
        ll = new_ll
    else:
        iterations = max_iter

    # A likelihood plateau can look like convergence while the MLE is off at
    # infinity; fitted probabilities indistinguishable from 0/1 at observed
    # points give separation away regardless of how the loop exited.
    if not separated:
        prob = scipy.special.expit(eta)
        if prob.min(initial=0.5) < _SEPARATION_PROB or prob.max(initial=0.5) > 1.0 - _SEPARATION_PROB:
            separated = True
            converged = False
            warnings.warn(
                "complete separation suspected: fitted probabilities reach 0 or 1",
                SeparationWarning,
                stacklevel=2,
            )

    if not converged and not separated:
        warnings.warn(
            f"logistic fit did not converge in {max_iter} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )

    coef = np.zeros(p)
    coef[keep] = beta
    return LogisticFit(
        coefficients=coef,
        converged=converged,
        iterations=iterations,
        dropped_columns=dropped,
        separated=separated,
        log_likelihood=_bernoulli_loglik(X[:, keep] @ beta, yv),
        column_names=tuple(column_names or ()),
    )


# ---------------------------------------------------------------------------
# multinomial logistic model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultinomialFit:
    """Reference-category multinomial logit; category 1 has linear predictor 0.

    ``coefficients`` has one row per non-reference category (2..m).
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    m: int
    dropped_columns: tuple = ()
    log_likelihood: float = np.nan
    column_names: tuple = ()


def reference_softmax(eta):
    """Row-wise reference-category softmax: probabilities over (ref, 2..m).

    Column 0 is the reference category with linear predictor 0; ``eta`` holds
    the predictors of categories 2..m.
    """
    full = np.concatenate([np.zeros((eta.shape[0], 1)), eta], axis=1)
    full -= full.max(axis=1, keepdims=True)
    np.exp(full, out=full)
    full /= full.sum(axis=1, keepdims=True)
    return full


def fit_multinomial(
    design,
    category,
    ridge=0.0,
    max_iter=200,
    score_tol=1e-6,
    ll_tol=1e-10,
    column_names=None,
):
    """Multinomial maximum likelihood by Newton's method with step-halving.

    ``category`` takes values 1..m with every category observed; category 1
    is the reference. Convergence: max |score| < score_tol or relative
    log-likelihood change < ll_tol. The likelihood stop matters on large
    samples, where the absolute score threshold sits below the roundoff
    noise floor of a log-likelihood summed over n rows.
    """
    X = np.asarray(design, dtype=np.float64)
    cat = np.asarray(category)
    if X.ndim != 2:
        raise ShapeError("design must be 2-dimensional")
    n, p = X.shape
    if n == 0:
        raise EmptyFitError("cannot fit a multinomial model on zero rows")
    if cat.shape != (n,):
        raise ShapeError(f"category has shape {cat.shape}, expected ({n},)")
    cat = cat.astype(np.int64)
    m = int(cat.max(initial=0))
    observed = set(np.unique(cat).tolist())
    if m < 2 or observed != set(range(1, m + 1)):
        missing = sorted(set(range(1, max(m, 2) + 1)) - observed)
        raise DegenerateFitError(
            f"multinomial fit needs every category 1..m observed; missing {missing}"
        )

    rank, piv = _pivoted_rank(X)
    keep = np.sort(piv[:rank])
    dropped = tuple(sorted(int(j) for j in piv[rank:]))
    _warn_dropped(dropped, column_names, "fit_multinomial")
    Xk = X[:, keep]
    k = rank
    q = m - 1

    # indicator matrix for categories 2..m
    Y = np.zeros((n, q))
    for j in range(q):
        Y[:, j] = cat == j + 2

    def loglik(eta):
        full = np.concatenate([np.zeros((n, 1)), eta], axis=1)
        lse = scipy.special.logsumexp(full, axis=1)
        chosen = np.where(cat == 1, 0.0, np.take_along_axis(
            full, (cat - 1).reshape(-1, 1), axis=1).ravel())
        return float(chosen.sum() - lse.sum())

    B = np.zeros((q, k))
    eta = Xk @ B.T
    ll = loglik(eta)
    converged = False
    iterations = 0

    for iterations in range(1, max_iter + 1):
        P = reference_softmax(eta)[:, 1:]  # (n, q)
        score = ((Y - P).T @ Xk).ravel()  # (q*k,)
        if np.max(np.abs(score), initial=0.0) < score_tol:
            converged = True
            iterations -= 1
            break

        H = np.empty((q * k, q * k))
        for j in range(q):
            for l in range(j, q):
                w = P[:, j] * ((1.0 if j == l else 0.0) - P[:, l])
                block = (Xk * w[:, None]).T @ Xk
                H[j * k:(j + 1) * k, l * k:(l + 1) * k] = block
                if l != j:
                    H[l * k:(l + 1) * k, j * k:(j + 1) * k] = block.T
        if ridge > 0.0:
            H[np.diag_indices_from(H)] += ridge
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, score, rcond=None)[0]

        new_B = B + step.reshape(q, k)
        new_eta = Xk @ new_B.T
        new_ll = loglik(new_eta)
        halvings = 0
        while new_ll < ll and halvings < 50:
            step *= 0.5
            new_B = B + step.reshape(q, k)
            new_eta = Xk @ new_B.T
            new_ll = loglik(new_eta)
            halvings += 1
        B, eta = new_B, new_eta
        if abs(new_ll - ll) < ll_tol * (1.0 + abs(ll)):
            ll = new_ll
            converged = True
            break
        ll = new_ll
    else:
        iterations = max_iter

    if not converged:
        warnings.warn(
            f"multinomial fit did not converge in {max_iter} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )

    coef = np.zeros((q, p))
    coef[:, keep] = B
    return MultinomialFit(
        coefficients=coef,
        converged=converged,
        iterations=iterations,
        m=m,
        dropped_columns=dropped,
        log_likelihood=ll,
        column_names=tuple(column_names or ()),
    )


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

_PROB_LO = np.finfo(np.float64).tiny
_PROB_HI = np.nextafter(1.0, 0.0)


def predict(fit, rows):
    """Predictions on design rows built from the same DesignSpec as the fit.

    Linear fits return X @ beta; logistic fits return probabilities in the
    open interval (0,1); multinomial fits return an (n, m) probability matrix
    whose rows sum to 1 within 1e-12.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ShapeError("rows must be 1- or 2-dimensional")

    if isinstance(fit, LinearFit):
        if X.shape[1] != fit.coefficients.shape[0]:
            raise ShapeError(
                f"rows have {X.shape[1]} columns, fit expects {fit.coefficients.shape[0]}"
            )
        return X @ fit.coefficients
    if isinstance(fit, LogisticFit):
        if X.shape[1] != fit.coefficients.shape[0]:
            raise ShapeError(
                f"rows have {X.shape[1]} columns, fit expects {fit.coefficients.shape[0]}"
            )
        return np.clip(scipy.special.expit(X @ fit.coefficients), _PROB_LO, _PROB_HI)
    if isinstance(fit, MultinomialFit):
        if X.shape[1] != fit.coefficients.shape[1]:
            raise ShapeError(
                f"rows have {X.shape[1]} columns, fit expects {fit.coefficients.shape[1]}"
            )
        probs = reference_softmax(X @ fit.coefficients.T)
        return np.clip(probs, _PROB_LO, _PROB_HI)
    raise ShapeError(f"unknown fit type {type(fit).__name__}")
