"""Importance weights from a target-membership logistic regression.

The pooled dataset (target rows plus reconstructed rows) is treated as
the reference population.  A logistic regression of the target-membership
label on a covariate feature map estimates pi(x) = P(target | x); the
importance weight

    w(x) = (N / n_T) * pi(x)

is the density ratio between the target covariate distribution and the
pooled covariate distribution, applied to every row (target rows are
reweighted too).  For an unpenalized fit with intercept the score
equation forces sum(pi) = n_T, so the weights average to exactly one.

Fitting is Newton/IRLS from a zero start.  If the Hessian goes singular
or the fit fails to converge with a separation signature (huge linear
predictors), the fit is retried with an escalating ridge penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError

_TERM_KINDS = ("intercept", "linear", "square", "interaction", "arm", "arm_linear")


@dataclass(frozen=True)
class FeatureTerm:
    """One feature-map term: kind plus covariate indices."""

    kind: str
    j: int = -1
    k: int = -1

    def __post_init__(self):
        if self.kind not in _TERM_KINDS:
            raise DataError(f"unknown feature term kind {self.kind!r}")


@dataclass(frozen=True)
class FeatureMap:
    """Ordered feature terms; the intercept is always present.

    Build with :func:`default_feature_map` (intercept + linear + square
    per covariate) or :func:`parse_feature_spec` for CLI strings like
    ``"x1,x1^2,x2"``.
    """

    terms: tuple

    def __post_init__(self):
        if not any(t.kind == "intercept" for t in self.terms):
            raise DataError("feature map must contain an intercept")

    def matrix(self, d):
        """Evaluate the feature matrix over a Dataset."""
        n = len(d.subjects)
        x = np.array([s.x for s in d.subjects], dtype=float).reshape(n, d.p)
        z = np.array([s.z for s in d.subjects], dtype=float)
        cols = []
        for t in self.terms:
            if t.kind == "intercept":
                cols.append(np.ones(n))
            elif t.kind == "linear":
                self._check(t.j, d.p)
                cols.append(x[:, t.j])
            elif t.kind == "square":
                self._check(t.j, d.p)
                cols.append(x[:, t.j] ** 2)
            elif t.kind == "interaction":
                self._check(t.j, d.p)
                self._check(t.k, d.p)
                cols.append(x[:, t.j] * x[:, t.k])
            elif t.kind == "arm":
                cols.append(z)
            elif t.kind == "arm_linear":
                self._check(t.j, d.p)
                cols.append(z * x[:, t.j])
        return np.column_stack(cols)

    @staticmethod
    def _check(j, p):
        if not 0 <= j < p:
            raise DataError(f"feature term references covariate {j + 1} outside dimension {p}")


def default_feature_map(p):
    """Intercept, each covariate, and each squared covariate."""
    terms = [FeatureTerm("intercept")]
    for j in range(p):
        terms.append(FeatureTerm("linear", j))
    for j in range(p):
        terms.append(FeatureTerm("square", j))
    return FeatureMap(tuple(terms))


def linear_feature_map(p):
    """Intercept plus each covariate, no squares."""
    terms = [FeatureTerm("intercept")] + [FeatureTerm("linear", j) for j in range(p)]
    return FeatureMap(tuple(terms))


def parse_feature_spec(spec, p):
    """Parse a comma-separated feature string, e.g. ``"x1,x1^2,x2,z"``.

    The intercept is implicit.  Accepted atoms: ``xJ``, ``xJ^2``,
    ``xJ*xK``, ``z``, ``z*xJ``.
    """
    terms = [FeatureTerm("intercept")]
    for atom in spec.split(","):
        atom = atom.strip().lower()
        if not atom:
            continue
        if atom == "z":
            terms.append(FeatureTerm("arm"))
        elif atom.startswith("z*"):
            terms.append(FeatureTerm("arm_linear", _covariate_index(atom[2:], p)))
        elif atom.endswith("^2"):
            terms.append(FeatureTerm("square", _covariate_index(atom[:-2], p)))
        elif "*" in atom:
            a, b = atom.split("*", 1)
            terms.append(FeatureTerm("interaction", _covariate_index(a, p), _covariate_index(b, p)))
        else:
            terms.append(FeatureTerm("linear", _covariate_index(atom, p)))
    return FeatureMap(tuple(terms))


def _covariate_index(atom, p):
    atom = atom.strip()
    if not atom.startswith("x"):
        raise DataError(f"cannot parse feature atom {atom!r}")
    try:
        j = int(atom[1:]) - 1
    except ValueError as exc:
        raise DataError(f"cannot parse feature atom {atom!r}") from exc
    if not 0 <= j < p:
        raise DataError(f"feature atom {atom!r} outside covariate dimension {p}")
    return j


@dataclass(frozen=True)
class LogisticFit:
    """Fitted membership model.

    ``ridge_lambda`` is zero for a plain maximum-likelihood fit and
    records the penalty actually used when the ridge path was engaged.
    """

    alpha: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    ridge_lambda: float


def _irls(F, t, tol, max_iter, lam):
    alpha = np.zeros(F.shape[1])
    it = 0
    for it in range(1, max_iter + 1):
        eta = F @ alpha
        pi = 1.0 / (1.0 + np.exp(-np.clip(eta, -500, 500)))
        score = F.T @ (t - pi) - lam * alpha
        if np.max(np.abs(score)) <= tol:
            return alpha, True, it, eta
        h = pi * (1.0 - pi)
        H = (F.T * h) @ F + lam * np.eye(F.shape[1])
        try:
            step = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            return alpha, False, it, eta
        alpha = alpha + step
    return alpha, False, it, F @ alpha


def fit_membership(d, fmap=None, tol=1e-8, max_iter=100):
    """Fit the target-membership logistic model over all N subjects.

    Convergence is declared when the largest absolute score-equation
    entry falls below ``tol``.  A singular Hessian, or non-convergence
    with any |linear predictor| > 30 (separation signature), triggers a
    ridge retry with lambda = 1e-6 escalating tenfold up to 1e-2.

    Raises
    ------
    DataError
        If the dataset is all-target or all-source.
    NumericalError
        If no fit converges even after ridge escalation.
    """
    if fmap is None:
        fmap = default_feature_map(d.p)
    t = np.array([1.0 if s.source == "target" else 0.0 for s in d.subjects])
    if t.sum() == 0 or t.sum() == len(t):
        raise DataError("membership fit needs both target and non-target subjects")
    F = fmap.matrix(d)

    alpha, ok, iters, eta = _irls(F, t, tol, max_iter, 0.0)
    lam = 0.0
    if not ok:
        separated = bool(np.max(np.abs(eta)) > 30)
        lam = 1e-6
        while lam <= 1e-2:
            alpha, ok, iters, eta = _irls(F, t, tol, max_iter, lam)
            if ok:
                break
            lam *= 10
        if not ok:
            reason = "separation persisted" if separated else "IRLS failed to converge"
            raise NumericalError(f"membership model did not converge ({reason}, ridge up to 1e-2)")
    pi = 1.0 / (1.0 + np.exp(-np.clip(F @ alpha, -500, 500)))
    eps = np.finfo(float).tiny
    deviance = float(-2.0 * np.sum(t * np.log(pi + eps) + (1 - t) * np.log(1 - pi + eps)))
    return LogisticFit(alpha=alpha, converged=ok, iterations=iters,
                       deviance=deviance, ridge_lambda=float(lam))


def membership_probabilities(d, fit, fmap=None):
    """Fitted pi(x) for every subject."""
    if fmap is None:
        fmap = default_feature_map(d.p)
    F = fmap.matrix(d)
    return 1.0 / (1.0 + np.exp(-np.clip(F @ fit.alpha, -500, 500)))


def compute_weights(d, fit, fmap=None, pin_target_weights=False):
    """Attach importance weights w = (N / n_T) * pi(x) to every subject.

    ``pin_target_weights`` is a diagnostic mode that forces weight 1 on
    target rows while reconstructed rows keep the estimated ratio.

    Raises
    ------
    NumericalError
        If any weight is non-finite.  Extremely disjoint covariate
        distributions make the ratio unstable; in that regime the
        analysis should fall back to the target rows alone.
    """
    pi = membership_probabilities(d, fit, fmap)
    n_t = d.n_target()
    if n_t == 0:
        raise DataError("dataset has no target subjects")
    w = (len(d.subjects) / n_t) * pi
    if not np.all(np.isfinite(w)):
        raise NumericalError(
            "non-finite importance weight: target and pooled covariate "
            "distributions are too far apart; analyze the target rows alone"
        )
    if pin_target_weights:
        is_t = np.array([s.source == "target" for s in d.subjects])
        w = np.where(is_t, 1.0, w)
    return d.with_weights(w)
