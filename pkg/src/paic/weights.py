"""Weight fitting: logistic membership model (PSW) and moment matching (MAIC).

Both solvers work on a leading batch axis so that bootstrap replicates can be
refit in one vectorized pass; the single-fit functions are thin wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit, log_expit

from .model import CovariateSet, MomentVector, ValidationError

# Raw objective values outside (exp(-LOG_FLOOR), exp(LOG_CEIL)) are not
# representable as finite nonzero doubles.
LOG_CEIL = 709.0
LOG_FLOOR = -708.0
# Beyond this |linear predictor| fitted probabilities are 0 or 1 to double
# precision: treated as separation.
SEPARATION_ETA = 36.0
ARMIJO_C = 1e-4
MAX_HALVINGS = 60
FLAT_DECREMENT = 1e-13

UNATTAINABLE = "moment target unattainable"


class SingularFitError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class LogisticFit:
    names: tuple[str, ...]
    coefficients: np.ndarray  # intercept first
    converged: bool
    iterations: int
    max_abs_score: float
    diagnostic: str = ""

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    def linear_predictor(self, features: CovariateSet) -> np.ndarray:
        x = features.select(self.names).values
        return self.coefficients[0] + x @ self.coefficients[1:]


@dataclass(frozen=True, eq=False)
class WeightFit:
    weights: np.ndarray
    converged: bool
    ess: float
    method: str
    alpha: np.ndarray | None = None
    iterations: int = 0
    diagnostic: str = ""

    @property
    def normalized_weights(self) -> np.ndarray:
        """Weights rescaled to mean 1, for display and export."""
        return self.weights / self.weights.mean()


def effective_sample_size(weights) -> float:
    """Kish effective sample size, (sum w)^2 / sum w^2."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or not np.any(w > 0):
        raise ValueError("effective sample size needs at least one positive weight")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    # rescaling leaves the ratio unchanged and avoids overflow of sum w^2
    w = w / w.max()
    return float(w.sum() ** 2 / np.dot(w, w))


def _mv(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix-vector product, (B, n, k) x (B, k) -> (B, n)."""
    return (x @ b[..., None])[..., 0]


def _tmv(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched x^T v, (B, n, k) x (B, n) -> (B, k)."""
    return (v[:, None, :] @ x)[:, 0, :]


def _gram(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batched weighted cross-product x^T diag(w) x."""
    return (x * w[..., None]).transpose(0, 2, 1) @ x


def _solve_batch(h: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve h @ x = g per batch element; retry singular ones with ridge jitter.

    Returns the solutions and a mask of elements that stayed singular.
    """
    out = np.zeros_like(g)
    bad = np.zeros(g.shape[0], dtype=bool)
    try:
        return np.linalg.solve(h, g[..., None])[..., 0], bad
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(h.shape[-1])
    for i in range(g.shape[0]):
        for jitter in (0.0, 1e-10):
            try:
                out[i] = np.linalg.solve(h[i] + jitter * eye, g[i])
                break
            except np.linalg.LinAlgError:
                continue
        else:
            bad[i] = True
    return out, bad


def irls_batch(x: np.ndarray, y: np.ndarray, max_iter: int = 100,
               score_tol: float = 1e-8):
    """Newton-Raphson (IRLS) logistic regression on a batch of designs.

    Parameters
    ----------
    x : array, shape (B, n, p)
        Design matrices including the intercept column.
    y : array, shape (B, n)
        0/1 labels.

    Returns
    -------
    beta : (B, p) coefficients
    converged : (B,) bool
    iterations : (B,) int
    max_score : (B,) final max absolute score component
    status : (B,) int, 0 ok, 1 iteration limit, 2 separation, 3 singular
    """
    nb, n, p = x.shape
    beta = np.zeros((nb, p))
    converged = np.zeros(nb, dtype=bool)
    status = np.ones(nb, dtype=int)
    iterations = np.zeros(nb, dtype=int)
    max_score = np.full(nb, np.inf)
    active = np.ones(nb, dtype=bool)

    def loglik(eta, ya):
        return (ya * eta + log_expit(-eta)).sum(axis=1)

    ll = loglik(np.zeros((nb, n)), y)

    for it in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa, ya, ba = x[idx], y[idx], beta[idx]
        eta = _mv(xa, ba)
        mu = expit(eta)
        score = _tmv(xa, ya - mu)
        info = _gram(xa, mu * (1 - mu))
        step, singular = _solve_batch(info, score)
        max_score[idx] = np.abs(score).max(axis=1)
        iterations[idx] = it - 1
        step_size = np.abs(step).max(axis=1)
        done = (max_score[idx] <= score_tol) & (
            step_size <= 1e-6 * (1.0 + np.abs(ba).max(axis=1)))
        converged[idx[done]] = True
        status[idx[done]] = 0
        status[idx[singular & ~done]] = 3
        sep = np.abs(eta).max(axis=1) > SEPARATION_ETA
        status[idx[sep & ~done & ~singular]] = 2
        stop = done | singular | sep
        active[idx[stop]] = False
        go = ~stop
        if not go.any():
            continue
        idx, xa, ya, ba, step = idx[go], xa[go], ya[go], ba[go], step[go]
        # step halving keeps the log-likelihood nondecreasing
        cur = ll[idx]
        new_ll = np.empty(idx.size)
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(MAX_HALVINGS):
            pi = np.flatnonzero(pending)
            cand = ba[pi] + t[pi, None] * step[pi]
            new_ll[pi] = loglik(_mv(xa[pi], cand), ya[pi])
            ok = new_ll[pi] >= cur[pi] - 1e-12 * np.abs(cur[pi])
            pending[pi[ok]] = False
            if not pending.any():
                break
            t[pi[~ok]] *= 0.5
        beta[idx] = ba + t[:, None] * step
        ll[idx] = new_ll
        iterations[idx] = it
    return beta, converged, iterations, max_score, status


_LOGISTIC_DIAGNOSTICS = {0: "", 1: "iteration limit reached",
                         2: "complete separation: fitted probabilities 0 or 1",
                         3: "singular fit"}


def fit_logistic(features: CovariateSet, labels, max_iter: int = 100,
                 score_tol: float = 1e-8) -> LogisticFit:
    """Maximum-likelihood logistic regression with an intercept.

    Non-convergence (iteration limit, separation) returns the last iterate
    flagged ``converged=False``; a singular information matrix that survives
    a ridge-jitter retry raises :class:`SingularFitError`.
    """
    y = np.asarray(labels, dtype=float)
    if y.shape != (len(features),):
        raise ValidationError("one label per subject required")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    if min((y == 1).sum(), (y == 0).sum()) < 2:
        raise ValidationError("at least 2 subjects per label required")
    x = np.column_stack([np.ones(len(y)), features.values])
    beta, conv, iters, score, status = irls_batch(x[None], y[None], max_iter, score_tol)
    if status[0] == 3:
        raise SingularFitError("singular fit")
    return LogisticFit(features.names, beta[0], bool(conv[0]), int(iters[0]),
                       float(score[0]), _LOGISTIC_DIAGNOSTICS[int(status[0])])


def psw_weights(fit: LogisticFit, features_a: CovariateSet) -> WeightFit:
    """Fitted odds of trial-b membership for each trial-a subject."""
    eta = fit.linear_predictor(features_a)
    with np.errstate(over="ignore"):
        w = np.exp(eta)
    bad = np.flatnonzero(~np.isfinite(w))
    if bad.size:
        raise ValidationError(f"non-finite PSW weight for subjects {bad.tolist()[:20]}")
    return WeightFit(w, fit.converged, effective_sample_size(w), "psw",
                     iterations=fit.iterations, diagnostic=fit.diagnostic)


def maic_design(features: np.ndarray, target: MomentVector) -> np.ndarray:
    """Centered moment columns: x - mean and, for order 2, x^2 - E[x^2].

    ``features`` may carry leading batch axes; the last axis is covariates.
    """
    cols = [features - target.means]
    if target.order == 2:
        second = target.variances + target.means**2
        cols.append(features**2 - second)
    return np.concatenate(cols, axis=-1)


def _log_objective(r: np.ndarray, alpha: np.ndarray):
    s = _mv(r, alpha)
    smax = s.max(axis=1)
    e = np.exp(s - smax[:, None])
    total = e.sum(axis=1)
    return smax + np.log(total), s, smax, e, total


def maic_newton_batch(r: np.ndarray, max_iter: int = 500, grad_tol: float = 1e-8):
    """Minimize Q(alpha) = sum_i exp(alpha . r_i) for each batch element.

    Damped Newton with Armijo backtracking, evaluated in log space.  The
    convergence test is on the gradient scaled by Q, which is the weighted
    mean of the centered moment rows (the residual moment mismatch).

    Returns
    -------
    alpha : (B, k)
    converged : (B,) bool
    iterations : (B,) int
    status : (B,) int, 0 ok, 1 iteration limit, 2 unattainable, 3 singular
    """
    nb, n, k = r.shape
    alpha = np.zeros((nb, k))
    converged = np.zeros(nb, dtype=bool)
    iterations = np.zeros(nb, dtype=int)
    status = np.ones(nb, dtype=int)
    # a moment column of one sign everywhere cannot average to zero
    one_sided = ((r > 0).all(axis=1) | (r < 0).all(axis=1)).any(axis=1)
    status[one_sided] = 2
    active = ~one_sided
    logq, s, smax, e, total = _log_objective(r, alpha)

    for it in range(max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ra = r[idx]
        wa = e[idx] / total[idx][:, None]
        grad = _tmv(ra, wa)
        done = np.abs(grad).max(axis=1) <= grad_tol
        converged[idx[done]] = True
        status[idx[done]] = 0
        iterations[idx] = it
        if it == max_iter:
            break
        go = ~done
        active[idx[done]] = False
        if not go.any():
            break
        idx, ra, wa, grad = idx[go], ra[go], wa[go], grad[go]
        hess = _gram(ra, wa)
        step, singular = _solve_batch(hess, -grad)
        if singular.any():
            status[idx[singular]] = 3
            active[idx[singular]] = False
            keep = ~singular
            idx, ra, grad, step = idx[keep], ra[keep], grad[keep], step[keep]
        slope = np.einsum("bk,bk->b", grad, step)
        cur = logq[idx]
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(MAX_HALVINGS):
            pi = np.flatnonzero(pending)
            cand = alpha[idx[pi]] + t[pi, None] * step[pi]
            lq, _, sm, ee, tot = _log_objective(ra[pi], cand)
            ok = lq <= cur[pi] + ARMIJO_C * t[pi] * slope[pi]
            # decrement below the resolution of log Q: Armijo cannot
            # discriminate, take the full Newton step
            ok |= (-slope[pi] <= FLAT_DECREMENT * (1.0 + np.abs(cur[pi]))) & (t[pi] == 1.0) & (
                lq <= cur[pi] + FLAT_DECREMENT * (1.0 + np.abs(cur[pi])))
            acc = idx[pi[ok]]
            alpha[acc] = cand[ok]
            logq[acc], smax[acc], e[acc], total[acc] = lq[ok], sm[ok], ee[ok], tot[ok]
            pending[pi[ok]] = False
            if not pending.any():
                break
            t[pi[~ok]] *= 0.5
        upd = idx[~pending]
        stalled = idx[pending]
        status[stalled] = 1
        active[stalled] = False
        # raw objective no longer a finite nonzero double
        blown = upd[(logq[upd] > LOG_CEIL) | (logq[upd] < LOG_FLOOR)
                    | (smax[upd] > LOG_CEIL)]
        status[blown] = 2
        active[blown] = False
    return alpha, converged, iterations, status


_MAIC_DIAGNOSTICS = {0: "", 1: "iteration limit reached", 2: UNATTAINABLE,
                     3: "singular moment matrix"}


def maic_weights(features_a: CovariateSet, target: MomentVector, order: int,
                 max_iter: int = 500, grad_tol: float = 1e-8) -> WeightFit:
    """Method-of-moments weights exp(alpha . r_i) matching ``target``.

    An unattainable target (outside the support of the features) is reported
    through ``converged=False`` and the diagnostic, not an exception.
    """
    if order != target.order:
        raise ValidationError(f"order {order} does not match target order {target.order}")
    if len(features_a) < 2:
        raise ValidationError("at least 2 subjects required")
    x = features_a.select(target.names).values
    r = maic_design(x, target)
    alpha, conv, iters, status = maic_newton_batch(r[None], max_iter, grad_tol)
    if status[0] == 1 and not moments_attainable(r):
        status[0] = 2
    return _maic_fit(r, alpha[0], bool(conv[0]), int(iters[0]), int(status[0]),
                     f"maic{order}")


def moments_attainable(r: np.ndarray) -> bool:
    """Whether zero lies in the convex hull of the centered moment rows.

    Exact matching needs a probability vector p with r^T p = 0; checked as a
    linear-programming feasibility problem.
    """
    n, k = r.shape
    res = linprog(np.zeros(n), A_eq=np.vstack([r.T, np.ones(n)]),
                  b_eq=np.r_[np.zeros(k), 1.0], bounds=(0, None), method="highs")
    return res.status == 0


def _maic_fit(r, alpha, converged, iterations, status, method) -> WeightFit:
    s = r @ alpha
    with np.errstate(over="ignore"):
        w = np.exp(s)
    if not np.all(np.isfinite(w)) or not np.any(w > 0):
        # keep the relative weights when the raw scale is not representable
        w = np.exp(s - s.max())
        converged = False
        status = 2
    return WeightFit(w, converged, effective_sample_size(w), method, alpha=alpha,
                     iterations=iterations, diagnostic=_MAIC_DIAGNOSTICS[status])
