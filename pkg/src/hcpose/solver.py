"""Sharing-form ADMM for layer-grouped sparse regression and classification.

The feature matrix is split column-wise into blocks ``F_l`` (one per
hierarchy layer). Each iteration

1. updates every block against the shared fit,
   ``w_l <- argmin rho*||F_l w - v_l||^2 + lam*R(w)`` with
   ``v_l = F_l w_l + phi - a - mean_l(F_l w_l)``;
2. updates the consensus vector ``phi`` from the loss and the new block
   average;
3. updates the scaled dual ``a <- a + mean_l(F_l w_l) - phi``.

With the squared loss and ``R = ||.||_2`` the fixed point minimizes
``||F w - z||^2 + lam * sum_l ||w_l||_2``; with the logistic loss and
``R = ||.||_1`` it minimizes the l1-penalized negative log-likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import optimize

from .features import NumericalError
from .types import InputError


_ABS_FLOOR = 1e-8


class SolverError(NumericalError):
    """ADMM diverged or a sub-solver failed; carries the iteration trace."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    max_iters: int = 1000
    tol_primal: float = 1e-4
    tol_dual: float = 1e-4
    inner_iters: int = 500
    inner_tol: float = 1e-8
    alpha: Optional[float] = None
    block_solver: str = "auto"
    phi_loss: str = "label_weighted"

    def __post_init__(self):
        if not self.rho > 0:
            raise InputError(f"rho must be > 0, got {self.rho}")
        if not (self.tol_primal > 0 and self.tol_dual > 0):
            raise InputError("tolerances must be > 0")
        if self.max_iters < 1 or self.inner_iters < 1:
            raise InputError("iteration budgets must be >= 1")
        if self.block_solver not in ("auto", "apg", "exact"):
            raise InputError(f"unknown block solver {self.block_solver!r}")
        if self.phi_loss not in ("label_weighted", "literal"):
            raise InputError(f"unknown consensus loss {self.phi_loss!r}")


@dataclass
class AdmmState:
    omega: List[np.ndarray]
    phi_bar: np.ndarray
    a: np.ndarray
    Fomega_bar: np.ndarray
    iter: int = 0
    primal_residual: float = np.inf
    dual_residual: float = np.inf


@dataclass
class AdmmTrace:
    objective: List[float] = field(default_factory=list)
    primal_residual: List[float] = field(default_factory=list)
    dual_residual: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_iter(self) -> int:
        return len(self.objective)


# ---------------------------------------------------------------------------
# proximal operators and objectives

def prox_group_l2(u, tau):
    """Block soft-thresholding: prox of ``tau*||.||_2`` at ``u``."""
    u = np.asarray(u, dtype=float)
    norm = np.linalg.norm(u)
    if norm <= tau:
        return np.zeros_like(u)
    return u * (1.0 - tau / norm)


def prox_l1(u, tau):
    u = np.asarray(u, dtype=float)
    return np.sign(u) * np.maximum(np.abs(u) - tau, 0.0)


_PROX = {"group": prox_group_l2, "l1": prox_l1}


def as_group_slices(groups, n_features) -> List[slice]:
    """Normalize a group spec (None, a count, or a list of sizes)."""
    if groups is None:
        return [slice(0, n_features)]
    if isinstance(groups, (int, np.integer)):
        if groups < 1 or n_features % groups:
            raise InputError(f"{n_features} columns do not split into {groups} equal groups")
        size = n_features // groups
        return [slice(i * size, (i + 1) * size) for i in range(groups)]
    sizes = [int(s) for s in groups]
    if any(s < 1 for s in sizes):
        raise InputError("empty group")
    if sum(sizes) != n_features:
        raise InputError(f"group sizes sum to {sum(sizes)}, matrix has {n_features} columns")
    out, start = [], 0
    for s in sizes:
        out.append(slice(start, start + s))
        start += s
    return out


def group_lasso_objective(F, z, omega, groups, lam):
    """``||F w - z||^2 + lam * sum_l ||w_l||_2``."""
    F = np.asarray(F, dtype=float)
    omega = np.asarray(omega, dtype=float)
    slices = as_group_slices(groups, F.shape[1])
    r = F @ omega - z
    return float(r @ r + lam * sum(np.linalg.norm(omega[s]) for s in slices))


def logistic_smooth(F, y, omega):
    """Negative log-likelihood ``sum log(1 + e^h) - y h`` and its gradient."""
    h = np.asarray(F, dtype=float) @ omega
    value = float(np.sum(np.logaddexp(0.0, h) - y * h))
    grad = F.T @ (sigmoid(h) - y)
    return value, grad


def logistic_objective(F, y, omega, lam):
    return logistic_smooth(F, y, omega)[0] + lam * float(np.abs(omega).sum())


def sigmoid(h):
    """Numerically stable ``exp(h) / (1 + exp(h))``."""
    h = np.asarray(h, dtype=float)
    out = np.empty_like(h)
    pos = h >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
    e = np.exp(h[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


def logistic_prob(f, omega_c):
    """``P(z^c = 1 | f)`` for the class weights ``omega_c``."""
    return sigmoid(float(np.dot(f, omega_c)))


# ---------------------------------------------------------------------------
# regularization paths

def lambda_max_regression(F, z, groups=None):
    """Smallest ``lam`` for which the group-lasso solution is zero.

    At ``w = 0`` the squared-loss gradient is ``-2 F^T z``; the zero
    vector is optimal exactly when every group satisfies
    ``||2 F_l^T z||_2 <= lam``.
    """
    F = np.asarray(F, dtype=float)
    z = np.asarray(z, dtype=float)
    slices = as_group_slices(groups, F.shape[1])
    g = F.T @ z
    return 2.0 * max(float(np.linalg.norm(g[s])) for s in slices)


def lambda_max_logistic(F, y):
    """Smallest ``lam`` zeroing the l1-logistic solution (no intercept)."""
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.max(np.abs(F.T @ (y - 0.5))))


# ---------------------------------------------------------------------------
# block subproblem

class _Block:
    """Column block ``F_l`` with lazily cached quantities for repeated solves."""

    def __init__(self, F_l):
        self.F = np.ascontiguousarray(F_l, dtype=float)
        self._gram = None
        self._sigma2 = None
        self._svd = None

    @property
    def gram(self):
        n, d = self.F.shape
        if self._gram is None and d <= n:
            self._gram = self.F.T @ self.F
        return self._gram

    @property
    def sigma2(self):
        if self._sigma2 is None:
            self._sigma2 = _largest_sq_singular_value(self.F, self.gram)
        return self._sigma2

    def gram_dot(self, w):
        if self.gram is not None:
            return self.gram @ w
        return self.F.T @ (self.F @ w)

    @property
    def svd(self):
        if self._svd is None:
            U, s, Vt = np.linalg.svd(self.F, full_matrices=False)
            keep = s > s[0] * max(self.F.shape) * np.finfo(float).eps if s.size else s > 0
            self._svd = (U[:, keep], s[keep], Vt[keep])
        return self._svd


def _largest_sq_singular_value(F, gram=None):
    n, d = F.shape
    if n == 0 or d == 0:
        return 0.0
    if min(n, d) <= 256:
        small = gram if gram is not None else (F @ F.T if n < d else F.T @ F)
        return float(np.linalg.eigvalsh(small)[-1]) if small.size else 0.0
    # deterministic power iteration, padded so the step size stays safe
    v = np.ones(d) / np.sqrt(d)
    est = 0.0
    for _ in range(500):
        w = F.T @ (F @ v)
        new = float(np.linalg.norm(w))
        if new == 0:
            return 0.0
        v = w / new
        if abs(new - est) <= 1e-7 * new:
            est = new
            break
        est = new
    return 1.02 * est


def block_subproblem(F_l, v, lam, rho, budget=500, penalty="group", w0=None,
                     tol=1e-8, solver="apg"):
    """Minimize ``rho*||F_l w - v||^2 + lam*R(w)``.

    ``R`` is the l2 norm (``penalty="group"``) or the l1 norm. The default
    solver is accelerated proximal gradient with step ``1/(2 rho sigma^2)``
    and gradient restarts, run until the gradient-map norm drops below
    ``tol`` or ``budget`` iterations pass. ``solver="exact"`` solves the
    group case through the SVD of ``F_l`` and a scalar root find.
    """
    blk = F_l if isinstance(F_l, _Block) else _Block(F_l)
    v = np.asarray(v, dtype=float)
    Ftv = blk.F.T @ v
    d = blk.F.shape[1]
    if lam >= 2.0 * rho * (np.linalg.norm(Ftv) if penalty == "group" else np.abs(Ftv).max(initial=0.0)):
        return np.zeros(d)
    if solver == "exact" and penalty == "group":
        return _exact_group_block(blk, v, lam, rho)
    return _apg_block(blk, Ftv, lam, rho, budget, penalty, w0, tol)


def _apg_block(blk, Ftv, lam, rho, budget, penalty, w0, tol):
    prox = _PROX[penalty]
    d = Ftv.size
    if blk.sigma2 == 0:
        return np.zeros(d)
    step = 1.0 / (2.0 * rho * blk.sigma2)
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=float)
    y = w.copy()
    t = 1.0
    for _ in range(budget):
        grad = 2.0 * rho * (blk.gram_dot(y) - Ftv)
        w_new = prox(y - step * grad, step * lam)
        gmap = np.linalg.norm(y - w_new) / step
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if np.dot(y - w_new, w_new - w) > 0:
            # gradient-based restart
            t_new = 1.0
            y = w_new.copy()
        else:
            y = w_new + ((t - 1.0) / t_new) * (w_new - w)
        w, t = w_new, t_new
        if gmap <= tol:
            break
    return w


def _exact_group_block(blk, v, lam, rho):
    _, _, Vt = blk.svd
    return Vt.T @ _exact_group_coords(blk, v, lam, rho)


def _exact_group_coords(blk, v, lam, rho):
    """Group block solution in right-singular coordinates: ``w = V beta``.

    With ``F = U S V^T`` the block problem only sees ``c = U^T v``, and
    ``F w = U S beta``, ``||w|| = ||beta||``, ``||F^T v|| = ||S c||``.
    """
    U, s, _ = blk.svd
    c = U.T @ v
    num = 2.0 * rho * s * c
    nnum = float(np.linalg.norm(num))
    if lam >= nnum:
        return np.zeros_like(s)
    if lam == 0:
        return c / s
    # with t = lam / ||w||: beta(t) = num / (den0 + t) and t*||beta(t)|| = lam,
    # whose left side increases from 0 to ||num|| > lam
    den0 = 2.0 * rho * s * s

    def gap(t):
        return t * np.linalg.norm(num / (den0 + t)) - lam

    t_lo = 0.5 * lam * den0.min() / nnum
    t_hi = 2.0 * lam * den0.max() / (nnum - lam) + lam
    t = optimize.brentq(gap, t_lo, t_hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return num / (den0 + t)


# ---------------------------------------------------------------------------
# consensus updates

def _phi_update_squared(z, m, L, rho):
    return (z + rho * m) / (L + rho)


def _phi_update_logistic(y, m, L, rho, max_newton=100, tol=1e-12):
    """Per-coordinate ``argmin rho*(phi - m)^2 + l(L*phi; y) / L``.

    ``l(u; y) = log(1 + e^u) - y u``. The stationarity function
    ``g = 2 rho (phi - m) + sigmoid(L phi) - y`` is increasing, and its root
    lies in ``m +/- 1/(2 rho)``; Newton steps are kept inside that bracket
    and unconverged coordinates finish by bisection.
    """
    lo = m - 0.5 / rho
    hi = m + 0.5 / rho
    phi = m.copy()
    done = np.zeros(m.shape, dtype=bool)
    for _ in range(max_newton):
        s = sigmoid(L * phi)
        g = 2.0 * rho * (phi - m) + s - y
        done = np.abs(g) <= tol
        if done.all():
            return phi
        lo = np.where(g < 0, np.maximum(lo, phi), lo)
        hi = np.where(g > 0, np.minimum(hi, phi), hi)
        h = 2.0 * rho + L * s * (1.0 - s)
        step = phi - g / h
        outside = (step <= lo) | (step >= hi)
        step = np.where(outside, 0.5 * (lo + hi), step)
        phi = np.where(done, phi, step)
    for _ in range(200):
        s = sigmoid(L * phi)
        g = 2.0 * rho * (phi - m) + s - y
        if np.all(np.abs(g) <= tol) or np.all(hi - lo <= 4 * np.finfo(float).eps * (1 + np.abs(phi))):
            break
        lo = np.where(g < 0, phi, lo)
        hi = np.where(g > 0, phi, hi)
        phi = 0.5 * (lo + hi)
    if not np.all(np.isfinite(phi)):
        raise SolverError("logistic consensus update produced non-finite values")
    return phi


# ---------------------------------------------------------------------------
# the ADMM driver

def prepare_blocks(F, groups=None) -> List[_Block]:
    F = np.asarray(F, dtype=float)
    return [_Block(F[:, s]) for s in as_group_slices(groups, F.shape[1])]


def _sharing_admm(blocks, target, lam, cfg, penalty, loss, omega0=None, objective=None):
    L = len(blocks)
    N = blocks[0].F.shape[0]
    rho = cfg.rho
    omega = ([np.zeros(b.F.shape[1]) for b in blocks] if omega0 is None
             else [np.array(w, dtype=float) for w in omega0])
    Fw = [b.F @ w for b, w in zip(blocks, omega)]
    avg = sum(Fw) / L
    phi = avg.copy()
    a = np.zeros(N)
    trace = AdmmTrace()
    y_eff = target
    if loss == "logistic" and cfg.phi_loss == "literal":
        y_eff = np.ones_like(target)
    exact = cfg.block_solver in ("auto", "exact") and penalty == "group"
    if exact:
        # iterate on right-singular coordinates; omega_l = V_l beta_l
        omega = [b.svd[2] @ w for b, w in zip(blocks, omega)]
        Fw = [b.svd[0] @ (b.svd[1] * w) for b, w in zip(blocks, omega)]
    for t in range(cfg.max_iters):
        new_omega, new_Fw = [], []
        for blk, w, fw in zip(blocks, omega, Fw):
            v = fw + phi - a - avg
            if exact:
                w_new = _exact_group_coords(blk, v, lam, rho)
                U, s, _ = blk.svd
                new_Fw.append(U @ (s * w_new))
            else:
                w_new = block_subproblem(blk, v, lam, rho, budget=cfg.inner_iters,
                                         penalty=penalty, w0=w, tol=cfg.inner_tol)
                new_Fw.append(blk.F @ w_new)
            new_omega.append(w_new)
        Fw_old, avg_old, phi_old = Fw, avg, phi
        omega, Fw = new_omega, new_Fw
        avg = sum(Fw) / L
        if loss == "squared":
            phi = _phi_update_squared(target, avg + a, L, rho)
        else:
            phi = _phi_update_logistic(y_eff, avg + a, L, rho)
        a = a + avg - phi
        r = float(np.linalg.norm(avg - phi))
        # change of each block's shared copy F_l w_l + phi - avg
        shift = (phi - phi_old) - (avg - avg_old)
        s = float(rho * np.sqrt(sum(np.sum((f - f0 + shift) ** 2) for f, f0 in zip(Fw, Fw_old))))
        obj = objective(omega, L * avg)
        trace.objective.append(obj)
        trace.primal_residual.append(r)
        trace.dual_residual.append(s)
        if not (np.isfinite(obj) and np.isfinite(r) and np.isfinite(s)):
            raise SolverError(f"ADMM diverged at iteration {t}", trace)
        eps_pri = cfg.tol_primal * max(np.linalg.norm(avg), np.linalg.norm(phi), _ABS_FLOOR)
        eps_dual = cfg.tol_dual * max(rho * np.linalg.norm(a), _ABS_FLOOR)
        if r <= eps_pri and s <= eps_dual:
            trace.converged = True
            break
    if exact:
        omega = [b.svd[2].T @ w for b, w in zip(blocks, omega)]
    state = AdmmState(omega=omega, phi_bar=phi, a=a, Fomega_bar=avg, iter=trace.n_iter,
                      primal_residual=trace.primal_residual[-1],
                      dual_residual=trace.dual_residual[-1])
    return np.concatenate(omega), state, trace


def admm_group_lasso(F, z, lam, cfg: AdmmConfig = AdmmConfig(), groups=None,
                     omega0=None, blocks=None):
    """Group-lasso regression by sharing ADMM.

    Returns ``(omega, state, trace)``; ``omega`` concatenates the block
    weights in column order. ``F`` is expected standardized and ``z``
    centered (see :class:`hcpose.estimators.SharingGroupLassoRegressor`).
    """
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    z = np.asarray(z, dtype=float)
    blocks = blocks or prepare_blocks(F, groups)
    _check_rows(blocks, z)
    omega0 = _split(omega0, blocks)

    def objective(omega, Fw):
        r = Fw - z
        return float(r @ r + lam * sum(np.linalg.norm(w) for w in omega))

    return _sharing_admm(blocks, z, lam, cfg, "group", "squared", omega0, objective)


def admm_lasso(F, z, lam, cfg: AdmmConfig = AdmmConfig(), groups=None,
               omega0=None, blocks=None):
    """Squared loss with an elementwise l1 penalty, same splitting."""
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    z = np.asarray(z, dtype=float)
    blocks = blocks or prepare_blocks(F, groups)
    _check_rows(blocks, z)
    omega0 = _split(omega0, blocks)

    def objective(omega, Fw):
        r = Fw - z
        return float(r @ r + lam * sum(np.abs(w).sum() for w in omega))

    return _sharing_admm(blocks, z, lam, cfg, "l1", "squared", omega0, objective)


def admm_sparse_logistic(F, y, lam, cfg: AdmmConfig = AdmmConfig(), groups=None,
                         omega0=None, blocks=None):
    """l1-penalized binary logistic regression (labels in {0, 1})."""
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise InputError("logistic labels must be 0 or 1")
    blocks = blocks or prepare_blocks(F, groups)
    _check_rows(blocks, y)
    omega0 = _split(omega0, blocks)

    def objective(omega, Fw):
        return float(np.sum(np.logaddexp(0.0, Fw) - y * Fw)
                     + lam * sum(np.abs(w).sum() for w in omega))

    return _sharing_admm(blocks, y, lam, cfg, "l1", "logistic", omega0, objective)


def _check_rows(blocks, target):
    if target.ndim != 1 or target.shape[0] != blocks[0].F.shape[0]:
        raise InputError(
            f"target of shape {target.shape} does not match {blocks[0].F.shape[0]} rows")


def _split(omega0, blocks):
    if omega0 is None:
        return None
    omega0 = np.asarray(omega0, dtype=float)
    out, start = [], 0
    for b in blocks:
        d = b.F.shape[1]
        out.append(omega0[start:start + d])
        start += d
    if start != omega0.size:
        raise InputError("warm start has the wrong length")
    return out


# ---------------------------------------------------------------------------
# fitted models

@dataclass
class PoseModel:
    omega: np.ndarray
    group_sizes: List[int]
    col_means: np.ndarray
    col_scales: np.ndarray
    z_mean: float
    rho: float = 1.0
    lam: float = 0.0
    alpha: Optional[float] = None

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.col_means = np.asarray(self.col_means, dtype=float)
        self.col_scales = np.asarray(self.col_scales, dtype=float)
        if sum(self.group_sizes) != self.omega.size:
            raise InputError("model groups do not cover the weight vector")


@dataclass
class CategoryModel:
    """One-vs-rest weights, row ``c`` scoring ``classes[c]``."""

    omega: np.ndarray
    classes: List[int]
    group_sizes: List[int]
    col_means: np.ndarray
    col_scales: np.ndarray
    rho: float = 1.0
    lam: Sequence[float] = ()
    alpha: Optional[float] = None

    def __post_init__(self):
        self.omega = np.atleast_2d(np.asarray(self.omega, dtype=float))
        self.col_means = np.asarray(self.col_means, dtype=float)
        self.col_scales = np.asarray(self.col_scales, dtype=float)
        if len(self.classes) < 2 or self.omega.shape[0] != len(self.classes):
            raise InputError("a category model needs one weight row per class, C >= 2")


def _standardized(model, f):
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != model.col_means.size:
        raise InputError(
            f"feature vector has {f.shape[-1]} entries, model expects {model.col_means.size}")
    return (f - model.col_means) / model.col_scales


def predict_pose(model: PoseModel, f, wrap=False):
    """``f . w`` plus the training pose mean; raw features in, degrees out.

    With ``wrap`` the estimate is reduced to [0, 360) for reporting.
    """
    z = _standardized(model, f) @ model.omega + model.z_mean
    return np.mod(z, 360.0) if wrap else z


def category_scores(model: CategoryModel, f):
    return _standardized(model, f) @ model.omega.T


def predict_category(model: CategoryModel, f):
    """Argmax of the class scores; ties go to the first (smallest) class."""
    scores = category_scores(model, f)
    idx = np.argmax(scores, axis=-1)
    return np.asarray(model.classes)[idx] if np.ndim(idx) else model.classes[int(idx)]


def with_config(cfg: AdmmConfig, **changes) -> AdmmConfig:
    return replace(cfg, **changes)
