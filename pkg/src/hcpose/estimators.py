"""scikit-learn estimators around the sharing-ADMM solvers."""
from __future__ import annotations

import hashlib
import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.exceptions import ConvergenceWarning, NotFittedError
from sklearn.linear_model import Lasso, LogisticRegression
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import solver as _solver
from .features import fit_standardization
from .solver import AdmmConfig, CategoryModel, PoseModel
from .types import InputError


class _SharingAdmmBase(BaseEstimator):

    def _admm_config(self):
        return AdmmConfig(rho=self.rho, max_iters=self.max_iter, tol_primal=self.tol,
                          tol_dual=self.tol, inner_iters=self.inner_iter,
                          alpha=self.alpha, block_solver=self.block_solver)

    def _standardize_fit(self, X):
        if self.standardize:
            self.col_means_, self.col_scales_ = fit_standardization(X)
        else:
            self.col_means_ = np.zeros(X.shape[1])
            self.col_scales_ = np.ones(X.shape[1])
        return (X - self.col_means_) / self.col_scales_

    def _resolve_lambda(self, lam_max):
        if self.lam is not None:
            if self.lam < 0:
                raise InputError(f"lambda must be >= 0, got {self.lam}")
            return float(self.lam)
        if self.alpha is None or self.alpha < 0:
            raise InputError("set either lam or a non-negative alpha")
        return float(self.alpha) * lam_max

    def _check_X(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.col_means_.size:
            raise InputError(
                f"X has {X.shape[1]} features, estimator was fitted with {self.col_means_.size}")
        return (X - self.col_means_) / self.col_scales_


class SharingGroupLassoRegressor(RegressorMixin, _SharingAdmmBase):
    """Group-lasso regression solved by sharing-form ADMM.

    Minimizes ``||X w - (y - mean(y))||^2 + lam * sum_g ||w_g||_2`` on
    standardized columns, one group per hierarchy layer. ``lam`` defaults
    to ``alpha * lambda_max``.

    Parameters
    ----------
    groups : None, int or list of int
        Column groups: a single group, ``n`` equal contiguous groups, or
        explicit group sizes.
    alpha : float
        Regularization as a fraction of ``lambda_max``; ignored if ``lam``
        is given.
    lam : float or None
        Absolute regularization weight.
    penalty : {"group", "l1"}
        ``"l1"`` gives a plain lasso over the same splitting.
    rho, max_iter, tol, inner_iter, block_solver
        ADMM settings, see :class:`hcpose.solver.AdmmConfig`.
    standardize : bool
        Scale columns to zero mean and unit variance before solving.
    warm_start : bool
        Start from the previous ``coef_`` when refitting; if ``X`` is
        unchanged, the factorized column blocks are reused as well.
    """

    def __init__(self, groups=None, alpha=0.01, lam=None, penalty="group", rho=1.0,
                 max_iter=1000, tol=1e-4, inner_iter=500, block_solver="auto",
                 standardize=True, warm_start=False):
        self.groups = groups
        self.alpha = alpha
        self.lam = lam
        self.penalty = penalty
        self.rho = rho
        self.max_iter = max_iter
        self.tol = tol
        self.inner_iter = inner_iter
        self.block_solver = block_solver
        self.standardize = standardize
        self.warm_start = warm_start

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        F = self._standardize_fit(X)
        self.intercept_ = float(y.mean())
        z = y - self.intercept_
        slices = _solver.as_group_slices(self.groups, F.shape[1])
        self.group_sizes_ = [s.stop - s.start for s in slices]
        if self.penalty == "group":
            self.lambda_max_ = _solver.lambda_max_regression(F, z, self.group_sizes_)
            run = _solver.admm_group_lasso
        elif self.penalty == "l1":
            self.lambda_max_ = 2.0 * float(np.max(np.abs(F.T @ z), initial=0.0))
            run = _solver.admm_lasso
        else:
            raise InputError(f"unknown penalty {self.penalty!r}")
        self.lambda_ = self._resolve_lambda(self.lambda_max_)
        omega0 = None
        if self.warm_start and getattr(self, "coef_", None) is not None \
                and self.coef_.size == F.shape[1]:
            omega0 = self.coef_
        blocks = self._blocks_for(X, F)
        self.coef_, self.state_, self.trace_ = run(
            F, z, self.lambda_, self._admm_config(), groups=self.group_sizes_,
            omega0=omega0, blocks=blocks)
        self.n_iter_ = self.trace_.n_iter
        return self

    def _blocks_for(self, X, F):
        key = (hashlib.sha1(np.ascontiguousarray(X).view(np.uint8)).hexdigest(),
               tuple(self.group_sizes_), bool(self.standardize))
        cached = getattr(self, "_block_cache", None)
        if self.warm_start and cached is not None and cached[0] == key:
            return cached[1]
        blocks = _solver.prepare_blocks(F, self.group_sizes_)
        self._block_cache = (key, blocks) if self.warm_start else None
        return blocks

    def predict(self, X):
        """Unwrapped pose estimates in degrees."""
        return self._check_X(X) @ self.coef_ + self.intercept_

    @property
    def model_(self) -> PoseModel:
        if not hasattr(self, "coef_"):
            raise NotFittedError("estimator is not fitted yet")
        return PoseModel(omega=self.coef_, group_sizes=list(self.group_sizes_),
                         col_means=self.col_means_, col_scales=self.col_scales_,
                         z_mean=self.intercept_, rho=self.rho, lam=self.lambda_,
                         alpha=None if self.lam is not None else self.alpha)

    def sparsity_mask(self):
        """True for groups with a non-zero weight block."""
        check_is_fitted(self, "coef_")
        slices = _solver.as_group_slices(self.group_sizes_, self.coef_.size)
        return np.array([np.any(self.coef_[s] != 0) for s in slices])


class SharingL1LogisticClassifier(ClassifierMixin, _SharingAdmmBase):
    """One-vs-rest l1 logistic regression solved by sharing-form ADMM.

    Each class gets an independent binary problem from the 1-of-C coding;
    the prediction is the class with the largest score, ties going to the
    smallest label. Parameters match :class:`SharingGroupLassoRegressor`;
    ``phi_loss="literal"`` swaps the consensus loss for the unlabelled
    ``log(1 + exp(-L phi))`` form.
    """

    def __init__(self, groups=None, alpha=0.01, lam=None, rho=1.0, max_iter=1000,
                 tol=1e-4, inner_iter=500, standardize=True, phi_loss="label_weighted"):
        self.groups = groups
        self.alpha = alpha
        self.lam = lam
        self.rho = rho
        self.max_iter = max_iter
        self.tol = tol
        self.inner_iter = inner_iter
        self.standardize = standardize
        self.phi_loss = phi_loss

    block_solver = "auto"

    def _admm_config(self):
        return _solver.with_config(super()._admm_config(), phi_loss=self.phi_loss)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise InputError("need at least two classes")
        F = self._standardize_fit(X)
        slices = _solver.as_group_slices(self.groups, F.shape[1])
        self.group_sizes_ = [s.stop - s.start for s in slices]
        blocks = _solver.prepare_blocks(F, self.group_sizes_)
        cfg = self._admm_config()
        coefs, lams, lmax, iters = [], [], [], []
        for c in self.classes_:
            yc = (y == c).astype(float)
            lam_max = _solver.lambda_max_logistic(F, yc)
            lam = self._resolve_lambda(lam_max)
            w, _, trace = _solver.admm_sparse_logistic(
                F, yc, lam, cfg, groups=self.group_sizes_, blocks=blocks)
            coefs.append(w)
            lams.append(lam)
            lmax.append(lam_max)
            iters.append(trace.n_iter)
        self.coef_ = np.vstack(coefs)
        self.lambda_ = np.array(lams)
        self.lambda_max_ = np.array(lmax)
        self.n_iter_ = np.array(iters)
        return self

    def decision_function(self, X):
        return self._check_X(X) @ self.coef_.T

    def predict_proba(self, X):
        """Per-class sigmoid probabilities normalized across classes."""
        p = _solver.sigmoid(self.decision_function(X))
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    @property
    def model_(self) -> CategoryModel:
        if not hasattr(self, "coef_"):
            raise NotFittedError("estimator is not fitted yet")
        return CategoryModel(omega=self.coef_, classes=[int(c) for c in self.classes_],
                             group_sizes=list(self.group_sizes_), col_means=self.col_means_,
                             col_scales=self.col_scales_, rho=self.rho,
                             lam=[float(v) for v in self.lambda_],
                             alpha=None if self.lam is not None else self.alpha)


class RelativeLasso(RegressorMixin, BaseEstimator):
    """Plain lasso with ``alpha`` given as a fraction of ``lambda_max``.

    Solves the same problem as ``SharingGroupLassoRegressor(penalty="l1")``
    with one block, by coordinate descent: scikit-learn's objective
    ``||y - Xw||^2 / (2N) + a ||w||_1`` matches ``||Xw - y||^2 + lam ||w||_1``
    at ``a = lam / (2N)``. Used for the single-layer baselines.
    """

    def __init__(self, alpha=0.01, max_iter=2000, tol=1e-4, standardize=True):
        self.alpha = alpha
        self.max_iter = max_iter
        self.tol = tol
        self.standardize = standardize

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if self.standardize:
            self.col_means_, self.col_scales_ = fit_standardization(X)
        else:
            self.col_means_, self.col_scales_ = np.zeros(X.shape[1]), np.ones(X.shape[1])
        F = (X - self.col_means_) / self.col_scales_
        self.intercept_ = float(y.mean())
        z = y - self.intercept_
        n = F.shape[0]
        self.lambda_max_ = 2.0 * float(np.max(np.abs(F.T @ z), initial=0.0))
        self.lambda_ = float(self.alpha) * self.lambda_max_
        if self.lambda_ == 0.0 and self.lambda_max_ == 0.0:
            self.coef_ = np.zeros(F.shape[1])
            self.n_iter_ = 0
            return self
        cd = Lasso(alpha=self.lambda_ / (2.0 * n), fit_intercept=False, max_iter=self.max_iter,
                   tol=self.tol, selection="cyclic")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            cd.fit(F, z)
        self.coef_ = cd.coef_.copy()
        self.n_iter_ = cd.n_iter_
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return ((X - self.col_means_) / self.col_scales_) @ self.coef_ + self.intercept_


class RelativeL1Logistic(ClassifierMixin, BaseEstimator):
    """One-vs-rest l1 logistic regression (no intercept), ``alpha`` relative
    to each class's ``lambda_max``; the single-layer categorization baseline.

    ``sum log(1 + e^h) - y h + lam ||w||_1`` is liblinear's problem with
    ``C = 1 / lam``.
    """

    def __init__(self, alpha=0.01, max_iter=1000, tol=1e-6, standardize=True):
        self.alpha = alpha
        self.max_iter = max_iter
        self.tol = tol
        self.standardize = standardize

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise InputError("need at least two classes")
        if self.standardize:
            self.col_means_, self.col_scales_ = fit_standardization(X)
        else:
            self.col_means_, self.col_scales_ = np.zeros(X.shape[1]), np.ones(X.shape[1])
        F = (X - self.col_means_) / self.col_scales_
        coefs = []
        for c in self.classes_:
            yc = (y == c).astype(float)
            lam = float(self.alpha) * _solver.lambda_max_logistic(F, yc)
            if lam <= 0:
                raise InputError("RelativeL1Logistic needs alpha > 0")
            clf = LogisticRegression(penalty="l1", C=1.0 / lam, solver="liblinear",
                                     fit_intercept=False, max_iter=self.max_iter, tol=self.tol)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                clf.fit(F, yc.astype(int))
            coefs.append(clf.coef_.ravel())
        self.coef_ = np.vstack(coefs)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        return ((X - self.col_means_) / self.col_scales_) @ self.coef_.T

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
