"""Pooled binomial outcome model as an unconstrained log density.

The logit of the per-period case probability is a sum of a study intercept,
a subject random effect, covariate effects, a per-study time spline (block
diagonal across studies, column-centered within each block), and a monotone
spline transform of assigned long-term exposure. Curve coefficients are
either shared across studies or hierarchical with an LKJ-correlated
between-study prior; they can be restricted to be non-negative.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln

from .data import OutcomeDataset
from .splines import KnotSet, ispline_basis, natural_cubic_centered, quantile_knots
from .transforms import (
    HalfNormal,
    ParamLayout,
    corr_factor_pullback,
    corr_factor_to_unconstrained,
    corr_prior_logdensity_and_grad,
    halfnormal_logpdf,
    n_corr_free,
)

LOG_2PI = float(np.log(2.0 * np.pi))


class CurveMode(enum.Enum):
    SHARED = "shared"
    HIERARCHICAL = "hierarchical"


class CurveConstraint(enum.Enum):
    FREE = "free"
    NONNEGATIVE = "nonnegative"


@dataclass(frozen=True)
class ERCSpec:
    """Exposure-response curve configuration (knots in log-concentration units)."""

    knots: KnotSet
    order: int = 3
    mode: CurveMode = CurveMode.SHARED
    constraint: CurveConstraint = CurveConstraint.FREE
    x_ref: float | None = None   # None: lower boundary knot

    @property
    def reference(self) -> float:
        return self.knots.lower if self.x_ref is None else float(self.x_ref)

    def basis(self, x) -> np.ndarray:
        return ispline_basis(x, self.order, self.knots).values


@dataclass(frozen=True)
class OutcomePriors:
    sigma_study: HalfNormal | float = HalfNormal(0.0, 1.0)
    sigma_subject: HalfNormal | float = HalfNormal(0.0, 1.0)
    sigma_covariate: HalfNormal | float = HalfNormal(0.0, 1.0)
    sigma_time: HalfNormal | float = HalfNormal(0.0, 1.0)
    sigma_curve: HalfNormal | float = HalfNormal(0.0, 1.0)
    lkj_shape: float = 2.0
    curve_scale: tuple[float, ...] | None = None   # fixed per-study scales, default ones
    curve_mean_scalar: bool = True                 # common mean: scalar vs per-basis vector


def _is_fixed(prior) -> bool:
    return not isinstance(prior, HalfNormal)


@dataclass
class OutcomeDesign:
    """Assembled design matrices for one outcome fit."""

    time_matrix: np.ndarray              # n x total time columns, block diagonal
    time_slices: dict[int, slice]        # study code -> columns
    erc_matrix: np.ndarray               # n x n_basis (0 columns when no curve)
    erc: ERCSpec | None


def build_outcome_design(
    data: OutcomeDataset,
    erc: ERCSpec | None,
    time_df: dict[str, int] | int = 8,
) -> OutcomeDesign:
    """Per-study centered time bases stacked block-diagonally plus the curve basis."""
    n = data.n_records
    blocks: list[np.ndarray] = []
    slices: dict[int, slice] = {}
    start = 0
    for s in range(data.n_studies):
        rows = data.study == s
        if isinstance(time_df, dict):
            df = int(time_df.get(data.study_labels[s], time_df.get("default", 8)))
        else:
            df = int(time_df)
        periods = data.period[rows].astype(float)
        n_unique = np.unique(periods).size
        df = min(df, max(n_unique - 1, 0))
        if df > 0:
            knots = quantile_knots(periods, df - 1)
            if knots.n_interior != df - 1:
                df = knots.n_interior + 1
            basis = natural_cubic_centered(periods, df, knots).values
        else:
            basis = np.zeros((int(rows.sum()), 0))
        block = np.zeros((n, basis.shape[1]))
        block[rows] = basis
        blocks.append(block)
        slices[s] = slice(start, start + basis.shape[1])
        start += basis.shape[1]
    time_matrix = np.hstack(blocks) if blocks else np.zeros((n, 0))
    erc_matrix = erc.basis(data.exposure) if erc is not None else np.zeros((n, 0))
    return OutcomeDesign(time_matrix=time_matrix, time_slices=slices,
                         erc_matrix=erc_matrix, erc=erc)


def design_rank_warnings(data: OutcomeDataset, design: OutcomeDesign) -> list[str]:
    """Flag curve-basis columns that are constant within every study (separation risk)."""
    warnings = []
    g = design.erc_matrix
    for j in range(g.shape[1]):
        spread = 0.0
        for s in range(data.n_studies):
            col = g[data.study == s, j]
            if col.size:
                spread = max(spread, float(col.max() - col.min()))
        if spread < 1e-10:
            warnings.append(
                f"curve basis column {j} is constant within every study; "
                "its coefficient is confounded with the study intercepts"
            )
    return warnings


class OutcomeModel:
    """Compiled log density for the pooled outcome data."""

    def __init__(self, data: OutcomeDataset, priors: OutcomePriors, design: OutcomeDesign):
        self.data = data
        self.priors = priors
        self.design = design
        self.S = data.n_studies
        self.N = data.n_subjects
        self.C = data.n_covariates
        self.D = design.time_matrix.shape[1]
        self.J = design.erc_matrix.shape[1]
        self.mode = design.erc.mode if design.erc is not None else CurveMode.SHARED
        self.constraint = (
            design.erc.constraint if design.erc is not None else CurveConstraint.FREE
        )
        self.hier = self.J > 0 and self.mode is CurveMode.HIERARCHICAL
        self.n_corr = n_corr_free(self.S) if self.hier else 0
        if self.hier:
            scale = priors.curve_scale or tuple(1.0 for _ in range(self.S))
            if len(scale) != self.S:
                raise ValueError("curve_scale must have one entry per study")
            self.curve_scale = np.asarray(scale, dtype=float)
            self.P = 1 if priors.curve_mean_scalar else self.J

        sizes = [("study_intercept", self.S), ("subject_effect", self.N)]
        if self.C:
            sizes.append(("covariate_coef", self.C))
        if self.D:
            sizes.append(("time_coef", self.D))
        if self.J:
            if self.hier:
                sizes.append(("curve_coef", self.S * self.J))
                sizes.append(("curve_mean", self.P))
                if self.n_corr:
                    sizes.append(("corr_factor", self.n_corr))
            else:
                sizes.append(("curve_coef", self.J))
        self._sampled_scales: list[tuple[str, HalfNormal]] = []
        for name, prior, active in (
            ("sigma_study", priors.sigma_study, True),
            ("sigma_subject", priors.sigma_subject, True),
            ("sigma_covariate", priors.sigma_covariate, self.C > 0),
            ("sigma_time", priors.sigma_time, self.D > 0),
            ("sigma_curve", priors.sigma_curve, self.J > 0),
        ):
            if active and not _is_fixed(prior):
                sizes.append((name, 1))
                self._sampled_scales.append((name, prior))
        self.layout = ParamLayout(sizes)
        self.dim = self.layout.dim

        self._s = data.study
        self._i = data.subject
        self._y = data.cases.astype(float)
        self._t = data.trials.astype(float)
        self._log_choose = float(
            np.sum(gammaln(self._t + 1) - gammaln(self._y + 1) - gammaln(self._t - self._y + 1))
        )

    # -- scales ----------------------------------------------------------------

    def _scale(self, u, name, fixed) -> float:
        if name in self.layout:
            return float(np.exp(self.layout.get(u, name)[0]))
        return float(fixed)

    def scales(self, u) -> dict[str, float]:
        p = self.priors
        out = {
            "sigma_study": self._scale(u, "sigma_study", p.sigma_study),
            "sigma_subject": self._scale(u, "sigma_subject", p.sigma_subject),
        }
        if self.C:
            out["sigma_covariate"] = self._scale(u, "sigma_covariate", p.sigma_covariate)
        if self.D:
            out["sigma_time"] = self._scale(u, "sigma_time", p.sigma_time)
        if self.J:
            out["sigma_curve"] = self._scale(u, "sigma_curve", p.sigma_curve)
        return out

    # -- curve coefficient assembly ---------------------------------------------

    def _curve_matrix(self, u, s) -> tuple[np.ndarray, dict]:
        """Per-study coefficient matrix B (S x J) plus byproducts for gradients."""
        lay = self.layout
        aux: dict = {}
        if not self.J:
            return np.zeros((self.S, 0)), aux
        if not self.hier:
            raw = lay.get(u, "curve_coef")
            beta = np.exp(raw) if self.constraint is CurveConstraint.NONNEGATIVE else raw
            aux["beta"] = beta
            return np.broadcast_to(beta, (self.S, self.J)), aux
        sb = s["sigma_curve"]
        mean = lay.get(u, "curve_mean")
        if self.n_corr:
            ell, pullback = corr_factor_pullback(lay.get(u, "corr_factor"), self.S)
        else:
            ell, pullback = np.ones((1, 1)), lambda gl: np.zeros(0)
        amat = sb * self.curve_scale[:, None] * ell
        aux.update(ell=ell, pullback=pullback, amat=amat, mean=mean)
        raw = lay.get(u, "curve_coef").reshape(self.S, self.J)
        if self.constraint is CurveConstraint.NONNEGATIVE:
            bmat = np.exp(raw)
            aux["raw"] = raw
        else:
            bmat = mean[None if self.P == self.J else ...] + amat @ raw
            if self.P == self.J:
                bmat = mean[None, :] + amat @ raw
            else:
                bmat = mean[0] + amat @ raw
            aux["umat"] = raw
        aux["bmat"] = bmat
        return bmat, aux

    # -- density -----------------------------------------------------------------

    def logp_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        lay = self.layout
        s = self.scales(u)
        grad = np.zeros_like(u)

        psi = lay.get(u, "study_intercept")
        xi_raw = lay.get(u, "subject_effect")
        s_psi, s_xi = s["sigma_study"], s["sigma_subject"]

        lin = psi[self._s] + s_xi * xi_raw[self._i]
        if self.C:
            gamma = lay.get(u, "covariate_coef")
            lin = lin + self.data.covariates @ gamma
        if self.D:
            d_raw = lay.get(u, "time_coef")
            s_d = s["sigma_time"]
            lin = lin + self.design.time_matrix @ (s_d * d_raw)
        bmat, aux = self._curve_matrix(u, s)
        if self.J:
            lin = lin + np.einsum("ij,ij->i", self.design.erc_matrix, bmat[self._s])

        mu = expit(lin)
        loglik = self._log_choose + float(np.sum(self._y * lin - self._t * _softplus(lin)))
        g_lin = self._y - self._t * mu

        logprior = 0.0
        logjac = 0.0

        # study intercepts (centered)
        logprior += -0.5 * self.S * LOG_2PI - self.S * np.log(s_psi) - 0.5 * np.sum(psi**2) / s_psi**2
        lay.set_(grad, "study_intercept",
                 np.bincount(self._s, g_lin, self.S) - psi / s_psi**2)

        # subject effects (non-centered)
        logprior += -0.5 * self.N * LOG_2PI - 0.5 * np.sum(xi_raw**2)
        xi_counts = np.bincount(self._i, g_lin, self.N)
        lay.set_(grad, "subject_effect", s_xi * xi_counts - xi_raw)
        xi_dot = float(np.dot(xi_raw, xi_counts))

        cov_quad = 0.0
        if self.C:
            s_g = s["sigma_covariate"]
            cov_quad = float(np.sum(gamma**2))
            logprior += -0.5 * self.C * LOG_2PI - self.C * np.log(s_g) - 0.5 * cov_quad / s_g**2
            lay.set_(grad, "covariate_coef", self.data.covariates.T @ g_lin - gamma / s_g**2)

        time_dot = 0.0
        if self.D:
            logprior += -0.5 * self.D * LOG_2PI - 0.5 * np.sum(d_raw**2)
            ht_g = self.design.time_matrix.T @ g_lin
            lay.set_(grad, "time_coef", s_d * ht_g - d_raw)
            time_dot = float(np.dot(d_raw, ht_g))

        curve_sigma_grad = 0.0
        if self.J:
            weighted = self.design.erc_matrix * g_lin[:, None]
            m_mat = np.zeros((self.S, self.J))
            for j in range(self.J):
                m_mat[:, j] = np.bincount(self._s, weighted[:, j], self.S)
            s_b = s["sigma_curve"]
            if not self.hier:
                beta = aux["beta"]
                quad = float(np.sum(beta**2))
                logprior += -0.5 * self.J * LOG_2PI - self.J * np.log(s_b) - 0.5 * quad / s_b**2
                g_beta = m_mat.sum(axis=0) - beta / s_b**2
                if self.constraint is CurveConstraint.NONNEGATIVE:
                    logjac += float(np.sum(lay.get(u, "curve_coef")))
                    lay.set_(grad, "curve_coef", g_beta * beta + 1.0)
                else:
                    lay.set_(grad, "curve_coef", g_beta)
                curve_sigma_grad = -self.J + quad / s_b**2
            else:
                curve_sigma_grad = self._hier_curve_terms(
                    u, s, aux, m_mat, grad, add_logp=lambda v: None
                )
                logprior += self._hier_logp
                logjac += self._hier_logjac

        for name, hn in self._sampled_scales:
            sigma = s[name]
            logprior += halfnormal_logpdf(sigma, hn.m, hn.v)
            logjac += np.log(sigma)
            g_hn = -sigma * (sigma - hn.m) / hn.v + 1.0
            if name == "sigma_study":
                g_lik = -self.S + float(np.sum(psi**2)) / s_psi**2
            elif name == "sigma_subject":
                g_lik = s_xi * xi_dot
            elif name == "sigma_covariate":
                g_lik = -self.C + cov_quad / s["sigma_covariate"] ** 2
            elif name == "sigma_time":
                g_lik = s["sigma_time"] * time_dot
            else:  # sigma_curve
                g_lik = curve_sigma_grad
            lay.set_(grad, name, g_lik + g_hn)

        logp = loglik + logprior + logjac
        if not np.isfinite(logp):
            return -np.inf, np.zeros_like(u)
        return float(logp), grad

    def _hier_curve_terms(self, u, s, aux, m_mat, grad, add_logp) -> float:
        """Hierarchical curve block: fills grad slices, stashes prior/jacobian
        pieces on self, and returns d(logp)/d(log sigma_curve)."""
        lay = self.layout
        s_b = s["sigma_curve"]
        mean = aux["mean"]
        amat = aux["amat"]
        ell = aux["ell"]
        pullback = aux["pullback"]
        bmat = aux["bmat"]
        logp_acc = 0.0
        logjac_acc = 0.0
        sigma_grad = 0.0

        corr_val = 0.0
        corr_grad = None
        if self.n_corr:
            corr_val, corr_grad = corr_prior_logdensity_and_grad(
                lay.get(u, "corr_factor"), self.S, self.priors.lkj_shape
            )
            logp_acc += corr_val

        mean_quad = float(np.sum(mean**2))
        logp_acc += -0.5 * self.P * LOG_2PI - self.P * np.log(s_b) - 0.5 * mean_quad / s_b**2
        g_mean_prior = -mean / s_b**2
        sigma_grad += -self.P + mean_quad / s_b**2

        if self.constraint is CurveConstraint.FREE:
            umat = aux["umat"]
            logp_acc += -0.5 * self.S * self.J * LOG_2PI - 0.5 * float(np.sum(umat**2))
            lay.set_(grad, "curve_coef", (amat.T @ m_mat - umat).ravel())
            if self.P == 1:
                lay.set_(grad, "curve_mean", [float(np.sum(m_mat)) + g_mean_prior[0]])
            else:
                lay.set_(grad, "curve_mean", m_mat.sum(axis=0) + g_mean_prior)
            ga = m_mat @ umat.T
            ga = np.tril(ga)
            if self.n_corr:
                gl = s_b * self.curve_scale[:, None] * ga
                lay.set_(grad, "corr_factor", pullback(gl) + corr_grad)
            sigma_grad += float(np.sum(ga * amat))
        else:
            # centered log-normal-positive coefficients under the MVN prior
            raw = aux["raw"]
            logjac_acc += float(np.sum(raw))
            resid = bmat - (mean[0] if self.P == 1 else mean[None, :])
            tmat = solve_triangular(amat, resid, lower=True)
            qmat = solve_triangular(amat.T, tmat, lower=False)
            logdet_a = float(np.sum(np.log(np.diag(amat))))
            logp_acc += -0.5 * self.S * self.J * LOG_2PI - self.J * logdet_a - 0.5 * float(
                np.sum(tmat**2)
            )
            g_b = m_mat - qmat
            lay.set_(grad, "curve_coef", (g_b * bmat).ravel() + 1.0)
            if self.P == 1:
                lay.set_(grad, "curve_mean", [float(np.sum(qmat)) + g_mean_prior[0]])
            else:
                lay.set_(grad, "curve_mean", qmat.sum(axis=0) + g_mean_prior)
            ga = qmat @ tmat.T
            ga = np.tril(ga)
            ga -= self.J * np.diag(1.0 / np.diag(amat))
            if self.n_corr:
                gl = s_b * self.curve_scale[:, None] * ga
                lay.set_(grad, "corr_factor", pullback(gl) + corr_grad)
            sigma_grad += float(np.sum(ga * amat))

        self._hier_logp = logp_acc
        self._hier_logjac = logjac_acc
        return sigma_grad

    def components(self, u: np.ndarray) -> dict[str, float]:
        """Likelihood / prior / Jacobian split (recomputed via logp_grad pieces)."""
        lay = self.layout
        s = self.scales(u)
        psi = lay.get(u, "study_intercept")
        xi_raw = lay.get(u, "subject_effect")
        lin = psi[self._s] + s["sigma_subject"] * xi_raw[self._i]
        if self.C:
            lin = lin + self.data.covariates @ lay.get(u, "covariate_coef")
        if self.D:
            lin = lin + self.design.time_matrix @ (s["sigma_time"] * lay.get(u, "time_coef"))
        bmat, _ = self._curve_matrix(u, s)
        if self.J:
            lin = lin + np.einsum("ij,ij->i", self.design.erc_matrix, bmat[self._s])
        lik = self._log_choose + float(np.sum(self._y * lin - self._t * _softplus(lin)))
        total, _ = self.logp_grad(u)
        # jacobian: log sigma terms plus log-coefficient terms under NONNEGATIVE
        jac = sum(float(np.log(s[name])) for name, _ in self._sampled_scales)
        if self.J and self.constraint is CurveConstraint.NONNEGATIVE:
            jac += float(np.sum(lay.get(u, "curve_coef")))
        return {"likelihood": lik, "prior": total - lik - jac, "jacobian": jac}

    # -- constrain / unconstrain ---------------------------------------------------

    def constrain(self, u: np.ndarray) -> np.ndarray:
        lay = self.layout
        s = self.scales(u)
        out = np.array(u, dtype=float, copy=True)
        lay.set_(out, "subject_effect", s["sigma_subject"] * lay.get(u, "subject_effect"))
        if self.D:
            lay.set_(out, "time_coef", s["sigma_time"] * lay.get(u, "time_coef"))
        if self.J:
            bmat, aux = self._curve_matrix(u, s)
            if self.hier:
                lay.set_(out, "curve_coef", bmat.ravel())
                if self.n_corr:
                    ell = aux["ell"]
                    lay.set_(out, "corr_factor", ell[np.tril_indices(self.S, -1)])
            elif self.constraint is CurveConstraint.NONNEGATIVE:
                lay.set_(out, "curve_coef", aux["beta"])
        for name, _ in self._sampled_scales:
            lay.set_(out, name, s[name])
        return out

    def unconstrain(self, params: np.ndarray) -> np.ndarray:
        lay = self.layout
        out = np.array(params, dtype=float, copy=True)
        sc: dict[str, float] = {}
        for name, _ in self._sampled_scales:
            val = float(lay.get(params, name)[0])
            if val <= 0:
                raise ValueError(f"{name} must be positive")
            sc[name] = val
            lay.set_(out, name, np.log(val))
        def scale_of(name, fixed):
            return sc.get(name, float(fixed) if _is_fixed(fixed) else None) or sc[name]
        s_xi = scale_of("sigma_subject", self.priors.sigma_subject)
        lay.set_(out, "subject_effect", lay.get(params, "subject_effect") / s_xi)
        if self.D:
            s_d = scale_of("sigma_time", self.priors.sigma_time)
            lay.set_(out, "time_coef", lay.get(params, "time_coef") / s_d)
        if self.J:
            if self.hier:
                ell = np.eye(self.S)
                if self.n_corr:
                    low = lay.get(params, "corr_factor")
                    ell = np.zeros((self.S, self.S))
                    ell[np.tril_indices(self.S, -1)] = low
                    for i in range(self.S):
                        ell[i, i] = np.sqrt(max(1.0 - np.sum(ell[i, :i] ** 2), 1e-300))
                    lay.set_(out, "corr_factor", corr_factor_to_unconstrained(ell))
                bmat = lay.get(params, "curve_coef").reshape(self.S, self.J)
                if self.constraint is CurveConstraint.NONNEGATIVE:
                    if np.any(bmat <= 0):
                        raise ValueError("nonnegative curve coefficients must be > 0")
                    lay.set_(out, "curve_coef", np.log(bmat).ravel())
                else:
                    s_b = scale_of("sigma_curve", self.priors.sigma_curve)
                    mean = lay.get(params, "curve_mean")
                    amat = s_b * self.curve_scale[:, None] * ell
                    resid = bmat - (mean[0] if self.P == 1 else mean[None, :])
                    umat = solve_triangular(amat, resid, lower=True)
                    lay.set_(out, "curve_coef", umat.ravel())
            elif self.constraint is CurveConstraint.NONNEGATIVE:
                beta = lay.get(params, "curve_coef")
                if np.any(beta <= 0):
                    raise ValueError("nonnegative curve coefficients must be > 0")
                lay.set_(out, "curve_coef", np.log(beta))
        return out

    def curve_coef_draws(self, constrained: np.ndarray) -> np.ndarray:
        """Curve coefficients per draw: (..., S, J) in hierarchical mode,
        (..., J) in shared mode."""
        vals = self.layout.get(constrained, "curve_coef")
        if self.hier:
            return vals.reshape(constrained.shape[:-1] + (self.S, self.J))
        return vals


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
