"""Hierarchical exposure-concentration model as an unconstrained log density.

Observations are normal around a household long-term level (group mean plus
cluster and household random effects) plus a smooth trend in coarse model
time. Random effects use the non-centered parameterization; positive scales
are sampled on the log scale with half-normal priors on the constrained
value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ExposureDataset
from .splines import natural_cubic_centered, quantile_knots
from .transforms import HalfNormal, ParamLayout, halfnormal_logpdf

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ExposurePriors:
    """Priors for the exposure model; floats fix a scale, HalfNormal samples it."""

    eta0: float | None = None            # None: mean of the log observations
    sigma_group: HalfNormal | float = HalfNormal(0.0, 2.0)
    sigma_obs: HalfNormal | float = HalfNormal(0.0, 1.0)
    sigma_household: HalfNormal | float = HalfNormal(0.0, 1.0)
    sigma_cluster: HalfNormal | float = HalfNormal(0.0, 1.0)
    theta0: float = 0.0
    sigma_trend: HalfNormal | float = 5.0
    trend_df: int = 5                    # 0 disables the trend term


def _is_fixed(prior: HalfNormal | float) -> bool:
    return not isinstance(prior, HalfNormal)


class ExposureModel:
    """Compiled log density for one study's exposure data."""

    def __init__(self, data: ExposureDataset, priors: ExposurePriors):
        self.data = data
        self.priors = priors
        self.eta0 = float(priors.eta0) if priors.eta0 is not None else float(np.mean(data.w))
        self.clustered = data.has_clusters
        self.df = int(priors.trend_df)

        if self.df > 0:
            taus = data.model_time.astype(float)
            self.trend_knots = quantile_knots(taus, self.df - 1)
            uniq, inv = np.unique(taus, return_inverse=True)
            basis = natural_cubic_centered(uniq, self.df, self.trend_knots)
            if basis.n_basis != self.df:
                raise ValueError("trend basis dimension does not match trend_df")
            self.trend_basis_unique = basis
            self.trend_unique_times = uniq
            self.F = basis.values[inv]
        else:
            self.trend_knots = None
            self.F = np.zeros((data.n_obs, 0))

        sizes = [("group_mean", data.n_groups)]
        if self.clustered:
            sizes.append(("cluster_effect", data.n_clusters))
        sizes.append(("household_effect", data.n_households))
        if self.df > 0:
            sizes.append(("trend_coef", self.df))
        self._sampled_scales: list[tuple[str, HalfNormal]] = []
        for name, prior in (
            ("sigma_obs", priors.sigma_obs),
            ("sigma_household", priors.sigma_household),
            ("sigma_cluster", priors.sigma_cluster if self.clustered else 1.0),
            ("sigma_group", priors.sigma_group),
            ("sigma_trend", priors.sigma_trend if self.df > 0 else 1.0),
        ):
            if name == "sigma_cluster" and not self.clustered:
                continue
            if name == "sigma_trend" and self.df == 0:
                continue
            if not _is_fixed(prior):
                sizes.append((name, 1))
                self._sampled_scales.append((name, prior))
        self.layout = ParamLayout(sizes)
        self.dim = self.layout.dim

        # dense index arrays for scatter sums
        self._g = data.group
        self._k = data.cluster
        self._h = data.household
        self._w = data.w
        self._n = data.n_obs

    # -- scale resolution ---------------------------------------------------

    def _scale(self, u: np.ndarray, name: str, fixed: HalfNormal | float) -> float:
        if name in self.layout:
            return float(np.exp(self.layout.get(u, name)[0]))
        return float(fixed)

    def scales(self, u: np.ndarray) -> dict[str, float]:
        p = self.priors
        out = {
            "sigma_obs": self._scale(u, "sigma_obs", p.sigma_obs),
            "sigma_household": self._scale(u, "sigma_household", p.sigma_household),
            "sigma_group": self._scale(u, "sigma_group", p.sigma_group),
        }
        if self.clustered:
            out["sigma_cluster"] = self._scale(u, "sigma_cluster", p.sigma_cluster)
        if self.df > 0:
            out["sigma_trend"] = self._scale(u, "sigma_trend", p.sigma_trend)
        return out

    # -- density ------------------------------------------------------------

    def logp_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        lay = self.layout
        s = self.scales(u)
        sw, sh, sg = s["sigma_obs"], s["sigma_household"], s["sigma_group"]
        eta = lay.get(u, "group_mean")
        a1 = lay.get(u, "household_effect")
        grad = np.zeros_like(u)

        mu = eta[self._g] + sh * a1[self._h]
        if self.clustered:
            sk = s["sigma_cluster"]
            a0 = lay.get(u, "cluster_effect")
            mu = mu + sk * a0[self._k]
        if self.df > 0:
            st = s["sigma_trend"]
            theta = lay.get(u, "trend_coef")
            mu = mu + self.F @ theta
        resid = self._w - mu

        loglik = -0.5 * self._n * LOG_2PI - self._n * np.log(sw) - 0.5 * np.sum(resid**2) / sw**2
        g_mu = resid / sw**2

        logprior = -0.5 * (self.data.n_households) * LOG_2PI - 0.5 * np.sum(a1**2)
        lay.set_(grad, "household_effect", sh * np.bincount(self._h, g_mu, self.data.n_households) - a1)
        hh_dot = float(np.dot(a1, np.bincount(self._h, g_mu, self.data.n_households)))

        cl_dot = 0.0
        if self.clustered:
            logprior += -0.5 * self.data.n_clusters * LOG_2PI - 0.5 * np.sum(a0**2)
            cl_counts = np.bincount(self._k, g_mu, self.data.n_clusters)
            lay.set_(grad, "cluster_effect", sk * cl_counts - a0)
            cl_dot = float(np.dot(a0, cl_counts))

        logprior += (
            -0.5 * self.data.n_groups * LOG_2PI
            - self.data.n_groups * np.log(sg)
            - 0.5 * np.sum((eta - self.eta0) ** 2) / sg**2
        )
        lay.set_(
            grad, "group_mean",
            np.bincount(self._g, g_mu, self.data.n_groups) - (eta - self.eta0) / sg**2,
        )

        th_quad = 0.0
        if self.df > 0:
            dth = theta - self.priors.theta0
            th_quad = float(np.sum(dth**2))
            logprior += -0.5 * self.df * LOG_2PI - self.df * np.log(st) - 0.5 * th_quad / st**2
            lay.set_(grad, "trend_coef", self.F.T @ g_mu - dth / st**2)

        logjac = 0.0
        for name, hn in self._sampled_scales:
            sigma = s[name]
            logprior += halfnormal_logpdf(sigma, hn.m, hn.v)
            logjac += np.log(sigma)
            g_hn = -sigma * (sigma - hn.m) / hn.v + 1.0
            if name == "sigma_obs":
                g_lik = -self._n + np.sum(resid**2) / sw**2
            elif name == "sigma_household":
                g_lik = sh * hh_dot
            elif name == "sigma_cluster":
                g_lik = sk * cl_dot
            elif name == "sigma_group":
                g_lik = -self.data.n_groups + np.sum((eta - self.eta0) ** 2) / sg**2
            else:  # sigma_trend
                g_lik = -self.df + th_quad / st**2
            lay.set_(grad, name, g_lik + g_hn)

        logp = loglik + logprior + logjac
        if not np.isfinite(logp):
            return -np.inf, np.zeros_like(u)
        return float(logp), grad

    def components(self, u: np.ndarray) -> dict[str, float]:
        """Likelihood / prior / Jacobian split, for decomposability checks."""
        lay = self.layout
        s = self.scales(u)
        eta = lay.get(u, "group_mean")
        a1 = lay.get(u, "household_effect")
        mu = eta[self._g] + s["sigma_household"] * a1[self._h]
        prior = -0.5 * self.data.n_households * LOG_2PI - 0.5 * np.sum(a1**2)
        if self.clustered:
            a0 = lay.get(u, "cluster_effect")
            mu = mu + s["sigma_cluster"] * a0[self._k]
            prior += -0.5 * self.data.n_clusters * LOG_2PI - 0.5 * np.sum(a0**2)
        if self.df > 0:
            theta = lay.get(u, "trend_coef")
            mu = mu + self.F @ theta
            st = s["sigma_trend"]
            prior += (
                -0.5 * self.df * LOG_2PI - self.df * np.log(st)
                - 0.5 * np.sum((theta - self.priors.theta0) ** 2) / st**2
            )
        sw, sg = s["sigma_obs"], s["sigma_group"]
        lik = -0.5 * self._n * LOG_2PI - self._n * np.log(sw) - 0.5 * np.sum((self._w - mu) ** 2) / sw**2
        prior += (
            -0.5 * self.data.n_groups * LOG_2PI - self.data.n_groups * np.log(sg)
            - 0.5 * np.sum((eta - self.eta0) ** 2) / sg**2
        )
        jac = 0.0
        for name, hn in self._sampled_scales:
            prior += halfnormal_logpdf(s[name], hn.m, hn.v)
            jac += np.log(s[name])
        return {"likelihood": float(lik), "prior": float(prior), "jacobian": float(jac)}

    # -- constrain / unconstrain ---------------------------------------------

    def constrain(self, u: np.ndarray) -> np.ndarray:
        """Map unconstrained vector to natural-scale parameters (same layout)."""
        lay = self.layout
        s = self.scales(u)
        out = np.array(u, dtype=float, copy=True)
        lay.set_(out, "household_effect", s["sigma_household"] * lay.get(u, "household_effect"))
        if self.clustered:
            lay.set_(out, "cluster_effect", s["sigma_cluster"] * lay.get(u, "cluster_effect"))
        for name, _ in self._sampled_scales:
            lay.set_(out, name, s[name])
        return out

    def unconstrain(self, params: np.ndarray) -> np.ndarray:
        lay = self.layout
        out = np.array(params, dtype=float, copy=True)
        for name, _ in self._sampled_scales:
            val = lay.get(params, name)
            if np.any(val <= 0):
                raise ValueError(f"{name} must be positive")
            lay.set_(out, name, np.log(val))
        sc = {
            name: float(lay.get(params, name)[0]) if name in lay else None
            for name in ("sigma_household", "sigma_cluster")
        }
        sh = sc["sigma_household"] if sc["sigma_household"] is not None else float(self.priors.sigma_household)
        lay.set_(out, "household_effect", lay.get(params, "household_effect") / sh)
        if self.clustered:
            sk = sc["sigma_cluster"] if sc["sigma_cluster"] is not None else float(self.priors.sigma_cluster)
            lay.set_(out, "cluster_effect", lay.get(params, "cluster_effect") / sk)
        return out

    # -- derived quantities ---------------------------------------------------

    def household_level_draws(self, constrained: np.ndarray) -> np.ndarray:
        """Long-term household levels (group + cluster + household effects),
        excluding the trend, for constrained draws of shape (..., dim)."""
        lay = self.layout
        eta = lay.get(constrained, "group_mean")
        a1 = lay.get(constrained, "household_effect")
        hg = self.data.household_group
        out = eta[..., hg] + a1
        if self.clustered:
            a0 = lay.get(constrained, "cluster_effect")
            out = out + a0[..., self.data.household_cluster]
        return out

    def fitted_value_draws(self, constrained: np.ndarray) -> np.ndarray:
        """Per-observation mean (household level plus trend) for draws."""
        hh = self.household_level_draws(constrained)
        out = hh[..., self._h]
        if self.df > 0:
            theta = self.layout.get(constrained, "trend_coef")
            out = out + theta @ self.F.T
        return out

    def trend_at_observations(self, constrained: np.ndarray) -> np.ndarray:
        if self.df == 0:
            base = np.zeros(self._n)
            return np.broadcast_to(base, constrained.shape[:-1] + (self._n,)).copy()
        theta = self.layout.get(constrained, "trend_coef")
        return theta @ self.F.T
