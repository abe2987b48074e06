"""Gaussian mixtures and the exact posterior-mean denoiser they admit.

For x_0 ~ sum_k w_k N(mu_k, Sigma_k) and the forward marginal
x_t = sqrt(ab) x_0 + sqrt(1 - ab) eps, the pair (x_0, x_t) is jointly Gaussian
per component, so E[x_0 | x_t] is available in closed form:

    marginal_k = N(sqrt(ab) mu_k,  ab Sigma_k + (1 - ab) I)
    r_k(x_t)  propto  w_k * marginal_k(x_t)             (log domain)
    m_k(x_t)  = mu_k + sqrt(ab) Sigma_k M_k^{-1} (x_t - sqrt(ab) mu_k)
    E[x_0|x_t] = sum_k r_k m_k

with M_k the component marginal covariance. This is the ground-truth denoiser
for the exactly solvable toy setting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray       # (K,)
    means: np.ndarray         # (K, d)
    covariances: np.ndarray   # (K, d, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        cov = np.asarray(self.covariances, dtype=float)
        if w.ndim != 1 or mu.ndim != 2 or cov.ndim != 3:
            raise ValueError("weights (K,), means (K,d), covariances (K,d,d) required")
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector (tol 1e-12)")
        for i in range(k):
            if not np.allclose(cov[i], cov[i].T, atol=1e-12):
                raise ValueError(f"covariance {i} not symmetric")
            try:
                np.linalg.cholesky(cov[i])
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"covariance {i} not positive definite") from exc
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def num_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def sample(self, n, rng):
        """Draw n points; component choices then component Gaussians."""
        comp = rng.choice(self.num_components, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k in range(self.num_components):
            mask = comp == k
            if not mask.any():
                continue
            chol = np.linalg.cholesky(self.covariances[k])
            z = rng.standard_normal((int(mask.sum()), self.dim))
            out[mask] = self.means[k] + z @ chol.T
        return out

    def log_pdf(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        parts = np.stack(
            [
                np.log(self.weights[k]) + _gaussian_logpdf(points, self.means[k], self.covariances[k])
                for k in range(self.num_components)
            ],
            axis=0,
        )
        return _logsumexp(parts, axis=0)


def _gaussian_logpdf(points, mean, cov):
    d = mean.shape[0]
    chol = np.linalg.cholesky(cov)
    diff = points - mean
    solved = np.linalg.solve(chol, diff.T)
    quad = np.sum(solved**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (quad + logdet + d * np.log(2.0 * np.pi))


def _logsumexp(a, axis):
    peak = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(peak, axis=axis) + np.log(np.sum(np.exp(a - peak), axis=axis))


def gmm_posterior_mean(x_t, t, gmm, sched):
    """Exact E[x_0 | x_t] under a Gaussian-mixture clean distribution.

    x_t may be (d,) or (N, d); t is a scalar step in 0..T (t = 0 returns x_t).
    Responsibilities are formed in the log domain for numerical stability.
    """
    x = np.asarray(x_t, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != gmm.dim:
        raise ValueError(f"points have dim {pts.shape[1]}, mixture has dim {gmm.dim}")
    if not (0 <= int(t) <= sched.num_steps):
        raise ValueError(f"step t={t} outside [0, {sched.num_steps}]")
    ab = sched.alpha_bars[int(t)]
    root = np.sqrt(ab)
    eye = np.eye(gmm.dim)

    log_resp = np.empty((gmm.num_components, pts.shape[0]))
    cond_means = np.empty((gmm.num_components, pts.shape[0], gmm.dim))
    for k in range(gmm.num_components):
        marg_mean = root * gmm.means[k]
        marg_cov = ab * gmm.covariances[k] + (1.0 - ab) * eye
        log_resp[k] = np.log(gmm.weights[k]) + _gaussian_logpdf(pts, marg_mean, marg_cov)
        gain = root * gmm.covariances[k] @ np.linalg.inv(marg_cov)
        cond_means[k] = gmm.means[k] + (pts - marg_mean) @ gain.T

    log_resp -= _logsumexp(log_resp, axis=0)
    resp = np.exp(log_resp)
    mean = np.einsum("kn,knd->nd", resp, cond_means)
    return mean[0] if single else mean
