"""Trust-region re-anchoring of reverse diffusion steps.

Replacing the model's clean-sample anchor x~0 by an optimized anchor x^0 moves
the reverse kernel mean by anchor_coef * (x^0 - x~0); with equal covariances the
KL divergence between the original and re-anchored kernels is

    KL = anchor_coef^2 / (2 sigma^2) * ||x^0 - x~0||^2.

Bounding that KL by a per-step budget kappa is therefore an exact Euclidean
ball constraint on the anchor,

    radius = sqrt(2 kappa) * sigma / |anchor_coef|,

and the re-anchoring program maximizes

    guidance_weight * R(x) - anchor_coef^2 / (2 sigma^2) * ||x - x~0||^2

over that ball. The solver is projected gradient ascent with backtracking line
search, initialized at x~0, so the objective value never decreases below the
initialization's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EQUALITY_GROUPS = ("kin", "state")
STANDARD_GROUPS = ("kin", "state", "head", "road", "safe")


@dataclass
class ObjectiveReport:
    """Value, gradient and residual bookkeeping of a guidance objective.

    residuals maps group names to flat arrays; kin/state are equality groups,
    everything else is an inequality g <= 0. residual_frames carries the frame
    index of each entry (parallel arrays) for CSV export.
    """

    value: float
    gradient: np.ndarray
    residuals: dict = field(default_factory=dict)
    residual_frames: dict = field(default_factory=dict)

    def __post_init__(self):
        for group in STANDARD_GROUPS:
            self.residuals.setdefault(group, np.zeros(0))
            self.residual_frames.setdefault(
                group, np.zeros(len(self.residuals[group]), dtype=int))

    @property
    def active_set(self):
        """(group, index) pairs of violated inequality entries."""
        out = []
        for group, res in self.residuals.items():
            if group in EQUALITY_GROUPS:
                continue
            for idx in np.flatnonzero(np.asarray(res) > 0.0):
                out.append((group, int(idx)))
        return tuple(out)


def make_report(value, gradient, residuals=None, residual_frames=None):
    return ObjectiveReport(
        value=float(value),
        gradient=np.asarray(gradient, dtype=float),
        residuals=dict(residuals or {}),
        residual_frames=dict(residual_frames or {}),
    )


@dataclass(frozen=True)
class TrustRegionParams:
    """Per-step re-anchoring knobs.

    Each field is a scalar or an array indexed directly by the step t.
    kl_budget is the KL bound kappa; guidance_weight scales the objective;
    radius_override, when set, replaces the kappa-derived ball radius (and is
    the only legal path at sigma_t = 0, where the KL is undefined).
    """

    kl_budget: object = 1.0
    guidance_weight: object = 1.0
    radius_override: object = None

    def _at(self, value, t):
        if value is None:
            return None
        arr = np.asarray(value, dtype=float)
        return float(arr) if arr.ndim == 0 else float(arr[int(t)])

    def kl_budget_at(self, t):
        return self._at(self.kl_budget, t)

    def guidance_weight_at(self, t):
        return self._at(self.guidance_weight, t)

    def radius_override_at(self, t):
        return self._at(self.radius_override, t)


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 80
    grad_tol: float = 1e-9
    step_init: float = 1.0
    backtrack_factor: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 40
    step_grow: float = 1.5


def kernel_kl(anchor_a, anchor_b, t, sched):
    """KL between equal-variance reverse kernels differing only in anchor."""
    t = int(t)
    if not (1 <= t <= sched.num_steps):
        raise ValueError(f"step t={t} outside [1, {sched.num_steps}]")
    sigma = sched.sigmas[t]
    if sigma <= 0.0:
        raise ValueError(f"kernel KL undefined at sigma_t = 0 (t={t})")
    diff = np.asarray(anchor_a, dtype=float) - np.asarray(anchor_b, dtype=float)
    coef = sched.anchor_coef[t]
    return coef**2 / (2.0 * sigma**2) * float(np.sum(diff**2))


def trust_radius(t, params, sched):
    """Anchor-space ball radius for the step's KL budget (or the override)."""
    t = int(t)
    override = params.radius_override_at(t)
    if override is not None:
        if override < 0:
            raise ValueError("radius override must be non-negative")
        return override
    kappa = params.kl_budget_at(t)
    if kappa is None:
        raise ValueError("neither kl_budget nor radius_override is set")
    if kappa < 0:
        raise ValueError("kl_budget must be non-negative")
    sigma = sched.sigmas[t]
    if sigma <= 0.0:
        raise ValueError(
            f"kappa-derived radius undefined at sigma_t = 0 (t={t}); use radius_override")
    return float(np.sqrt(2.0 * kappa) * sigma / abs(sched.anchor_coef[t]))


def estimate_multipliers(inequality_residuals, penalty_weight):
    """Penalty-method multiplier estimates mu = 2 w [g]_+ per entry.

    penalty_weight is a scalar or a mapping group -> weight.
    """
    out = {}
    for group, res in inequality_residuals.items():
        w = penalty_weight[group] if isinstance(penalty_weight, dict) else penalty_weight
        out[group] = 2.0 * w * np.maximum(np.asarray(res, dtype=float), 0.0)
    return out


@dataclass
class ReanchorResult:
    x_hat: np.ndarray
    objective_value: float
    kl_used: float
    radius: float
    report: ObjectiveReport
    multipliers: dict
    iterations: int
    converged: bool

    @property
    def residuals(self):
        return self.report.residuals


def _project_ball(x, center, radius, ball):
    if not np.isfinite(radius):
        return x
    delta = x[ball] - center[ball]
    norm = float(np.sqrt(np.sum(delta**2)))
    if norm <= radius or norm == 0.0:
        return x
    out = x.copy()
    out[ball] = center[ball] + delta * (radius / norm)
    return out


def reanchor(x_tilde, x_t, t, sched, objective, params, cfg=None, ball=None,
             x_init=None):
    """Solve the KL-bounded anchor program at step t.

    objective(x) must return an ObjectiveReport with a gradient matching x.
    `ball` optionally restricts the stabilizer and trust-region ball to a
    subset of decision components (index array or slice); the rest of the
    decision vector (auxiliary controls) moves freely. x_t is the current
    noisy state the caller's reverse step will mix the result with; it does
    not enter the anchor program itself. x_init optionally warm-starts the
    iterate (projected into the ball, kept only if its merit beats x_tilde);
    the trust region stays centered on x_tilde either way.
    """
    cfg = cfg or SolverConfig()
    x_tilde = np.asarray(x_tilde, dtype=float).copy()
    t = int(t)
    if not (1 <= t <= sched.num_steps):
        raise ValueError(f"step t={t} outside [1, {sched.num_steps}]")
    radius = trust_radius(t, params, sched)
    lam = params.guidance_weight_at(t)
    sigma = sched.sigmas[t]
    coef = sched.anchor_coef[t]
    stabilizer = coef**2 / (2.0 * sigma**2) if sigma > 0.0 else 0.0
    ball = np.arange(x_tilde.size) if ball is None else ball

    def merit(x):
        rep = objective(x)
        delta = x[ball] - x_tilde[ball]
        val = lam * rep.value - stabilizer * float(np.sum(delta**2))
        grad = lam * np.asarray(rep.gradient, dtype=float).copy()
        grad[ball] -= 2.0 * stabilizer * delta
        return val, grad, rep

    if radius == 0.0:
        rep = objective(x_tilde)
        return _finish(x_tilde, x_tilde, lam * rep.value, 0.0, radius, rep,
                       objective, sigma, coef, ball, lam, iterations=0, converged=True)

    x = x_tilde.copy()
    value, grad, rep = merit(x)
    if x_init is not None:
        warm = _project_ball(np.asarray(x_init, dtype=float), x_tilde, radius, ball)
        w_value, w_grad, w_rep = merit(warm)
        if w_value > value:
            x, value, grad, rep = warm, w_value, w_grad, w_rep
    # open with a trial step at ball scale so the line search starts from a
    # plausible magnitude instead of backtracking down from unit step
    gnorm0 = float(np.sqrt(np.sum(grad[ball] ** 2)))
    step = cfg.step_init
    if np.isfinite(radius) and gnorm0 > 0.0:
        step = min(step, cfg.step_init * radius / gnorm0)
    iterations = 0
    converged = False
    for _ in range(cfg.max_iters):
        gnorm = float(np.sqrt(np.sum(grad**2)))
        if gnorm <= cfg.grad_tol:
            converged = True
            break
        iterations += 1
        accepted = False
        trial_step = step
        for _ in range(cfg.max_backtracks):
            trial = _project_ball(x + trial_step * grad, x_tilde, radius, ball)
            move = trial - x
            if float(np.sqrt(np.sum(move**2))) <= 1e-14 * (1.0 + float(np.sqrt(np.sum(x**2)))):
                break
            t_value, t_grad, t_rep = merit(trial)
            if t_value >= value + cfg.armijo * float(np.dot(grad, move)):
                # spectral trial step for the next iteration; the monotone
                # backtracking above still guards every accept
                s_vec = trial - x
                y_vec = grad - t_grad
                sy = float(np.dot(s_vec, y_vec))
                if sy > 0.0:
                    step = float(np.dot(s_vec, s_vec)) / sy
                else:
                    step = trial_step * cfg.step_grow
                x, value, grad, rep = trial, t_value, t_grad, t_rep
                accepted = True
                break
            trial_step *= cfg.backtrack_factor
        if not accepted:
            converged = True
            break
    else:
        converged = converged or False

    return _finish(x, x_tilde, value, None, radius, rep, objective, sigma, coef,
                   ball, lam, iterations=iterations, converged=converged)


def _finish(x_hat, x_tilde, value, kl, radius, rep, objective, sigma, coef, ball,
            lam, iterations, converged):
    if kl is None:
        delta = x_hat[ball] - x_tilde[ball]
        kl = (coef**2 / (2.0 * sigma**2) * float(np.sum(delta**2))
              if sigma > 0.0 else float("nan"))
    weights = getattr(objective, "multiplier_weights", None)
    multipliers = {}
    if weights:
        # the solved program scales the whole objective by the guidance weight,
        # so the effective penalty coefficient picks up the same factor
        ineq = {g: rep.residuals[g] for g in weights if g in rep.residuals}
        multipliers = estimate_multipliers(ineq, {g: lam * w for g, w in weights.items()})
    return ReanchorResult(
        x_hat=x_hat,
        objective_value=float(value),
        kl_used=kl,
        radius=float(radius),
        report=rep,
        multipliers=multipliers,
        iterations=iterations,
        converged=converged,
    )


def reanchor_batch(x_tilde, t, sched, value_and_grad, params, cfg=None):
    """Vectorized anchor program over a batch of independent instances.

    x_tilde: (N, n); value_and_grad(X) -> (values (N,), grads (N, n)). The
    ball and stabilizer cover the whole decision vector. Returns
    (x_hat, info) with info holding per-row objective values, kl_used and the
    iteration count. Used by the toy samplers where thousands of small
    programs run per reverse step.
    """
    cfg = cfg or SolverConfig()
    x_tilde = np.asarray(x_tilde, dtype=float)
    t = int(t)
    radius = trust_radius(t, params, sched)
    lam = params.guidance_weight_at(t)
    sigma = sched.sigmas[t]
    coef = sched.anchor_coef[t]
    stabilizer = coef**2 / (2.0 * sigma**2) if sigma > 0.0 else 0.0

    def merit(x):
        vals, grads = value_and_grad(x)
        delta = x - x_tilde
        m_vals = lam * vals - stabilizer * np.sum(delta**2, axis=1)
        m_grads = lam * grads - 2.0 * stabilizer * delta
        return m_vals, m_grads

    def project(x):
        if not np.isfinite(radius):
            return x
        delta = x - x_tilde
        norms = np.sqrt(np.sum(delta**2, axis=1))
        scale = np.ones_like(norms)
        over = norms > radius
        scale[over] = radius / norms[over]
        return x_tilde + delta * scale[:, None]

    if radius == 0.0:
        vals, _ = merit(x_tilde)
        info = {"value": vals, "kl_used": np.zeros(x_tilde.shape[0]), "iterations": 0}
        return x_tilde.copy(), info

    x = x_tilde.copy()
    value, grad = merit(x)
    steps = np.full(x.shape[0], cfg.step_init)
    live = np.ones(x.shape[0], dtype=bool)
    iterations = 0
    for _ in range(cfg.max_iters):
        gnorm = np.sqrt(np.sum(grad**2, axis=1))
        live &= gnorm > cfg.grad_tol
        if not live.any():
            break
        iterations += 1
        trial_steps = steps.copy()
        pending = live.copy()
        for _ in range(cfg.max_backtracks):
            if not pending.any():
                break
            trial = project(x + trial_steps[:, None] * grad)
            t_value, t_grad = merit(trial)
            move = trial - x
            gain = np.einsum("ij,ij->i", grad, move)
            stalled = np.sqrt(np.sum(move**2, axis=1)) <= 1e-14 * (
                1.0 + np.sqrt(np.sum(x**2, axis=1)))
            ok = pending & ~stalled & (t_value >= value + cfg.armijo * gain)
            x[ok] = trial[ok]
            value[ok] = t_value[ok]
            grad[ok] = t_grad[ok]
            steps[ok] = trial_steps[ok] * cfg.step_grow
            live[pending & stalled] = False
            pending &= ~ok & ~stalled
            trial_steps[pending] *= cfg.backtrack_factor
        live[pending] = False  # no improving step found at line-search floor

    delta = x - x_tilde
    kl = (coef**2 / (2.0 * sigma**2)) * np.sum(delta**2, axis=1) if sigma > 0 else \
        np.full(x.shape[0], np.nan)
    info = {"value": value, "kl_used": kl, "iterations": iterations}
    return x, info
