"""Robust light estimation from traced Jacobians.

The objective is a Cauchy photometric error plus a logarithmic activation
penalty per light. It is minimized by projected gradient descent with
Armijo backtracking, and the whole thing sits inside a sequential Monte
Carlo loop that re-traces the Jacobians with a light distribution built from
the latest estimate.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .camera import CameraModel
from .envmap import EnvironmentMap, build_light_distribution, discretize_sphere
from .scene import AccelStructure
from .tracer import LightJacobian, TraceConfig, apply_jacobian, trace_jacobian

log = logging.getLogger(__name__)


class DegenerateProblem(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    cauchy_c: float = 0.05
    alpha: float | None = None  # None: alpha_rel times the strongest initial data pull / beta
    alpha_rel: float = 0.5
    beta: float = 0.1
    lambda_init: float = 1e-3
    step0: float | None = None  # None: inverse Lipschitz bound of the data term
    step_rule: str = "bb"  # "bb": Barzilai-Borwein trial step, "fixed": always step0
    backtrack: float = 0.5
    armijo_c1: float = 1e-4
    g_tol: float | None = None  # None: g_tol_rel * first projected-gradient norm
    g_tol_rel: float = 1e-6
    delta_tol: float = 1e-3
    warmup_scales: tuple = (1.0, 0.3, 0.1)  # Cauchy scales minimized before cauchy_c in round 0
    max_gd_iters: int = 2000
    max_smc_iters: int = 10
    normalize: bool = True

    def __post_init__(self):
        if self.cauchy_c <= 0:
            raise ValueError("cauchy_c must be positive")
        if self.alpha is not None and self.alpha < 0 or self.beta < 0:
            raise ValueError("activation weights must be nonnegative")
        if not 0 < self.alpha_rel:
            raise ValueError("alpha_rel must be positive")
        if self.lambda_init <= 0:
            raise ValueError("lambda_init must be positive")
        if self.step0 is not None and self.step0 <= 0:
            raise ValueError("step0 must be positive")
        if self.step_rule not in ("bb", "fixed"):
            raise ValueError("step_rule must be 'bb' or 'fixed'")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo_c1 < 1:
            raise ValueError("backtrack and armijo_c1 must lie in (0, 1)")
        if self.g_tol is not None and self.g_tol <= 0 or self.g_tol_rel <= 0:
            raise ValueError("gradient tolerance must be positive")
        if self.delta_tol <= 0 or self.max_gd_iters < 1 or self.max_smc_iters < 1:
            raise ValueError("invalid iteration limits")


# --------------------------------------------------------------------------
# loss pieces

def cauchy_loss(r, c: float):
    return 0.5 * c * c * np.log1p((np.asarray(r) / c) ** 2)


def cauchy_influence(r, c: float):
    """Derivative of the Cauchy loss with respect to the residual."""
    r = np.asarray(r)
    return r / (1.0 + (r / c) ** 2)


def activation_penalty(lam, alpha: float, beta: float) -> float:
    lam = np.asarray(lam, dtype=np.float64)
    return float(alpha * np.sum(np.log1p(beta * lam.sum(axis=1))))


def activation_gradient(lam, alpha: float, beta: float) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    g = alpha * beta / (1.0 + beta * lam.sum(axis=1))
    return np.repeat(g[:, None], lam.shape[1], axis=1)


def valid_pixels(ref, coverage=None) -> np.ndarray:
    """Flat boolean mask of pixels that enter the objective."""
    mask = np.asarray(ref.mask, dtype=bool).ravel()
    if coverage is not None:
        mask = mask & np.asarray(coverage, dtype=bool).ravel()
    return mask


def photometric_error(refs, renders, c: float, coverages=None):
    """Summed Cauchy loss over valid pixels and channels of every view.

    Returns (E_p, residuals) where residuals[k] is (n_valid_k, 3), reference
    minus render.
    """
    if len(refs) != len(renders):
        raise ValueError("need one render per reference view")
    coverages = coverages if coverages is not None else [None] * len(refs)
    total = 0.0
    residuals = []
    n_valid = 0
    for ref, img, cov in zip(refs, renders, coverages):
        if np.shape(img) != np.shape(ref.image):
            raise ValueError("render and reference dimensions differ")
        m = valid_pixels(ref, cov)
        r = ref.image.reshape(-1, 3)[m] - np.asarray(img).reshape(-1, 3)[m]
        residuals.append(r)
        total += float(cauchy_loss(r, c).sum())
        n_valid += int(m.sum())
    if n_valid == 0:
        raise DegenerateProblem("no valid pixels in any view")
    return total, residuals


# --------------------------------------------------------------------------
# problem state

@dataclass
class _View:
    At: np.ndarray  # (3, n_lights, n_valid), valid Jacobian rows per channel, light-major
    b: np.ndarray  # (3, n_valid) normalized reference


@dataclass
class EstimationState:
    lam: np.ndarray  # (N, 3) in normalized units
    jacobians: list = field(default_factory=list)
    objective: float = np.nan
    gd_iterations: int = 0
    smc_round: int = 0
    g_tol: float | None = None
    history: list = field(default_factory=list)
    _views: list = field(default_factory=list, repr=False)
    _alpha: float = 0.0
    _scale: float = 1.0


def _prepare_views(state: EstimationState, refs, scale: float) -> None:
    if len(state.jacobians) != len(refs):
        raise ValueError("need one Jacobian per reference view")
    views = []
    for J, ref in zip(state.jacobians, refs):
        m = valid_pixels(ref, J.coverage)
        At = np.ascontiguousarray(np.transpose(J.coefficients[m], (2, 1, 0)))
        b = np.ascontiguousarray((ref.image.reshape(-1, 3)[m] * scale).T, dtype=np.float64)
        views.append(_View(At, b))
    if sum(v.b.shape[1] for v in views) == 0:
        raise DegenerateProblem("no valid pixels in any view")
    state._views = views


def _forward(lam, v: _View) -> np.ndarray:
    """(3, n_valid) render of the valid pixels; zero lights are skipped when sparse."""
    out = np.empty(v.b.shape)
    for ch in range(3):
        idx = np.flatnonzero(lam[:, ch])
        if 4 * len(idx) < lam.shape[0]:
            out[ch] = lam[idx, ch] @ v.At[ch, idx]
        else:
            out[ch] = lam[:, ch] @ v.At[ch]
    return out


def _residuals(lam, views) -> list:
    return [v.b - _forward(lam, v) for v in views]


def _value(lam, res, cfg: ObjectiveConfig, alpha: float) -> float:
    E = 0.0
    for r in res:
        E += float(cauchy_loss(r, cfg.cauchy_c).sum())
    return E + activation_penalty(lam, alpha, cfg.beta)


def _gradient(lam, res, views, cfg: ObjectiveConfig, alpha: float) -> np.ndarray:
    g = activation_gradient(lam, alpha, cfg.beta)
    for r, v in zip(res, views):
        w = cauchy_influence(r, cfg.cauchy_c)
        for ch in range(3):
            g[:, ch] -= v.At[ch] @ w[ch]
    return g


def _evaluate(lam, views, cfg: ObjectiveConfig, alpha: float, grad: bool = True):
    res = _residuals(lam, views)
    E = _value(lam, res, cfg, alpha)
    return E, (_gradient(lam, res, views, cfg, alpha) if grad else None)


def objective_and_gradient(state: EstimationState, refs, cfg: ObjectiveConfig):
    """(E, dE/dlam) at ``state.lam`` for the state's current Jacobians.

    Works in the state's normalized units (see ``estimate_lights``); a fresh
    state built with ``scale=1`` uses raw reference values.
    """
    if not state._views:
        _prepare_views(state, refs, state._scale)
    return _evaluate(state.lam, state._views, cfg, _alpha_of(state, cfg))


def _alpha_of(state: EstimationState, cfg: ObjectiveConfig) -> float:
    return cfg.alpha if cfg.alpha is not None else state._alpha


def projected_gradient(lam, g) -> np.ndarray:
    pg = g.copy()
    pg[(lam <= 0.0) & (g > 0.0)] = 0.0
    return pg


def lipschitz_bound(views, iters: int = 30) -> float:
    """Largest squared singular value over channels, summed over views."""
    rng = np.random.default_rng(0)
    total = 0.0
    for v in views:
        best = 0.0
        for ch in range(3):
            At = v.At[ch]
            x = rng.random(At.shape[0]) + 0.1
            s = 0.0
            for _ in range(iters):
                y = At @ (x @ At)
                s = float(np.linalg.norm(y))
                if s == 0.0:
                    break
                x = y / s
            best = max(best, s)
        total += best
    return total


def gradient_descent(state: EstimationState, refs, cfg: ObjectiveConfig) -> np.ndarray:
    """Projected gradient descent with Armijo backtracking; updates ``state`` in place."""
    if not state._views:
        _prepare_views(state, refs, state._scale)
    views, alpha = state._views, _alpha_of(state, cfg)
    lam = np.maximum(state.lam, 0.0)
    step0 = cfg.step0
    if step0 is None:
        L = lipschitz_bound(views) + alpha * cfg.beta ** 2
        step0 = 2.0 / L if L > 0 else 1.0
    res = _residuals(lam, views)
    E = _value(lam, res, cfg, alpha)
    g = _gradient(lam, res, views, cfg, alpha)
    if not np.isfinite(E):
        raise FloatingPointError("non-finite objective")
    pg = projected_gradient(lam, g)
    if state.g_tol is None:
        state.g_tol = cfg.g_tol if cfg.g_tol is not None else (
            cfg.g_tol_rel * max(float(np.abs(pg).max()), np.finfo(float).tiny))
    status = "max_iters"
    it = 0
    steps = []
    trial_step = step0
    for it in range(1, cfg.max_gd_iters + 1):
        if np.abs(pg).max() <= state.g_tol:
            status = "converged"
            it -= 1
            break
        pg2 = float(np.sum(pg * pg))
        s = trial_step
        while True:
            trial = np.maximum(lam - s * g, 0.0)
            res_new = _residuals(trial, views)
            E_new = _value(trial, res_new, cfg, alpha)
            if E_new <= E - cfg.armijo_c1 * s * pg2:
                break
            s *= cfg.backtrack
            if s < 1e-12 * step0:
                trial = None
                break
        if trial is None:
            status = "step_underflow"
            log.warning("backtracking underflow after %d iterations", it - 1)
            it -= 1
            break
        assert E_new <= E, "accepted step increased the objective"
        assert trial.min() >= 0.0
        g_new = _gradient(trial, res_new, views, cfg, alpha)
        if cfg.step_rule == "bb":
            ds = trial - lam
            sy = float(np.sum(ds * (g_new - g)))
            trial_step = float(np.sum(ds * ds)) / sy if sy > 0 else step0
            trial_step = min(max(trial_step, 1e-6 * step0), 1e6 * step0)
        lam, E, g = trial, E_new, g_new
        pg = projected_gradient(lam, g)
        steps.append(s)
    state.lam = lam
    state.objective = E
    state.gd_iterations = it
    state.history.append({"E": E, "gd_iters": it, "status": status,
                          "mean_step": float(np.mean(steps)) if steps else 0.0,
                          "grad_norm": float(np.abs(pg).max())})
    return lam


# --------------------------------------------------------------------------
# sequential Monte Carlo loop

def reference_scale(refs, coverages=None) -> float:
    """Factor mapping the 99th percentile of valid reference values to 1."""
    coverages = coverages if coverages is not None else [None] * len(refs)
    vals = np.concatenate([ref.image.reshape(-1, 3)[valid_pixels(ref, cov)].ravel()
                           for ref, cov in zip(refs, coverages)])
    if vals.size == 0:
        raise DegenerateProblem("no valid pixels in any view")
    p99 = float(np.percentile(vals, 99))
    return 1.0 / p99 if p99 > 0 else 1.0


def default_alpha(lam, views, cfg: ObjectiveConfig) -> float:
    """Activation weight whose slope at zero is ``alpha_rel`` of the strongest data pull.

    Lights pulled less than that at the start stay off; the strongest one
    always switches on.
    """
    _, g = _evaluate(lam, views, cfg, 0.0)
    pull = float(np.max(-g))
    if pull <= 0.0 or cfg.beta == 0.0:
        return 0.0
    return cfg.alpha_rel * pull / cfg.beta


def view_seed(seed: int, view: int) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{int(view)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class EstimationReport:
    rounds: list
    converged: bool
    scale: float
    alpha: float
    final_renders: list = field(default_factory=list, repr=False)
    final_jacobians: list = field(default_factory=list, repr=False)

    def to_json(self, env: EnvironmentMap | None = None) -> dict:
        doc = {"rounds": self.rounds, "converged": self.converged,
               "normalization_scale": self.scale, "alpha": self.alpha}
        if env is not None:
            power = env.radiance.sum(axis=1)
            doc["final_lambda_stats"] = {
                "n_lights": env.n_lights,
                "n_active": int(np.count_nonzero(power)),
                "max": float(env.radiance.max()),
                "total": float(power.sum()),
                "argmax_direction": env.directions[int(np.argmax(power))].tolist(),
            }
        return doc


def estimate_lights(accel: AccelStructure, refs, cameras: list[CameraModel],
                    cfg: ObjectiveConfig, trace_cfg: TraceConfig, ring_count: int = 9,
                    env: EnvironmentMap | None = None):
    """Sequential Monte Carlo light estimation.

    Each round builds the light distribution from the current estimate,
    traces one Jacobian per view (per-view seeds stay fixed across rounds)
    and runs projected gradient descent. Stops when the largest change in
    radiance, relative to the largest radiance, drops below ``delta_tol``.
    Returns (environment map in reference units, EstimationReport).
    """
    if not refs:
        raise ValueError("need at least one reference view")
    if len(refs) != len(cameras):
        raise ValueError("need one camera per reference view")
    for ref, cam in zip(refs, cameras):
        if ref.image.shape[:2] != cam.shape:
            raise ValueError("reference image does not match its camera resolution")
    env = env if env is not None else discretize_sphere(ring_count)
    scale = reference_scale(refs) if cfg.normalize else 1.0
    alpha = cfg.alpha
    state = EstimationState(lam=np.full((env.n_lights, 3), cfg.lambda_init))
    state._scale = scale
    rounds = []
    converged = False
    for rnd in range(cfg.max_smc_iters):
        t0 = time.perf_counter()
        current = env.with_radiance(state.lam)
        dist = build_light_distribution(current, trace_cfg.floor_weight)
        state.jacobians = [
            trace_jacobian(accel, current, cam, replace(trace_cfg, rng_seed=view_seed(trace_cfg.rng_seed, k)), dist)
            for k, cam in enumerate(cameras)
        ]
        _prepare_views(state, refs, scale)
        if alpha is None:
            alpha = default_alpha(state.lam, state._views, cfg)
        state._alpha = alpha
        E_start, g0 = _evaluate(state.lam, state._views, cfg, alpha)
        if state.g_tol is None:
            state.g_tol = cfg.g_tol if cfg.g_tol is not None else (
                cfg.g_tol_rel * max(float(np.abs(projected_gradient(state.lam, g0)).max()),
                                    np.finfo(float).tiny))
        t_trace = time.perf_counter() - t0
        prev = state.lam.copy()
        if rnd == 0:
            for c in cfg.warmup_scales:
                if c > cfg.cauchy_c:
                    gradient_descent(state, refs, replace(cfg, cauchy_c=c))
        gradient_descent(state, refs, cfg)
        if not np.isfinite(state.objective):
            raise FloatingPointError(f"non-finite objective in round {rnd}: lam={state.lam!r}")
        Phi = activation_penalty(state.lam, alpha, cfg.beta)
        top = max(float(np.abs(state.lam).max()), np.finfo(float).tiny)
        delta = float(np.abs(state.lam - prev).max()) / top
        rounds.append({
            "round": rnd,
            "E_start": E_start,
            "E_p": state.objective - Phi,
            "Phi": Phi,
            "E": state.objective,
            "gd_iters": state.gd_iterations,
            "gd_status": state.history[-1]["status"],
            "lambda_delta": delta,
            "trace_seconds": t_trace,
            "seconds": time.perf_counter() - t0,
        })
        log.info("sMC round %d: E=%.6g (E_p=%.6g, Phi=%.6g) gd=%d delta=%.3g",
                 rnd, state.objective, rounds[-1]["E_p"], Phi, state.gd_iterations, delta)
        if delta <= cfg.delta_tol:
            converged = True
            break
    final = env.with_radiance(state.lam / scale)
    renders = [apply_jacobian(J, final.radiance) for J in state.jacobians]
    report = EstimationReport(rounds, converged, scale, alpha, renders, state.jacobians)
    return final, report


def config_dict(cfg: ObjectiveConfig) -> dict:
    return asdict(cfg)
