"""Classical linearized ADMM for the fusion problem with a fixed DCT transform.

Minimises ``1/2 ||y_hs - H_hs f||^2 + lambda1/2 ||y_ms - H_ms f||^2 +
lambda2 ||Psi f||_1`` by alternating a linearized (gradient) update of ``f``,
a soft-threshold update of the split variable ``b`` and a dual ascent step on
``d``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .transforms import DctTransform, soft_threshold

log = logging.getLogger(__name__)


class SolverDiverged(FloatingPointError):
    """A non-finite iterate appeared; usually ``alpha`` is too small."""


@dataclass(frozen=True)
class SolverConfig:
    """LADMM hyperparameters.

    ``alpha=None`` means "estimate by power iteration" (see
    :func:`estimate_alpha`); it must be resolved before stepping.
    """

    alpha: float | None = None
    rho: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1e-3
    max_iters: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularisation weights must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")

    @property
    def soft_lambda(self) -> float:
        return self.lambda2 / self.rho


@dataclass(frozen=True)
class FusionState:
    f: np.ndarray
    b: np.ndarray
    d: np.ndarray
    objective: float = float("nan")


def _alpha(cfg: SolverConfig) -> float:
    if cfg.alpha is None:
        raise ValueError("alpha unresolved; call resolve_alpha first")
    return cfg.alpha


def objective(f, y, ops, cfg: SolverConfig, psi=None) -> float:
    """Fusion cost at ``f``."""
    psi = psi or DctTransform()
    r_hs, r_ms = ops.data_misfit(f, y)
    return 0.5 * r_hs + 0.5 * cfg.lambda1 * r_ms + cfg.lambda2 * float(np.abs(psi(f)).sum())


def smooth_gradient(f, b, d, y, ops, cfg: SolverConfig, psi=None) -> np.ndarray:
    """Gradient of the quadratic part of the augmented Lagrangian at ``f``."""
    psi = psi or DctTransform()
    g_hs, g_ms = ops.residual_grads(f, y)
    return g_hs + cfg.lambda1 * g_ms + cfg.rho * psi.inverse(psi(f) - b + d)


def gradient_step(f, b, d, y, ops, cfg: SolverConfig, psi=None) -> np.ndarray:
    """Linearized ``f`` update: ``f - grad / alpha``."""
    return f - smooth_gradient(f, b, d, y, ops, cfg, psi) / _alpha(cfg)


def ladmm_iterate(state: FusionState, y, ops, cfg: SolverConfig, psi=None) -> FusionState:
    """One sweep: ``f`` step, ``b = S(Psi f + d)``, ``d += Psi f - b``."""
    psi = psi or DctTransform()
    f = gradient_step(state.f, state.b, state.d, y, ops, cfg, psi)
    if not np.all(np.isfinite(f)):
        raise SolverDiverged("non-finite iterate; step size 1/alpha too large")
    pf = psi(f)
    b = soft_threshold(pf + state.d, cfg.soft_lambda)
    d = state.d + pf - b
    return FusionState(f, b, d, objective(f, y, ops, cfg, psi))


def estimate_alpha(ops, lambda1: float, rho: float, iters: int = 20, seed: int = 0) -> float:
    """Power-iteration estimate of ``||H_hs^T H_hs + lambda1 H_ms^T H_ms|| + rho``.

    The orthonormal transform contributes exactly ``rho`` to the Lipschitz
    constant of the smooth part.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(ops.cube_shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        a, b = ops.normal_parts(v)
        w = a + lambda1 * b if b is not None else a
        lam = float(np.linalg.norm(w))
        if lam == 0:
            break
        v = w / lam
    return lam + rho


def resolve_alpha(ops, cfg: SolverConfig) -> SolverConfig:
    if cfg.alpha is not None:
        return cfg
    return replace(cfg, alpha=estimate_alpha(ops, cfg.lambda1, cfg.rho))


def initial_state(y, ops, cfg: SolverConfig, psi=None) -> FusionState:
    """``f0 = (H_ms^T y_ms + H_hs^T y_hs) / 2`` with ``b = d = 0``."""
    psi = psi or DctTransform()
    f0 = ops.initial(y)
    zero = np.zeros_like(f0)
    return FusionState(f0, zero, zero.copy(), objective(f0, y, ops, cfg, psi))


def ladmm_solve(y, ops, cfg: SolverConfig, psi=None, trace: list | None = None) -> np.ndarray:
    """Run LADMM from the back-projection initialiser.

    Stops after ``cfg.max_iters`` sweeps or when the relative change of ``f``
    drops below ``cfg.tol``. If ``trace`` is a list, ``(iteration, objective,
    relative_change)`` tuples are appended to it.
    """
    psi = psi or DctTransform()
    cfg = resolve_alpha(ops, cfg)
    state = initial_state(y, ops, cfg, psi)
    if trace is not None:
        trace.append((0, state.objective, float("nan")))
    for k in range(1, cfg.max_iters + 1):
        new = ladmm_iterate(state, y, ops, cfg, psi)
        ref = np.linalg.norm(state.f)
        change = np.linalg.norm(new.f - state.f) / ref if ref > 0 else np.linalg.norm(new.f)
        state = new
        if trace is not None:
            trace.append((k, state.objective, float(change)))
        if change < cfg.tol:
            log.debug("LADMM converged after %d iterations (change %.3g)", k, change)
            break
    return state.f
