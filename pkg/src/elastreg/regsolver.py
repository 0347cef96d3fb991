"""Pseudo-time IMEX fixed-point iteration with Anderson acceleration.

Each step solves the implicitly-treated elastic/proximal operator against the
explicitly-evaluated image forcing, reusing one sparse factorization. The
window-m Anderson update solves the sum-to-one least squares in difference
form and falls back to the plain update when the difference matrix becomes
ill-conditioned.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import image as imagemod
from .fespace import (AssembledSystem, FeFunction, FeSpace, MaterialParams,
                      assemble_operator, registration_load)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 1000
    stop_mode: str = "stationary"  # 'stationary' | 'velocity'
    aa_depth: int = 10
    l_kind: str = "identity"
    q_img: int = 6
    cond_limit: float = 1e10
    log_similarity: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.aa_depth < 0:
            raise ValueError("Anderson depth must be >= 0")
        if self.stop_mode not in ("stationary", "velocity"):
            raise ValueError("stop_mode must be 'stationary' or 'velocity'")


class AAWindow:
    """Ring buffer of the last <= m+1 iterates and their fixed-point residuals."""

    def __init__(self, depth: int, cond_limit: float = 1e10):
        self.depth = depth
        self.cond_limit = cond_limit
        self.xs: list[np.ndarray] = []
        self.gs: list[np.ndarray] = []
        self.fs: list[np.ndarray] = []
        self.last_alpha: np.ndarray | None = None

    def reset(self) -> None:
        self.xs.clear()
        self.gs.clear()
        self.fs.clear()
        self.last_alpha = None

    def update(self, x: np.ndarray, gx: np.ndarray) -> tuple[np.ndarray, bool]:
        """Push (x, g(x)) and return (next iterate, whether mixing happened)."""
        if self.depth == 0:
            self.last_alpha = np.array([1.0])
            return gx, False
        self.xs.append(np.array(x))
        self.gs.append(np.array(gx))
        self.fs.append(np.array(gx) - np.array(x))
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.gs.pop(0)
            self.fs.pop(0)
        if len(self.xs) == 1:
            self.last_alpha = np.array([1.0])
            return gx, False
        dF = np.column_stack([self.fs[i + 1] - self.fs[i] for i in range(len(self.fs) - 1)])
        dG = np.column_stack([self.gs[i + 1] - self.gs[i] for i in range(len(self.gs) - 1)])
        # condition estimate over the difference columns
        sv = np.linalg.svd(dF, compute_uv=False)
        if sv[-1] == 0.0 or sv[0] / sv[-1] > self.cond_limit:
            self.xs.pop(0)
            self.gs.pop(0)
            self.fs.pop(0)
            self.last_alpha = np.array([1.0])
            return gx, False
        gamma, *_ = np.linalg.lstsq(dF, self.fs[-1], rcond=None)
        xnext = gx - dG @ gamma
        # recover the sum-to-one combination coefficients for diagnostics
        p = len(gamma)
        alpha = np.empty(p + 1)
        alpha[0] = gamma[0]
        alpha[1:p] = gamma[1:] - gamma[:-1]
        alpha[p] = 1.0 - gamma[-1]
        self.last_alpha = alpha
        return xnext, True


def anderson_update(window: AAWindow, x_k: np.ndarray, g_xk: np.ndarray) -> np.ndarray:
    """One accelerated update x_{k+1} from the window state."""
    xnext, _ = window.update(x_k, g_xk)
    return xnext


@dataclass
class IterRecord:
    iteration: int
    residual: float
    velocity: float
    similarity: float
    aa_used: bool
    seconds: float


@dataclass
class IterationLog:
    records: list[IterRecord] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""
    denom: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "residual", "velocity", "similarity",
                             "aa_used", "seconds"])
            for r in self.records:
                writer.writerow([r.iteration, f"{r.residual:.16e}",
                                 f"{r.velocity:.16e}", f"{r.similarity:.16e}",
                                 int(r.aa_used), f"{r.seconds:.6f}"])


class SolverDivergence(RuntimeError):
    """Raised when iterates become non-finite; carries the partial log."""

    def __init__(self, message: str, log: IterationLog):
        super().__init__(message)
        self.log = log


def _stationary_rhs(system: AssembledSystem, x: np.ndarray, field_t, field_r,
                    params: MaterialParams, q_img: int,
                    extra_load: np.ndarray | None) -> np.ndarray:
    u = FeFunction(system.space, x)
    rhs = params.alpha * registration_load(system.space, field_t, field_r, u, q_img)
    if extra_load is not None:
        rhs = rhs + extra_load
    return rhs


def stationarity_residual(system: AssembledSystem, x: np.ndarray, field_t, field_r,
                          params: MaterialParams, q_img: int = 6,
                          extra_load: np.ndarray | None = None) -> np.ndarray:
    """Residual of the stationary problem at x (zero at the discrete solution)."""
    rhs = _stationary_rhs(system, x, field_t, field_r, params, q_img, extra_load)
    return rhs - system.a_stat @ x


def imex_step(system: AssembledSystem, u_k: FeFunction, field_t, field_r,
              params: MaterialParams, config: SolverConfig,
              extra_load: np.ndarray | None = None) -> FeFunction:
    """One semi-implicit step: g(u_k) through the cached factorization."""
    if u_k.space is not system.space:
        raise ValueError("iterate lives on a different space than the factorization")
    rhs = system.m_prox_dt @ u_k.vec + _stationary_rhs(
        system, u_k.vec, field_t, field_r, params, config.q_img, extra_load)
    return FeFunction(system.space, system.solve(rhs))


def solve_stationary(space: FeSpace, field_t, field_r, params: MaterialParams,
                     config: SolverConfig, extra_load: np.ndarray | None = None,
                     x0: np.ndarray | None = None,
                     system: AssembledSystem | None = None):
    """Iterate AA_m(imex step) until the stopping rule or max_iter.

    Returns (FeFunction, IterationLog). Non-finite iterates raise
    SolverDivergence; hitting max_iter is reported through the log only.
    """
    if system is None:
        system = assemble_operator(space, params, config.l_kind)
    x = np.zeros(space.ndof) if x0 is None else np.array(x0, dtype=float)
    window = AAWindow(config.aa_depth, config.cond_limit)
    log = IterationLog()
    eps = np.finfo(float).eps

    r = stationarity_residual(system, x, field_t, field_r, params,
                              config.q_img, extra_load)
    load0 = _stationary_rhs(system, x, field_t, field_r, params,
                            config.q_img, extra_load)
    # scale-aware denominator: plain relative residual on cold starts, but a
    # warm start that is already stationary passes immediately
    denom = max(float(np.linalg.norm(r)), float(np.linalg.norm(load0)), eps)
    log.denom = denom

    t0 = time.perf_counter()
    for it in range(1, config.max_iter + 1):
        g = x + system.solve(r)
        x_new, aa_used = window.update(x, g)
        if not np.all(np.isfinite(x_new)):
            log.stop_reason = f"non-finite iterate at iteration {it}"
            raise SolverDivergence(log.stop_reason, log)
        r_new = stationarity_residual(system, x_new, field_t, field_r, params,
                                      config.q_img, extra_load)
        res_norm = float(np.linalg.norm(r_new))
        vel = float(np.linalg.norm(x_new - x)
                    / (params.dt * np.linalg.norm(x) + eps))
        sim = (imagemod.similarity(field_t, field_r, FeFunction(space, x_new),
                                   config.q_img)
               if config.log_similarity else float("nan"))
        log.records.append(IterRecord(it, res_norm, vel, sim, aa_used,
                                      time.perf_counter() - t0))
        x, r = x_new, r_new
        crit = res_norm / denom if config.stop_mode == "stationary" else vel
        if crit < config.tol:
            log.converged = True
            log.stop_reason = f"{config.stop_mode} criterion {crit:.3e} < {config.tol:.1e}"
            break
    else:
        log.stop_reason = f"max_iter={config.max_iter} reached"
    return FeFunction(space, x), log
