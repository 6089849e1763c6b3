"""Fixed-point solvers and implicit differentiation through them.

Forward: run Picard or Anderson iteration on z <- f(z) outside any tape.
Backward: at the solution z*, the gradient of a loss L through z* is
obtained from the adjoint fixed point

    u = g + J_f(z*)^T u,      g = dL/dz*,

solved with the same machinery, followed by a single vector-Jacobian
product with cotangent u into the operator's parameters.  Gradients never
flow through the forward iterates themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Array = np.ndarray


@dataclass
class SolverConfig:
    method: str = "anderson"
    max_iter: int = 300
    tol: float = 1e-6
    history: int = 5      # anderson window
    beta: float = 1.0     # anderson mixing
    lam: float = 1e-4     # tikhonov weight on the residual gram

    def __post_init__(self):
        if self.method not in ("picard", "anderson"):
            raise ValueError(f"unknown solver {self.method!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if self.history < 1:
            raise ValueError("history must be positive")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual: float
    z_star: Array | None = field(default=None, repr=False)
    diverged: bool = False
    fallback_steps: int = 0
    backward: "SolveReport | None" = field(default=None, repr=False)


def _norm(a: Array) -> float:
    return float(np.linalg.norm(a))


def picard_solve(f: Callable[[Array], Array], z0: Array,
                 cfg: SolverConfig) -> SolveReport:
    z = np.asarray(z0, dtype=np.float64)
    residual = np.inf
    for it in range(1, cfg.max_iter + 1):
        z_new = f(z)
        if not np.all(np.isfinite(z_new)):
            return SolveReport(False, it, np.inf, z_star=z, diverged=True)
        residual = _norm(z_new - z)
        z = z_new
        if residual <= cfg.tol:
            return SolveReport(True, it, residual, z_star=z)
    return SolveReport(False, cfg.max_iter, residual, z_star=z)


def anderson_solve(f: Callable[[Array], Array], z0: Array,
                   cfg: SolverConfig) -> SolveReport:
    """Anderson mixing over the last ``cfg.history`` iterates.

    Mixing weights solve the residual least-squares problem with a sum-to-one
    constraint through a bordered system.  The Tikhonov term ``cfg.lam`` is
    scaled by the mean squared residual so the damping is scale invariant and
    the acceleration survives into the small-residual tail; a degenerate
    system falls back to a plain Picard step.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    shape = z0.shape
    xs: list[Array] = [z0.ravel().copy()]
    fs: list[Array] = []
    fallback = 0
    residual = np.inf

    for it in range(1, cfg.max_iter + 1):
        fk = f(xs[-1].reshape(shape)).ravel()
        if not np.all(np.isfinite(fk)):
            return SolveReport(False, it, np.inf, z_star=xs[-1].reshape(shape),
                               diverged=True, fallback_steps=fallback)
        fs.append(fk)
        rs = [fv - xv for xv, fv in zip(xs[-len(fs):], fs)]
        k = len(rs)
        x_next = None
        if k > 1:
            r = np.stack(rs)
            gram = r @ r.T
            scale = np.trace(gram) / k
            h = np.zeros((k + 1, k + 1))
            h[0, 1:] = 1.0
            h[1:, 0] = 1.0
            h[1:, 1:] = gram + cfg.lam * scale * np.eye(k)
            rhs = np.zeros(k + 1)
            rhs[0] = 1.0
            try:
                alpha = np.linalg.solve(h, rhs)[1:]
            except np.linalg.LinAlgError:
                alpha = None
            if alpha is not None and np.all(np.isfinite(alpha)):
                xw = alpha @ np.stack(xs[-k:])
                fw = alpha @ np.stack(fs[-k:])
                x_next = (1.0 - cfg.beta) * xw + cfg.beta * fw
            if x_next is None:
                fallback += 1
        if x_next is None:
            x_next = (1.0 - cfg.beta) * xs[-1] + cfg.beta * fk
        if not np.all(np.isfinite(x_next)):
            return SolveReport(False, it, np.inf, z_star=xs[-1].reshape(shape),
                               diverged=True, fallback_steps=fallback)
        residual = _norm(x_next - xs[-1])
        xs.append(x_next)
        if len(xs) > cfg.history:
            xs = xs[-cfg.history:]
            fs = fs[-(cfg.history - 1):] if cfg.history > 1 else []
        if residual <= cfg.tol:
            return SolveReport(True, it, residual, z_star=xs[-1].reshape(shape),
                               fallback_steps=fallback)
    return SolveReport(False, cfg.max_iter, residual,
                       z_star=xs[-1].reshape(shape), fallback_steps=fallback)


def solve_fixed_point(f: Callable[[Array], Array], z0: Array,
                      cfg: SolverConfig) -> SolveReport:
    if cfg.method == "picard":
        return picard_solve(f, z0, cfg)
    return anderson_solve(f, z0, cfg)


def _adjoint_solve(jt_vjp: Callable[[Array], Array], g: Array,
                   cfg: SolverConfig) -> tuple[Array, SolveReport]:
    def step(u: Array) -> Array:
        return g + jt_vjp(u)

    report = solve_fixed_point(step, np.zeros_like(g), cfg)
    return report.z_star, report


def implicit_backward(f: Callable[[Tensor], Tensor], z_star: Array,
                      g: Array, cfg: SolverConfig) -> tuple[Array, SolveReport]:
    """Solve u = g + J^T u for the map's Jacobian at ``z_star``.

    ``f`` must rebuild the operator from recorded primitives so the tape
    can form transpose-Jacobian products at the fixed point.
    """
    g = np.asarray(g, dtype=np.float64)
    tape = ad.Tape()
    leaf = tape.watch(Tensor(np.asarray(z_star, dtype=np.float64)))
    with tape:
        out = f(leaf)

    def jt_vjp(u: Array) -> Array:
        return tape.vjp(out, u)[leaf]

    return _adjoint_solve(jt_vjp, g, cfg)


def equilibrium_solve(apply_fn: Callable[[Tensor, list], Tensor],
                      tensors: list, z0: Array, fwd: SolverConfig,
                      bwd: SolverConfig) -> tuple[Tensor, SolveReport]:
    """Differentiable fixed point of ``z <- apply_fn(z, tensors)``.

    The forward solve runs without recording.  If a tape is active and the
    solve did not diverge, the result is recorded as a single operation
    whose backward pass solves the adjoint equation once per loss cotangent
    and routes one vector-Jacobian product into each input tensor.
    """
    z0 = np.asarray(z0, dtype=np.float64)

    def f_raw(zd: Array) -> Array:
        with ad.no_grad():
            return apply_fn(Tensor(zd), tensors).data

    report = solve_fixed_point(f_raw, z0, fwd)
    z_star = report.z_star
    outer = ad._active_tape()
    if outer is None or report.diverged:
        return Tensor(z_star), report

    # Rebuild the operator once on cloned leaves; the clones isolate the
    # sub-tape from whatever else the outer tape is recording.
    clones = [Tensor(t.data) for t in tensors]
    sub = ad.Tape()
    z_leaf = sub.watch(Tensor(z_star))
    for c in clones:
        sub.watch(c)
    with sub:
        out = apply_fn(z_leaf, clones)

    cache: dict = {}

    def pullback(g: Array) -> ad.Gradients:
        if cache.get("seed") is not g:
            def jt_vjp(u: Array) -> Array:
                return sub.vjp(out, u)[z_leaf]

            u, back = _adjoint_solve(jt_vjp, g, bwd)
            report.backward = back
            cache["seed"] = g
            cache["grads"] = sub.vjp(out, u)
        return cache["grads"]

    parents = [(t, lambda g, c=c: pullback(g)[c])
               for t, c in zip(tensors, clones)]
    return ad.record_op(out.data, parents), report
