"""Infinite-horizon discrete-time LQR: Riccati fixed point, gain and average cost."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

DARE_TOL = 1e-12
DARE_MAX_ITER = 10_000
POLISH_STEPS = 50
NEWTON_STEPS = 3


class RiccatiDivergence(RuntimeError):
    """Value iteration on the Riccati map failed to converge."""


@dataclass(frozen=True)
class SystemParams:
    """Dynamics ``x' = A x + B u + w``.

    ``theta`` is the stacked ``d x n`` parameter with ``theta.T == [A, B]``.
    """

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError(f"B must have {A.shape[0]} rows, got {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def d(self) -> int:
        return self.n + self.m

    @property
    def theta(self) -> np.ndarray:
        return np.hstack([self.A, self.B]).T

    @classmethod
    def from_theta(cls, theta: np.ndarray, n: int) -> "SystemParams":
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 2 or theta.shape[1] != n or theta.shape[0] <= n:
            raise ValueError(f"theta must be (d, {n}) with d > {n}, got {theta.shape}")
        stacked = theta.T
        return cls(stacked[:, :n].copy(), stacked[:, n:].copy())


@dataclass(frozen=True)
class CostMatrices:
    """Per-step cost ``x'Qx + u'Ru`` with ``Q, R`` symmetric positive definite."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self) -> None:
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q", Q), ("R", R)):
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square, got {M.shape}")
            if not np.allclose(M, M.T, rtol=0.0, atol=1e-12):
                raise ValueError(f"{name} is not symmetric")
            if np.linalg.eigvalsh(M).min() <= 0.0:
                raise ValueError(f"{name} is not positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class RiccatiSolution:
    S: np.ndarray
    G: np.ndarray
    J: float
    residual: float
    iterations: int


def riccati_map(S: np.ndarray, A: np.ndarray, B: np.ndarray,
                Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """One application of ``S -> Q + A'SA - A'SB (R + B'SB)^-1 B'SA``.

    The result is symmetrized; for symmetric ``S`` the exact map is symmetric
    and any asymmetry is cancellation error.
    """
    SA = S @ A
    BtSA = B.T @ SA
    K = np.linalg.solve(R + B.T @ S @ B, BtSA)
    out = Q + A.T @ SA - BtSA.T @ K
    return 0.5 * (out + out.T)


def _check_shapes(theta: SystemParams, cost: CostMatrices) -> None:
    if cost.Q.shape != (theta.n, theta.n) or cost.R.shape != (theta.m, theta.m):
        raise ValueError(
            f"cost shapes Q{cost.Q.shape}, R{cost.R.shape} do not match n={theta.n}, m={theta.m}"
        )


def gain(S: np.ndarray, theta: SystemParams, cost: CostMatrices) -> np.ndarray:
    """Optimal feedback ``G = -(R + B'SB)^-1 B'SA`` (shape ``m x n``)."""
    _check_shapes(theta, cost)
    S = np.asarray(S, dtype=float)
    if S.shape != (theta.n, theta.n):
        raise ValueError(f"S must be ({theta.n}, {theta.n}), got {S.shape}")
    A, B = theta.A, theta.B
    return -np.linalg.solve(cost.R + B.T @ S @ B, B.T @ S @ A)


def average_cost(S: np.ndarray, sigma_w2: float) -> float:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"S must be square, got {S.shape}")
    return float(sigma_w2 * np.trace(S))


def closed_loop(theta: SystemParams, G: np.ndarray) -> np.ndarray:
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if G.shape != (theta.m, theta.n):
        raise ValueError(f"G must be ({theta.m}, {theta.n}), got {G.shape}")
    return theta.A + theta.B @ G


def _newton_polish(S, A, B, Q, R):
    # linearized correction dS - L'dS L = F(S) - S around the current gain
    res = float(np.linalg.norm(riccati_map(S, A, B, Q, R) - S))
    for _ in range(NEWTON_STEPS):
        if res == 0.0:
            break
        L = A - B @ np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
        dS = solve_discrete_lyapunov(L.T, riccati_map(S, A, B, Q, R) - S)
        cand = S + 0.5 * (dS + dS.T)
        cand_res = float(np.linalg.norm(riccati_map(cand, A, B, Q, R) - cand))
        if not cand_res < res:
            break
        S, res = cand, cand_res
    return S, res


def solve_dare(theta: SystemParams, cost: CostMatrices, sigma_w2: float = 1.0,
               tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER) -> RiccatiSolution:
    """Solve the DARE by value iteration seeded at ``S = Q``.

    Iterates are re-symmetrized every step. Convergence is declared once the
    Frobenius distance between successive iterates is ``<= tol`` times the
    largest of ``1``, ``|S|`` and ``|A'SA|``;
    a few further iterations then run at the rounding floor, followed by up to
    three Newton corrections, and the iterate with the smallest residual is
    returned.
    Raises :class:`RiccatiDivergence` after ``max_iter`` steps or on overflow,
    which is how unstabilizable pairs are detected.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_shapes(theta, cost)
    A, B, Q, R = theta.A, theta.B, cost.Q, cost.R
    S = Q.copy()

    def scale_tol(M: np.ndarray) -> float:
        # rounding in the map is relative to its largest term, not to S alone
        return tol * max(1.0, float(np.linalg.norm(M)), float(np.linalg.norm(A.T @ M @ A)))

    polish = 0
    best_S, best_res = S, math.inf
    for it in range(1, max_iter + 1):
        S_next = riccati_map(S, A, B, Q, R)
        step = float(np.linalg.norm(S_next - S))  # also the residual of S
        if not np.isfinite(step):
            raise RiccatiDivergence(f"Riccati iterates overflowed after {it} steps")
        if step > scale_tol(S_next):
            S = S_next
            polish = 0
            best_res = math.inf
            continue
        # at the rounding floor successive residuals scatter; keep the smallest
        if step < best_res:
            best_S, best_res = S, step
        S = S_next
        polish += 1
        if step == 0.0 or polish >= POLISH_STEPS:
            break
    else:
        if polish == 0:
            raise RiccatiDivergence(f"no convergence within {max_iter} iterations (last step {step:.3e})")
    S, residual = _newton_polish(best_S, A, B, Q, R)
    if residual > scale_tol(S):
        raise RiccatiDivergence(f"fixed-point residual {residual:.3e} above tolerance")
    G = gain(S, theta, cost)
    return RiccatiSolution(S=S, G=G, J=average_cost(S, sigma_w2), residual=residual, iterations=it)
