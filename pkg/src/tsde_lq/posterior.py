"""Gaussian posterior over the stacked dynamics parameter, truncated to a support set.

Columns of ``theta`` (one per state coordinate) are independent Gaussians that
share a single covariance; every observation ``(z_t, x_{t+1})`` is a linear
regression sample with noise variance ``sigma_w2``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from .lqr_core import CostMatrices, RiccatiDivergence, SystemParams, solve_dare

RESYNC_EVERY = 1000
MAX_ATTEMPTS = 10_000


class RejectionExhausted(RuntimeError):
    """No posterior draw landed in the support within the attempt budget."""


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class SupportSet:
    """Compact parameter set: an axis-aligned box or a Frobenius ball.

    ``radius`` is the ball radius or the box half-width; for boxes it may be
    an array broadcastable to ``center``. When ``certified_delta`` and
    ``cost`` are both given, membership also requires the closed loop under
    the parameter's own optimal gain to have spectral radius
    ``<= certified_delta``.
    """

    kind: Literal["box", "ball"]
    center: np.ndarray
    radius: np.ndarray | float
    certified_delta: float | None = None
    cost: CostMatrices | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("box", "ball"):
            raise ValueError(f"unknown support kind {self.kind!r}")
        self.center = np.atleast_2d(np.asarray(self.center, dtype=float))
        radius = np.asarray(self.radius, dtype=float)
        if self.kind == "ball" and radius.ndim != 0:
            raise ValueError("ball radius must be a scalar")
        radius = np.broadcast_to(radius, self.center.shape).copy() if self.kind == "box" else radius
        if np.any(radius < 0) or np.any(np.isnan(radius)):
            raise ValueError("support radius must be nonnegative")
        self.radius = radius
        if self.certified_delta is not None and not 0 < self.certified_delta < 1:
            raise ValueError("certified_delta must lie in (0, 1)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.center.shape

    @property
    def is_singleton(self) -> bool:
        return bool(np.all(self.radius == 0))

    @property
    def is_compact(self) -> bool:
        return bool(np.all(np.isfinite(self.radius)))

    @classmethod
    def box_from_bounds(cls, lower, upper, **kw) -> "SupportSet":
        lower = np.atleast_2d(np.asarray(lower, dtype=float))
        upper = np.atleast_2d(np.asarray(upper, dtype=float))
        if np.any(upper < lower):
            raise ValueError("upper bound below lower bound")
        return cls("box", (lower + upper) / 2, (upper - lower) / 2, **kw)

    @property
    def lower(self) -> np.ndarray:
        if self.kind != "box":
            raise AttributeError("lower bound only defined for boxes")
        return self.center - self.radius

    @property
    def upper(self) -> np.ndarray:
        if self.kind != "box":
            raise AttributeError("upper bound only defined for boxes")
        return self.center + self.radius

    def _geometric_contains(self, theta: np.ndarray) -> bool:
        diff = theta - self.center
        if self.kind == "box":
            return bool(np.all(np.abs(diff) <= self.radius))
        return float(np.sqrt(np.sum(diff * diff))) <= float(self.radius)

    def contains(self, theta: np.ndarray) -> bool:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.center.shape:
            return False
        if not self._geometric_contains(theta):
            return False
        if self.certified_delta is not None and self.cost is not None:
            from .stability import spectral_radius

            params = SystemParams.from_theta(theta, theta.shape[1])
            try:
                sol = solve_dare(params, self.cost)
            except RiccatiDivergence:
                return False
            return spectral_radius(params.A + params.B @ sol.G) <= self.certified_delta
        return True

    def project(self, theta: np.ndarray) -> np.ndarray:
        """Nearest point of the geometric set (box clamp or radial shrink)."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == "box":
            return np.clip(theta, self.lower, self.upper)
        diff = theta - self.center
        dist = float(np.sqrt(np.sum(diff * diff)))
        if dist <= float(self.radius):
            return theta.copy()
        return self.center + diff * (float(self.radius) / dist)

    def corners(self) -> list[np.ndarray]:
        """All vertices of a box (``2**k`` for ``k`` entries with nonzero width)."""
        if self.kind != "box":
            raise ValueError("corners only defined for boxes")
        free = np.flatnonzero(self.radius.ravel() > 0)
        out = []
        for mask in range(2 ** free.size):
            offset = np.zeros(self.center.size)
            for bit, idx in enumerate(free):
                r = self.radius.ravel()[idx]
                offset[idx] = r if (mask >> bit) & 1 else -r
            out.append(self.center + offset.reshape(self.center.shape))
        return out

    def uniform(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` points drawn uniformly from the geometric set."""
        if not self.is_compact:
            raise ValueError("cannot sample uniformly from an unbounded support")
        k = self.center.size
        if self.kind == "box":
            u = rng.uniform(-1.0, 1.0, size=(size,) + self.center.shape)
            return self.center + u * self.radius
        direction = rng.standard_normal((size, k))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        scale = float(self.radius) * rng.uniform(size=(size, 1)) ** (1.0 / k)
        return self.center + (direction * scale).reshape((size,) + self.center.shape)


@dataclass
class PosteriorState:
    """Shared-covariance Gaussian posterior.

    ``means`` is ``d x n`` (column ``i`` is the mean of ``theta(i)``). Both the
    covariance and the precision are carried: the covariance by rank-one
    Sherman-Morrison steps, the precision by direct accumulation, with the
    covariance re-derived from the precision every ``RESYNC_EVERY`` updates.
    """

    means: np.ndarray
    Sigma: np.ndarray
    Sigma_inv: np.ndarray
    log_det_precision: float
    sigma_w2: float
    t: int = 1
    _since_resync: int = field(default=0, repr=False)

    @classmethod
    def from_prior(cls, means, Sigma, sigma_w2: float) -> "PosteriorState":
        means = np.atleast_2d(np.asarray(means, dtype=float))
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        d = means.shape[0]
        if Sigma.shape != (d, d):
            raise ValueError(f"Sigma must be ({d}, {d}), got {Sigma.shape}")
        if not np.allclose(Sigma, Sigma.T, rtol=0.0, atol=1e-12):
            raise ValueError("Sigma must be symmetric")
        if np.linalg.eigvalsh(Sigma).min() <= 0:
            raise ValueError("Sigma must be positive definite")
        if sigma_w2 < 0:
            raise ValueError("sigma_w2 must be nonnegative")
        Sigma_inv = np.linalg.inv(Sigma)
        Sigma_inv = 0.5 * (Sigma_inv + Sigma_inv.T)
        _, logdet = np.linalg.slogdet(Sigma_inv)
        return cls(means.copy(), Sigma.copy(), Sigma_inv, float(logdet), float(sigma_w2))

    @property
    def d(self) -> int:
        return self.means.shape[0]

    @property
    def n(self) -> int:
        return self.means.shape[1]

    def copy(self) -> "PosteriorState":
        return copy.deepcopy(self)

    def det_ratio_increment(self, z: np.ndarray) -> float:
        """``det Sigma_{t+1}^-1 / det Sigma_t^-1 = 1 + z' Sigma_t z / sigma_w2``."""
        z = np.asarray(z, dtype=float).reshape(-1)
        q = float(z @ self.Sigma @ z)
        if q == 0.0:
            return 1.0
        return 1.0 + q / self.sigma_w2

    def observe(self, z: np.ndarray, x_next: np.ndarray) -> float:
        """In-place recursive update; returns the log determinant increment."""
        z = np.asarray(z, dtype=float).reshape(-1)
        x_next = np.asarray(x_next, dtype=float).reshape(-1)
        if z.shape[0] != self.d or x_next.shape[0] != self.n:
            raise ValueError(f"expected z of length {self.d} and x_next of length {self.n}")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(x_next))):
            raise ValueError("non-finite observation")
        return self._absorb(z, x_next)

    def _absorb(self, z: np.ndarray, x_next: np.ndarray) -> float:
        # unchecked fast path for the simulation loop
        self.t += 1
        Sz = self.Sigma @ z
        q = float(z @ Sz)
        if q == 0.0:
            return 0.0
        if self.sigma_w2 == 0.0:
            raise ValueError("cannot absorb a nonzero regressor with zero noise variance")
        denom = self.sigma_w2 + q
        Sz_col = Sz[:, None]
        self.means += Sz_col * ((x_next - z @ self.means) / denom)
        self.Sigma -= Sz_col * (Sz / denom)
        self.Sigma_inv += z[:, None] * (z / self.sigma_w2)
        incr = math.log1p(q / self.sigma_w2)
        self.log_det_precision += incr
        self._since_resync += 1
        if self._since_resync >= RESYNC_EVERY:
            self.resync()
        return incr

    def resync(self) -> None:
        Sigma = np.linalg.inv(self.Sigma_inv)
        self.Sigma = 0.5 * (Sigma + Sigma.T)
        self._since_resync = 0


def update(state: PosteriorState, z, x_next) -> PosteriorState:
    """Return the posterior after absorbing one transition ``(z, x_next)``."""
    new = state.copy()
    new.observe(z, x_next)
    return new


def det_ratio_increment(state: PosteriorState, z) -> float:
    return state.det_ratio_increment(z)


def _draw(state: PosteriorState, chol: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return state.means + chol @ rng.standard_normal(state.means.shape)


def _cholesky(Sigma: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        # accumulated rounding in Sherman-Morrison steps; fall back on eigen-factor
        w, V = np.linalg.eigh(0.5 * (Sigma + Sigma.T))
        return V * np.sqrt(np.clip(w, 0.0, None))


def sample(state: PosteriorState, support: SupportSet | None, rng_seed=None,
           max_attempts: int = MAX_ATTEMPTS) -> SystemParams:
    """Draw ``theta`` from the posterior restricted to ``support`` by rejection.

    Raises :class:`RejectionExhausted` after ``max_attempts`` consecutive
    rejections.
    """
    theta, _ = sample_theta(state, support, rng_seed, max_attempts, fallback=False)
    return SystemParams.from_theta(theta, state.n)


def sample_theta(state: PosteriorState, support: SupportSet | None, rng_seed=None,
                 max_attempts: int = MAX_ATTEMPTS, fallback: bool = True) -> tuple[np.ndarray, bool]:
    """Rejection sampler returning ``(theta, projected)``.

    With ``fallback`` set, an exhausted attempt budget projects the last
    unconstrained draw onto the support instead of raising; ``projected``
    reports whether that happened.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be at least 1")
    if support is not None and support.is_singleton:
        # truncation to a single point is the point mass there
        return support.center.copy(), False
    rng = _as_rng(rng_seed)
    chol = _cholesky(state.Sigma)
    theta = _draw(state, chol, rng)
    if support is None:
        return theta, False
    for _ in range(max_attempts - 1):
        if support.contains(theta):
            return theta, False
        theta = _draw(state, chol, rng)
    if support.contains(theta):
        return theta, False
    if not fallback:
        raise RejectionExhausted(
            f"no draw inside the support after {max_attempts} attempts"
        )
    return support.project(theta), True


def batch_refit(history: Iterable[tuple[np.ndarray, np.ndarray]], prior: PosteriorState) -> PosteriorState:
    """Closed-form conjugate regression posterior from the full history."""
    history = list(history)
    if not history:
        return prior.copy()
    Z = np.array([np.asarray(z, dtype=float).reshape(-1) for z, _ in history])
    X = np.array([np.asarray(x, dtype=float).reshape(-1) for _, x in history])
    P0 = prior.Sigma_inv
    if prior.sigma_w2 == 0.0:
        if np.any(Z):
            raise ValueError("cannot refit nonzero regressors with zero noise variance")
        return prior.copy()
    precision = P0 + Z.T @ Z / prior.sigma_w2
    precision = 0.5 * (precision + precision.T)
    rhs = P0 @ prior.means + Z.T @ X / prior.sigma_w2
    means = np.linalg.solve(precision, rhs)
    Sigma = np.linalg.inv(precision)
    _, logdet = np.linalg.slogdet(precision)
    return PosteriorState(
        means=means,
        Sigma=0.5 * (Sigma + Sigma.T),
        Sigma_inv=precision,
        log_det_precision=float(logdet),
        sigma_w2=prior.sigma_w2,
        t=prior.t + len(history),
    )
