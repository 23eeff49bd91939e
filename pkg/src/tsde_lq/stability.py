"""Spectral-radius checks over a support set and the sampled stability certificate.

The certificate bounds every sampled closed loop ``L = A_theta + B_theta G(phi)``
by ``|L^t| <= alpha (delta + epsilon)^t`` and derives the minimum episode length
beyond which every such power is a contraction in the induced 2-norm. It is an
estimate from sampled pairs (plus box corners), never a proof over the whole set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .lqr_core import CostMatrices, RiccatiDivergence, SystemParams, solve_dare
from .posterior import SupportSet

log = logging.getLogger(__name__)

ALPHA_SAFETY = 1.5
MAX_CORNERS = 64


@dataclass(frozen=True)
class StabilityCertificate:
    delta: float
    epsilon: float
    alpha: float
    t_min_star: int
    pairs_checked: int
    max_rho_observed: float
    max_norm_observed: float
    horizon: int
    kind: str = "sampled certificate"

    def __post_init__(self) -> None:
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not 0 < self.delta + self.epsilon < 1:
            raise ValueError("delta + epsilon must lie in (0, 1)")

    @property
    def delta_bar(self) -> float:
        return self.delta + self.epsilon

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairSet:
    """Sampled ``(theta, phi)`` pairs and their closed-loop matrices."""

    closed_loops: np.ndarray  # (P, n, n)
    max_rho: float
    ok: bool
    offending_phi: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.closed_loops.shape[0]


def spectral_radius(M: np.ndarray, tol: float = 1e-10) -> float:
    """Largest eigenvalue modulus via the dense nonsymmetric eigensolver."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix must be square, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigenvalue routine did not converge: {exc}") from exc
    return float(np.max(np.abs(eig))) if eig.size else 0.0


def _spectral_radii(Ls: np.ndarray) -> np.ndarray:
    if Ls.shape[-1] == 1:
        return np.abs(Ls[:, 0, 0])
    return np.max(np.abs(np.linalg.eigvals(Ls)), axis=1)


def _candidate_thetas(support: SupportSet, n_samples: int, rng: np.random.Generator) -> tuple[list, np.ndarray]:
    corners: list[np.ndarray] = []
    if support.kind == "box":
        free = int(np.count_nonzero(support.radius))
        if 2 ** free <= MAX_CORNERS:
            corners = support.corners()
        else:
            signs = rng.choice([-1.0, 1.0], size=(MAX_CORNERS,) + support.shape)
            corners = [support.center + s * support.radius for s in signs]
    samples = support.uniform(rng, 2 * n_samples) if n_samples > 0 else np.empty((0,) + support.shape)
    return corners, samples


def sample_closed_loops(support: SupportSet, cost: CostMatrices, n_samples: int, rng_seed=None) -> PairSet:
    """Closed loops over all corner pairs and ``n_samples`` random pairs.

    A ``phi`` whose Riccati iteration diverges makes the check fail; for that
    pair the open-loop matrix ``A_theta`` stands in for the closed loop (exact
    when ``B_theta = 0``).
    """
    if not support.is_compact:
        raise ValueError("support must be compact")
    rng = np.random.default_rng(rng_seed)
    n = support.shape[1]
    corners, samples = _candidate_thetas(support, n_samples, rng)
    thetas_rand, phis_rand = samples[:n_samples], samples[n_samples:]
    pairs = [(th, ph) for th in corners for ph in corners]
    pairs += list(zip(thetas_rand, phis_rand))
    if not pairs:
        pairs = [(support.center, support.center)]

    gains: dict[bytes, np.ndarray | None] = {}
    offending = None
    Ls = []
    for th, ph in pairs:
        key = ph.tobytes()
        if key not in gains:
            try:
                gains[key] = solve_dare(SystemParams.from_theta(ph, n), cost).G
            except RiccatiDivergence:
                gains[key] = None
        G = gains[key]
        sys_th = SystemParams.from_theta(th, n)
        if G is None:
            if offending is None:
                offending = ph
                log.warning("Riccati iteration diverged for phi=%s", ph.tolist())
            Ls.append(sys_th.A)
        else:
            Ls.append(sys_th.A + sys_th.B @ G)
    Ls = np.array(Ls)
    rho = _spectral_radii(Ls)
    max_rho = float(rho.max())
    return PairSet(Ls, max_rho, ok=offending is None and max_rho < 1.0, offending_phi=offending)


def check_assumption_radius(support: SupportSet, cost: CostMatrices, n_samples: int = 500,
                            rng_seed=None) -> tuple[bool, float]:
    pairs = sample_closed_loops(support, cost, n_samples, rng_seed)
    return pairs.ok, pairs.max_rho


def default_horizon(delta_bar: float) -> int:
    return max(200, math.ceil(10.0 / -math.log(delta_bar)))


def power_norms(Ls: np.ndarray, horizon: int) -> np.ndarray:
    """``|L^t|_2`` for every matrix in the stack and ``t = 1..horizon``; shape ``(horizon, P)``."""
    Ls = np.asarray(Ls, dtype=float)
    out = np.empty((horizon, Ls.shape[0]))
    P = Ls.copy()
    for t in range(horizon):
        if t:
            with np.errstate(over="ignore", invalid="ignore"):
                P = P @ Ls
        out[t] = np.linalg.svd(P, compute_uv=False)[:, 0]
        if not np.all(np.isfinite(out[t])):
            raise OverflowError("closed-loop powers overflowed; the radius assumption is violated")
    return out


def _alpha_from_loops(Ls: np.ndarray, delta_bar: float, horizon: int) -> float:
    norms = power_norms(Ls, horizon)
    t = np.arange(1, horizon + 1)[:, None]
    # ratio in log space to avoid underflow of delta_bar**t
    log_ratio = np.log(np.maximum(norms, 1e-300)) - t * math.log(delta_bar)
    return ALPHA_SAFETY * max(1.0, float(np.exp(log_ratio.max())))


def estimate_alpha(support: SupportSet, cost: CostMatrices, epsilon: float, n_samples: int = 500,
                   horizon: int | None = None, rng_seed=None, delta: float | None = None) -> float:
    """Sampled transient-growth constant, times a 1.5 safety factor.

    ``delta`` defaults to the largest spectral radius over the same pair set.
    """
    pairs = sample_closed_loops(support, cost, n_samples, rng_seed)
    if not pairs.ok:
        raise OverflowError(f"sampled closed loops are not stable (max rho {pairs.max_rho:.6g})")
    if delta is None:
        delta = pairs.max_rho
    if not 0 < epsilon < 1 - delta:
        raise ValueError(f"epsilon must lie in (0, {1 - delta:.6g})")
    if horizon is None:
        horizon = default_horizon(delta + epsilon)
    return _alpha_from_loops(pairs.closed_loops, delta + epsilon, horizon)


def compute_t_min_star(alpha: float, delta: float, epsilon: float) -> int:
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    base = delta + epsilon
    if not 0 < base < 1:
        raise ValueError("delta + epsilon must lie in (0, 1)")
    if alpha == 1:
        return 0
    return math.ceil(math.log(alpha) / -math.log(base))


def certify(support: SupportSet, cost: CostMatrices, n_samples: int = 500, rng_seed=None,
            epsilon: float | None = None, delta: float | None = None) -> tuple[StabilityCertificate | None, PairSet]:
    """Full pipeline: radius check, epsilon choice, alpha estimate and minimum episode length.

    Returns ``(None, pairs)`` when the sampled radius check fails. A supplied
    ``delta`` is only accepted if it is at least the observed maximum.
    """
    pairs = sample_closed_loops(support, cost, n_samples, rng_seed)
    if not pairs.ok:
        return None, pairs
    if delta is None or delta < pairs.max_rho:
        delta = pairs.max_rho
    delta = max(delta, 1e-12)
    if epsilon is None:
        epsilon = (1.0 - delta) / 2.0
    if not 0 < epsilon < 1 - delta:
        raise ValueError(f"epsilon must lie in (0, {1 - delta:.6g})")
    horizon = default_horizon(delta + epsilon)
    alpha = _alpha_from_loops(pairs.closed_loops, delta + epsilon, horizon)
    max_norm = float(np.linalg.svd(pairs.closed_loops, compute_uv=False)[:, 0].max())
    cert = StabilityCertificate(
        delta=float(delta),
        epsilon=float(epsilon),
        alpha=float(alpha),
        t_min_star=compute_t_min_star(alpha, delta, epsilon),
        pairs_checked=pairs.size,
        max_rho_observed=pairs.max_rho,
        max_norm_observed=max_norm,
        horizon=horizon,
    )
    return cert, pairs


@dataclass(frozen=True)
class StateBoundConstants:
    alpha_bar: float
    beta: float
    beta_bar: float
    alpha0: float

    @property
    def valid(self) -> bool:
        return self.beta < 1.0


def state_bound_constants(alpha: float, delta_bar: float, t_min: int) -> StateBoundConstants:
    """Constants of the per-episode contraction ``Y_{k+1} <= beta Y_k + alpha_bar W_T``.

    ``alpha0 = alpha * beta_bar + alpha_bar`` bounds ``X_T / W_T`` whenever
    ``beta < 1``; otherwise ``beta_bar`` and ``alpha0`` are infinite.
    """
    alpha_bar = alpha / (1.0 - delta_bar)
    beta = alpha * delta_bar ** (t_min + 1)
    if beta >= 1.0:
        return StateBoundConstants(alpha_bar, beta, math.inf, math.inf)
    beta_bar = alpha_bar / (1.0 - beta)
    return StateBoundConstants(alpha_bar, beta, beta_bar, alpha * beta_bar + alpha_bar)
