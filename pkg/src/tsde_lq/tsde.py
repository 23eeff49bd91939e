"""Thompson sampling with dynamic episodes and an enforced minimum episode length.

An episode ``k`` starting at ``t_k`` ends at the first ``t > t_k + t_min`` such
that either its length exceeds the previous episode's (``t - t_k > T_{k-1}``)
or the posterior precision determinant has more than doubled since ``t_k``.
A fresh parameter is then sampled from the posterior, and its optimal gain
drives the system for the whole next episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .lqr_core import CostMatrices, RiccatiDivergence, SystemParams, solve_dare
from .posterior import MAX_ATTEMPTS, PosteriorState, SupportSet, sample_theta
from .sim import run_streams

LOG2 = math.log(2.0)
STATE_GUARD = 1e12
DARE_RETRIES = 10

Trigger = Literal["length", "determinant"]


class StateExplosion(RuntimeError):
    """State norm crossed the guard; the stability assumption is likely violated."""


@dataclass
class EpisodeState:
    k: int
    t_k: int
    T_prev: int
    log_det_at_start: float
    t_min: int
    theta_bar: np.ndarray | None = None
    gain_bar: np.ndarray | None = None
    S_bar: np.ndarray | None = None
    J_bar: float = 0.0
    projected: bool = False


@dataclass
class EpisodeRecord:
    k: int
    t_k: int
    length: int
    trigger: Trigger | None  # None while the episode is still running at the horizon
    macro_id: int
    theta_bar: np.ndarray
    gain: np.ndarray
    S: np.ndarray
    J: float
    log_det_start: float
    projected: bool


@dataclass
class Trajectory:
    x: np.ndarray  # (T + 1, n): x_1 .. x_{T+1}
    u: np.ndarray  # (T, m)
    w: np.ndarray  # (T, n): w_t drives x_{t+1}
    log_det: np.ndarray  # (T,): log det of the precision at time t

    @property
    def z(self) -> np.ndarray:
        return np.hstack([self.x[:-1], self.u])


@dataclass
class RunRecord:
    seed: int
    run_index: int
    true_theta: np.ndarray
    T: int
    t_min: int
    sigma_w2: float
    cumulative_cost: float
    J_star: float
    regret: float
    checkpoints: list[tuple[int, float]]
    episodes: list[EpisodeRecord]
    X_T: float
    W_T: float
    K_T: int
    M: int
    fallback_events: int
    M_G: float
    lambda_min: float
    costs: np.ndarray = field(repr=False)
    trajectory: Trajectory | None = field(default=None, repr=False)
    R0: float = math.nan
    R1: float = math.nan
    R2: float = math.nan
    R_mart: float = math.nan
    decomposed_checkpoints: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class TSDEConfig:
    T: int
    t_min: int
    sigma_w2: float
    cost: CostMatrices
    prior_means: np.ndarray
    prior_Sigma: np.ndarray
    support: SupportSet | None = None
    checkpoints: tuple[int, ...] = ()
    seed: int = 0
    max_attempts: int = MAX_ATTEMPTS
    state_guard: float = STATE_GUARD
    keep_trajectory: bool = True

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.t_min < 0:
            raise ValueError("t_min must be nonnegative")
        if self.sigma_w2 < 0:
            raise ValueError("sigma_w2 must be nonnegative")
        self.prior_means = np.atleast_2d(np.asarray(self.prior_means, dtype=float))
        self.prior_Sigma = np.atleast_2d(np.asarray(self.prior_Sigma, dtype=float))


def initial_episode(t_min: int, log_det_prior: float) -> EpisodeState:
    """Fictitious episode 0 with ``t_0 = -t_min`` and ``T_{-1} = t_min``."""
    return EpisodeState(k=0, t_k=-t_min, T_prev=t_min, log_det_at_start=log_det_prior, t_min=t_min)


def should_end_episode(ep: EpisodeState, t: int, log_det_precision_now: float) -> tuple[bool, Trigger | None]:
    """Stopping rule; the length trigger wins when both conditions hold."""
    elapsed = t - ep.t_k
    if elapsed <= ep.t_min:
        return False, None
    if elapsed > ep.T_prev:
        return True, "length"
    if log_det_precision_now > ep.log_det_at_start + LOG2:
        return True, "determinant"
    return False, None


def begin_episode(posterior: PosteriorState, support: SupportSet | None, cost: CostMatrices, t: int,
                  prev: EpisodeState, rng: np.random.Generator, max_attempts: int = MAX_ATTEMPTS) -> EpisodeState:
    """Close ``prev`` at time ``t``, sample a parameter and compute its gain.

    A sampled parameter whose Riccati iteration diverges is redrawn, up to
    ``DARE_RETRIES`` times.
    """
    n = posterior.n
    projected = False
    for _ in range(DARE_RETRIES):
        theta, proj = sample_theta(posterior, support, rng, max_attempts, fallback=True)
        projected = projected or proj
        try:
            sol = solve_dare(SystemParams.from_theta(theta, n), cost, posterior.sigma_w2)
            break
        except RiccatiDivergence:
            continue
    else:
        raise RiccatiDivergence(f"{DARE_RETRIES} sampled parameters in a row had no Riccati solution")
    return EpisodeState(
        k=prev.k + 1,
        t_k=t,
        T_prev=t - prev.t_k,
        log_det_at_start=posterior.log_det_precision,
        t_min=prev.t_min,
        theta_bar=theta,
        gain_bar=sol.G,
        S_bar=sol.S,
        J_bar=sol.J,
        projected=projected,
    )


def control(ep: EpisodeState, x: np.ndarray) -> np.ndarray:
    return ep.gain_bar @ np.asarray(x, dtype=float)


def default_checkpoints(T: int) -> tuple[int, ...]:
    return tuple(sorted({max(1, T // 16), max(1, T // 8), max(1, T // 4), max(1, T // 2), T}))


def run(true_theta: SystemParams, config: TSDEConfig, *, run_index: int = 0,
        streams: dict[str, np.random.Generator] | None = None) -> RunRecord:
    """Simulate TSDE for ``config.T`` steps from ``x_1 = 0``."""
    if streams is None:
        streams = run_streams(config.seed, run_index)
    T, n, m = config.T, true_theta.n, true_theta.m
    cost = config.cost
    A, B = true_theta.A, true_theta.B
    post = PosteriorState.from_prior(config.prior_means, config.prior_Sigma, config.sigma_w2)
    if post.means.shape != (n + m, n):
        raise ValueError(f"prior means must be ({n + m}, {n}), got {post.means.shape}")
    lambda_min = float(np.linalg.eigvalsh(post.Sigma_inv).min())

    noise = np.sqrt(config.sigma_w2) * streams["noise"].standard_normal((T, n))
    policy_rng = streams["policy"]

    xs = np.zeros((T + 1, n))
    us = np.zeros((T, m))
    log_det = np.empty(T)
    guard2 = config.state_guard ** 2

    episodes: list[EpisodeRecord] = []
    ep = initial_episode(config.t_min, post.log_det_precision)
    macro_id = 0
    z_prev = None
    for i in range(T):
        t = i + 1
        x = xs[i]
        if z_prev is not None:
            post._absorb(z_prev, x)
        log_det[i] = post.log_det_precision
        end, trigger = should_end_episode(ep, t, log_det[i])
        if end:
            if ep.k >= 1:
                episodes[-1].length = t - ep.t_k
                episodes[-1].trigger = trigger
            if ep.k == 0 or trigger == "determinant":
                macro_id += 1
            ep = begin_episode(post, config.support, cost, t, ep, policy_rng, config.max_attempts)
            episodes.append(EpisodeRecord(
                k=ep.k, t_k=t, length=0, trigger=None, macro_id=macro_id,
                theta_bar=ep.theta_bar, gain=ep.gain_bar, S=ep.S_bar, J=ep.J_bar,
                log_det_start=ep.log_det_at_start, projected=ep.projected,
            ))
        u = ep.gain_bar @ x
        us[i] = u
        x_next = A @ x + B @ u + noise[i]
        xs[i + 1] = x_next
        if not float(x_next @ x_next) <= guard2:
            raise StateExplosion(
                f"|x_{t + 1}| = {np.linalg.norm(x_next):.3e} exceeds the guard {config.state_guard:.0e} "
                f"(episode {ep.k}, t_min={config.t_min})"
            )
        z_prev = np.concatenate((x, u))
    episodes[-1].length = T + 1 - episodes[-1].t_k

    costs = np.einsum("ti,ij,tj->t", xs[:-1], cost.Q, xs[:-1]) + np.einsum("ti,ij,tj->t", us, cost.R, us)
    J_star = solve_dare(true_theta, cost, config.sigma_w2).J
    cum = np.cumsum(costs)
    checkpoints = [(int(c), float(cum[c - 1] - c * J_star)) for c in (config.checkpoints or default_checkpoints(T))]
    total = math.fsum(costs)
    M_G = max(float(np.linalg.norm(np.vstack([np.eye(n), e.gain]), 2)) for e in episodes)

    return RunRecord(
        seed=config.seed,
        run_index=run_index,
        true_theta=true_theta.theta,
        T=T,
        t_min=config.t_min,
        sigma_w2=config.sigma_w2,
        cumulative_cost=total,
        J_star=J_star,
        regret=total - T * J_star,
        checkpoints=checkpoints,
        episodes=episodes,
        X_T=float(np.max(np.linalg.norm(xs[:-1], axis=1))),
        W_T=float(np.max(np.linalg.norm(noise, axis=1))) if T else 0.0,
        K_T=len(episodes),
        M=episodes[-1].macro_id,
        fallback_events=sum(e.projected for e in episodes),
        M_G=M_G,
        lambda_min=lambda_min,
        costs=costs,
        trajectory=Trajectory(xs, us, noise, log_det) if config.keep_trajectory else None,
    )
