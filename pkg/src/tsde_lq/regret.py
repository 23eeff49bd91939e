"""Monte Carlo Bayesian regret, its pathwise three-term decomposition, and run diagnostics."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .lqr_core import CostMatrices, SystemParams
from .posterior import MAX_ATTEMPTS, PosteriorState, SupportSet, sample_theta
from .sim import run_streams
from .stability import StabilityCertificate, state_bound_constants
from .tsde import LOG2, RunRecord, TSDEConfig, run

log = logging.getLogger(__name__)

WORKERS_ENV = "TSDE_WORKERS"


@dataclass(frozen=True)
class Decomposition:
    """Pathwise regret terms.

    ``regret == R0 + R1 + R2 + R_mart + bellman`` holds exactly up to rounding.
    ``R_mart`` is the mean-zero noise term left after replacing the Bellman
    expectation by the realized next state; ``bellman`` is the summed Riccati
    residual (zero for an exact fixed point). ``mart_cumsum[t-1]`` is the
    martingale accumulated over steps ``1..t``.
    """

    R0: float
    R1: float
    R2: float
    R_mart: float
    bellman: float
    mart_cumsum: np.ndarray = field(repr=False, compare=False)

    @property
    def total(self) -> float:
        return math.fsum((self.R0, self.R1, self.R2, self.R_mart, self.bellman))

    def __iter__(self):
        return iter((self.R0, self.R1, self.R2))


def _quad(Y: np.ndarray, S: np.ndarray) -> np.ndarray:
    return np.einsum("ti,ij,tj->t", Y, S, Y)


def decompose(record: RunRecord, trajectory=None, sampled_thetas=None) -> Decomposition:
    """Per-run analogue of the regret decomposition.

    Within episode ``k`` (sampled parameter with Riccati solution ``S``, gain
    ``G`` and average cost ``J_k``) every stage cost satisfies
    ``c_t = x_t'S x_t - |S^.5 theta_bar' z_t|^2``. Adding and subtracting
    ``J_k``, ``x_{t+1}'S x_{t+1}`` and ``|S^.5 theta_1' z_t|^2`` splits the
    regret into the three terms plus the realized-noise martingale.
    ``sampled_thetas`` defaults to the episode log's parameters.
    """
    traj = trajectory if trajectory is not None else record.trajectory
    if traj is None:
        raise ValueError("the run did not keep its trajectory")
    episodes = record.episodes
    if sampled_thetas is None:
        sampled_thetas = [e.theta_bar for e in episodes]
    if len(sampled_thetas) != len(episodes):
        raise ValueError("one sampled parameter per episode is required")
    theta1 = record.true_theta
    Z = traj.z
    costs = record.costs
    r0, r1, r2, rm, bell = [], [], [], [], []
    mart = np.zeros(record.T)
    for ep, theta_bar in zip(episodes, sampled_thetas):
        lo = ep.t_k - 1
        hi = lo + ep.length
        S = ep.S
        qx = _quad(traj.x[lo:hi], S)
        qx_next = _quad(traj.x[lo + 1:hi + 1], S)
        q_true = _quad(Z[lo:hi] @ theta1, S)
        q_bar = _quad(Z[lo:hi] @ theta_bar, S)
        mart[lo:hi] = qx_next - q_true - ep.J
        r0.append(ep.length * ep.J)
        r1.append(math.fsum(qx - qx_next))
        r2.append(math.fsum(q_true - q_bar))
        rm.append(math.fsum(mart[lo:hi]))
        bell.append(math.fsum(costs[lo:hi] - (qx - q_bar)))
    return Decomposition(
        R0=math.fsum(r0) - record.T * record.J_star,
        R1=math.fsum(r1),
        R2=math.fsum(r2),
        R_mart=math.fsum(rm),
        bellman=math.fsum(bell),
        mart_cumsum=np.cumsum(mart),
    )


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    skipped: int = 0

    def __iter__(self):
        return iter((self.slope, self.intercept, self.r_squared))


def fit_slope(checkpoints) -> SlopeFit:
    """OLS of ``log regret`` on ``log T``; nonpositive regrets are skipped and counted."""
    pts = [(float(t), float(r)) for t, r in checkpoints]
    good = [(t, r) for t, r in pts if r > 0 and t > 0]
    skipped = len(pts) - len(good)
    if skipped:
        log.info("slope fit skipped %d nonpositive checkpoint(s)", skipped)
    if len(good) < 3:
        raise ValueError(f"need at least 3 positive checkpoints, got {len(good)}")
    x = np.log([t for t, _ in good])
    y = np.log([r for _, r in good])
    res = stats.linregress(x, y)
    return SlopeFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2), skipped)


@dataclass(frozen=True)
class BoundCheck:
    passed: bool | None  # None when the bound does not apply
    slack: float  # bound minus measured value (nonnegative when passed)


@dataclass(frozen=True)
class DiagnosticsReport:
    episode_length: BoundCheck
    trigger_soundness: BoundCheck
    det_ratio_post: BoundCheck
    det_ratio_pre: BoundCheck
    macro_count: BoundCheck
    state_bound: BoundCheck
    alpha0: float

    def as_dict(self) -> dict[str, BoundCheck]:
        return {
            "episode_length": self.episode_length,
            "trigger_soundness": self.trigger_soundness,
            "det_ratio_post": self.det_ratio_post,
            "det_ratio_pre": self.det_ratio_pre,
            "macro_count": self.macro_count,
            "state_bound": self.state_bound,
        }


def episode_length_slack(record: RunRecord) -> float:
    """Smallest slack of ``t_min + 1 <= T_k <= T_{k-1} + 1`` over the run.

    The open final episode is only held to the upper bound.
    """
    t_min = record.t_min
    prev = t_min + 1  # length of the fictitious episode 0
    slack = math.inf
    for ep in record.episodes:
        slack = min(slack, prev + 1 - ep.length)
        if ep.trigger is not None:
            slack = min(slack, ep.length - (t_min + 1))
        prev = ep.length
    return slack


def diagnostics_check(record: RunRecord, cert: StabilityCertificate | None) -> DiagnosticsReport:
    if record.trajectory is None:
        raise ValueError("diagnostics need the run trajectory")
    log_det = record.trajectory.log_det
    T, t_min = record.T, record.t_min

    length_slack = episode_length_slack(record)

    sound = math.inf
    post_slack = math.inf
    pre_slack = math.inf
    if record.sigma_w2 > 0:
        step_bound = math.log1p(record.M_G ** 2 * record.X_T ** 2 / (record.lambda_min * record.sigma_w2))
    else:
        step_bound = math.inf
    for ep in record.episodes:
        start = ep.t_k  # 1-based
        end = ep.t_k + ep.length  # next episode start (or T + 1)
        base = log_det[start - 1]
        if ep.trigger == "determinant":
            det_margin = log_det[end - 1] - base - LOG2
            sound = min(sound, det_margin if ep.length > t_min else -math.inf)
        tau = start + t_min
        pre = log_det[start - 1:min(tau, end - 1, T)] - base
        if pre.size:
            pre_slack = min(pre_slack, t_min * step_bound - float(pre.max()) if t_min else -float(pre.max()))
        post = log_det[tau:end - 1] - base  # t in tau+1 .. t_{k+1}-1
        if post.size:
            post_slack = min(post_slack, LOG2 - float(post.max()))

    macro_slack = math.sqrt(2 * record.M * T) - record.K_T

    if cert is not None:
        consts = state_bound_constants(cert.alpha, cert.delta_bar, t_min)
        alpha0 = consts.alpha0
        if consts.valid:
            state = BoundCheck(record.X_T <= alpha0 * record.W_T, alpha0 * record.W_T - record.X_T)
        else:
            state = BoundCheck(None, math.nan)
    else:
        alpha0 = math.nan
        state = BoundCheck(None, math.nan)

    return DiagnosticsReport(
        episode_length=BoundCheck(length_slack >= 0, length_slack),
        trigger_soundness=BoundCheck(sound > 0, sound),
        det_ratio_post=BoundCheck(post_slack >= 0, post_slack),
        det_ratio_pre=BoundCheck(pre_slack >= 0, pre_slack),
        macro_count=BoundCheck(macro_slack >= 0, macro_slack),
        state_bound=state,
        alpha0=alpha0,
    )


@dataclass
class MonteCarloConfig:
    prior_means: np.ndarray
    prior_Sigma: np.ndarray
    support: SupportSet | None
    cost: CostMatrices
    sigma_w2: float
    T: int
    t_min: int
    n_runs: int
    master_seed: int = 0
    checkpoints: tuple[int, ...] = ()
    certificate: StabilityCertificate | None = None
    max_attempts: int = MAX_ATTEMPTS
    keep_trajectories: bool = False

    def __post_init__(self) -> None:
        self.prior_means = np.atleast_2d(np.asarray(self.prior_means, dtype=float))
        self.prior_Sigma = np.atleast_2d(np.asarray(self.prior_Sigma, dtype=float))
        if self.certificate is not None and self.t_min < self.certificate.t_min_star:
            log.warning("t_min=%d is below the certified minimum %d", self.t_min, self.certificate.t_min_star)

    def tsde_config(self) -> TSDEConfig:
        return TSDEConfig(
            T=self.T, t_min=self.t_min, sigma_w2=self.sigma_w2, cost=self.cost,
            prior_means=self.prior_means, prior_Sigma=self.prior_Sigma, support=self.support,
            checkpoints=self.checkpoints, seed=self.master_seed, max_attempts=self.max_attempts,
        )


@dataclass
class RunOutcome:
    run_index: int
    record: RunRecord | None
    diagnostics: DiagnosticsReport | None
    error: str | None = None


def attach_decomposition(rec: RunRecord, dec: Decomposition) -> None:
    """Store the terms on the record, plus checkpoint regrets with the martingale removed."""
    rec.R0, rec.R1, rec.R2, rec.R_mart = dec.R0, dec.R1, dec.R2, dec.R_mart
    rec.decomposed_checkpoints = [(t, r - float(dec.mart_cumsum[t - 1])) for t, r in rec.checkpoints]


def draw_true_theta(cfg: MonteCarloConfig, rng: np.random.Generator) -> tuple[SystemParams, bool]:
    prior = PosteriorState.from_prior(cfg.prior_means, cfg.prior_Sigma, cfg.sigma_w2)
    theta, projected = sample_theta(prior, cfg.support, rng, cfg.max_attempts, fallback=True)
    return SystemParams.from_theta(theta, prior.n), projected


def simulate_one(cfg: MonteCarloConfig, run_index: int) -> RunOutcome:
    """One Monte Carlo replicate: prior draw, TSDE run, decomposition and diagnostics."""
    streams = run_streams(cfg.master_seed, run_index)
    try:
        theta1, _ = draw_true_theta(cfg, streams["prior"])
        rec = run(theta1, cfg.tsde_config(), run_index=run_index, streams=streams)
        attach_decomposition(rec, decompose(rec))
        diag = diagnostics_check(rec, cfg.certificate)
    except Exception as exc:  # noqa: BLE001 - a failed replicate is reported, not fatal
        log.warning("run %d failed: %s", run_index, exc)
        return RunOutcome(run_index, None, None, f"{type(exc).__name__}: {exc}")
    if not cfg.keep_trajectories:
        rec.trajectory = None
        rec.costs = np.empty(0)
    return RunOutcome(run_index, rec, diag)


def _simulate_star(args):
    return simulate_one(*args)


@dataclass
class CheckpointStat:
    T: int
    mean: float
    stderr: float
    n: int


@dataclass
class AggregateReport:
    """Monte Carlo summary.

    ``checkpoints`` averages the raw cumulative regret. ``decomposed_checkpoints``
    averages the same regret with the realized noise martingale subtracted; both
    have the same expectation but the latter has far smaller variance, so
    ``fit`` is computed on it and ``raw_fit`` on the former.
    """

    checkpoints: list[CheckpointStat]
    decomposed_checkpoints: list[CheckpointStat]
    fit: SlopeFit | None
    raw_fit: SlopeFit | None
    term_means: dict[str, float]
    pass_rates: dict[str, float | None]
    n_runs: int
    failures: list[tuple[int, str]]
    outcomes: list[RunOutcome] = field(repr=False)

    @property
    def records(self) -> list[RunRecord]:
        return [o.record for o in self.outcomes if o.record is not None]


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _checkpoint_stats(per_run: list[list[tuple[int, float]]]) -> list[CheckpointStat]:
    grid = [t for t, _ in per_run[0]]
    values = np.array([[r for _, r in cps] for cps in per_run])
    out = []
    for j, t in enumerate(grid):
        col = values[:, j]
        se = float(col.std(ddof=1) / math.sqrt(col.size)) if col.size > 1 else math.nan
        out.append(CheckpointStat(int(t), float(col.mean()), se, int(col.size)))
    return out


def _try_fit(stats: list[CheckpointStat]) -> SlopeFit | None:
    try:
        return fit_slope([(c.T, c.mean) for c in stats])
    except ValueError as exc:
        log.warning("slope fit unavailable: %s", exc)
        return None


def aggregate(outcomes: list[RunOutcome]) -> AggregateReport:
    ok = [o for o in outcomes if o.record is not None]
    failures = [(o.run_index, o.error or "") for o in outcomes if o.record is None]
    checkpoints: list[CheckpointStat] = []
    decomposed: list[CheckpointStat] = []
    fit = raw_fit = None
    term_means: dict[str, float] = {}
    pass_rates: dict[str, float | None] = {}
    if ok:
        checkpoints = _checkpoint_stats([o.record.checkpoints for o in ok])
        raw_fit = _try_fit(checkpoints)
        if all(o.record.decomposed_checkpoints for o in ok):
            decomposed = _checkpoint_stats([o.record.decomposed_checkpoints for o in ok])
            fit = _try_fit(decomposed)
        for name in ("regret", "R0", "R1", "R2", "R_mart"):
            term_means[name] = float(np.mean([getattr(o.record, name) for o in ok]))
        for name in ok[0].diagnostics.as_dict():
            flags = [o.diagnostics.as_dict()[name].passed for o in ok]
            flags = [f for f in flags if f is not None]
            pass_rates[name] = float(np.mean(flags)) if flags else None
    return AggregateReport(checkpoints, decomposed, fit, raw_fit, term_means, pass_rates,
                           len(outcomes), failures, outcomes)


def run_monte_carlo(cfg: MonteCarloConfig, workers: int | None = None) -> AggregateReport:
    """Independent replicates aggregated in run-index order.

    Each replicate's randomness derives only from ``(master_seed, run_index)``,
    so the report does not depend on ``workers``.
    """
    if cfg.n_runs < 2:
        raise ValueError("n_runs must be at least 2")
    workers = default_workers() if workers is None else workers
    jobs = [(cfg, i) for i in range(cfg.n_runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_simulate_star, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        outcomes = [simulate_one(*job) for job in jobs]
    return aggregate(outcomes)
