"""Ground-truth linear system driven by white Gaussian noise, with quadratic cost."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lqr_core import CostMatrices, SystemParams

NOISE_GENERATOR = f"numpy-{np.__version__}/Philox4x32-10/ziggurat-standard-normal"


class NonFiniteState(FloatingPointError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) behind every random stream in a run."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def run_streams(master_seed: int, run_index: int) -> dict[str, np.random.Generator]:
    """Independent per-run streams derived from ``(master_seed, run_index)``."""
    children = np.random.SeedSequence([int(master_seed), int(run_index)]).spawn(3)
    return {name: make_rng(ss) for name, ss in zip(("prior", "noise", "policy"), children)}


@dataclass
class EnvState:
    x: np.ndarray
    rng: np.random.Generator
    t: int = 1
    cumulative_cost: float = 0.0
    noise_max: float = 0.0
    noise_log: list[np.ndarray] | None = field(default=None, repr=False)

    @classmethod
    def initial(cls, n: int, rng: np.random.Generator, persist_noise: bool = False) -> "EnvState":
        return cls(np.zeros(n), rng, noise_log=[] if persist_noise else None)


def cost(x: np.ndarray, u: np.ndarray, cost: CostMatrices) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    return float(x @ cost.Q @ x + u @ cost.R @ u)


def draw_noise(rng: np.random.Generator, n: int, sigma_w2: float, size: int | None = None) -> np.ndarray:
    shape = (n,) if size is None else (size, n)
    return np.sqrt(sigma_w2) * rng.standard_normal(shape)


def step(env: EnvState, theta: SystemParams, u: np.ndarray, sigma_w2: float,
         cost_matrices: CostMatrices | None = None) -> EnvState:
    """Advance ``env`` in place by one transition and return it.

    When ``cost_matrices`` is given the stage cost of ``(x, u)`` is added to
    ``env.cumulative_cost`` before the transition.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != theta.m or env.x.shape[0] != theta.n:
        raise ValueError("state/control dimensions do not match the system")
    if cost_matrices is not None:
        env.cumulative_cost += cost(env.x, u, cost_matrices)
    w = draw_noise(env.rng, theta.n, sigma_w2)
    with np.errstate(over="ignore", invalid="ignore"):
        x_next = theta.A @ env.x + theta.B @ u + w
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState(f"state became non-finite at t={env.t}")
    env.x = x_next
    env.noise_max = max(env.noise_max, float(np.linalg.norm(w)))
    if env.noise_log is not None:
        env.noise_log.append(w)
    env.t += 1
    return env


def noise_max(env_or_noise) -> float:
    """Largest Euclidean noise norm over a run (from an env or a ``(T, n)`` array)."""
    if isinstance(env_or_noise, EnvState):
        if env_or_noise.noise_log is None:
            return env_or_noise.noise_max
        env_or_noise = np.array(env_or_noise.noise_log)
    w = np.asarray(env_or_noise, dtype=float)
    if w.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(w.reshape(w.shape[0], -1), axis=1)))


def write_noise_log(path: str | Path, noise: np.ndarray) -> None:
    """CSV with columns ``t, w1..wn``; ``t`` is 1-based."""
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    n = noise.shape[1]
    cols = ["t"] + [f"w{i + 1}" for i in range(n)]
    with open(path, "w", newline="") as fh:
        fh.write("# columns: " + ",".join(cols) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for t, w in enumerate(noise, start=1):
            writer.writerow([t] + [f"{v:.17g}" for v in w])


def read_noise_log(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in list(csv.reader(lines))[1:]:
        rows.append([float(v) for v in row[1:]])
    return np.array(rows)
