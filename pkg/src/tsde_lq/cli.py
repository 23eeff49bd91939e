"""Config-driven experiment runner: certification, Monte Carlo regret and plot data.

Usage::

    tsde-lq certify experiment.yaml
    tsde-lq run experiment.yaml [--n-runs N] [--master-seed S] [--out DIR] ...
    tsde-lq plotdata out/checkpoints.csv

Exit codes: 0 ok, 1 bad config or input, 2 certification failure, 3 run failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .lqr_core import CostMatrices
from .posterior import SupportSet
from .regret import AggregateReport, MonteCarloConfig, fit_slope, run_monte_carlo
from .sim import NOISE_GENERATOR, write_noise_log
from .stability import StabilityCertificate, certify
from .tsde import default_checkpoints

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CERTIFICATION = 2
EXIT_RUN = 3

_AUTO = re.compile(r"^auto(?:\s*\+\s*(\d+))?$")

Matrix = tuple[tuple[float, ...], ...]


class ConfigError(ValueError):
    """Schema violation; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _matrix(value: Any, name: str, shape: tuple[int, int] | None = None) -> Matrix:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, f"not a numeric matrix ({exc})") from None
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ConfigError(name, f"expected a row-major nested list, got {arr.ndim} dimensions")
    if shape is not None and arr.shape != shape:
        raise ConfigError(name, f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(name, "entries must be finite")
    return tuple(tuple(float(v) for v in row) for row in arr)


def _require_pd(M: Matrix, name: str) -> None:
    arr = np.array(M)
    if not np.allclose(arr, arr.T, rtol=0, atol=1e-12 * max(1.0, np.abs(arr).max())):
        raise ConfigError(name, "must be symmetric")
    lam = float(np.linalg.eigvalsh(0.5 * (arr + arr.T)).min())
    if lam <= 0:
        raise ConfigError(name, f"must be positive definite (smallest eigenvalue {lam:.6g})")


def _auto_or_int(value: Any, name: str) -> int | str:
    if isinstance(value, bool):
        raise ConfigError(name, "expected an integer or 'auto'")
    if isinstance(value, int):
        if value < 0:
            raise ConfigError(name, "must be nonnegative")
        return value
    if isinstance(value, str):
        m = _AUTO.match(value.strip())
        if m:
            return "auto" if m.group(1) is None else f"auto+{int(m.group(1))}"
    raise ConfigError(name, f"expected an integer, 'auto' or 'auto+K', got {value!r}")


@dataclass(frozen=True)
class SupportSpec:
    kind: str  # "box" or "ball"
    center: Matrix
    radius: Matrix | float

    def build(self, certified_delta: float | None = None, cost: CostMatrices | None = None) -> SupportSet:
        radius = np.array(self.radius) if isinstance(self.radius, tuple) else float(self.radius)
        return SupportSet(self.kind, np.array(self.center), radius, certified_delta=certified_delta, cost=cost)

    def to_dict(self) -> dict:
        radius = [list(r) for r in self.radius] if isinstance(self.radius, tuple) else self.radius
        return {"kind": self.kind, "center": [list(r) for r in self.center], "radius": radius}


@dataclass(frozen=True)
class Flags:
    persist_noise: bool = False
    persist_trajectory: bool = False
    allow_uncertified_support: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully defaulted experiment description.

    Matrices are stored as nested tuples so configs compare by value. The prior
    mean has one column per state coordinate (shape ``(n + m, n)``) and all
    columns share the covariance ``Sigma`` (``(n + m, n + m)``).
    """

    n: int
    m: int
    sigma_w2: float
    Q: Matrix
    R: Matrix
    prior_means: Matrix
    prior_Sigma: Matrix
    support: SupportSpec | None
    T: int
    T_min: int | str
    epsilon: float | str
    n_runs: int
    master_seed: int
    checkpoints: tuple[int, ...]
    output_dir: str
    certify_samples: int = 500
    certify_seed: int = 0
    flags: Flags = field(default_factory=Flags)

    @property
    def d(self) -> int:
        return self.n + self.m

    @property
    def cost(self) -> CostMatrices:
        return CostMatrices(np.array(self.Q), np.array(self.R))

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("Q", "R"):
                out.setdefault("cost", {})[f.name] = [list(r) for r in value]
            elif f.name == "prior_means":
                out.setdefault("prior", {})["means"] = [list(r) for r in value]
            elif f.name == "prior_Sigma":
                out.setdefault("prior", {})["Sigma"] = [list(r) for r in value]
            elif f.name == "support":
                out["support"] = None if value is None else value.to_dict()
            elif f.name == "checkpoints":
                out["checkpoints"] = list(value)
            elif f.name == "flags":
                out["flags"] = asdict(value)
            elif f.name in ("certify_samples", "certify_seed"):
                out.setdefault("certification", {})[f.name.split("_", 1)[1]] = value
            else:
                out[f.name] = value
        return out


_TOP_KEYS = {"n", "m", "sigma_w2", "cost", "prior", "support", "T", "T_min", "epsilon", "n_runs",
             "master_seed", "checkpoints", "output_dir", "certification", "flags"}


def _int(raw: dict, key: str, default: int, minimum: int = 0) -> int:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(key, f"must be >= {minimum}")
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed mapping and fill every default."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    n = _int(raw, "n", 1, 1)
    m = _int(raw, "m", 1, 1)
    d = n + m

    sigma_w2 = raw.get("sigma_w2", 1.0)
    if isinstance(sigma_w2, bool) or not isinstance(sigma_w2, (int, float)) or not sigma_w2 >= 0:
        raise ConfigError("sigma_w2", "must be a nonnegative number")

    cost_raw = raw.get("cost") or {}
    Q = _matrix(cost_raw.get("Q", np.eye(n).tolist()), "cost.Q", (n, n))
    R = _matrix(cost_raw.get("R", np.eye(m).tolist()), "cost.R", (m, m))
    _require_pd(Q, "cost.Q")
    _require_pd(R, "cost.R")

    prior_raw = raw.get("prior") or {}
    means = _matrix(prior_raw.get("means", np.zeros((d, n)).tolist()), "prior.means", (d, n))
    Sigma = _matrix(prior_raw.get("Sigma", np.eye(d).tolist()), "prior.Sigma", (d, d))
    _require_pd(Sigma, "prior.Sigma")

    support = _parse_support(raw.get("support"), d, n)

    T = _int(raw, "T", 1000, 1)
    T_min = _auto_or_int(raw.get("T_min", "auto"), "T_min")
    eps = raw.get("epsilon", "auto")
    if eps != "auto":
        if isinstance(eps, bool) or not isinstance(eps, (int, float)) or not 0 < eps < 1:
            raise ConfigError("epsilon", "expected 'auto' or a number in (0, 1)")
        eps = float(eps)
    n_runs = _int(raw, "n_runs", 100, 0)
    if n_runs == 1:
        raise ConfigError("n_runs", "use 0 for certification only or at least 2 runs")
    master_seed = _int(raw, "master_seed", 0, 0)

    cps = raw.get("checkpoints")
    if cps is None:
        checkpoints = default_checkpoints(T)
    else:
        if not isinstance(cps, list) or not cps or not all(isinstance(c, int) and not isinstance(c, bool) for c in cps):
            raise ConfigError("checkpoints", "expected a nonempty list of integers")
        if any(c < 1 or c > T for c in cps):
            raise ConfigError("checkpoints", f"values must lie in [1, T={T}]")
        checkpoints = tuple(sorted(set(cps)))

    output_dir = raw.get("output_dir", "out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", "expected a nonempty path string")

    cert_raw = raw.get("certification") or {}
    if set(cert_raw) - {"samples", "seed"}:
        raise ConfigError("certification", "only 'samples' and 'seed' are allowed")
    certify_samples = _int(cert_raw, "samples", 500, 0)
    certify_seed = _int(cert_raw, "seed", 0, 0)

    flags_raw = raw.get("flags") or {}
    known = {f.name for f in fields(Flags)}
    for k, v in flags_raw.items():
        if k not in known:
            raise ConfigError(f"flags.{k}", "unknown flag")
        if not isinstance(v, bool):
            raise ConfigError(f"flags.{k}", "expected true or false")

    return ExperimentConfig(
        n=n, m=m, sigma_w2=float(sigma_w2), Q=Q, R=R, prior_means=means, prior_Sigma=Sigma,
        support=support, T=T, T_min=T_min, epsilon=eps, n_runs=n_runs, master_seed=master_seed,
        checkpoints=checkpoints, output_dir=output_dir, certify_samples=certify_samples,
        certify_seed=certify_seed, flags=Flags(**flags_raw),
    )


def _parse_support(raw: Any, d: int, n: int) -> SupportSpec | None:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError("support", "expected a mapping")
    kind = raw.get("kind", "box")
    if kind not in ("box", "ball"):
        raise ConfigError("support.kind", "expected 'box' or 'ball'")
    if kind == "box" and ("lower" in raw or "upper" in raw):
        if "center" in raw or "radius" in raw:
            raise ConfigError("support", "give either lower/upper or center/radius")
        lo = np.array(_matrix(raw.get("lower"), "support.lower", (d, n)))
        hi = np.array(_matrix(raw.get("upper"), "support.upper", (d, n)))
        if np.any(hi < lo):
            raise ConfigError("support.upper", "must be >= lower entrywise")
        box = SupportSet.box_from_bounds(lo, hi)
        return SupportSpec("box", _matrix(box.center, "support.center"), _matrix(box.radius, "support.radius"))
    center = _matrix(raw.get("center"), "support.center", (d, n))
    r = raw.get("radius")
    if kind == "ball":
        if isinstance(r, bool) or not isinstance(r, (int, float)) or not r >= 0:
            raise ConfigError("support.radius", "ball radius must be a nonnegative number")
        return SupportSpec("ball", center, float(r))
    if isinstance(r, (int, float)) and not isinstance(r, bool):
        r = np.full((d, n), float(r)).tolist()
    radius = _matrix(r, "support.radius", (d, n))
    if np.any(np.array(radius) < 0):
        raise ConfigError("support.radius", "must be nonnegative")
    return SupportSpec("box", center, radius)


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"{path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"malformed YAML: {exc}") from None
    return config_from_dict(raw or {})


def dump_config(cfg: ExperimentConfig, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def resolve_t_min(value: int | str, cert: StabilityCertificate | None) -> int:
    if isinstance(value, int):
        return value
    offset = int(value.split("+")[1]) if "+" in value else 0
    if cert is None:
        raise ValueError("T_min = auto needs a stability certificate")
    return cert.t_min_star + offset


# ---------------------------------------------------------------- outputs

def _fmt(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return "" if v is None else str(v)


def write_csv(path: Path, columns: list[str], rows: list[list[Any]], header_notes: list[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for note in header_notes:
            fh.write(f"# {note}\n")
        fh.write("# columns: " + ",".join(columns) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader.fieldnames or []), list(reader)


RUN_SCALARS = ["cumulative_cost", "J_star", "regret", "X_T", "W_T", "K_T", "M", "R0", "R1", "R2", "R_mart",
               "fallback_events", "M_G", "lambda_min"]
DIAGNOSTIC_NAMES = ["episode_length", "trigger_soundness", "det_ratio_post", "det_ratio_pre", "macro_count",
                    "state_bound"]


def _run_rows(cfg: ExperimentConfig, report: AggregateReport, t_min: int) -> tuple[list[str], list[list[Any]]]:
    d, n = cfg.d, cfg.n
    theta_cols = [f"theta_{i + 1}_{j + 1}" for i in range(d) for j in range(n)]
    columns = ["run_index", "master_seed", "T", "T_min"] + theta_cols + RUN_SCALARS + \
        [f"pass_{name}" for name in DIAGNOSTIC_NAMES] + ["alpha0", "error"]
    rows = []
    for o in report.outcomes:
        head = [o.run_index, cfg.master_seed, cfg.T, t_min]
        if o.record is None:
            rows.append(head + [math.nan] * (len(theta_cols) + len(RUN_SCALARS)) +
                        [""] * len(DIAGNOSTIC_NAMES) + [math.nan, o.error])
            continue
        rec = o.record
        diag = o.diagnostics.as_dict()
        passes = ["" if diag[k].passed is None else diag[k].passed for k in DIAGNOSTIC_NAMES]
        rows.append(head + list(np.asarray(rec.true_theta).ravel()) + [getattr(rec, k) for k in RUN_SCALARS] +
                    passes + [o.diagnostics.alpha0, ""])
    return columns, rows


def _write_run_artifacts(out: Path, report: AggregateReport, flags: Flags) -> None:
    if flags.persist_noise:
        (out / "noise").mkdir(exist_ok=True)
    if flags.persist_trajectory:
        (out / "trajectories").mkdir(exist_ok=True)
    episode_rows = []
    for rec in report.records:
        if flags.persist_noise and rec.trajectory is not None:
            write_noise_log(out / "noise" / f"run_{rec.run_index:05d}.csv", rec.trajectory.w)
        if flags.persist_trajectory and rec.trajectory is not None:
            tr = rec.trajectory
            n, m = tr.x.shape[1], tr.u.shape[1]
            cols = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)] + ["cost", "log_det_precision"]
            rows = [[t + 1, *tr.x[t], *tr.u[t], rec.costs[t], tr.log_det[t]] for t in range(rec.T)]
            write_csv(out / "trajectories" / f"run_{rec.run_index:05d}.csv", cols, rows)
        if flags.persist_trajectory:
            for e in rec.episodes:
                episode_rows.append([rec.run_index, e.k, e.t_k, e.length, e.trigger or "open", e.macro_id,
                                     e.projected, e.J, *np.asarray(e.theta_bar).ravel()])
    if flags.persist_trajectory and report.records:
        d_n = np.asarray(report.records[0].true_theta).size
        cols = ["run_index", "k", "t_k", "length", "trigger", "macro_id", "projected", "J"] + \
            [f"theta_bar_{i + 1}" for i in range(d_n)]
        write_csv(out / "episodes.csv", cols, episode_rows)


def _summary(cfg: ExperimentConfig, cert: StabilityCertificate | None, t_min: int,
             report: AggregateReport | None) -> str:
    lines = [
        f"generated: {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
        f"noise generator: {NOISE_GENERATOR}",
        f"n={cfg.n} m={cfg.m} sigma_w2={cfg.sigma_w2:g} T={cfg.T} T_min={t_min} "
        f"n_runs={cfg.n_runs} master_seed={cfg.master_seed}",
    ]
    if cert is None:
        lines.append("certificate: none (support not certified)")
    else:
        lines.append(f"certificate: delta={cert.delta:.6g} epsilon={cert.epsilon:.6g} alpha={cert.alpha:.6g} "
                     f"T*_min={cert.t_min_star} pairs_checked={cert.pairs_checked}")
    if report is None:
        return "\n".join(lines) + "\n"
    ok = report.n_runs - len(report.failures)
    lines.append(f"completed runs: {ok} of {report.n_runs} (failures: {len(report.failures)})")
    for label, fit in (("slope fit (martingale-corrected regret)", report.fit),
                       ("slope fit (raw regret)", report.raw_fit)):
        if fit is None:
            lines.append(f"{label}: unavailable")
        else:
            lines.append(f"{label}: slope={fit.slope:.6f} intercept={fit.intercept:.6f} "
                         f"r2={fit.r_squared:.6f} skipped={fit.skipped}")
    lines.append("mean regret by checkpoint (corrected +- se | raw +- se):")
    for c, r in zip(report.decomposed_checkpoints, report.checkpoints):
        lines.append(f"  T={c.T}: {c.mean:.6g} +- {c.stderr:.3g} | {r.mean:.6g} +- {r.stderr:.3g}")
    lines.append("term means: " + " ".join(f"{k}={v:.6g}" for k, v in report.term_means.items()))
    lines.append("diagnostic pass rates:")
    for k, v in report.pass_rates.items():
        lines.append(f"  {k}: {'n/a' if v is None else f'{v:.4f}'}")
    for idx, err in report.failures[:10]:
        lines.append(f"failed run {idx}: {err}")
    return "\n".join(lines) + "\n"


def _certify(cfg: ExperimentConfig) -> tuple[StabilityCertificate | None, str]:
    if cfg.support is None:
        return None, "no support given; certification needs a compact support"
    eps = None if cfg.epsilon == "auto" else cfg.epsilon
    try:
        cert, pairs = certify(cfg.support.build(), cfg.cost, cfg.certify_samples, cfg.certify_seed, epsilon=eps)
    except (ValueError, OverflowError) as exc:
        return None, str(exc)
    if cert is None:
        return None, f"sampled closed loops are not stable (max spectral radius {pairs.max_rho:.6g})"
    return cert, ""


def _write_certificate(out: Path, cfg: ExperimentConfig, cert: StabilityCertificate | None, reason: str) -> None:
    payload: dict[str, Any] = {"certified": cert is not None, "noise_generator": NOISE_GENERATOR}
    if cert is not None:
        payload.update(cert.to_dict())
    else:
        payload["reason"] = reason
    (out / "certificate.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, certify_only: bool = False) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    cert, reason = _certify(cfg)
    _write_certificate(out, cfg, cert, reason)
    if cert is None:
        log.error("certification failed: %s", reason)
        if not cfg.flags.allow_uncertified_support:
            return EXIT_CERTIFICATION
        log.warning("continuing with an uncertified support")
    else:
        log.info("certified: T*_min=%d alpha=%.4g delta=%.4g", cert.t_min_star, cert.alpha, cert.delta)

    if isinstance(cfg.T_min, str) and cert is None:
        t_min = int(cfg.T_min.split("+")[1]) if "+" in cfg.T_min else 0
        log.warning("T_min=%s without a certificate resolves to %d", cfg.T_min, t_min)
    else:
        t_min = resolve_t_min(cfg.T_min, cert)

    if certify_only or cfg.n_runs == 0:
        (out / "summary.txt").write_text(_summary(cfg, cert, t_min, None))
        return EXIT_OK

    keep = cfg.flags.persist_noise or cfg.flags.persist_trajectory
    mc = MonteCarloConfig(
        prior_means=np.array(cfg.prior_means), prior_Sigma=np.array(cfg.prior_Sigma),
        support=None if cfg.support is None else cfg.support.build(), cost=cfg.cost, sigma_w2=cfg.sigma_w2,
        T=cfg.T, t_min=t_min, n_runs=cfg.n_runs, master_seed=cfg.master_seed, checkpoints=cfg.checkpoints,
        certificate=cert, keep_trajectories=keep,
    )
    report = run_monte_carlo(mc)

    columns, rows = _run_rows(cfg, report, t_min)
    write_csv(out / "runs.csv", columns, rows, [f"noise_generator: {NOISE_GENERATOR}"])
    cp_rows = [[c.T, c.mean, c.stderr, r.mean, r.stderr, c.n]
               for c, r in zip(report.decomposed_checkpoints, report.checkpoints)]
    write_csv(out / "checkpoints.csv", ["T", "mean_regret", "stderr", "raw_mean_regret", "raw_stderr", "n_runs"],
              cp_rows)
    _write_run_artifacts(out, report, cfg.flags)
    (out / "summary.txt").write_text(_summary(cfg, cert, t_min, report))
    if report.failures:
        log.error("%d of %d runs failed", len(report.failures), report.n_runs)
        return EXIT_RUN
    return EXIT_OK


def emit_plot_data(checkpoints_csv: str | Path, out_dir: str | Path | None = None,
                   column: str = "mean_regret") -> dict[str, Any]:
    """Write ``plotdata.csv`` (log T, log regret, fitted line, sqrt-T reference).

    The reference curve is ``c sqrt(T)`` with ``c = regret(T_max) / sqrt(T_max)``.
    Nonpositive regrets get no log value and are left out of the fit. Returns
    the fit (or ``None``) and the anchoring constant.
    """
    path = Path(checkpoints_csv)
    cols, rows = read_csv(path)
    if not rows:
        raise ValueError(f"{path} has no checkpoint rows")
    if column not in cols:
        raise ValueError(f"{path} has no column {column!r}")
    data = sorted((int(r["T"]), float(r[column])) for r in rows)
    T_max, y_max = data[-1]
    anchor = y_max / math.sqrt(T_max)
    fit = None
    notice = ""
    try:
        fit = fit_slope(data)
    except ValueError as exc:
        notice = f"fit omitted: {exc}"
        log.warning(notice)
    out_rows = []
    for T, y in data:
        logy = math.log(y) if y > 0 else math.nan
        fitted = fit.intercept + fit.slope * math.log(T) if fit is not None else math.nan
        ref = anchor * math.sqrt(T)
        out_rows.append([T, math.log(T), y, logy, fitted, ref, math.log(ref) if ref > 0 else math.nan])
    notes = []
    if fit is not None:
        notes.append(f"fit: slope={fit.slope:.17g} intercept={fit.intercept:.17g} r2={fit.r_squared:.17g} "
                     f"skipped={fit.skipped}")
    else:
        notes.append(notice)
    notes.append(f"reference: c*sqrt(T) with c={anchor:.17g}")
    target = Path(out_dir) if out_dir is not None else path.parent
    target.mkdir(parents=True, exist_ok=True)
    write_csv(target / "plotdata.csv",
              ["T", "log_T", "regret", "log_regret", "fitted_log_regret", "sqrt_T_reference", "log_sqrt_T_reference"],
              out_rows, notes)
    return {"fit": fit, "anchor": anchor, "path": target / "plotdata.csv", "notice": notice}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsde-lq", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("config")
        sp.add_argument("--out", dest="output_dir")
        sp.add_argument("--n-runs", type=int)
        sp.add_argument("--master-seed", type=int)
        sp.add_argument("--T", dest="T", type=int)
        sp.add_argument("--t-min", dest="T_min")
        sp.add_argument("--epsilon")
        for flag in ("persist-noise", "persist-trajectory", "allow-uncertified-support"):
            sp.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction, default=None)

    overrides(sub.add_parser("certify", help="certify the support and write certificate.json"))
    overrides(sub.add_parser("run", help="certify, then run the Monte Carlo experiment"))
    pd = sub.add_parser("plotdata", help="write plotdata.csv next to a checkpoints.csv")
    pd.add_argument("checkpoints")
    pd.add_argument("--out", dest="output_dir")
    pd.add_argument("--column", default="mean_regret")
    return p


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Command-line values replace file values; the result is re-validated."""
    raw = cfg.to_dict()
    for key in ("output_dir", "n_runs", "master_seed", "T"):
        if getattr(args, key, None) is not None:
            raw[key] = getattr(args, key)
    if getattr(args, "T_min", None) is not None:
        raw["T_min"] = int(args.T_min) if args.T_min.isdigit() else args.T_min
    if getattr(args, "epsilon", None) is not None:
        raw["epsilon"] = args.epsilon if args.epsilon == "auto" else float(args.epsilon)
    if getattr(args, "T", None) is not None and args.T != cfg.T:
        raw["checkpoints"] = None  # regenerate for the new horizon
    for key in ("persist_noise", "persist_trajectory", "allow_uncertified_support"):
        value = getattr(args, key, None)
        if value is not None:
            raw["flags"][key] = value
    return config_from_dict(raw)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "plotdata":
        try:
            info = emit_plot_data(args.checkpoints, args.output_dir, args.column)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if info["notice"]:
            print(info["notice"])
        print(f"wrote {info['path']}")
        return EXIT_OK
    try:
        cfg = apply_overrides(parse_config(args.config), args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code = run_experiment(cfg, certify_only=args.command == "certify")
    print(f"{args.command}: exit {code}; outputs in {cfg.output_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
