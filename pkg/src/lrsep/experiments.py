"""Experiment pipelines: replicas -> aggregation in index order -> statistics -> verdict."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import hydro, limit, stats
from .config import ExperimentConfig, derive_seed, replica_rng
from .kernel import JumpKernel, LevyExponent, build_kernel
from .lattice import (EnvironmentView, jump_decomposition, sample_equilibrium, sample_profile,
                      simulate, vn_coefficients)

log = logging.getLogger(__name__)

WORKERS_ENV = "LRSEP_WORKERS"


class ReplicaError(RuntimeError):
    pass


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def map_replicas(fn, count: int, seed: int, stream: int, workers: int | None = None) -> list:
    """``fn(index, rng)`` for every replica; results come back in index order."""

    def task(i):
        try:
            return fn(i, replica_rng(seed, i, stream))
        except Exception as exc:  # keep the replica context
            raise ReplicaError(f"replica {i} (stream {stream}, seed {derive_seed(seed, i, stream)}) "
                               f"failed: {exc}") from exc

    w = worker_count(workers)
    if w == 1 or count < 2:
        return [task(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(task, range(count)))


def _betas(cfg: ExperimentConfig) -> np.ndarray:
    b = np.asarray(cfg.betas, dtype=float)
    return b[:, None] if b.ndim == 1 else b


def _psi(exponent: LevyExponent, beta: np.ndarray) -> float:
    return float(exponent.psi(beta[0] if beta.size == 1 else beta))


# ---------------------------------------------------------------------------
# Equilibrium ladder (shared by equilibrium-cf, martingale-check, lln-functional)
# ---------------------------------------------------------------------------

@dataclass
class RungData:
    n: int
    side: int
    kernel: JumpKernel
    times: np.ndarray  # macroscopic observation times (T,)
    betas: np.ndarray  # (B, d)
    positions: np.ndarray  # scaled X_t^n, (R, T, d)
    integrals: np.ndarray  # n^-alpha int v_n ds, (R, T, B)
    rings: int

    @property
    def martingales(self) -> np.ndarray:
        phase = np.einsum("rtd,bd->rtb", self.positions, self.betas)
        return np.exp(1j * phase + self.integrals)

    @property
    def exponent(self) -> LevyExponent:
        return self.kernel.exponent(self.n)


def simulate_equilibrium_rung(cfg: ExperimentConfig, n: int, stream: int,
                              workers: int | None = None) -> RungData:
    side = cfg.side(n)
    kernel = build_kernel(cfg.alpha, cfg.dim, cfg.radius(n))
    betas = _betas(cfg)
    coef = vn_coefficients(kernel, side, betas, n)
    times = np.asarray(cfg.observation_times())
    micro = times * n**cfg.alpha

    def one(i, rng):
        st = sample_equilibrium(side, cfg.dim, cfg.rho, rng)
        rec = simulate(st, kernel, float(micro[-1]), rng, coef=coef, obs_times=micro)
        return rec.displacement / n, rec.integral, rec.rings

    out = map_replicas(one, cfg.replicas, cfg.seed, stream, workers)
    pos = np.array([o[0] for o in out], dtype=float)
    ints = np.array([o[1] for o in out], dtype=complex)
    return RungData(n, side, kernel, times, betas, pos, ints, int(sum(o[2] for o in out)))


def equilibrium_ladder(cfg: ExperimentConfig, workers: int | None = None) -> list[RungData]:
    return [simulate_equilibrium_rung(cfg, n, k, workers) for k, n in enumerate(cfg.n_ladder)]


def cf_tables(rungs: list[RungData], rho: float, control_variate: bool = True):
    """Per (t, n) CfReports of the lattice CF against ``exp(-(1-rho) t psi)``."""
    target_exp = rungs[-1].exponent
    psis = np.array([_psi(target_exp, b) for b in rungs[-1].betas])
    out = {}
    for ti, t in enumerate(rungs[-1].times):
        c = (1 - rho) * t * psis
        per_n = []
        for r in rungs:
            x = r.positions[:, ti, :]
            if control_variate:
                est = stats.martingale_cv_cf(x, r.martingales[:, ti, :], r.betas, c)
            else:
                est = stats.empirical_cf(x, r.betas)
            lookup = dict(zip(map(tuple, r.betas), np.exp(-c)))
            per_n.append((est, stats.cf_convergence_test(est, lambda b: lookup[tuple(np.atleast_1d(b))])))
        out[float(t)] = per_n
    return out, psis


def martingale_table(rung: RungData):
    """Mean of M per (t, beta) with componentwise standard errors."""
    m = rung.martingales
    mean = m.mean(axis=0)
    r = m.shape[0]
    if r > 1:
        se_re = m.real.std(axis=0, ddof=1) / math.sqrt(r)
        se_im = m.imag.std(axis=0, ddof=1) / math.sqrt(r)
    else:
        se_re = se_im = np.zeros(mean.shape)
    ok = (np.abs(mean.real - 1) <= 3 * se_re + 1e-12) & (np.abs(mean.imag) <= 3 * se_im + 1e-12)
    return mean, se_re, se_im, ok


def lln_tables(rungs: list[RungData], rho: float):
    exp_ = rungs[-1].exponent
    reports = {}
    for ti, t in enumerate(rungs[-1].times):
        for bi, b in enumerate(rungs[-1].betas):
            target = (1 - rho) * t * _psi(exp_, b)
            reports[(float(t), float(b[0]) if b.size == 1 else tuple(b))] = [
                stats.lln_functional_test(r.integrals[:, ti, bi], complex(target), r.n) for r in rungs]
    return reports


# ---------------------------------------------------------------------------
# Non-equilibrium pipelines
# ---------------------------------------------------------------------------

def _profile(cfg: ExperimentConfig):
    return hydro.make_profile(cfg.profile, **cfg.profile_params)


def hydro_comparison(cfg: ExperimentConfig, workers: int | None = None, stream: int = 0) -> dict:
    n = cfg.n_ladder[-1]
    side = cfg.side(n)
    thickness = cfg.torus_factor
    kernel = build_kernel(cfg.alpha, cfg.dim, cfg.radius(n))
    u0fn = _profile(cfg)
    micro = cfg.horizon * n**cfg.alpha

    def one(i, rng):
        st = sample_profile(side, cfg.dim, n, u0fn, rng)
        simulate(st, kernel, micro, rng)
        return hydro.empirical_density(st, n, cfg.bin_width)

    dens = map_replicas(one, cfg.replicas, cfg.seed, stream, workers)
    per_bin = int(round(cfg.bin_width * n))
    emp = hydro.DensityField(np.mean([d.values for d in dens], axis=0), dens[0].side, cfg.horizon,
                             dens[0].origin)
    exponent = LevyExponent(cfg.alpha, cfg.dim, kernel.p_star, outer=thickness / 2)
    u0 = hydro.field_from_profile(u0fn, side, float(thickness), cfg.dim)
    spectral = hydro.FractionalHeatSolver(side, float(thickness), cfg.dim, exponent=exponent).solve(u0, cfg.horizon)
    lattice_sym = hydro.FractionalHeatSolver(side, float(thickness), cfg.dim, kernel=kernel, n=n).solve(u0, cfg.horizon)
    binned = hydro.coarsen(spectral, per_bin)
    binned_lat = hydro.coarsen(lattice_sym, per_bin)
    l1 = hydro.l1_distance(binned, emp)
    oracle = None
    if cfg.dim == 1:
        rk = hydro.rk4_solve(u0, cfg.horizon, exponent)
        oracle = hydro.l2_distance(spectral, rk) / max(math.sqrt((rk.values**2).sum() * rk.spacing), 1e-300)
    return {"n": n, "empirical": emp, "spectral": binned, "lattice_symbol": binned_lat,
            "l1": l1, "l1_lattice_symbol": hydro.l1_distance(binned_lat, emp),
            "oracle_rel_l2": oracle, "max_clamp": spectral.max_clamp}


def nonequilibrium_samples(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    n = cfg.n_ladder[-1]
    side = cfg.side(n)
    kernel = build_kernel(cfg.alpha, cfg.dim, cfg.radius(n))
    u0fn = _profile(cfg)
    eps = cfg.effective_cutoff()
    t = cfg.horizon
    micro = t * n**cfg.alpha
    if cfg.dim != 1:
        raise NotImplementedError("the non-equilibrium comparison is implemented for d = 1")

    def lattice_one(i, rng):
        st = sample_profile(side, 1, n, u0fn, rng)
        rec = simulate(st, kernel, micro, rng)
        _, large = jump_decomposition(rec.trajectory, n, eps, cfg.alpha)
        return float(large.position(t)[0]), float(rec.displacement[-1, 0]) / n

    lat = np.array(map_replicas(lattice_one, cfg.replicas, cfg.seed, 0, workers))
    exponent = LevyExponent(cfg.alpha, 1, kernel.p_star, outer=cfg.torus_factor / 2)
    u0 = hydro.field_from_profile(u0fn, side, float(cfg.torus_factor), 1)
    traj = hydro.FractionalHeatSolver(side, float(cfg.torus_factor), 1, exponent=exponent).trajectory(
        u0, t, cfg.snapshot_dt)

    paths = map_replicas(lambda i, rng: limit.sample_thinned(traj, exponent, t, eps, rng),
                         cfg.replicas, cfg.seed, 1, workers)
    zend = np.array([p.end[0] for p in paths])
    times = [s for s in cfg.observation_times() if s <= t]
    mart = {}
    for b in _betas(cfg)[:, 0]:
        table = limit.compensator_table(traj, exponent, float(b), eps)
        vals = np.array([limit.limit_martingale_check(p, table, times) for p in paths])
        mart[float(b)] = vals
    return {"n": n, "cutoff": eps, "small_jump_variance": exponent.small_jump_variance(eps) * t,
            "lattice_large": lat[:, 0], "lattice_full": lat[:, 1], "limit": zend,
            "times": times, "martingales": mart}


def stationarity_profile(cfg: ExperimentConfig, workers: int | None = None) -> dict:
    n = cfg.n_ladder[-1]
    side = cfg.side(n)
    kernel = build_kernel(cfg.alpha, cfg.dim, cfg.radius(n))
    micro = cfg.micro_horizon if cfg.micro_horizon is not None else cfg.horizon * n**cfg.alpha
    probe = np.arange(-cfg.probe_radius, cfg.probe_radius + 1)
    probe = probe[probe != 0]
    if cfg.dim != 1:
        raise NotImplementedError("the stationarity probe is implemented for d = 1")

    def one(i, rng):
        st = sample_equilibrium(side, 1, cfg.rho, rng)
        simulate(st, kernel, float(micro), rng)
        view = EnvironmentView.from_state(st)
        return np.array([view(int(z)) for z in probe], dtype=float)

    occ = np.array(map_replicas(one, cfg.replicas, cfg.seed, 0, workers))
    mean = occ.mean(axis=0)
    sigma = math.sqrt(cfg.rho * (1 - cfg.rho) / cfg.replicas)
    ok = np.abs(mean - cfg.rho) <= 3 * sigma + 1e-12
    return {"sites": probe, "mean": mean, "sigma": sigma, "ok": ok, "micro_horizon": micro}


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    experiment: str
    config_hash: str
    code_version: str
    config: dict
    seeds: dict
    timing: dict
    outputs: dict
    verdict: bool
    summary: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


class _Outputs:
    """The orchestrator's writer; every file it writes lands in the inventory."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def csv(self, name: str, header: list[str], rows) -> None:
        path = self.root / name
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        self._hash(name)

    def json(self, name: str, text: str) -> None:
        (self.root / name).write_text(text + "\n", encoding="utf-8")
        self._hash(name)

    def _hash(self, name: str) -> None:
        self.files[name] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()


def _seed_table(cfg: ExperimentConfig, streams: int) -> dict:
    return {str(s): [derive_seed(cfg.seed, i, s) for i in range(cfg.replicas)] for s in range(streams)}


def _run_equilibrium(cfg: ExperimentConfig, out: _Outputs, workers) -> tuple[bool, dict]:
    rungs = equilibrium_ladder(cfg, workers)
    summary: dict = {"rings": [r.rings for r in rungs]}
    if cfg.experiment == "martingale-check":
        rows, verdict = [], True
        for r in rungs:
            mean, se_re, se_im, ok = martingale_table(r)
            verdict &= bool(ok.all())
            for ti, t in enumerate(r.times):
                for bi, b in enumerate(r.betas[:, 0]):
                    rows.append([r.n, float(t), float(b), mean[ti, bi].real, mean[ti, bi].imag,
                                 se_re[ti, bi], se_im[ti, bi], int(ok[ti, bi])])
        out.csv("martingale.csv", ["n", "t", "beta", "mean_re", "mean_im", "stderr_re", "stderr_im", "ok"], rows)
        summary["cells_ok"] = sum(r[-1] for r in rows)
        summary["cells"] = len(rows)
        out.json("report.json", stats.report_json(cfg.experiment, {"max_abs_z": _max_z(rows)}, None, verdict))
        return verdict, summary

    if cfg.experiment == "lln-functional":
        reports = lln_tables(rungs, cfg.rho)
        rows, verdict = [], True
        for (t, b), reps in reports.items():
            ratio = reps[-1].variance / reps[0].variance if reps[0].variance > 0 else 0.0
            ok = (ratio < 0.5 or len(reps) == 1) and reps[-1].within_3se
            verdict &= bool(ok)
            for rep in reps:
                rows.append([rep.n, t, b, rep.mean[0], rep.mean[1], rep.stderr[0], rep.stderr[1],
                             rep.variance, rep.target[0], rep.zscore, ratio, int(ok)])
        out.csv("lln.csv", ["n", "t", "beta", "mean_re", "mean_im", "stderr_re", "stderr_im", "variance",
                            "target", "zscore", "variance_ratio", "ok"], rows)
        out.json("report.json", stats.report_json(cfg.experiment, {"rows": len(rows)}, None, verdict))
        return verdict, summary

    tables, psis = cf_tables(rungs, cfg.rho)
    plain, _ = cf_tables(rungs, cfg.rho, control_variate=False)
    rows, ladders, verdict = [], {}, True
    for t, per_n in tables.items():
        lad = stats.ladder_verdict(cfg.n_ladder, [rep for _, rep in per_n], cfg.threshold)
        if len(cfg.n_ladder) == 1:
            lad.verdict = lad.final_ok
        ladders[str(t)] = asdict(lad)
        verdict &= lad.verdict
        for (est, rep), (pest, prep), n in zip(per_n, plain[t], cfg.n_ladder):
            for bi in range(est.betas.shape[0]):
                rows.append([n, t, float(est.betas[bi, 0]), est.estimates[bi].real, est.estimates[bi].imag,
                             est.stderr[bi, 0], est.stderr[bi, 1], rep.target[bi][0], rep.deviation[bi],
                             rep.zscore[bi], pest.estimates[bi].real, pest.estimates[bi].imag, prep.deviation[bi]])
    out.csv("cf.csv", ["n", "t", "beta", "estimate_re", "estimate_im", "stderr_re", "stderr_im", "target",
                       "deviation", "zscore", "plain_re", "plain_im", "plain_deviation"], rows)
    out.json("report.json", stats.report_json(cfg.experiment, {"psi": psis.tolist()}, None, verdict,
                                              ladders=ladders))
    return verdict, summary


def _max_z(rows) -> float:
    z = 0.0
    for r in rows:
        for dev, se in ((r[3] - 1.0, r[5]), (r[4], r[6])):
            if se > 0:
                z = max(z, abs(dev) / se)
    return z


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> RunManifest:
    """Run one configured experiment and write its outputs plus ``manifest.json``."""
    root = Path(out_dir if out_dir is not None else cfg.output)
    out = _Outputs(root)
    t0 = time.perf_counter()
    streams = 1
    if cfg.experiment in ("equilibrium-cf", "martingale-check", "lln-functional"):
        verdict, summary = _run_equilibrium(cfg, out, workers)
        streams = len(cfg.n_ladder)
    elif cfg.experiment == "hydro-limit":
        res = hydro_comparison(cfg, workers)
        oracle_ok = res["oracle_rel_l2"] is None or res["oracle_rel_l2"] <= 1e-3
        verdict = bool(res["l1"] <= cfg.threshold and oracle_ok)
        emp, spec, lat = res["empirical"], res["spectral"], res["lattice_symbol"]
        out.csv("density.csv", ["x", "empirical", "spectral", "spectral_lattice_symbol"],
                zip(emp.axis(), emp.values.ravel(), spec.values.ravel(), lat.values.ravel()))
        summary = {k: res[k] for k in ("n", "l1", "l1_lattice_symbol", "oracle_rel_l2", "max_clamp")}
        out.json("report.json", stats.report_json(cfg.experiment, {"l1": res["l1"]}, [0.0, cfg.threshold],
                                                  verdict, oracle_rel_l2=res["oracle_rel_l2"]))
    elif cfg.experiment == "nonequilibrium-compare":
        res = nonequilibrium_samples(cfg, workers)
        streams = 2
        rng = replica_rng(cfg.seed, 0, 2)
        stat, p = stats.energy_distance(res["lattice_large"], res["limit"], cfg.permutations, rng)
        rows, m_ok = [], True
        for b, vals in res["martingales"].items():
            mean = vals.mean(axis=0)
            se_re = vals.real.std(axis=0, ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0 * mean.real
            se_im = vals.imag.std(axis=0, ddof=1) / math.sqrt(len(vals)) if len(vals) > 1 else 0 * mean.real
            for k, s in enumerate(res["times"]):
                ok = abs(mean[k].real - 1) <= 3 * se_re[k] + 1e-12 and abs(mean[k].imag) <= 3 * se_im[k] + 1e-12
                m_ok &= bool(ok)
                rows.append([b, s, mean[k].real, mean[k].imag, se_re[k], se_im[k], int(ok)])
        verdict = bool(p >= 0.01 and m_ok)
        out.csv("samples.csv", ["replica", "lattice_large_jumps", "lattice_full", "limit"],
                zip(range(cfg.replicas), res["lattice_large"], res["lattice_full"], res["limit"]))
        out.csv("limit_martingale.csv", ["beta", "t", "mean_re", "mean_im", "stderr_re", "stderr_im", "ok"], rows)
        summary = {"energy": stat, "p_value": p, "cutoff": res["cutoff"],
                   "small_jump_variance": res["small_jump_variance"], "martingale_ok": m_ok}
        out.json("report.json", stats.report_json(cfg.experiment, {"energy": stat, "p_value": p},
                                                  [0.01, 1.0], verdict, martingale=rows))
    elif cfg.experiment == "stationarity":
        res = stationarity_profile(cfg, workers)
        verdict = bool(res["ok"].all())
        out.csv("environment.csv", ["z", "mean", "sigma", "ok"],
                [(int(z), m, res["sigma"], int(o)) for z, m, o in zip(res["sites"], res["mean"], res["ok"])])
        summary = {"sites_ok": int(res["ok"].sum()), "sites": int(res["ok"].size)}
        out.json("report.json", stats.report_json(cfg.experiment, {"max_abs_z": float(
            np.max(np.abs(res["mean"] - cfg.rho)) / res["sigma"]) if res["sigma"] > 0 else 0.0},
            None, verdict))
    else:  # validated configs never get here
        raise ValueError(f"unknown experiment {cfg.experiment!r}")
    elapsed = time.perf_counter() - t0
    manifest = RunManifest(cfg.experiment, cfg.digest(), __version__, cfg.to_dict(),
                           _seed_table(cfg, streams), {"seconds": elapsed},
                           dict(out.files), bool(verdict), _plain(summary))
    (root / "manifest.json").write_text(manifest.to_json() + "\n", encoding="utf-8")
    return manifest


def _plain(d):
    return json.loads(json.dumps(d, default=lambda o: o.item() if hasattr(o, "item") else str(o)))
