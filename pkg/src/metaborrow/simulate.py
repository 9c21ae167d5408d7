"""Monte-Carlo harness for the full borrowing pipeline.

Each replication generates K completed trials plus one target trial from
a linear outcome model with a treatment-by-covariate interaction,
exposes only arm-level summaries of the completed trials, and runs the
pipeline (meta-regression -> reconstruction -> importance weights ->
weighted regression) next to an unweighted target-only comparator.
Replications are independently seeded, so a cell aggregates to the same
result at any parallelism level.

Truth used everywhere: Y = 1 + 2 z - x + 0.5 z x + Normal(0, 1), so the
target-population average treatment effect is exactly 2.
"""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.random import SeedSequence, default_rng

from .data import ArmSummary, SubjectRecord, TrialSummary, make_dataset
from .errors import ConfigError, DataError, MetaborrowError
from .estimate import (MEAT_KINDS, choose_model, estimate_univariate,
                       fit_weighted_regression)
from .meta import build_design, fit_dl
from .reconstruct import BORROW_MODES, ReconstructionConfig, reconstruct_all
from .weights import compute_weights, fit_membership

TRUE_DELTA = 2.0
TRUE_BETA0 = 1.0
TRUE_BETA1 = -1.0
TRUE_BETA2 = 0.5

COVARIATE_DISTS = ("normal", "chisq2")
ALLOCATIONS = ("one_to_one", "three_to_one", "single_arm")
MODEL_SPECS = ("identified", "misidentified")

# Estimator labels used in results and CSV output.
EST_POOLED = "pooled_regression"      # weighted regression on target + reconstructed
EST_POOLED_UNI = "pooled_univariate"  # weighted difference of arm means
EST_TARGET = "target_regression"      # unweighted regression on the target alone


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation cell.

    ``model_spec`` governs only the final outcome regressions (both the
    pooled and the target-only fit): ``identified`` fits
    (1, z, x, z*x), ``misidentified`` fits (1, z).  The meta-regression
    and reconstruction always use the full covariate model.
    """

    K: int = 10
    n: int = 100
    covariate_dist: str = "normal"
    allocation: str = "one_to_one"
    model_spec: str = "identified"
    borrow: str = "both_arms"
    replications: int = 500
    base_seed: int = 7
    meat: str = "w3"

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.n < 4:
            raise ConfigError(f"n must be >= 4, got {self.n}")
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if self.covariate_dist not in COVARIATE_DISTS:
            raise ConfigError(f"covariate_dist must be one of {COVARIATE_DISTS}")
        if self.allocation not in ALLOCATIONS:
            raise ConfigError(f"allocation must be one of {ALLOCATIONS}")
        if self.model_spec not in MODEL_SPECS:
            raise ConfigError(f"model_spec must be one of {MODEL_SPECS}")
        if self.borrow not in BORROW_MODES:
            raise ConfigError(f"borrow must be one of {BORROW_MODES}")
        if self.meat not in MEAT_KINDS:
            raise ConfigError(f"meat must be one of {MEAT_KINDS}")

    @property
    def delta0_grid(self):
        """Null values delta0 = 2.0, 2.1, ..., 4.0 for the power curve."""
        return tuple(round(TRUE_DELTA + 0.1 * i, 1) for i in range(21))

    @property
    def label(self):
        return (f"K{self.K}-n{self.n}-{self.covariate_dist}-{self.allocation}-"
                f"{self.model_spec}-{self.borrow}-reps{self.replications}-"
                f"seed{self.base_seed}-{self.meat}")

    @classmethod
    def from_label(cls, label):
        """Invert :attr:`label`; lets a CSV row identify its cell exactly."""
        parts = label.split("-")
        if len(parts) != 9:
            raise ConfigError(f"cannot parse scenario label {label!r}")
        try:
            return cls(
                K=int(parts[0].removeprefix("K")),
                n=int(parts[1].removeprefix("n")),
                covariate_dist=parts[2],
                allocation=parts[3],
                model_spec=parts[4],
                borrow=parts[5],
                replications=int(parts[6].removeprefix("reps")),
                base_seed=int(parts[7].removeprefix("seed")),
                meat=parts[8],
            )
        except ValueError as exc:
            raise ConfigError(f"cannot parse scenario label {label!r}: {exc}") from exc


def _draw_covariates(rng, mu, size, dist):
    if dist == "normal":
        return rng.normal(mu, 1.0, size)
    # chi-square(2)/2 has mean 1 and variance 1; shift to mean mu.
    return rng.chisquare(2, size) / 2.0 + mu - 1.0


def _draw_trial(rng, mu, n1, n0, dist):
    n = n1 + n0
    z = np.concatenate([np.ones(n1), np.zeros(n0)])
    x = _draw_covariates(rng, mu, n, dist)
    y = (TRUE_BETA0 + TRUE_DELTA * z + TRUE_BETA1 * x + TRUE_BETA2 * z * x
         + rng.normal(0.0, 1.0, n))
    return z, x, y


def covariate_location(k, K):
    """Completed-trial covariate mean: 4(k-1)/(K-1) - 1, or 0 when K = 1."""
    return 4.0 * (k - 1) / (K - 1) - 1.0 if K > 1 else 0.0


def generate_meta_trial(k, K, n, dist, rng):
    """Generate completed trial k and return (z, x, y, TrialSummary).

    The trial enrolls floor(Uniform(n, 4n)) subjects split evenly; only
    the TrialSummary is available to the downstream pipeline, the
    subject-level draws exist for diagnostics.
    """
    if not 1 <= k <= K:
        raise DataError(f"trial index {k} outside 1..{K}")
    mu = covariate_location(k, K)
    nk = int(rng.uniform(n, 4 * n))
    n1 = nk // 2
    n0 = nk - n1
    z, x, y = _draw_trial(rng, mu, n1, n0, dist)
    tid = f"sim{k:02d}"
    arms = []
    for j in (1, 0):
        m = z == j
        arms.append(ArmSummary(
            trial_id=tid, arm=j, n=int(m.sum()),
            y_mean=float(y[m].mean()), y_var=float(y[m].var(ddof=1)),
            x_mean=(float(x[m].mean()),), x_var=(float(x[m].var(ddof=1)),),
            x_family=("continuous",),
        ))
    return z, x, y, TrialSummary(tid, tuple(arms))


def generate_target_trial(n, allocation, dist, rng, trial_id="target"):
    """Generate the target trial as a Dataset of subject records.

    Covariate mean 0; arm split per allocation: (n/2, n/2), (3n/4, n/4),
    or (n, 0) treated/control.
    """
    if allocation == "one_to_one":
        n1, n0 = n // 2, n - n // 2
    elif allocation == "three_to_one":
        n1, n0 = 3 * n // 4, n - 3 * n // 4
    elif allocation == "single_arm":
        n1, n0 = n, 0
    else:
        raise ConfigError(f"allocation must be one of {ALLOCATIONS}, got {allocation!r}")
    z, x, y = _draw_trial(rng, 0.0, n1, n0, dist)
    subs = [SubjectRecord(trial_id, int(z[i]), float(y[i]), (float(x[i]),),
                          1.0, "target") for i in range(len(y))]
    return make_dataset(subs, target_id=trial_id)


@dataclass(frozen=True)
class EstimateRecord:
    """One estimator's output in one replication."""

    estimate: float
    se: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class ReplicationResult:
    rep: int
    ok: bool
    error: str = ""
    pooled: EstimateRecord = None
    pooled_univariate: EstimateRecord = None
    target: EstimateRecord = None  # None when the comparator is unestimable
    tau2: float = float("nan")
    clamped_arms: int = 0

    def record(self, estimator):
        return {EST_POOLED: self.pooled, EST_POOLED_UNI: self.pooled_univariate,
                EST_TARGET: self.target}[estimator]


def run_replication(cfg, r):
    """Run one seeded replication; estimation failures are captured.

    The data stream is seeded by (base_seed, r, 0) and the
    reconstruction substreams by a child of (base_seed, r, 1), so a
    replication depends only on (cfg, r).
    """
    rng = default_rng(SeedSequence((cfg.base_seed, r, 0)))
    trials = []
    for k in range(1, cfg.K + 1):
        *_, summary = generate_meta_trial(k, cfg.K, cfg.n, cfg.covariate_dist, rng)
        trials.append(summary)
    target = generate_target_trial(cfg.n, cfg.allocation, cfg.covariate_dist, rng)

    try:
        design = build_design(trials, include_interaction=True)
        meta = fit_dl(design)
        recon_seed = int(SeedSequence((cfg.base_seed, r, 1)).generate_state(1)[0])
        rcfg = ReconstructionConfig(rng_seed=recon_seed, borrow=cfg.borrow)
        # sampled arm variances routinely dip below the explained part in
        # small trials; the clamp is counted rather than warned rep by rep
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            recon = reconstruct_all(trials, meta, rcfg)
        n_clamped = len(caught)
        pooled = make_dataset(tuple(target.subjects) + tuple(recon),
                              target_id=target.target_id)
        fit = fit_membership(pooled)
        weighted = compute_weights(pooled, fit)

        model = choose_model(cfg.model_spec == "identified")
        reg = fit_weighted_regression(weighted, meat=cfg.meat, **model)
        ct = reg.contrast("z")
        uni = estimate_univariate(weighted)

        target_rec = None
        if cfg.allocation != "single_arm":
            treg = fit_weighted_regression(target, meat="hc0", **model)
            tct = treg.contrast("z")
            target_rec = EstimateRecord(tct["estimate"], tct["se"],
                                        tct["ci_low"], tct["ci_high"])
        return ReplicationResult(
            rep=r, ok=True,
            pooled=EstimateRecord(ct["estimate"], ct["se"], ct["ci_low"], ct["ci_high"]),
            pooled_univariate=EstimateRecord(uni.delta, uni.se, uni.ci_low, uni.ci_high),
            target=target_rec, tau2=meta.tau2, clamped_arms=n_clamped,
        )
    except (MetaborrowError, np.linalg.LinAlgError) as exc:
        return ReplicationResult(rep=r, ok=False, error=f"{type(exc).__name__}: {exc}")


@dataclass(frozen=True)
class EstimatorSummary:
    """Aggregates for one estimator over the successful replications."""

    estimator: str
    n_used: int
    mean: float
    bias: float
    variance: float
    mse: float
    coverage: float
    power_curve: tuple

    @property
    def type1(self):
        return self.power_curve[0]


@dataclass(frozen=True)
class CellResult:
    """Aggregated cell: per-estimator summaries plus failure accounting."""

    config: ScenarioConfig
    failures: int
    clamped_arms: int = 0
    summaries: dict = field(default_factory=dict)

    @property
    def valid(self):
        return EST_POOLED in self.summaries

    def summary(self, estimator):
        if estimator not in self.summaries:
            raise DataError(f"estimator {estimator!r} has no successful replications")
        return self.summaries[estimator]

    @property
    def mse_pooled(self):
        return self.summary(EST_POOLED).mse

    @property
    def mse_target(self):
        return self.summary(EST_TARGET).mse

    @property
    def type1(self):
        return self.summary(EST_POOLED).type1


def _summarize_estimator(name, records, grid):
    est = np.array([rec.estimate for rec in records])
    lo = np.array([rec.ci_low for rec in records])
    hi = np.array([rec.ci_high for rec in records])
    power = tuple(float(np.mean((d0 < lo) | (d0 > hi))) for d0 in grid)
    return EstimatorSummary(
        estimator=name, n_used=len(records),
        mean=float(est.mean()), bias=float(est.mean() - TRUE_DELTA),
        variance=float(est.var()), mse=float(np.mean((est - TRUE_DELTA) ** 2)),
        coverage=float(np.mean((lo <= TRUE_DELTA) & (TRUE_DELTA <= hi))),
        power_curve=power,
    )


def aggregate(cfg, results):
    """Fold replication results (ordered by index) into a CellResult."""
    results = sorted(results, key=lambda o: o.rep)
    failures = sum(1 for o in results if not o.ok)
    clamped = sum(o.clamped_arms for o in results)
    grid = cfg.delta0_grid
    summaries = {}
    for name in (EST_POOLED, EST_POOLED_UNI, EST_TARGET):
        records = [o.record(name) for o in results if o.ok and o.record(name) is not None]
        if records:
            summaries[name] = _summarize_estimator(name, records, grid)
    return CellResult(config=cfg, failures=failures, clamped_arms=clamped,
                      summaries=summaries)


def _replicate_star(args):
    cfg, r = args
    return run_replication(cfg, r)


def run_cell(cfg, jobs=1, progress=None):
    """Run every replication of a cell and aggregate.

    ``jobs > 1`` fans replications out to a process pool; because each
    replication is seeded independently by its index, the aggregate is
    identical at any ``jobs``.  ``progress`` (callable taking the count
    of completed replications) is invoked occasionally when given.
    """
    reps = range(cfg.replications)
    results = []
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunk = max(1, cfg.replications // (jobs * 8))
            for i, out in enumerate(pool.map(_replicate_star, [(cfg, r) for r in reps],
                                             chunksize=chunk)):
                results.append(out)
                if progress and (i + 1) % 50 == 0:
                    progress(i + 1)
    else:
        for i, r in enumerate(reps):
            results.append(run_replication(cfg, r))
            if progress and (i + 1) % 50 == 0:
                progress(i + 1)
    return aggregate(cfg, results)


CSV_HEADER = ("scenario", "estimator", "metric", "delta0", "value")


def write_cell_csv(cell, path, append=False):
    """Write a cell as long-format rows: scenario,estimator,metric,delta0,value.

    Scalar metrics leave ``delta0`` empty; power rows carry the null
    value being tested.  The scenario label round-trips through
    :meth:`ScenarioConfig.from_label`, so any cell in a results file can
    be regenerated from its rows alone.
    """
    path = Path(path)
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        wr = csv.writer(fh)
        if mode == "w":
            wr.writerow(CSV_HEADER)
        label = cell.config.label
        wr.writerow([label, "", "failures", "", cell.failures])
        wr.writerow([label, "", "replications", "", cell.config.replications])
        wr.writerow([label, "", "clamped_arms", "", cell.clamped_arms])
        for name, s in cell.summaries.items():
            for metric in ("n_used", "mean", "bias", "variance", "mse", "coverage"):
                wr.writerow([label, name, metric, "", repr(float(getattr(s, metric)))])
            for d0, p in zip(cell.config.delta0_grid, s.power_curve):
                wr.writerow([label, name, "power", repr(d0), repr(p)])
    return path


def read_cell_csv(path):
    """Parse a long-format results file back into {label: {(est, metric, delta0): value}}."""
    out = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or tuple(rd.fieldnames) != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for row in rd:
            key = (row["estimator"], row["metric"],
                   float(row["delta0"]) if row["delta0"] else None)
            out.setdefault(row["scenario"], {})[key] = float(row["value"])
    return out
