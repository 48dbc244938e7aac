"""Monte-Carlo study: four data-generating scenarios and estimator metrics.

Scenarios 1-3 share a 44-covariate population (four outcome-related
covariates built from Bernoulli, uniform, exponential and chi-square draws,
plus binary and Gaussian noise) and differ in the selection model of the
non-probability sample. Scenario 4 is the Kang-Schafer design where the
analyst only sees nonlinear transforms of the latent normals.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .methods import METHODS, MethodOptions, run_methods, selection_of
from .propensity import PenaltyConfig
from .sample import CombinedSample

__all__ = [
    "ScenarioSpec",
    "Population",
    "MetricsRow",
    "MonteCarloResult",
    "SCENARIO_TABLE",
    "check_scenario_constants",
    "default_methods",
    "generate_population",
    "draw_prob_sample",
    "draw_nonprob_sample",
    "make_sample",
    "replicate_rng",
    "run_replicate",
    "run_monte_carlo",
    "metrics_csv",
    "selection_csv",
    "format_table",
]

P_COVARIATES = 44

# Transcribed scenario constants: selection intercept and {covariate: coef}
# (covariates are 0-based; scenario 4 coefficients act on the latent Z),
# outcome intercept and coefficients.
SCENARIO_TABLE = {
    1: {"sel": (-2.0, {0: 0.3, 1: 0.3, 4: -1.0, 5: -1.0}), "out": (2.0, (0.6, 0.6, 0.6, 0.6))},
    2: {"sel": (-2.0, {0: 1.0, 1: 1.0, 4: -1.0, 5: -1.0}), "out": (2.0, (0.6, 0.6, 0.6, 0.6))},
    3: {"sel": (-2.0, {0: 1.0, 1: 1.0, 4: -1.8, 5: -1.8}), "out": (2.0, (0.6, 0.6, 0.6, 0.6))},
    4: {"sel": (0.0, {0: -1.0, 1: 0.5, 2: -0.25, 3: -0.1}), "out": (210.0, (27.4, 13.7, 13.7, 13.7))},
}


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    N: int = 10_000
    target_nb: float = 500.0
    selection_intercept: float = 0.0
    selection_coefs: tuple = ()
    outcome_intercept: float = 0.0
    outcome_coefs: tuple = ()
    seed: int | None = None

    @classmethod
    def from_id(cls, sid: int, **kw) -> ScenarioSpec:
        if sid not in SCENARIO_TABLE:
            raise ValueError(f"scenario must be one of {sorted(SCENARIO_TABLE)}")
        row = SCENARIO_TABLE[sid]
        b0, coefs = row["sel"]
        a0, alpha = row["out"]
        spec = cls(id=sid, selection_intercept=b0, selection_coefs=tuple(sorted(coefs.items())),
                   outcome_intercept=a0, outcome_coefs=alpha, **kw)
        check_scenario_constants(spec)
        return spec

    @property
    def p(self) -> int:
        return 4 if self.id == 4 else P_COVARIATES


def check_scenario_constants(spec: ScenarioSpec) -> None:
    """Abort when a spec's model constants differ from the frozen table."""
    row = SCENARIO_TABLE.get(spec.id)
    if row is None:
        raise ValueError(f"unknown scenario {spec.id}")
    b0, coefs = row["sel"]
    a0, alpha = row["out"]
    if (spec.selection_intercept != b0 or dict(spec.selection_coefs) != coefs
            or spec.outcome_intercept != a0 or tuple(spec.outcome_coefs) != alpha):
        raise ValueError(f"scenario {spec.id} constants do not match the reference table")
    if spec.N <= 0 or spec.target_nb <= 0:
        raise ValueError("N and target_nb must be positive")


@dataclass
class Population:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray | None
    mean_outcome: np.ndarray  # E(Y | covariates), i.e. theta

    @property
    def mu(self) -> float:
        return float(self.y.mean())


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for replicate ``index`` of master ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def _chi2_4(rng, n):
    return np.sum(rng.standard_normal((n, 4)) ** 2, axis=1)


def generate_population(spec: ScenarioSpec, rng: np.random.Generator) -> Population:
    N = spec.N
    a0, alpha = spec.outcome_intercept, np.asarray(spec.outcome_coefs)
    if spec.id == 4:
        z = rng.standard_normal((N, 4))
        theta = a0 + z @ alpha
        y = theta + rng.standard_normal(N)
        x = np.column_stack([
            np.exp(z[:, 0] / 2),
            z[:, 1] / (1 + np.exp(z[:, 0])) + 10,
            (z[:, 0] * z[:, 2] / 25 + 0.6) ** 3,
            (z[:, 1] + z[:, 3] + 20) ** 2,
        ])
        return Population(x=x, y=y, z=z, mean_outcome=theta)
    z1 = (rng.random(N) < 0.5).astype(float)
    z2 = 2.0 * rng.random(N)
    z3 = -np.log1p(-rng.random(N))  # Exponential(1) by inverse CDF
    z4 = _chi2_4(rng, N)
    x1 = z1
    x2 = z2 + 0.3 * x1
    x3 = z3 + 0.2 * (x1 + x2)
    x4 = z4 + 0.1 * (x1 + x2 + x3)
    binary = (rng.random((N, 20)) < 0.45).astype(float)
    gauss = rng.standard_normal((N, 20))
    x = np.column_stack([x1, x2, x3, x4, binary, gauss])
    theta = a0 + x[:, :4] @ alpha
    y = theta + rng.standard_normal(N)
    return Population(x=x, y=y, z=None, mean_outcome=theta)


def inclusion_probabilities(pop: Population, spec: ScenarioSpec) -> np.ndarray:
    raw = 0.25 + pop.x[:, 1] + 0.03 * pop.y
    if np.any(raw <= 0):
        raise ValueError("non-positive size measure for the probability sample")
    return np.minimum(raw * (spec.target_nb / raw.sum()), 1.0)


def draw_prob_sample(pop: Population, spec: ScenarioSpec, rng: np.random.Generator):
    """Poisson sample with pi proportional to 0.25 + x2 + 0.03 y.

    Returns ``(in_b, pi)`` over the whole population; ``d = 1 / pi``.
    """
    pi = inclusion_probabilities(pop, spec)
    return rng.random(spec.N) < pi, pi


def selection_probabilities(pop: Population, spec: ScenarioSpec) -> np.ndarray:
    eta = np.full(spec.N, spec.selection_intercept)
    base = pop.z if spec.id == 4 else pop.x
    for j, c in spec.selection_coefs:
        eta = eta + c * base[:, j]
    return expit(eta)


def draw_nonprob_sample(pop: Population, spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    """Membership indicator of the non-probability sample for every unit."""
    return rng.random(spec.N) < selection_probabilities(pop, spec)


def make_sample(pop: Population, delta, in_b, pi) -> CombinedSample:
    keep = delta | in_b
    y = np.where(delta, pop.y, np.nan)[keep]
    d = np.where(in_b, 1.0 / pi, np.nan)[keep]
    pis = np.where(in_b, pi, np.nan)[keep]
    names = [f"X{j + 1}" for j in range(pop.x.shape[1])]
    return CombinedSample(pop.x[keep], delta[keep], in_b[keep], y, d, pis, names)


def default_methods(scenario: int) -> list[str]:
    if scenario == 4:
        # no variable selection in the nonlinear scenario
        return ["ipw-logistic", "aipw-logistic", "aipw-logistic-flex", "aipw-benkeser"]
    return ["ipw-logistic", "ipw-lasso", "ipw-oalasso", "aipw-logistic", "aipw-lasso",
            "aipw-oalasso", "aipw-benkeser", "aipw-scad-union"]


def default_options(spec: ScenarioSpec, penalty: PenaltyConfig | None = None) -> MethodOptions:
    penalty = penalty or PenaltyConfig()
    if spec.id == 4:
        # main-terms OLS on the observed transforms is the misspecified model
        return MethodOptions(penalty=penalty, benkeser_outcome="flexible")
    # the outcome depends on the first four covariates only
    return MethodOptions(penalty=penalty, outcome_subset=(0, 1, 2, 3))


def run_replicate(spec: ScenarioSpec, methods, seed: int, index: int, *,
                  population: Population | None = None, options: MethodOptions | None = None) -> dict:
    rng = replicate_rng(seed, index)
    pop = population if population is not None else generate_population(spec, rng)
    delta = draw_nonprob_sample(pop, spec, rng)
    in_b, pi = draw_prob_sample(pop, spec, rng)
    sample = make_sample(pop, delta, in_b, pi)
    options = options or default_options(spec)
    results = run_methods(sample, methods, options, rng)
    rec = {"index": index, "mu": pop.mu, "n_a": sample.n_a, "n_b": sample.n_b, "methods": {}}
    for name, res in results.items():
        if isinstance(res, Exception):
            rec["methods"][name] = {"error": f"{type(res).__name__}: {res}"}
        else:
            rec["methods"][name] = {
                "mu_hat": res.mu_hat,
                "se": res.se,
                "selected": selection_of(res),
            }
    return rec


@dataclass
class MetricsRow:
    estimator: str
    pct_bias: float
    mse: float
    mc_se: float
    mean_se: float
    coverage: float
    n_ok: int
    n_failed: int
    selection: np.ndarray | None = None

    @property
    def invalid(self) -> bool:
        total = self.n_ok + self.n_failed
        return total == 0 or self.n_failed > 0.10 * total


@dataclass
class MonteCarloResult:
    spec: ScenarioSpec
    rows: list[MetricsRow]
    replicates: list[dict] = field(repr=False, default_factory=list)

    def row(self, name: str) -> MetricsRow:
        for r in self.rows:
            if r.estimator == name:
                return r
        raise KeyError(name)

    @property
    def invalid(self) -> bool:
        return any(r.invalid for r in self.rows)


def _aggregate(name: str, reps: list[dict], p: int) -> MetricsRow:
    ok = [r for r in reps if "error" not in r["methods"][name]]
    failed = len(reps) - len(ok)
    if not ok:
        return MetricsRow(name, math.nan, math.nan, math.nan, math.nan, math.nan, 0, failed)
    mu = np.array([r["mu"] for r in ok])
    est = np.array([r["methods"][name]["mu_hat"] for r in ok])
    se = np.array([r["methods"][name]["se"] for r in ok])
    err = est - mu
    lo, hi = est - 1.96 * se, est + 1.96 * se
    sel = None
    if ok[0]["methods"][name]["selected"] is not None:
        counts = np.zeros(p)
        for r in ok:
            counts[list(r["methods"][name]["selected"])] += 1
        sel = 100.0 * counts / len(ok)
    return MetricsRow(
        estimator=name,
        pct_bias=float(np.mean(err / mu) * 100),
        mse=float(np.mean(err**2)),
        mc_se=float(np.std(est, ddof=1)) if len(ok) > 1 else 0.0,
        mean_se=float(np.mean(se)),
        coverage=float(100 * np.mean((lo <= mu) & (mu <= hi))),
        n_ok=len(ok),
        n_failed=failed,
        selection=sel,
    )


def _replicate_job(args):
    spec, methods, seed, index, population, options = args
    return run_replicate(spec, methods, seed, index, population=population, options=options)


def run_monte_carlo(spec: ScenarioSpec, methods=None, reps: int = 1000, seed: int = 0, *,
                    jobs: int = 1, fixed_population: bool = False,
                    options: MethodOptions | None = None, progress=None) -> MonteCarloResult:
    """Run ``reps`` replicates and aggregate one metrics row per method.

    Replicate ``r`` draws from its own counter-derived stream, so results do
    not depend on ``jobs``. With ``fixed_population`` one population is drawn
    up front and only the two samples are redrawn.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    check_scenario_constants(spec)
    methods = list(methods or default_methods(spec.id))
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}")
    options = options or default_options(spec)
    population = None
    if fixed_population:
        population = generate_population(spec, replicate_rng(seed, 2**31))
    tasks = [(spec, methods, seed, r, population, options) for r in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            recs = list(pool.map(_replicate_job, tasks, chunksize=max(1, reps // (4 * jobs))))
    else:
        recs = []
        for t in tasks:
            recs.append(_replicate_job(t))
            if progress is not None:
                progress(len(recs), reps)
    recs.sort(key=lambda r: r["index"])
    p = spec.p
    rows = [_aggregate(m, recs, p) for m in methods]
    return MonteCarloResult(spec=spec, rows=rows, replicates=recs)


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def metrics_csv(result: MonteCarloResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimator", "pct_bias", "mse", "mc_se", "mean_se", "coverage"])
    for r in result.rows:
        w.writerow([r.estimator, _fmt(r.pct_bias), _fmt(r.mse), _fmt(r.mc_se),
                    _fmt(r.mean_se), _fmt(r.coverage)])
    return buf.getvalue()


def selection_csv(result: MonteCarloResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["estimator", "covariate", "pct_selected"])
    for r in result.rows:
        if r.selection is None:
            continue
        for j, v in enumerate(r.selection):
            w.writerow([r.estimator, f"X{j + 1}", _fmt(v)])
    return buf.getvalue()


def format_table(result: MonteCarloResult) -> str:
    head = f"{'Estimator':<22}{'%B':>8}{'MSE':>9}{'MC SE':>8}{'SE':>8}{'%COV':>7}{'fail':>6}"
    lines = [f"Scenario {result.spec.id}: {result.replicates and len(result.replicates)} replicates",
             head, "-" * len(head)]
    for r in result.rows:
        flag = " *" if r.invalid else ""
        lines.append(f"{r.estimator:<22}{r.pct_bias:>8.2f}{r.mse:>9.3f}{r.mc_se:>8.3f}"
                     f"{r.mean_se:>8.3f}{r.coverage:>7.1f}{r.n_failed:>6d}{flag}")
    return "\n".join(lines)
