"""Monte Carlo experiment harness.

Runs many independent trajectories (vectorized across trials, one derived
stream per trial), estimates the mean-square error path d_t and the Markov-
noise disturbance e_t with standard errors, and turns the finite-time
statements into pass/fail ledgers with explicit 3-standard-error slack.

Every batch lane reproduces the corresponding single-trial run bit-exactly:
the lanes consume the same per-trial streams and use the same arithmetic.
Per-step aggregation reduces over the trial axis in a fixed order, so results
do not depend on scheduling.
"""

import math
from dataclasses import dataclass

import numpy as np

from .chain import (
    MarkovRewardProcess,
    derive_seed,
    generator,
)
from .oracle import (
    FeatureMatrix,
    SteadyStateModel,
    build_steady_state,
    mixing_time,
)
from .sa_core import (
    DIVERGENCE_GUARD,
    DelayProcess,
    StepSizeSpec,
    StepSizeError,
    Trajectory,
    TD0Provider,
    UpdateDirectionProvider,
    audit_provider,
    contraction_bound,
    fingerprint,
    resolve_step_size,
)

_GUARD2 = DIVERGENCE_GUARD ** 2
_BLOCK = 4096


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class AuditError(RuntimeError):
    """A provider failed its constants audit; the experiment refuses to run."""

    def __init__(self, audit):
        super().__init__(audit.describe())
        self.audit = audit


class ExperimentConfig:
    """Everything one Monte Carlo experiment needs, deterministically.

    The instance (chain + features + theta0), a resolved step-size spec, the
    horizon and trial count, the master seed all per-trial streams derive
    from, and the optional delay process / sampling mode / averaging grid.
    """

    def __init__(self, mrp: MarkovRewardProcess, features: FeatureMatrix,
                 theta0, spec: StepSizeSpec, T: int, trials: int,
                 master_seed: int, provider: UpdateDirectionProvider | None = None,
                 delays: DelayProcess | None = None, sampling: str = "markov",
                 start_state: int | None = None, averaging_grid=None,
                 ceiling: float = 100.0, label: str = "",
                 model: SteadyStateModel | None = None):
        if T < 0:
            raise ConfigError("T must be nonnegative")
        if trials < 1:
            raise ConfigError("need at least one trial")
        if sampling not in ("markov", "iid_restart"):
            raise ConfigError(f"unknown sampling mode {sampling!r}")
        self.mrp = mrp
        self.features = features
        self.model = model if model is not None else build_steady_state(mrp, features)
        self.provider = provider if provider is not None else TD0Provider(self.model)
        self.theta0 = (np.zeros(self.provider.dim) if theta0 is None
                       else np.array(theta0, dtype=float).reshape(-1))
        if self.theta0.shape[0] != self.provider.dim:
            raise ConfigError("theta0 dimension does not match the provider")
        self.spec = spec
        self.T = int(T)
        self.trials = int(trials)
        self.master_seed = int(master_seed)
        self.delays = delays
        self.sampling = sampling
        self.start_state = start_state
        self.averaging_grid = list(averaging_grid) if averaging_grid else None
        self.ceiling = float(ceiling)
        self.label = label

    @property
    def B(self) -> float:
        p = self.provider
        return 10.0 * max(float(np.sum((self.theta0 - p.theta_star) ** 2)),
                          p.sigma_const ** 2)

    def contract_bound(self) -> float:
        return contraction_bound(self.spec.mode, model=self.model,
                                 provider=self.provider)

    def in_contract(self) -> bool:
        return self.spec.in_contract(self.contract_bound())

    def hypothesis(self) -> dict:
        return {
            "alpha": self.spec.alpha,
            "tau": self.spec.tau_alpha,
            "C": self.spec.C,
            "B": self.B,
            "mode": self.spec.mode,
            "in_contract": self.in_contract(),
        }

    def to_dict(self) -> dict:
        return {
            "mrp": self.mrp.to_dict(),
            "features": self.features.to_dict(),
            "theta0": self.theta0.tolist(),
            "spec": self.spec.to_dict(),
            "T": self.T,
            "trials": self.trials,
            "master_seed": self.master_seed,
            "provider": self.provider.describe(),
            "delays": self.delays.to_dict() if self.delays else None,
            "sampling": self.sampling,
            "start_state": self.start_state,
            "averaging_grid": self.averaging_grid,
            "ceiling": self.ceiling,
            "label": self.label,
        }

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def copy_with(self, **kw) -> "ExperimentConfig":
        base = dict(
            mrp=self.mrp, features=self.features, theta0=self.theta0,
            spec=self.spec, T=self.T, trials=self.trials,
            master_seed=self.master_seed, provider=self.provider,
            delays=self.delays, sampling=self.sampling,
            start_state=self.start_state, averaging_grid=self.averaging_grid,
            ceiling=self.ceiling, label=self.label, model=self.model,
        )
        base.update(kw)
        return ExperimentConfig(**base)


@dataclass
class MonteCarloEstimate:
    """Per-step cross-trial estimates of d_t and e_t with standard errors."""

    d_hat: np.ndarray
    d_se: np.ndarray
    e_hat: np.ndarray
    e_se: np.ndarray
    trials: int
    valid: bool
    abort_count: int
    abort_step: int | None
    config: ExperimentConfig

    @property
    def T(self) -> int:
        return self.d_hat.shape[0] - 1


class _TrialStreams:
    """One counter-based stream per trial, consumed in fixed blocks.

    Generator.random(n) consumes one 64-bit word per double, so chunked
    draws reproduce the sequential single-trial stream exactly.
    """

    def __init__(self, master_seed: int, trials: int):
        self.gens = [generator(derive_seed(master_seed, i)) for i in range(trials)]
        self.trials = trials

    def uniform_block(self, count: int) -> np.ndarray:
        U = np.empty((self.trials, count))
        for i, g in enumerate(self.gens):
            U[i] = g.random(count)
        return U


def _pick_from_row(cum_row, u):
    idx = (cum_row[None, :] <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cum_row.shape[0] - 1)


def _pick_from_rows(cum_rows, u):
    idx = (cum_rows <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


@dataclass
class _SimResult:
    d_hat: np.ndarray
    d_se: np.ndarray
    e_hat: np.ndarray
    e_se: np.ndarray
    valid: bool
    abort_count: int
    abort_step: int | None
    theta_bar: np.ndarray | None
    retained: np.ndarray | None


def _se_from_centered(sq_dev_total, count):
    if count > 1:
        return np.sqrt(sq_dev_total / (count - 1) / count)
    return np.zeros_like(sq_dev_total)


def _simulate(config: ExperimentConfig, weight_A: float | None = None,
              retain: bool = False) -> _SimResult:
    """Vectorized batch of independent trials; the core of every experiment."""
    mrp, provider = config.mrp, config.provider
    alpha = config.spec.alpha
    trials, T, K = config.trials, config.T, provider.dim
    theta_star = provider.theta_star
    cum_pi = np.cumsum(config.model.stationary.pi)
    cum_P, R = mrp.cum_P, mrp.R
    draws = 2 if config.sampling == "iid_restart" else 1

    if retain and trials * (T + 1) * K > 2e8:
        raise ConfigError("iterate retention too large; lower trials or T")

    streams = _TrialStreams(config.master_seed, trials)
    theta = np.tile(np.asarray(config.theta0, dtype=float), (trials, 1))

    # per-step cross-trial mean and centered squared deviation (the centered
    # form keeps deterministic instances at exactly zero variance)
    d_mean = np.full(T + 1, np.nan)
    d_dev = np.full(T + 1, np.nan)
    e_mean = np.full(max(T, 1), np.nan)
    e_dev = np.full(max(T, 1), np.nan)

    retained = None
    if retain:
        retained = np.empty((trials, T + 1, K))
        retained[:, 0] = theta
    S = theta.copy() if weight_A is not None else None
    wrate = 1.0 - alpha * weight_A if weight_A is not None else None
    v = 1.0

    use_delays = (config.delays is not None and config.delays.kind != "none"
                  and config.delays.tau_max > 0)
    if use_delays:
        dmat = np.empty((trials, T), dtype=np.int16)
        for i in range(trials):
            dmat[i] = config.delays.spawn(i).sequence(T)
        m = config.delays.tau_max + 1
        hist_theta = np.zeros((m, trials, K))
        hist_s = np.zeros((m, trials), dtype=np.int64)
        hist_sp = np.zeros((m, trials), dtype=np.int64)
        hist_r = np.zeros((m, trials))
        lanes = np.arange(trials)

    s = None
    if config.sampling == "markov":
        if config.start_state is None:
            s = _pick_from_row(cum_pi, streams.uniform_block(1)[:, 0])
        else:
            s = np.full(trials, int(config.start_state), dtype=np.int64)

    abort_count, abort_step = 0, None
    t0 = 0
    while t0 < T and abort_step is None:
        L = min(_BLOCK, T - t0)
        U = streams.uniform_block(L * draws).reshape(trials, L, draws)
        for j in range(L):
            step = t0 + j
            diff = theta - theta_star
            dvals = (diff * diff).sum(axis=1)
            d_mean[step] = dvals.mean()
            d_dev[step] = ((dvals - d_mean[step]) ** 2).sum()

            if config.sampling == "iid_restart":
                s = _pick_from_row(cum_pi, U[:, j, 0])
                sp = _pick_from_rows(cum_P[s], U[:, j, 1])
            else:
                sp = _pick_from_rows(cum_P[s], U[:, j, 0])
            r = R[s]
            X = (s, sp, r)

            g = provider.direction(theta, X)
            gbar = provider.steady(theta)
            evals = (diff * (g - gbar)).sum(axis=1)
            e_mean[step] = evals.mean()
            e_dev[step] = ((evals - e_mean[step]) ** 2).sum()

            if use_delays:
                slot = step % m
                hist_theta[slot] = theta
                hist_s[slot] = s
                hist_sp[slot] = sp
                hist_r[slot] = r
                back = (step - dmat[:, step]) % m
                stale = provider.direction(
                    hist_theta[back, lanes],
                    (hist_s[back, lanes], hist_sp[back, lanes], hist_r[back, lanes]))
                theta = theta + alpha * stale
            else:
                theta = theta + alpha * g

            norms2 = (theta * theta).sum(axis=1)
            finite = np.isfinite(norms2)
            if not finite.all() or (norms2 > _GUARD2).any():
                bad = (~finite) | (np.nan_to_num(norms2, nan=np.inf) > _GUARD2)
                abort_count = int(bad.sum())
                abort_step = step + 1
                break

            if retained is not None:
                retained[:, step + 1] = theta
            if S is not None:
                v = v * wrate + 1.0
                S = S + (theta - S) / v
            if config.sampling == "markov":
                s = sp
        t0 += L

    if abort_step is None:
        diff = theta - theta_star
        dvals = (diff * diff).sum(axis=1)
        d_mean[T] = dvals.mean()
        d_dev[T] = ((dvals - d_mean[T]) ** 2).sum()

    return _SimResult(
        d_hat=d_mean, d_se=_se_from_centered(d_dev, trials),
        e_hat=e_mean[:T], e_se=_se_from_centered(e_dev[:T], trials),
        valid=abort_step is None, abort_count=abort_count,
        abort_step=abort_step, theta_bar=S, retained=retained,
    )


def estimate_dt_et(config: ExperimentConfig) -> MonteCarloEstimate:
    """Estimate d_t = E ||theta_t - theta*||^2 and the disturbance inner
    product e_t across `trials` independent trajectories.

    The e_t terms use the same sampled observation that produced each step,
    accumulated during the run rather than by replay.
    """
    sim = _simulate(config)
    return MonteCarloEstimate(
        d_hat=sim.d_hat, d_se=sim.d_se, e_hat=sim.e_hat, e_se=sim.e_se,
        trials=config.trials, valid=sim.valid, abort_count=sim.abort_count,
        abort_step=sim.abort_step, config=config,
    )


def simulate_trajectories(config: ExperimentConfig) -> list[Trajectory]:
    """Run the batch with full iterate retention and split it into per-trial
    replayable trajectories (lane i uses the stream derived for trial i)."""
    sim = _simulate(config, retain=True)
    if not sim.valid:
        raise ConfigError(
            f"{sim.abort_count} trials hit the divergence guard at step "
            f"{sim.abort_step}; cannot retain trajectories")
    fp = config.fingerprint()
    return [
        Trajectory(thetas=sim.retained[i].copy(),
                   seed=derive_seed(config.master_seed, i),
                   fingerprint=fp, alpha=config.spec.alpha)
        for i in range(config.trials)
    ]


# ---------------------------------------------------------------------------
# Ledgers

SLACK_MULTIPLIER = 3.0


@dataclass
class BoundLedger:
    """Pass/fail record of one theorem-shaped bound with measured margins.

    Verdicts: "pass", "fail", "out-of-contract" (the step-size hypothesis is
    violated, so the theorem makes no claim), or "invalid" (trials aborted).
    A stochastic comparison never fails without 3 standard errors of slack.
    """

    theorem_id: str
    hypothesis: dict
    verdict: str
    worst_margin: float
    worst_step: int
    fitted: dict
    slack: dict
    n_steps: int
    notes: str = ""
    bound_value: np.ndarray | None = None
    margin: np.ndarray | None = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        return {
            "theorem_id": self.theorem_id,
            "hypothesis": self.hypothesis,
            "verdict": self.verdict,
            "worst_margin": self.worst_margin,
            "worst_step": self.worst_step,
            "fitted": self.fitted,
            "slack": self.slack,
            "n_steps": self.n_steps,
            "notes": self.notes,
        }


def _require_ledger_grade(estimate: MonteCarloEstimate):
    if estimate.config.trials < 100:
        raise ConfigError(
            f"ledger-producing runs need at least 100 trials, got "
            f"{estimate.config.trials} (confidence intervals are meaningless below)")


def _gated(config: ExperimentConfig, theorem_id: str, n_steps: int,
           notes: str) -> BoundLedger | None:
    """Out-of-contract short-circuit shared by every check."""
    if not config.in_contract():
        return BoundLedger(
            theorem_id=theorem_id, hypothesis=config.hypothesis(),
            verdict="out-of-contract", worst_margin=float("nan"), worst_step=-1,
            fitted={}, slack={"multiplier": SLACK_MULTIPLIER}, n_steps=n_steps,
            notes=notes + " (step-size hypothesis violated; no claim checked)",
        )
    return None


def check_boundedness(estimate: MonteCarloEstimate,
                      model: SteadyStateModel | None = None,
                      theta0=None) -> BoundLedger:
    """Verify d_hat(t) - 3 SE(t) <= B at every step.

    B comes from the configured theta0 and the provider's scale constant;
    passing a model/theta0 overrides only the reported B.
    """
    _require_ledger_grade(estimate)
    config = estimate.config
    B = (model.bound_B(theta0) if model is not None and theta0 is not None
         else config.B)
    gate = _gated(config, "theorem1-boundedness", estimate.T + 1,
                  f"B={B:.6g}")
    if gate is not None:
        return gate
    if not estimate.valid:
        return BoundLedger(
            theorem_id="theorem1-boundedness", hypothesis=config.hypothesis(),
            verdict="invalid", worst_margin=float("-inf"),
            worst_step=estimate.abort_step or -1, fitted={},
            slack={"multiplier": SLACK_MULTIPLIER}, n_steps=estimate.T + 1,
            notes=f"{estimate.abort_count} trials hit the divergence guard",
        )
    lower = estimate.d_hat - SLACK_MULTIPLIER * estimate.d_se
    margin = B - lower
    worst = int(np.argmin(margin))
    verdict = "pass" if margin[worst] >= 0.0 else "fail"
    return BoundLedger(
        theorem_id="theorem1-boundedness", hypothesis=config.hypothesis(),
        verdict=verdict, worst_margin=float(margin[worst]), worst_step=worst,
        fitted={"B": B, "max_d_hat": float(np.max(estimate.d_hat))},
        slack={"multiplier": SLACK_MULTIPLIER,
               "max_width": float(np.max(SLACK_MULTIPLIER * estimate.d_se))},
        n_steps=estimate.T + 1,
        bound_value=np.full(estimate.T + 1, B), margin=margin,
    )


def check_recursion(estimate: MonteCarloEstimate, model: SteadyStateModel,
                    spec: StepSizeSpec, ceiling: float | None = None,
                    rate: float | None = None,
                    perturb_scale: float | None = None,
                    e_scale: float | None = None) -> BoundLedger:
    """Fit the smallest constants making the one-step recursion and the
    disturbance bound hold for t >= tau, with 3-SE slack.

    d_hat(t+1) <= rate * d_hat(t) + c * perturb_scale  (default rate
    1 - alpha omega (1-gamma), scale alpha^2 tau B), and
    e_hat(t) <= c' * e_scale (default alpha tau B). Before tau the
    disturbance is checked against its coarse 8B bound instead.
    """
    _require_ledger_grade(estimate)
    config = estimate.config
    ceiling = config.ceiling if ceiling is None else float(ceiling)
    alpha, tau = spec.alpha, spec.tau_alpha
    B = config.B
    if rate is None:
        if spec.mode == "nonlinear":
            rate = 1.0 - alpha * config.provider.beta
        else:
            rate = 1.0 - alpha * model.contraction_rate
    if perturb_scale is None:
        L2 = config.provider.L ** 2 if spec.mode == "nonlinear" else 1.0
        perturb_scale = alpha ** 2 * L2 * tau * B
    if e_scale is None:
        L2 = config.provider.L ** 2 if spec.mode == "nonlinear" else 1.0
        e_scale = alpha * L2 * tau * B
    gate = _gated(config, "theorem2-recursion", estimate.T, "")
    if gate is not None:
        return gate
    if not estimate.valid:
        return BoundLedger(
            theorem_id="theorem2-recursion", hypothesis=config.hypothesis(),
            verdict="invalid", worst_margin=float("-inf"),
            worst_step=estimate.abort_step or -1, fitted={},
            slack={"multiplier": SLACK_MULTIPLIER}, n_steps=estimate.T,
            notes=f"{estimate.abort_count} trials hit the divergence guard",
        )
    T = estimate.T
    if T <= tau + 1:
        raise ConfigError(f"horizon T={T} leaves no steps at or beyond tau={tau}")
    t = np.arange(tau, T)
    slack_rec = SLACK_MULTIPLIER * (estimate.d_se[t + 1] + rate * estimate.d_se[t])
    needed_c = (estimate.d_hat[t + 1] - slack_rec
                - rate * estimate.d_hat[t]) / perturb_scale
    c = float(max(needed_c.max(), 0.0))

    te = np.arange(tau, T)
    needed_cp = (estimate.e_hat[te] - SLACK_MULTIPLIER * estimate.e_se[te]) / e_scale
    c_prime = float(max(needed_cp.max(), 0.0))

    pre = np.arange(0, min(tau, T))
    pre_margin = 8.0 * B - (estimate.e_hat[pre]
                            - SLACK_MULTIPLIER * estimate.e_se[pre])
    pre_tau_ok = bool(np.all(pre_margin >= 0.0)) if pre.size else True

    # full-length per-step columns, indexed by t+1 (the bounded side)
    bound_value = np.full(T + 1, np.nan)
    margin = np.full(T + 1, np.nan)
    bound_value[t + 1] = rate * estimate.d_hat[t] + c * perturb_scale
    margin[t + 1] = ceiling - needed_c
    worst = int(np.argmax(needed_c))
    ok = c <= ceiling and c_prime <= ceiling and pre_tau_ok
    return BoundLedger(
        theorem_id="theorem2-recursion", hypothesis=config.hypothesis(),
        verdict="pass" if ok else "fail",
        worst_margin=float(ceiling - max(c, c_prime)),
        worst_step=int(t[worst]),
        fitted={"c": c, "c_prime": c_prime, "rate": rate,
                "perturb_scale": perturb_scale, "e_scale": e_scale,
                "pre_tau_ok": pre_tau_ok, "ceiling": ceiling},
        slack={"multiplier": SLACK_MULTIPLIER,
               "max_width": float(np.max(slack_rec))},
        n_steps=T - tau,
        bound_value=bound_value,
        margin=margin,
    )


def check_iid_noise(estimate: MonteCarloEstimate) -> BoundLedger:
    """Control check: under i.i.d. restart sampling the disturbance e_t is
    exactly zero in expectation, so e_hat must sit within 3 SE of 0 for t >= 1."""
    _require_ledger_grade(estimate)
    config = estimate.config
    if config.sampling != "iid_restart":
        raise ConfigError("the i.i.d. control check needs sampling='iid_restart'")
    if estimate.T < 2:
        raise ConfigError("the control needs a horizon of at least 2 steps")
    t = np.arange(1, estimate.T)
    margin = SLACK_MULTIPLIER * estimate.e_se[t] - np.abs(estimate.e_hat[t])
    worst = int(np.argmin(margin))
    verdict = "pass" if margin[worst] >= 0.0 else "fail"
    return BoundLedger(
        theorem_id="lemma4-iid-control", hypothesis=config.hypothesis(),
        verdict=verdict, worst_margin=float(margin[worst]),
        worst_step=int(t[worst]),
        fitted={"max_abs_e": float(np.max(np.abs(estimate.e_hat[t])))},
        slack={"multiplier": SLACK_MULTIPLIER,
               "max_width": float(np.max(SLACK_MULTIPLIER * estimate.e_se[t]))},
        n_steps=t.size, margin=margin,
    )


def check_drift(trajectories: list[Trajectory], model: SteadyStateModel,
                spec: StepSizeSpec, ceiling: float = 100.0) -> BoundLedger:
    """Fit the smallest c with E ||theta_t - theta_{t-tau}||^2 <= c alpha^2
    tau^2 B over t >= tau, from retained per-trial iterate histories."""
    if not trajectories:
        raise ConfigError("need at least one trajectory")
    thetas = np.stack([tr.thetas for tr in trajectories])  # (trials, T+1, K)
    trials, Tp1, _ = thetas.shape
    tau, alpha = spec.tau_alpha, spec.alpha
    if Tp1 - 1 < tau + 1:
        raise ConfigError(f"horizon {Tp1 - 1} too short for tau={tau}")
    B = model.bound_B(thetas[0, 0])
    if spec.mode == "td0" and not spec.in_contract(model.contraction_rate):
        return BoundLedger(
            theorem_id="lemma3-drift",
            hypothesis={"alpha": alpha, "tau": tau, "B": B, "in_contract": False},
            verdict="out-of-contract", worst_margin=float("nan"), worst_step=-1,
            fitted={}, slack={"multiplier": SLACK_MULTIPLIER}, n_steps=Tp1 - 1 - tau,
            notes="step-size hypothesis violated; no claim checked",
        )
    drift = thetas[:, tau:, :] - thetas[:, :Tp1 - tau, :]
    vals = (drift ** 2).sum(axis=2)  # (trials, T+1-tau)
    mean = vals.mean(axis=0)
    if trials > 1:
        se = vals.std(axis=0, ddof=1) / math.sqrt(trials)
    else:
        se = np.zeros_like(mean)
    scale = alpha ** 2 * tau ** 2 * B
    needed = (mean - SLACK_MULTIPLIER * se) / scale
    c = float(max(needed.max(), 0.0))
    worst = int(np.argmax(needed)) + tau
    return BoundLedger(
        theorem_id="lemma3-drift", hypothesis={"alpha": alpha, "tau": tau, "B": B},
        verdict="pass" if c <= ceiling else "fail",
        worst_margin=float(ceiling - c), worst_step=worst,
        fitted={"c": c, "scale": scale, "ceiling": ceiling,
                "max_drift": float(mean.max())},
        slack={"multiplier": SLACK_MULTIPLIER,
               "max_width": float(np.max(SLACK_MULTIPLIER * se))},
        n_steps=mean.size,
    )


# ---------------------------------------------------------------------------
# Weighted iterate averaging

@dataclass(frozen=True)
class WeightedAverageSpec:
    """Exponentially increasing iterate weights with the two-case tuned alpha.

    A = 0.5 omega (1 - gamma); unnormalized weights (1 - alpha A)^-(t+1);
    lambda_tune = max(e, A (T+1)^2 / tau). The tuned alpha always satisfies
    the constant-step-size cap, so boundedness applies.
    """

    A: float
    alpha: float
    tau: int
    T: int
    lambda_tune: float
    C: float
    case: int

    def weight_rate(self) -> float:
        return 1.0 - self.alpha * self.A

    def weights(self) -> np.ndarray:
        """Materialized normalized weights w_0..w_T (log-space, overflow-safe)."""
        t = np.arange(self.T + 1, dtype=float)
        logw = -(t + 1.0) * math.log(self.weight_rate())
        logw -= logw.max()
        w = np.exp(logw)
        return w / w.sum()

    def to_dict(self) -> dict:
        return {"A": self.A, "alpha": self.alpha, "tau": self.tau, "T": self.T,
                "lambda": self.lambda_tune, "C": self.C, "case": self.case}


def tune_weighted_average(model: SteadyStateModel, T: int,
                          C: float = 8.0, max_iter: int = 50) -> WeightedAverageSpec:
    """Resolve the horizon-aware step-size: alpha = ln(lambda)/(A (T+1)) when
    that obeys the mixing cap, otherwise the cap itself; iterated until the
    mixing time it certifies is self-consistent."""
    A = 0.5 * model.contraction_rate
    tau_hat = resolve_step_size(model, C=C, mode="td0").tau_alpha
    for _ in range(max_iter):
        lam = max(math.e, A * (T + 1) ** 2 / tau_hat)
        alpha_case1 = math.log(lam) / (A * (T + 1))
        cap = min(model.contraction_rate / (C * tau_hat), 1.0 / (8.0 * tau_hat))
        case = 1 if alpha_case1 <= cap else 2
        alpha = alpha_case1 if case == 1 else cap
        tau_new = mixing_time(model.mrp, model.features, alpha).tau
        if tau_new == tau_hat:
            return WeightedAverageSpec(A=A, alpha=alpha, tau=tau_hat, T=T,
                                       lambda_tune=lam, C=C, case=case)
        tau_hat = tau_new
    raise StepSizeError("weighted-average tuning did not stabilize")


def weighted_average_experiment(config: ExperimentConfig,
                                slope_threshold: float = -0.8,
                                tail_points: int = 4) -> BoundLedger:
    """For each horizon in the configured geometric grid, tune alpha, run the
    trials with an incrementally normalized weighted average (the raw weights
    are never materialized), and fit the tail log-log slope of the
    stationary-weighted value error against T."""
    if not config.averaging_grid:
        raise ConfigError("config has no averaging grid")
    grid = sorted(int(T) for T in config.averaging_grid)
    if len(grid) < 2:
        raise ConfigError("averaging grid needs at least two horizons")
    model = config.model
    rows = []
    for T in grid:
        wspec = tune_weighted_average(model, T, C=config.spec.C)
        spec = StepSizeSpec(C=config.spec.C, alpha=wspec.alpha,
                            tau_alpha=wspec.tau, mode="td0")
        sub = config.copy_with(T=T, spec=spec,
                               master_seed=derive_seed(config.master_seed, T))
        sim = _simulate(sub, weight_A=wspec.A)
        if not sim.valid:
            raise ConfigError(f"averaging run at T={T} hit the divergence guard")
        errs = model.value_error_D(sim.theta_bar)
        rows.append({
            "T": T, "alpha": wspec.alpha, "tau": wspec.tau, "case": wspec.case,
            "lambda": wspec.lambda_tune,
            "err": float(errs.mean()),
            "se": float(errs.std(ddof=1) / math.sqrt(config.trials)),
        })
    tail = rows[-tail_points:]
    x = np.log([r["T"] for r in tail])
    y = np.log([max(r["err"], 1e-300) for r in tail])
    slope = float(np.polyfit(x, y, 1)[0])
    verdict = "pass" if slope <= slope_threshold else "fail"
    return BoundLedger(
        theorem_id="theorem3-weighted-average",
        hypothesis={"C": config.spec.C, "grid": grid,
                    "in_contract": True},
        verdict=verdict, worst_margin=float(slope_threshold - slope),
        worst_step=-1,
        fitted={"tail_slope": slope, "threshold": slope_threshold,
                "tail_points": tail_points, "table": rows},
        slack={"multiplier": SLACK_MULTIPLIER},
        n_steps=len(grid),
    )


# ---------------------------------------------------------------------------
# Generic-provider experiments and sweeps

def nonlinear_sa_experiment(provider: UpdateDirectionProvider,
                            config: ExperimentConfig,
                            audit_samples: int = 20000) -> dict:
    """Boundedness + recursion certification for a pluggable operator.

    The provider is audited against its declared constants first and the
    experiment refuses to run on failure. Rate and perturbation scale follow
    the step-size spec's mode, so routing TD(0) through this path with a
    td0-mode spec reproduces the TD(0)-specific ledgers exactly.
    """
    cfg = config.copy_with(provider=provider)
    audit = audit_provider(provider, cfg.mrp, audit_samples,
                           derive_seed(cfg.master_seed, 0xA0D17))
    if not audit.ok:
        raise AuditError(audit)
    estimate = estimate_dt_et(cfg)
    ledgers = {
        "audit": audit,
        "estimate": estimate,
        "boundedness": check_boundedness(estimate),
        "recursion": check_recursion(estimate, cfg.model, cfg.spec),
    }
    return ledgers


def asymptotic_floor(estimate: MonteCarloEstimate, model: SteadyStateModel,
                     spec: StepSizeSpec) -> float:
    """Mean of d_hat over the final 10% of steps past the geometric burn-in
    t >= 5 / (alpha omega (1 - gamma))."""
    if spec.mode == "nonlinear":
        rate = estimate.config.provider.beta
    else:
        rate = model.contraction_rate
    burn = int(math.ceil(5.0 / (spec.alpha * rate)))
    start = max(burn, int(math.floor(0.9 * estimate.T)))
    if start >= estimate.T:
        raise ConfigError(
            f"horizon T={estimate.T} leaves no floor window past burn-in {burn}")
    return float(np.mean(estimate.d_hat[start:]))


def alpha_sweep(config: ExperimentConfig, multipliers=(1.0, 0.5, 0.25),
                max_workers: int = 1) -> dict:
    """Re-run the experiment across an alpha grid (multiples of the resolved
    alpha), recertifying tau per point, and fit the log-log slope of the
    asymptotic floor against alpha."""
    model = config.model
    points = []
    for mult in multipliers:
        alpha = config.spec.alpha * float(mult)
        tau = mixing_time(model.mrp, model.features, alpha).tau
        spec = StepSizeSpec(C=config.spec.C, alpha=alpha, tau_alpha=tau,
                            mode=config.spec.mode)
        rate = model.contraction_rate
        T = int(math.ceil(10.0 / (alpha * rate)))
        points.append(config.copy_with(
            spec=spec, T=T, master_seed=derive_seed(config.master_seed, int(mult * 1e6))))

    def run_point(sub):
        est = estimate_dt_et(sub)
        return {
            "alpha": sub.spec.alpha,
            "tau": sub.spec.tau_alpha,
            "T": sub.T,
            "in_contract": sub.in_contract(),
            "floor": asymptotic_floor(est, model, sub.spec),
            "boundedness": check_boundedness(est),
            "estimate": est,
        }

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run_point, points))
    else:
        results = [run_point(p) for p in points]
    x = np.log([r["alpha"] for r in results])
    y = np.log([r["floor"] for r in results])
    slope = float(np.polyfit(x, y, 1)[0])
    return {"points": results, "floor_slope": slope}


def write_columnar(path, estimate: MonteCarloEstimate,
                   ledger: BoundLedger | None = None):
    """Flat per-step export: t, d_hat, d_se, e_hat, e_se, bound_value, margin.

    Floats are written with repr so reruns are byte-identical.
    """
    T = estimate.T
    nan = float("nan")
    bound = ledger.bound_value if ledger is not None and ledger.bound_value is not None else None
    marg = ledger.margin if ledger is not None and ledger.margin is not None else None
    with open(path, "w") as fh:
        fh.write(f"# fingerprint={estimate.config.fingerprint()}\n")
        fh.write("t,d_hat,d_se,e_hat,e_se,bound_value,margin\n")
        for t in range(T + 1):
            e_h = float(estimate.e_hat[t]) if t < T else nan
            e_s = float(estimate.e_se[t]) if t < T else nan
            b = float(bound[t]) if bound is not None and t < bound.shape[0] else nan
            mg = float(marg[t]) if marg is not None and t < marg.shape[0] else nan
            fh.write(f"{t},{float(estimate.d_hat[t])!r},{float(estimate.d_se[t])!r},"
                     f"{e_h!r},{e_s!r},{b!r},{mg!r}\n")
