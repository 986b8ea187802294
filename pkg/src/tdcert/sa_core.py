"""Sampled update directions and the stochastic-approximation update loops.

Three loops ship: plain TD(0), generic SA for pluggable operators, and the
delayed/inexact variant that applies a stale direction. The constant
step-size is resolved jointly with the mixing time it depends on. Single-
trial runs and the harness's batched runs share the same arithmetic, so a
batch lane is bit-identical to the corresponding single-trial run.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .chain import (
    ChainError,
    MarkovRewardProcess,
    derive_seed,
    generator,
    stationary_distribution,
    tv_mixing_profile,
    _inv_cdf,
)
from .oracle import (
    FeatureMatrix,
    SteadyStateModel,
    envelope_mixing_time,
    mixing_time,
    steady_state_direction,
)

DIVERGENCE_GUARD = 1e12


class StepSizeError(RuntimeError):
    """Step-size resolution failed to reach a self-consistent fixed point."""


class DivergenceError(RuntimeError):
    """An iterate left the divergence guard; records the offending step."""

    def __init__(self, step: int):
        super().__init__(f"non-finite or oversized iterate at step {step}; "
                         "check the configured step-size")
        self.step = step


def fingerprint(payload: dict) -> str:
    """Stable short hash of a JSON-serializable config description."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def td0_direction(features: FeatureMatrix, gamma: float, theta, X):
    """The TD(0) update direction (r + gamma <phi(s'), theta> - <phi(s), theta>) phi(s).

    ``theta`` may be one parameter vector or a batch of rows; ``X`` is a
    (s, s_next, r) triple of scalars or aligned arrays.
    """
    s, sp, r = X
    phi_s = features.Phi[s]
    phi_sp = features.Phi[sp]
    td = np.asarray(r + gamma * np.sum(phi_sp * theta, axis=-1)
                    - np.sum(phi_s * theta, axis=-1))
    return td[..., None] * phi_s


class UpdateDirectionProvider:
    """Interface for a sampled root-finding operator g(theta; X).

    Concrete providers expose the sampled direction, its steady-state
    expectation, the solved-for fixed point, and the declared constants
    (L, sigma_const, beta) that the audit verifies.
    """

    dim: int
    L: float
    sigma_const: float
    beta: float
    theta_star: np.ndarray

    def direction(self, theta, X):
        raise NotImplementedError

    def steady(self, theta):
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError


class TD0Provider(UpdateDirectionProvider):
    """TD(0) with linear function approximation: L = 2, beta = omega (1 - gamma)."""

    def __init__(self, model: SteadyStateModel):
        self.model = model
        self.dim = model.K
        self.L = 2.0
        self.sigma_const = model.sigma_const
        self.beta = model.contraction_rate
        self.theta_star = model.theta_star

    def direction(self, theta, X):
        return td0_direction(self.model.features, self.model.mrp.gamma, theta, X)

    def steady(self, theta):
        return steady_state_direction(self.model, theta)

    def describe(self):
        return {"kind": "td0", "gamma": self.model.mrp.gamma,
                "Phi": self.model.features.Phi.tolist()}


class LinearContractionProvider(UpdateDirectionProvider):
    """g(theta; X) = -theta + c(s) with the state table c centered so that
    its stationary mean is theta_star. Exactly 1-Lipschitz and 1-monotone."""

    def __init__(self, theta_star, noise_table, pi):
        theta_star = np.array(theta_star, dtype=float).reshape(-1)
        noise = np.array(noise_table, dtype=float)
        if noise.ndim != 2 or noise.shape[1] != theta_star.shape[0]:
            raise ValueError("noise table must be n x K")
        pi = np.asarray(pi, dtype=float)
        noise = noise - pi @ noise  # recenter under the stationary law
        self.pi = pi
        self.c_table = theta_star[None, :] + noise
        self.theta_star = theta_star
        self.dim = theta_star.shape[0]
        self.L = 1.0
        self.beta = 1.0
        self.sigma_const = float(max(1.0, np.linalg.norm(self.c_table, axis=1).max(),
                                     np.linalg.norm(theta_star)))

    def direction(self, theta, X):
        s = X[0]
        return -np.asarray(theta, dtype=float) + self.c_table[s]

    def steady(self, theta):
        return self.theta_star - np.asarray(theta, dtype=float)

    def noise_variance(self) -> float:
        """Stationary second moment E ||c(X) - theta_star||^2."""
        dev = self.c_table - self.theta_star[None, :]
        return float(self.pi @ (dev ** 2).sum(axis=1))

    def describe(self):
        return {"kind": "linear_contraction", "c": self.c_table.tolist()}


class SaturatingMonotoneProvider(UpdateDirectionProvider):
    """A nonlinear monotone operator: -(a u + b tanh(u)) plus centered state
    noise, where u = theta - theta_star. Strong monotonicity modulus a,
    Lipschitz constant a + b."""

    def __init__(self, theta_star, noise_table, pi, a=0.7, b=0.3):
        if a <= 0 or b < 0:
            raise ValueError("need a > 0 and b >= 0")
        theta_star = np.array(theta_star, dtype=float).reshape(-1)
        noise = np.array(noise_table, dtype=float)
        pi = np.asarray(pi, dtype=float)
        noise = noise - pi @ noise
        self.noise_table = noise
        self.theta_star = theta_star
        self.dim = theta_star.shape[0]
        self.a = float(a)
        self.b = float(b)
        self.L = max(1.0, self.a + self.b)
        self.beta = self.a
        nmax = float(np.linalg.norm(noise, axis=1).max(initial=0.0))
        raw = (self.a * np.linalg.norm(theta_star)
               + self.b * np.sqrt(self.dim) + nmax) / self.L
        self.sigma_const = float(max(1.0, np.linalg.norm(theta_star), raw))

    def _drift(self, theta):
        u = np.asarray(theta, dtype=float) - self.theta_star
        return -(self.a * u + self.b * np.tanh(u))

    def direction(self, theta, X):
        s = X[0]
        return self._drift(theta) + self.noise_table[s]

    def steady(self, theta):
        return self._drift(theta)

    def describe(self):
        return {"kind": "saturating", "a": self.a, "b": self.b,
                "theta_star": self.theta_star.tolist(),
                "noise": self.noise_table.tolist()}


@dataclass(frozen=True)
class StepSizeSpec:
    """A resolved constant step-size with the mixing time it was certified at.

    td0 mode requires alpha <= omega (1 - gamma) / (C tau) and
    alpha <= 1 / (8 tau); nonlinear mode requires
    alpha <= min(beta, 1/beta) / (C tau L^2).
    """

    C: float
    alpha: float
    tau_alpha: int
    mode: str

    def caps(self, contraction: float) -> float:
        """Largest admissible alpha for this mode's contraction bound."""
        return min(contraction / (self.C * self.tau_alpha),
                   1.0 / (8.0 * self.tau_alpha))

    def in_contract(self, contraction: float) -> bool:
        return self.alpha <= self.caps(contraction) * (1.0 + 1e-12)

    def to_dict(self):
        return {"C": self.C, "alpha": self.alpha, "tau": self.tau_alpha,
                "mode": self.mode}


def contraction_bound(mode: str, model: SteadyStateModel | None = None,
                      provider: UpdateDirectionProvider | None = None) -> float:
    """The numerator of the step-size cap: omega (1 - gamma) for TD(0),
    min(beta, 1/beta) / L^2 for a generic provider."""
    if mode == "td0":
        return model.contraction_rate
    if mode == "nonlinear":
        beta_bar = min(provider.beta, 1.0 / provider.beta)
        return beta_bar / provider.L ** 2
    raise ValueError(f"unknown step-size mode {mode!r}")


def resolve_step_size(model: SteadyStateModel, C: float = 8.0, mode: str = "td0",
                      provider: UpdateDirectionProvider | None = None,
                      max_iter: int = 100) -> StepSizeSpec:
    """Solve the circular constraint alpha <= bound / (C tau(alpha)).

    Starts from alpha = bound / C and alternates with the certified mixing
    time until the pair is self-consistent. tau is integer-valued and
    non-increasing in alpha, so the iteration terminates.
    """
    if C < 8.0:
        raise ValueError(f"the universal constant C must be at least 8, got {C}")
    if mode == "nonlinear" and provider is None:
        raise ValueError("nonlinear mode needs the provider's constants")
    bound = contraction_bound(mode, model=model, provider=provider)

    profile = None
    if mode == "nonlinear":
        profile = tv_mixing_profile(model.mrp, 64)

    def tau_of(alpha: float) -> int:
        if mode == "td0":
            return mixing_time(model.mrp, model.features, alpha).tau
        return envelope_mixing_time(profile, model.stationary,
                                    provider.L * provider.sigma_const, alpha).tau

    alpha = bound / C
    for _ in range(max_iter):
        tau = tau_of(alpha)
        candidate = min(bound / (C * tau), 1.0 / (8.0 * tau))
        if candidate == alpha:
            spec = StepSizeSpec(C=float(C), alpha=alpha, tau_alpha=tau, mode=mode)
            if not spec.in_contract(bound):
                raise StepSizeError("resolved spec violates its own caps")
            return spec
        alpha = candidate
    raise StepSizeError(
        f"no self-consistent (alpha, tau) pair within {max_iter} iterations; "
        "the mixing input looks pathological"
    )


@dataclass(frozen=True)
class DelayProcess:
    """Bounded staleness generator: emits 0 <= tau_t <= min(t, tau_max).

    Kinds: none, constant (always the max allowed), uniform (i.i.d. on
    [0, tau_max], clamped early), and an adversarial sawtooth sweep.
    """

    kind: str = "none"
    tau_max: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "constant", "uniform", "sawtooth"):
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if self.tau_max < 0:
            raise ValueError("tau_max must be nonnegative")

    def sequence(self, T: int) -> np.ndarray:
        t = np.arange(T, dtype=np.int64)
        if self.kind == "none" or self.tau_max == 0:
            return np.zeros(T, dtype=np.int64)
        if self.kind == "constant":
            raw = np.full(T, self.tau_max, dtype=np.int64)
        elif self.kind == "sawtooth":
            raw = t % (self.tau_max + 1)
        else:  # uniform; floor of uniforms keeps the stream chunk-stable
            u = generator(derive_seed(self.seed, 0xDE1A)).random(T)
            raw = np.minimum((u * (self.tau_max + 1)).astype(np.int64), self.tau_max)
        return np.minimum(raw, t)

    def spawn(self, trial_index: int) -> "DelayProcess":
        """Per-trial replica with an independently derived stream."""
        return DelayProcess(self.kind, self.tau_max,
                            derive_seed(self.seed, trial_index, 0xDE1A7))

    def to_dict(self):
        return {"kind": self.kind, "tau_max": self.tau_max, "seed": self.seed}


@dataclass(frozen=True)
class Trajectory:
    """One iterate path theta_0..theta_T, replayable from (fingerprint, seed)."""

    thetas: np.ndarray
    seed: int
    fingerprint: str
    alpha: float

    def __post_init__(self):
        self.thetas.setflags(write=False)

    @property
    def T(self) -> int:
        return self.thetas.shape[0] - 1

    def to_csv(self, path):
        K = self.thetas.shape[1]
        with open(path, "w") as fh:
            fh.write(f"# fingerprint={self.fingerprint} seed={self.seed} "
                     f"alpha={self.alpha!r}\n")
            fh.write("step," + ",".join(f"theta_{k}" for k in range(K)) + "\n")
            for t in range(self.thetas.shape[0]):
                row = ",".join(repr(float(v)) for v in self.thetas[t])
                fh.write(f"{t},{row}\n")


class _TupleSampler:
    """Sequential observation sampler shared by the single-trial loops.

    markov mode draws one uniform per step to advance the chain; iid_restart
    draws the state fresh from pi and then its successor (two uniforms).
    """

    def __init__(self, mrp, rng, sampling, start_state):
        self.mrp = mrp
        self.rng = rng
        self.sampling = sampling
        pi = stationary_distribution(mrp).pi
        self.cum_pi = np.cumsum(pi)
        if sampling == "markov":
            if start_state is None:
                self.s = _inv_cdf(self.cum_pi, rng.random())
            else:
                if not 0 <= start_state < mrp.n:
                    raise ChainError(f"start_state {start_state} out of range")
                self.s = int(start_state)
        elif sampling != "iid_restart":
            raise ValueError(f"unknown sampling mode {sampling!r}")

    def next(self):
        if self.sampling == "markov":
            s = self.s
            sp = _inv_cdf(self.mrp.cum_P[s], self.rng.random())
            self.s = sp
        else:
            s = _inv_cdf(self.cum_pi, self.rng.random())
            sp = _inv_cdf(self.mrp.cum_P[s], self.rng.random())
        return s, sp, float(self.mrp.R[s])


def _run_config_fingerprint(provider, mrp, theta0, spec, T, sampling, delays):
    payload = {
        "mrp": mrp.to_dict(),
        "provider": provider.describe(),
        "theta0": np.asarray(theta0, dtype=float).tolist(),
        "spec": spec.to_dict(),
        "T": int(T),
        "sampling": sampling,
        "delays": delays.to_dict() if delays is not None else None,
    }
    return fingerprint(payload)


def run_sa(provider: UpdateDirectionProvider, mrp: MarkovRewardProcess,
           theta0, spec: StepSizeSpec, T: int, seed: int,
           sampling: str = "markov", start_state: int | None = None) -> Trajectory:
    """One stochastic-approximation trajectory
    theta_{t+1} = theta_t + alpha g(theta_t; X_t), deterministic given seed."""
    theta0 = np.array(theta0, dtype=float).reshape(provider.dim)
    rng = generator(seed)
    sampler = _TupleSampler(mrp, rng, sampling, start_state)
    thetas = np.empty((T + 1, provider.dim))
    theta = theta0.copy()
    thetas[0] = theta
    alpha = spec.alpha
    for t in range(T):
        X = sampler.next()
        theta = theta + alpha * provider.direction(theta, X)
        if not np.all(np.isfinite(theta)) or np.sum(theta ** 2) > DIVERGENCE_GUARD ** 2:
            raise DivergenceError(t + 1)
        thetas[t + 1] = theta
    fp = _run_config_fingerprint(provider, mrp, theta0, spec, T, sampling, None)
    return Trajectory(thetas=thetas, seed=seed, fingerprint=fp, alpha=alpha)


def run_delayed_sa(provider: UpdateDirectionProvider, mrp: MarkovRewardProcess,
                   theta0, spec: StepSizeSpec, T: int, delays: DelayProcess,
                   seed: int, sampling: str = "markov",
                   start_state: int | None = None) -> Trajectory:
    """SA with stale directions: theta_{t+1} = theta_t + alpha g(theta_{t-d_t}; X_{t-d_t}).

    Keeps a ring buffer of the last tau_max + 1 iterates and observations.
    With delays of kind "none" this reproduces run_sa bit-exactly on the same
    seed.
    """
    theta0 = np.array(theta0, dtype=float).reshape(provider.dim)
    rng = generator(seed)
    sampler = _TupleSampler(mrp, rng, sampling, start_state)
    dseq = delays.sequence(T)
    m = delays.tau_max + 1
    hist_theta = np.zeros((m, provider.dim))
    hist_X = [(0, 0, 0.0)] * m
    thetas = np.empty((T + 1, provider.dim))
    theta = theta0.copy()
    thetas[0] = theta
    alpha = spec.alpha
    for t in range(T):
        X = sampler.next()
        slot = t % m
        hist_theta[slot] = theta
        hist_X[slot] = X
        back = (t - int(dseq[t])) % m
        theta = theta + alpha * provider.direction(hist_theta[back], hist_X[back])
        if not np.all(np.isfinite(theta)) or np.sum(theta ** 2) > DIVERGENCE_GUARD ** 2:
            raise DivergenceError(t + 1)
        thetas[t + 1] = theta
    fp = _run_config_fingerprint(provider, mrp, theta0, spec, T, sampling, delays)
    return Trajectory(thetas=thetas, seed=seed, fingerprint=fp, alpha=alpha)


@dataclass(frozen=True)
class ProviderAudit:
    """Sampled verification of the declared (L, sigma, beta) constants."""

    samples: int
    ok: bool
    max_lipschitz_ratio: float
    max_norm_ratio: float
    min_monotone_ratio: float
    declared: dict
    witness: dict | None

    def describe(self) -> str:
        if self.ok:
            return (f"audit passed over {self.samples} samples "
                    f"(lip {self.max_lipschitz_ratio:.4f} <= L, "
                    f"norm {self.max_norm_ratio:.4f} <= L, "
                    f"monotone {self.min_monotone_ratio:.4f} >= beta)")
        return f"audit FAILED with witness {self.witness}"


def audit_provider(provider: UpdateDirectionProvider, mrp: MarkovRewardProcess,
                   sample_count: int, seed: int) -> ProviderAudit:
    """Check the Lipschitz/norm contract of the sampled direction and the
    strong-monotonicity contract of the steady-state operator against the
    provider's declared constants, naming a witness on failure."""
    rng = generator(derive_seed(seed, 0xA0D1))
    m = int(sample_count)
    K = provider.dim
    scale = rng.uniform(0.1, 10.0, size=(m, 1))
    theta1 = rng.normal(size=(m, K)) * scale
    theta2 = rng.normal(size=(m, K)) * scale
    s = rng.integers(0, mrp.n, size=m)
    sp = _inv_cdf(mrp.cum_P[s], rng.random(m))
    X = (s, sp, mrp.R[s])

    g1 = provider.direction(theta1, X)
    g2 = provider.direction(theta2, X)
    dtheta = np.linalg.norm(theta1 - theta2, axis=1)
    keep = dtheta > 1e-12
    lip = np.linalg.norm(g1 - g2, axis=1)[keep] / dtheta[keep]
    norm_ratio = np.linalg.norm(g1, axis=1) / (
        provider.L * (np.linalg.norm(theta1, axis=1) + provider.sigma_const))
    diff = theta1 - provider.theta_star
    dist_sq = np.sum(diff ** 2, axis=1)
    keep_m = dist_sq > 1e-12
    drift = np.sum(diff * (provider.steady(theta1)
                           - provider.steady(provider.theta_star)), axis=1)
    monotone = -drift[keep_m] / dist_sq[keep_m]

    tol = 1.0 + 1e-9
    max_lip = float(lip.max(initial=0.0))
    max_norm = float(norm_ratio.max(initial=0.0))
    min_mono = float(monotone.min(initial=np.inf))
    witness = None
    if max_lip > provider.L * tol:
        i = int(np.nonzero(keep)[0][np.argmax(lip)])
        witness = {"check": "lipschitz", "ratio": max_lip,
                   "theta1": theta1[i].tolist(), "theta2": theta2[i].tolist(),
                   "X": (int(s[i]), int(sp[i]), float(mrp.R[s[i]]))}
    elif max_norm > tol:
        i = int(np.argmax(norm_ratio))
        witness = {"check": "norm", "ratio": max_norm,
                   "theta1": theta1[i].tolist(), "theta2": None,
                   "X": (int(s[i]), int(sp[i]), float(mrp.R[s[i]]))}
    elif min_mono < provider.beta * (1.0 - 1e-9) - 1e-12:
        i = int(np.nonzero(keep_m)[0][np.argmin(monotone)])
        witness = {"check": "monotone", "ratio": min_mono,
                   "theta1": theta1[i].tolist(), "theta2": None, "X": None}
    return ProviderAudit(
        samples=m, ok=witness is None, max_lipschitz_ratio=max_lip,
        max_norm_ratio=max_norm, min_monotone_ratio=min_mono,
        declared={"L": provider.L, "sigma": provider.sigma_const,
                  "beta": provider.beta},
        witness=witness,
    )
