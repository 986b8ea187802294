"""Finite Markov reward processes.

Validation of the irreducibility/aperiodicity assumption, exact stationary
distributions, total-variation mixing profiles with certified geometric
envelopes, and seeded Markovian trajectory sampling. Everything here is
deterministic given its seed; all objects are immutable after construction
and safe to share across threads.
"""

from dataclasses import dataclass
from math import gcd

import numpy as np

_MASK64 = (1 << 64) - 1
_ROW_SUM_TOL = 1e-9
# below this the matrix-power differences are dominated by rounding noise,
# so the curve is clamped to 0 and the clamp index recorded
_TV_CLAMP = 1e-13


class ChainError(ValueError):
    """Malformed transition structure or a failed chain assumption."""


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, *indices: int) -> int:
    """Hash a master seed and an index path into an independent stream seed.

    Used everywhere a per-trial or per-component stream is split off a master
    seed, so parallel trials are independent by construction.
    """
    z = _splitmix64(master_seed & _MASK64)
    for ix in indices:
        z = _splitmix64((z ^ _splitmix64(ix & _MASK64)) & _MASK64)
    return z


def generator(seed: int) -> np.random.Generator:
    """Counter-based generator for the given stream seed."""
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


def _inv_cdf(cum, u):
    """Index of the CDF cell containing u. Works on one row or a row batch."""
    if cum.ndim == 1:
        idx = int(np.sum(cum <= u))
        return min(idx, cum.shape[0] - 1)
    idx = np.sum(cum <= np.asarray(u)[:, None], axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


class MarkovRewardProcess:
    """A finite MRP: row-stochastic transitions, expected per-state rewards,
    and a discount factor strictly inside (0, 1).

    Rows of the transition matrix must sum to 1 within 1e-9 on input and are
    renormalized exactly; the matrix is then frozen. ``r_bar`` is the largest
    absolute reward, recomputed at construction.
    """

    def __init__(self, P, R, gamma):
        P = np.array(P, dtype=float)
        R = np.array(R, dtype=float).reshape(-1)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ChainError(f"transition matrix must be square, got shape {P.shape}")
        n = P.shape[0]
        if n < 1:
            raise ChainError("chain needs at least one state")
        if R.shape[0] != n:
            raise ChainError(f"reward vector has {R.shape[0]} entries for {n} states")
        if np.any(P < -1e-12) or np.any(P > 1.0 + _ROW_SUM_TOL):
            raise ChainError("transition probabilities must lie in [0, 1]")
        row_sums = P.sum(axis=1)
        bad = np.nonzero(np.abs(row_sums - 1.0) > _ROW_SUM_TOL)[0]
        if bad.size:
            raise ChainError(
                f"row {bad[0]} of P sums to {row_sums[bad[0]]:.12g}, expected 1"
            )
        if not (0.0 < float(gamma) < 1.0):
            raise ChainError(f"gamma must lie strictly in (0, 1), got {gamma}")
        P = np.clip(P, 0.0, None)
        P /= P.sum(axis=1, keepdims=True)
        self.P = P
        self.R = R
        self.gamma = float(gamma)
        self.n = n
        self.r_bar = float(np.max(np.abs(R)))
        self.cum_P = np.cumsum(P, axis=1)
        for a in (self.P, self.R, self.cum_P):
            a.setflags(write=False)

    def to_dict(self):
        return {
            "P": self.P.tolist(),
            "R": self.R.tolist(),
            "gamma": self.gamma,
        }

    def __repr__(self):
        return f"MarkovRewardProcess(n={self.n}, gamma={self.gamma})"


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the irreducibility/aperiodicity check."""

    irreducible: bool
    aperiodic: bool
    period: int
    not_reachable: tuple
    not_coreachable: tuple

    @property
    def ok(self) -> bool:
        return self.irreducible and self.aperiodic

    def describe(self) -> str:
        parts = []
        if not self.irreducible:
            parts.append(
                "not irreducible"
                + (f" (unreachable from state 0: {list(self.not_reachable)})" if self.not_reachable else "")
                + (f" (cannot reach state 0: {list(self.not_coreachable)})" if self.not_coreachable else "")
            )
        if not self.aperiodic:
            parts.append(f"not aperiodic (period {self.period})")
        return "; ".join(parts) if parts else "irreducible and aperiodic"


def _bfs(adj_rows, start):
    n = len(adj_rows)
    dist = np.full(n, -1, dtype=np.int64)
    dist[start] = 0
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj_rows[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def validate_chain(mrp: MarkovRewardProcess) -> ValidationReport:
    """Check Assumption-style chain structure: strong connectivity of the
    positive-transition graph and unit gcd of cycle lengths."""
    pos = mrp.P > 0.0
    fwd = [np.nonzero(pos[u])[0] for u in range(mrp.n)]
    rev = [np.nonzero(pos[:, u])[0] for u in range(mrp.n)]
    dist_f = _bfs(fwd, 0)
    dist_r = _bfs(rev, 0)
    not_reachable = tuple(int(s) for s in np.nonzero(dist_f < 0)[0])
    not_coreachable = tuple(int(s) for s in np.nonzero(dist_r < 0)[0])
    irreducible = not not_reachable and not not_coreachable

    # gcd of (dist[u] + 1 - dist[v]) over edges u->v equals the chain period
    # on the strongly connected part containing state 0.
    g = 0
    for u in range(mrp.n):
        if dist_f[u] < 0:
            continue
        for v in fwd[u]:
            if dist_f[v] >= 0:
                g = gcd(g, int(dist_f[u]) + 1 - int(dist_f[v]))
    period = abs(g) if g != 0 else 0
    aperiodic = period == 1
    return ValidationReport(irreducible, aperiodic, period, not_reachable, not_coreachable)


@dataclass(frozen=True)
class StationaryDistribution:
    """Stationary law pi and the diagonal weighting matrix D = diag(pi)."""

    pi: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.pi.setflags(write=False)
        self.D.setflags(write=False)


def stationary_distribution(mrp: MarkovRewardProcess) -> StationaryDistribution:
    """Exact stationary distribution via a direct linear solve.

    Solves (P^T - I) pi = 0 with the last balance equation replaced by the
    normalization sum(pi) = 1. Requires the chain to pass validate_chain.
    """
    report = validate_chain(mrp)
    if not report.ok:
        raise ChainError(
            f"chain fails Assumption 1 ({report.describe()}); run validate_chain"
        )
    A = mrp.P.T - np.eye(mrp.n)
    A[-1, :] = 1.0
    b = np.zeros(mrp.n)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ChainError(
            "stationary solve is singular; run validate_chain on the input chain"
        ) from exc
    if np.min(pi) <= 0.0:
        raise ChainError(
            "stationary solve produced a non-positive entry; run validate_chain"
        )
    pi = pi / pi.sum()
    resid = float(np.max(np.abs(pi @ mrp.P - pi)))
    if resid > 1e-10:
        raise ChainError(f"stationary residual {resid:.3e} exceeds 1e-10")
    return StationaryDistribution(pi=pi, D=np.diag(pi))


@dataclass(frozen=True)
class MixingProfile:
    """Total-variation decay curve with a certified geometric envelope.

    The envelope satisfies tv_curve[k-1] <= c0 * rho**k for every recorded k;
    rho is the smallest grid value (1% steps upward from |lambda_2|) for which
    the anchored envelope dominates the whole recorded curve, so the bound is
    certified rather than least-squares.
    """

    rho: float
    c0: float
    tv_curve: np.ndarray
    clamp_index: int | None
    lambda2: float

    def __post_init__(self):
        self.tv_curve.setflags(write=False)

    def envelope(self, k):
        return self.c0 * self.rho ** np.asarray(k, dtype=float)


def _second_eigenvalue_magnitude(P) -> float:
    eig = np.linalg.eigvals(P)
    mags = np.sort(np.abs(eig))[::-1]
    return float(mags[1]) if mags.shape[0] > 1 else 0.0


def tv_mixing_profile(mrp: MarkovRewardProcess, horizon: int) -> MixingProfile:
    """Worst-case total-variation distance to stationarity for k = 1..horizon,
    from exact matrix powers, plus a fitted certified envelope."""
    if horizon < 2:
        raise ChainError(f"horizon must be at least 2, got {horizon}")
    stat = stationary_distribution(mrp)
    pi = stat.pi
    curve = np.zeros(horizon)
    clamp_index = None
    Q = mrp.P.copy()
    for k in range(1, horizon + 1):
        tv = 0.5 * float(np.max(np.abs(Q - pi[None, :]).sum(axis=1)))
        if tv < _TV_CLAMP:
            clamp_index = k
            break
        curve[k - 1] = tv
        Q = Q @ mrp.P

    lambda2 = _second_eigenvalue_magnitude(mrp.P)
    if float(curve.max(initial=0.0)) <= 1e-15:
        return MixingProfile(0.0, 0.0, curve, clamp_index, lambda2)

    ks = np.arange(1, horizon + 1, dtype=float)
    base = max(lambda2, 1e-6)
    for j in range(5000):
        rho = base * (1.0 + 0.01 * j)
        if rho >= 1.0:
            break
        c0 = curve[0] / rho
        if np.all(curve <= c0 * rho ** ks * (1.0 + 1e-12) + 1e-300):
            return MixingProfile(float(rho), float(c0), curve, clamp_index, lambda2)
    raise ChainError("could not fit a certified geometric envelope below rho = 1")


@dataclass(frozen=True)
class TrajectorySample:
    """One sampled chain path as (s_t, s_{t+1}, r_t) observation triples.

    Rewards are the expected per-state rewards; consecutive triples chain
    (s_next[t] == s[t+1]). Bit-reproducible from (seed, start_state, length).
    """

    s: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    seed: int
    start_state: int

    def __post_init__(self):
        for a in (self.s, self.s_next, self.r):
            a.setflags(write=False)

    def __len__(self):
        return self.s.shape[0]

    def tuples(self):
        return list(zip(self.s.tolist(), self.s_next.tolist(), self.r.tolist()))


def sample_trajectory(mrp: MarkovRewardProcess, start_state: int, length: int,
                      seed: int) -> TrajectorySample:
    """Sample a single Markovian trajectory of observation tuples."""
    if not 0 <= start_state < mrp.n:
        raise ChainError(f"start_state {start_state} out of range for n={mrp.n}")
    rng = generator(seed)
    u = rng.random(length)
    states = np.empty(length + 1, dtype=np.int64)
    states[0] = start_state
    cum = mrp.cum_P
    cur = start_state
    for t in range(length):
        cur = _inv_cdf(cum[cur], u[t])
        states[t + 1] = cur
    s = states[:-1].copy()
    s_next = states[1:].copy()
    return TrajectorySample(s=s, s_next=s_next, r=mrp.R[s].copy(),
                            seed=seed, start_state=start_state)


# ---------------------------------------------------------------------------
# Named generators and config parsing


def cycle_mrp(n: int, epsilon: float, gamma: float = 0.5, rewards=None) -> MarkovRewardProcess:
    """Lazy random walk on an n-cycle: stay with probability epsilon, step to
    each neighbour with probability (1 - epsilon)/2."""
    if not (0.0 < epsilon < 1.0):
        raise ChainError(f"epsilon must lie in (0, 1), got {epsilon}")
    P = np.zeros((n, n))
    for i in range(n):
        P[i, i] += epsilon
        P[i, (i + 1) % n] += (1.0 - epsilon) / 2.0
        P[i, (i - 1) % n] += (1.0 - epsilon) / 2.0
    if rewards is None:
        rewards = np.cos(2.0 * np.pi * np.arange(n) / max(n, 1))
    return MarkovRewardProcess(P, rewards, gamma)


def random_mrp(n: int, density: float, seed: int, gamma: float = 0.5,
               max_tries: int = 500) -> MarkovRewardProcess:
    """Random stochastic matrix with roughly `density` positive entries per
    row, rejection-sampled until the chain is irreducible and aperiodic.
    Rewards are drawn uniformly from [-1, 1]."""
    if not (0.0 < density <= 1.0):
        raise ChainError(f"density must lie in (0, 1], got {density}")
    rng = generator(derive_seed(seed, 0x6D72))
    # a single positive entry per row makes every candidate deterministic,
    # which can never be both irreducible and aperiodic for n >= 2
    m = min(n, max(2, int(round(density * n)))) if n >= 2 else 1
    for _ in range(max_tries):
        P = np.zeros((n, n))
        for i in range(n):
            cols = rng.permutation(n)[:m]
            w = rng.random(m) + 0.05
            P[i, cols] = w / w.sum()
        R = rng.uniform(-1.0, 1.0, size=n)
        mrp = MarkovRewardProcess(P, R, gamma)
        if validate_chain(mrp).ok:
            return mrp
    raise ChainError(
        f"no irreducible aperiodic chain found in {max_tries} tries "
        f"(n={n}, density={density})"
    )


def mrp_from_dict(cfg: dict) -> MarkovRewardProcess:
    """Build an MRP from a config mapping.

    Either explicit (keys: states, transitions, rewards, gamma) or generated
    (kind: cycle | random with the generator's parameters).
    """
    kind = cfg.get("kind", "explicit")
    if kind == "explicit":
        P = cfg["transitions"]
        R = cfg["rewards"]
        gamma = cfg["gamma"]
        if "states" in cfg and int(cfg["states"]) != len(P):
            raise ChainError(
                f"config declares {cfg['states']} states but has {len(P)} transition rows"
            )
        return MarkovRewardProcess(P, R, gamma)
    if kind == "cycle":
        return cycle_mrp(int(cfg["n"]), float(cfg["epsilon"]),
                         gamma=float(cfg.get("gamma", 0.5)),
                         rewards=cfg.get("rewards"))
    if kind == "random":
        return random_mrp(int(cfg["n"]), float(cfg["density"]), int(cfg["seed"]),
                          gamma=float(cfg.get("gamma", 0.5)))
    raise ChainError(f"unknown chain kind {kind!r}")
