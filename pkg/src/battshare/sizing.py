"""Minimal battery sizes for LOLP targets and the subset scaling study.

Loss of load is non-increasing in capacity along every sample path (the
clamp recursion is monotone in ``B``), so the smallest feasible size can be
found by doubling followed by bisection.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from battshare.battery import exact_stationary, simulate_chain, trace_lolp, DEFAULT_SOLVER_CAP
from battshare.errors import AlignmentError, CapacityError, DomainError
from battshare.ingest import aggregate, net_generation, to_energy
from battshare.large_deviations import decay_rate
from battshare.markov_core import require_valid, stationary_distribution

DEFAULT_EPS = (0.01, 0.05, 0.10, 0.15)
DEFAULT_SUBSET_CAP = 10**5
# Guards the <= comparison against last-bit rounding in exact solves.
_EPS_SLACK = 1e-12


@dataclass
class SizingResult:
    """Smallest battery meeting an LOLP target, with its search history."""

    target: float
    method: str
    B_star: float
    achieved_lolp: float
    evaluations: dict = field(default_factory=dict)
    bracket: tuple = ()
    ld_estimate: float | None = None
    resolution: float | None = None

    def to_dict(self):
        return {
            "epsilon": self.target,
            "method": self.method,
            "B_star": self.B_star,
            "achieved_lolp": self.achieved_lolp,
            "bracket": list(self.bracket),
            "evaluations": {repr(k): v for k, v in sorted(self.evaluations.items())},
            "ld_estimate": self.ld_estimate,
            "resolution": self.resolution,
        }


def _meets(lolp, eps):
    return lolp <= eps * (1 + _EPS_SLACK)


def _smallest_feasible(lolp_at, eps, cap):
    """Smallest integer k in [0, cap] with lolp_at(k) <= eps."""
    evals = {}

    def f(k):
        if k not in evals:
            evals[k] = lolp_at(k)
        return evals[k]

    if _meets(f(0), eps):
        return 0, evals, (0, 0)
    lo, hi = 0, 1
    while True:
        hi = min(hi, cap)
        if _meets(f(hi), eps):
            break
        if hi >= cap:
            return None, evals, (lo, hi)
        lo, hi = hi, 2 * hi
    bracket = (lo, hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _meets(f(mid), eps):
            hi = mid
        else:
            lo = mid
    return hi, evals, bracket


def min_battery_chain(model, eps: float, method: str = "exact", *, solver_cap: int = DEFAULT_SOLVER_CAP,
                      max_battery: int | None = None, mc_steps: int = 10**6, seed: int = 0) -> SizingResult:
    """Smallest integer capacity with LOLP at most ``eps`` for a chain model.

    ``method`` is ``"exact"`` (stationary solve) or ``"monte-carlo"``. Monte
    Carlo evaluations share one seed, so every capacity sees the same sample
    path and the estimate stays monotone in ``B``.
    """
    require_valid(model)
    if not 0 < eps < 1:
        raise DomainError(f"LOLP target must lie in (0, 1), got {eps}")
    delta = float(stationary_distribution(model) @ model.net_gen)
    if delta <= 0:
        raise DomainError(f"sizing needs positive drift, got {delta:.6g}")
    if method == "exact":
        cap = solver_cap // model.n_states - 1
        lolp_at = lambda B: exact_stationary(model, B, solver_cap).lolp  # noqa: E731
    elif method in ("monte-carlo", "mc"):
        method = "monte-carlo"
        cap = 10**9
        lolp_at = lambda B: simulate_chain(model, B, mc_steps, seed=seed).lolp_estimate  # noqa: E731
    else:
        raise DomainError(f"unknown sizing method {method!r}")
    if max_battery is not None:
        cap = min(cap, int(max_battery))
    k, evals, bracket = _smallest_feasible(lolp_at, eps, cap)
    if k is None:
        raise CapacityError(f"LOLP target {eps} not reached at the capacity cap B={cap}")
    return SizingResult(
        target=eps,
        method=method,
        B_star=k,
        achieved_lolp=evals[k],
        evaluations=evals,
        bracket=bracket,
        ld_estimate=decay_rate(model).battery_estimate_for(eps),
    )


def min_battery_trace(net, eps: float, resolution: float, b0: float = 0.0,
                      max_battery: float | None = None) -> SizingResult:
    """Smallest multiple of ``resolution`` meeting ``eps`` on a net-energy trace.

    Beyond the total surplus energy in the trace the occupancy can never
    reach the cap, so LOLP is flat there; that bounds the search unless
    ``max_battery`` is smaller.
    """
    values = np.asarray(getattr(net, "values", net), dtype=float)
    if not 0 < eps <= 1:
        raise DomainError(f"LOLP target must lie in (0, 1], got {eps}")
    if resolution <= 0:
        raise DomainError("resolution must be positive")
    if values.mean() <= 0:
        warnings.warn("trace has non-positive mean net generation; target may be infeasible",
                      RuntimeWarning, stacklevel=2)
    surplus = float(np.clip(values, 0, None).sum())
    limit = surplus if max_battery is None else min(surplus, float(max_battery))
    cap = max(int(math.ceil(limit / resolution)), 0)
    k, evals, bracket = _smallest_feasible(lambda k: trace_lolp(values, k * resolution, b0), eps, cap)
    if k is None:
        raise CapacityError(
            f"LOLP target {eps} infeasible on this trace: LOLP stays at {evals[cap]:.4g} "
            f"up to B={cap * resolution:.6g}"
        )
    return SizingResult(
        target=eps,
        method="trace",
        B_star=k * resolution,
        achieved_lolp=evals[k],
        evaluations={kk * resolution: v for kk, v in evals.items()},
        bracket=(bracket[0] * resolution, bracket[1] * resolution),
        resolution=resolution,
    )


# -- subset study ------------------------------------------------------------

@dataclass
class StudyRow:
    N: int
    epsilon: float
    subset: tuple
    B_requirement_MJ: float

    @property
    def B_requirement_MWh(self) -> float:
        return self.B_requirement_MJ / 3600.0


@dataclass
class StudyTable:
    """Worst-case shared battery requirement over all subsets of each size."""

    locations: tuple
    demand_fraction: float | None
    eps_list: tuple
    resolution_MJ: float
    cadence_seconds: int
    rows: list = field(default_factory=list)
    subsets: list = field(default_factory=list)

    def rows_for(self, eps):
        return [r for r in self.rows if r.epsilon == eps]

    def requirement(self, N, eps) -> float:
        for r in self.rows:
            if r.N == N and r.epsilon == eps:
                return r.B_requirement_MJ
        raise KeyError((N, eps))


def _common_window(traces):
    # aggregate() validates cadence, unit and grid alignment.
    window = aggregate(traces)
    step = np.timedelta64(window.cadence_seconds, "s")
    out = []
    for t in traces:
        i0 = int((window.start - t.start) / step)
        out.append(t.replace(start=window.start, values=t.values[i0 : i0 + len(window)]))
    return out


def scaling_study(locations, demand_fraction: float | None = 0.6, eps_list=DEFAULT_EPS,
                  resolution: float | None = None, subset_cap: int = DEFAULT_SUBSET_CAP) -> StudyTable:
    """Battery requirement of the worst subset of each size.

    Args:
        locations: Generation traces (MW or MJ per step). With
            ``demand_fraction=None`` they are taken to be net generation
            already.
        demand_fraction: Constant demand as a fraction of each location's
            mean generation.
        eps_list: LOLP targets.
        resolution: Battery size granularity in MJ; defaults to the mean
            per-location demand over one step.
        subset_cap: Largest number of subsets allowed for any size.
    """
    locations = list(locations)
    if not locations:
        raise DomainError("the study needs at least one location")
    eps_list = tuple(float(e) for e in eps_list)
    if not eps_list:
        raise DomainError("empty epsilon list")
    ids = [t.location for t in locations]
    if len(set(ids)) != len(ids):
        raise AlignmentError(f"duplicate location ids in {ids}")

    if demand_fraction is not None:
        demand_mj = [demand_fraction * to_energy(t).mean() for t in locations]
        locations = [net_generation(t, demand_fraction) for t in locations]
    energy = _common_window([to_energy(t) for t in locations])
    if resolution is None:
        if demand_fraction is None:
            raise DomainError("resolution is required when traces are already net generation")
        resolution = float(np.mean(demand_mj))

    L = len(energy)
    for N in range(1, L + 1):
        if math.comb(L, N) > subset_cap:
            raise CapacityError(f"C({L},{N}) = {math.comb(L, N)} subsets exceed the cap of {subset_cap}")

    table = StudyTable(tuple(ids), demand_fraction, eps_list, float(resolution), energy[0].cadence_seconds)
    for N in range(1, L + 1):
        best = {e: None for e in eps_list}
        for combo in itertools.combinations(range(L), N):
            net = np.sum([energy[i].values for i in combo], axis=0)
            subset = tuple(ids[i] for i in combo)
            for e in eps_list:
                res = min_battery_trace(net, e, resolution)
                table.subsets.append((N, e, subset, res.B_star, res.achieved_lolp))
                if best[e] is None or res.B_star > best[e][1]:
                    best[e] = (subset, res.B_star)
        for e in eps_list:
            table.rows.append(StudyRow(N, e, best[e][0], best[e][1]))
    return table


# -- decay slope -------------------------------------------------------------

@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    capacities: np.ndarray
    lolps: np.ndarray
    excluded: list = field(default_factory=list)


def log_linear_fit(capacities, lolps) -> SlopeFit:
    """Ordinary least squares of ``log lolp`` against capacity.

    Zero LOLP values cannot be logged and are dropped with a warning.
    """
    B = np.asarray(capacities, dtype=float)
    p = np.asarray(lolps, dtype=float)
    zero = p <= 0
    excluded = [float(b) for b in B[zero]]
    if excluded:
        warnings.warn(f"excluding zero-LOLP capacities {excluded}", RuntimeWarning, stacklevel=2)
    B, p = B[~zero], p[~zero]
    if B.size < 2:
        raise DomainError("need at least two capacities with positive LOLP")
    y = np.log(p)
    slope, intercept = np.polyfit(B, y, 1)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - (slope * B + intercept)) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return SlopeFit(float(slope), float(intercept), r2, B, p, excluded)


def decay_slope(model, B_lo: int, B_hi: int, solver_cap: int = DEFAULT_SOLVER_CAP) -> SlopeFit:
    """Fit ``log LOLP`` against ``B`` over ``B_lo..B_hi`` using exact solves."""
    if not B_hi > B_lo >= 0:
        raise DomainError(f"need B_hi > B_lo >= 0, got {B_lo}, {B_hi}")
    Bs = np.arange(int(B_lo), int(B_hi) + 1)
    lolps = [exact_stationary(model, int(B), solver_cap).lolp for B in Bs]
    return log_linear_fit(Bs, lolps)
