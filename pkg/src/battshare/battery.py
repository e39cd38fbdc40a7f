"""Clamped battery dynamics driven by a background chain or a trace.

The occupancy follows ``b(k+1) = min(max(b(k) + r(k), 0), B)`` and a loss of
load occurs at step ``k`` when ``b(k) + r(k) < 0``. Chain mode uses integer
energy units; trace mode uses real-valued energy per step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import stats
from scipy.sparse.csgraph import connected_components

from battshare.errors import CapacityError, DomainError, NumericalError
from battshare.markov_core import (
    JointModel,
    UserModel,
    require_valid,
    stationary_distribution,
)

DEFAULT_SOLVER_CAP = 2 * 10**6
# Recurrent classes up to this size are solved with GTH elimination, which
# keeps small tail probabilities accurate to relative precision.
GTH_MAX_STATES = 1500
MC_BATCHES = 100
_CHUNK = 1 << 20


def step(b: int, r: int, B: int) -> int:
    """One greedy charge/discharge step, clamped to ``[0, B]``."""
    if not 0 <= b <= B:
        raise DomainError(f"occupancy {b} outside [0, {B}]")
    return min(max(b + r, 0), B)


def reverse_system(model: UserModel) -> UserModel:
    """Same background chain with generation and demand interchanged."""
    if isinstance(model, JointModel):
        rev = JointModel([reverse_system(u) for u in model.users])
    else:
        rev = UserModel(model.transition, -model.net_gen, model.states)
    if "pi" in model._cache:
        rev._cache["pi"] = model._cache["pi"]
    return rev


# -- exact stationary solve --------------------------------------------------

@dataclass
class BatteryDist:
    """Stationary law of (occupancy, background state) for capacity ``B``.

    ``probs[b, s]`` is zero outside the recurrent class.
    """

    model: UserModel
    capacity: int
    probs: np.ndarray
    n_reachable: int
    n_recurrent: int
    residual: float

    @property
    def lolp(self) -> float:
        b = np.arange(self.capacity + 1)[:, None]
        loss = b + self.model.net_gen[None, :] < 0
        return float(self.probs[loss].sum())

    @property
    def empty_prob(self) -> float:
        return float(self.probs[0].sum())

    @property
    def full_prob(self) -> float:
        return float(self.probs[self.capacity].sum())

    @property
    def occupancy_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    @property
    def sandwich_constant(self) -> float:
        """``p / |S-|``: smallest deficit-state self-loop over the deficit count."""
        deficit = np.flatnonzero(self.model.net_gen < 0)
        p = float(np.min(np.diag(self.model.transition)[deficit]))
        return p / deficit.size

    def to_dict(self):
        return {
            "capacity": self.capacity,
            "lolp": self.lolp,
            "empty_prob": self.empty_prob,
            "full_prob": self.full_prob,
            "n_reachable": self.n_reachable,
            "n_recurrent": self.n_recurrent,
            "residual": self.residual,
        }


def _battery_chain(model, B):
    P = model.transition
    r = model.net_gen.astype(np.int64)
    n = P.shape[0]
    nb = np.clip(np.arange(B + 1)[:, None] + r[None, :], 0, B)  # (B+1, n)
    si, sj = np.nonzero(P)
    vals = P[si, sj]
    b = np.arange(B + 1)[:, None]
    rows = (b * n + si[None, :]).ravel()
    cols = (nb[:, si] * n + sj[None, :]).ravel()
    data = np.broadcast_to(vals, (B + 1, vals.size)).ravel()
    N = (B + 1) * n
    return sp.csr_matrix((data, (rows, cols)), shape=(N, N))


def _reachable(T, sources):
    seen = np.zeros(T.shape[0], dtype=bool)
    seen[sources] = True
    frontier = np.asarray(sources)
    while frontier.size:
        nxt = np.unique(T[frontier].indices)
        nxt = nxt[~seen[nxt]]
        seen[nxt] = True
        frontier = nxt
    return np.flatnonzero(seen)


def _recurrent_class(T):
    n_comp, comp = connected_components(T, directed=True, connection="strong")
    coo = T.tocoo()
    leaving = comp[coo.row] != comp[coo.col]
    open_ = np.zeros(n_comp, dtype=bool)
    open_[comp[coo.row[leaving]]] = True
    closed = np.flatnonzero(~open_)
    if closed.size != 1:
        raise NumericalError(f"battery chain has {closed.size} recurrent classes; expected one")
    return np.flatnonzero(comp == closed[0])


def gth_stationary(P) -> np.ndarray:
    """Stationary law of an irreducible chain by GTH elimination.

    Subtraction-free, so every entry is computed to high relative accuracy,
    including probabilities far below machine epsilon.
    """
    A = np.array(P, dtype=float, copy=True)
    n = A.shape[0]
    for k in range(n - 1, 0, -1):
        s = A[k, :k].sum()
        if s <= 0:
            raise NumericalError("GTH elimination hit a state with no path back; chain is reducible")
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        pi[k] = pi[:k] @ A[:k, k]
    return pi / pi.sum()


def _sparse_stationary(T):
    n = T.shape[0]
    A = (T.T - sp.identity(n, format="csr")).tolil()
    A[n - 1, :] = np.ones(n)
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = spla.spsolve(A.tocsc(), rhs)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def exact_stationary(model: UserModel, B: int, solver_cap: int = DEFAULT_SOLVER_CAP) -> BatteryDist:
    """Exact stationary law of the battery chain with capacity ``B``.

    Raises:
        CapacityError: if ``(B + 1) * |S|`` exceeds ``solver_cap``.
    """
    require_valid(model)
    B = int(B)
    if B < 0:
        raise DomainError(f"battery capacity must be non-negative, got {B}")
    n = model.n_states
    if (B + 1) * n > solver_cap:
        raise CapacityError(
            f"{(B + 1) * n} unknowns exceed the exact-solver cap of {solver_cap}; "
            "use Monte Carlo (lolp-mc)"
        )
    T = _battery_chain(model, B)
    reach = _reachable(T, np.arange(n))
    Tr = T[reach][:, reach]
    rec_local = _recurrent_class(Tr)
    rec = reach[rec_local]
    Tc = Tr[rec_local][:, rec_local]
    if Tc.shape[0] <= GTH_MAX_STATES:
        pi = gth_stationary(Tc.toarray())
    else:
        pi = _sparse_stationary(Tc)
    residual = float(np.max(np.abs(Tc.T @ pi - pi)))
    if residual > 1e-10:
        raise NumericalError(f"battery stationary residual {residual:.3e}", residual=residual)
    full = np.zeros((B + 1) * n)
    full[rec] = pi
    return BatteryDist(model, B, full.reshape(B + 1, n), reach.size, rec.size, residual)


# -- Monte Carlo -------------------------------------------------------------

@dataclass
class SimStats:
    """Loss counts and a batch-means confidence interval from one run."""

    capacity: int
    steps: int
    burn_in: int
    loss_events: int
    empty_events: int
    lolp_estimate: float
    std_error: float
    half_width: float
    batches: int
    seed: int

    @property
    def empty_estimate(self) -> float:
        return self.empty_events / (self.steps - self.burn_in)

    def to_dict(self):
        return dict(self.__dict__)


@numba.njit(cache=True)
def _chain_kernel(cdfs, rewards, sizes, state, b, B, u, loss, empty):
    n_users = sizes.size
    for k in range(u.shape[0]):
        r = 0
        for i in range(n_users):
            r += rewards[i, state[i]]
        z = b + r
        empty[k] = b == 0
        if z < 0:
            loss[k] = 1
            b = 0
        else:
            loss[k] = 0
            b = z if z < B else B
        for i in range(n_users):
            row = cdfs[i, state[i]]
            x = u[k, i]
            j = 0
            while j < sizes[i] - 1 and x >= row[j]:
                j += 1
            state[i] = j
    return b


def _components(model):
    return list(model.users) if isinstance(model, JointModel) else [model]


def simulate_chain(model: UserModel, B: int, steps: int, burn_in: int | None = None,
                   seed: int = 0, batches: int = MC_BATCHES) -> SimStats:
    """Monte Carlo LOLP for capacity ``B``.

    The battery starts empty and the background state is drawn from its
    stationary law. Randomness comes from NumPy's PCG64 generator seeded
    with ``seed``; uniforms are drawn in fixed-size blocks so results are
    reproducible. Joint models are simulated user by user.
    """
    require_valid(model)
    steps = int(steps)
    burn_in = steps // 10 if burn_in is None else int(burn_in)
    if burn_in < 0 or steps <= burn_in:
        raise DomainError(f"need steps > burn_in >= 0, got steps={steps}, burn_in={burn_in}")
    users = _components(model)
    n_users = len(users)
    nmax = max(u.n_states for u in users)
    cdfs = np.ones((n_users, nmax, nmax))
    rewards = np.zeros((n_users, nmax), dtype=np.int64)
    sizes = np.array([u.n_states for u in users], dtype=np.int64)
    for i, u in enumerate(users):
        c = np.cumsum(u.transition, axis=1)
        cdfs[i, : u.n_states, : u.n_states] = c
        rewards[i, : u.n_states] = u.net_gen

    rng = np.random.Generator(np.random.PCG64(seed))
    state = np.array(
        [min(int(np.searchsorted(np.cumsum(stationary_distribution(u)), x, side="right")), u.n_states - 1)
         for u, x in zip(users, rng.random(n_users))],
        dtype=np.int64,
    )
    loss = np.empty(steps, dtype=np.uint8)
    empty = np.empty(steps, dtype=np.uint8)
    b = 0
    for start in range(0, steps, _CHUNK):
        stop = min(start + _CHUNK, steps)
        u = rng.random((stop - start, n_users))
        b = _chain_kernel(cdfs, rewards, sizes, state, b, int(B), u, loss[start:stop], empty[start:stop])

    kept = loss[burn_in:]
    n_kept = kept.size
    est = float(kept.mean())
    nb = min(batches, n_kept)
    if nb >= 2:
        m = n_kept // nb
        means = kept[: nb * m].reshape(nb, m).mean(axis=1)
        se = float(means.std(ddof=1) / math.sqrt(nb))
        hw = float(stats.t.ppf(0.975, nb - 1) * se)
    else:
        se = hw = math.nan
    return SimStats(
        capacity=int(B),
        steps=steps,
        burn_in=burn_in,
        loss_events=int(kept.sum(dtype=np.int64)),
        empty_events=int(empty[burn_in:].sum(dtype=np.int64)),
        lolp_estimate=est,
        std_error=se,
        half_width=hw,
        batches=nb,
        seed=seed,
    )


# -- trace-driven ------------------------------------------------------------

@numba.njit(cache=True)
def _trace_kernel(net, B, b0, occ, loss):
    b = b0
    occ[0] = b
    for k in range(net.size):
        z = b + net[k]
        if z < 0.0:
            loss[k] = True
            b = 0.0
        else:
            loss[k] = False
            b = z if z < B else B
        occ[k + 1] = b


@numba.njit(cache=True)
def _trace_loss_count(net, B, b0):
    b = b0
    count = 0
    for k in range(net.size):
        z = b + net[k]
        if z < 0.0:
            count += 1
            b = 0.0
        else:
            b = z if z < B else B
    return count


@dataclass
class TraceRun:
    """Result of driving a battery with a recorded net-energy series."""

    capacity: float
    lolp: float
    occupancy: np.ndarray
    loss: np.ndarray

    def write_csv(self, path) -> None:
        """Write ``step,occupancy,loss_flag``; the last row is the final state."""
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "occupancy", "loss_flag"])
            for k, b in enumerate(self.occupancy):
                flag = int(self.loss[k]) if k < self.loss.size else 0
                w.writerow([k, repr(float(b)), flag])


def _net_values(net):
    values = getattr(net, "values", net)
    values = np.ascontiguousarray(values, dtype=float)
    if values.size == 0:
        raise DomainError("empty trace")
    return values


def simulate_trace(net, B: float, b0: float = 0.0) -> TraceRun:
    """Run the clamp recursion over a net-energy series.

    Args:
        net: A :class:`~battshare.ingest.TraceSeries` in energy per step, or
            an array of energies.
        B: Battery capacity in the same energy unit.
        b0: Initial occupancy.
    """
    values = _net_values(net)
    if B < 0 or not 0 <= b0 <= B:
        raise DomainError(f"need B >= 0 and 0 <= b0 <= B, got B={B}, b0={b0}")
    occ = np.empty(values.size + 1)
    loss = np.empty(values.size, dtype=np.bool_)
    _trace_kernel(values, float(B), float(b0), occ, loss)
    return TraceRun(float(B), float(loss.mean()), occ, loss)


def trace_lolp(net, B: float, b0: float = 0.0) -> float:
    """Loss fraction only; avoids storing the occupancy path."""
    values = _net_values(net)
    return _trace_loss_count(values, float(B), float(b0)) / values.size
