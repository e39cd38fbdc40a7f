"""Scaled cumulant generating function and the loss-of-load decay rate.

``Lambda(theta) = log rho(M(theta))`` where ``M(theta)`` is the time-reversed
transition matrix with row ``s`` scaled by ``exp(-theta r(s))``, and the decay
rate is the positive root ``lambda = sup{theta > 0 : Lambda(theta) < 0}``.
A battery of about ``log(1/eps) / lambda`` energy units meets an LOLP target
``eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components

from battshare.errors import DomainError, NumericalError
from battshare.markov_core import (
    JointModel,
    _is_materializable,
    product_chain,
    require_valid,
    stationary_distribution,
    time_reverse,
    variance,
)

# Above this value of theta*max|r| the row scaling is shifted in log space.
LOG_SHIFT_THRESHOLD = 500.0
# Bracketing gives up once theta*max|r| exceeds this.
THETA_REWARD_CAP = 1e4


def tilted_matrix(model, theta: float) -> np.ndarray:
    """``M[s, s'] = P*[s, s'] * exp(-theta * r(s))``.

    ``theta >= 0`` is the range of interest, but any real value is accepted so
    that derivatives at zero can be taken by central differences.
    """
    M, shift = _tilted_scaled(model, theta)
    return M * math.exp(shift) if shift else M


def _tilted_scaled(model, theta):
    """Return ``(M_scaled, shift)`` with ``M = exp(shift) * M_scaled``."""
    Pstar = time_reverse(model).transition
    expo = -theta * model.net_gen.astype(float)
    shift = 0.0
    if abs(theta) * np.max(np.abs(model.net_gen)) > LOG_SHIFT_THRESHOLD:
        shift = float(np.max(expo))
        expo = expo - shift
    return Pstar * np.exp(expo)[:, None], shift


def spectral_radius(M, tol: float = 1e-14, max_iter: int = 100_000, x0=None):
    """Perron root and positive eigenvector of a nonnegative primitive matrix.

    Power iteration; each step brackets the root between the smallest and
    largest componentwise ratios ``(Mx)_i / x_i`` and stops once the bracket
    is narrower than ``tol`` relative to the root. A strictly positive
    diagonal keeps every iterate positive. Reducible matrices are split into
    their strongly connected blocks.

    Returns:
        ``(rho, x)`` with ``x`` normalized to unit sum.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if M.ndim != 2 or M.shape[1] != n:
        raise ValueError("matrix must be square")
    if np.any(M < 0):
        raise ValueError("matrix must be entrywise nonnegative")
    if n == 1:
        return float(M[0, 0]), np.ones(1)
    n_comp, comp = connected_components(M > 0, directed=True, connection="strong")
    if n_comp > 1:
        # Reducible: the root is the largest over the irreducible diagonal blocks.
        rho = max(spectral_radius(M[np.ix_(comp == c, comp == c)], tol, max_iter)[0] for c in range(n_comp))
        return rho, _dense_perron(M)[1]

    x = np.full(n, 1.0 / n) if x0 is None else np.asarray(x0, dtype=float) / np.sum(x0)
    best_gap = math.inf
    stale = 0
    lo = hi = 0.0
    for _ in range(max_iter):
        y = M @ x
        if np.any(y <= 0) or not np.all(np.isfinite(y)):
            return _dense_perron(M)
        ratios = y / x
        lo, hi = float(ratios.min()), float(ratios.max())
        x = y / y.sum()
        gap = (hi - lo) / hi
        if gap <= tol:
            break
        if gap < best_gap * 0.999:
            best_gap, stale = gap, 0
        else:
            stale += 1
            # Rounding floor reached: the bracket cannot shrink further.
            if stale > 200 and best_gap <= 1e-10:
                break
    else:
        raise NumericalError(
            f"power iteration did not converge in {max_iter} steps; bracket gap {(hi - lo) / hi:.3e}",
            residual=(hi - lo) / hi,
        )
    return 0.5 * (lo + hi), x


def _dense_perron(M):
    # Fallback when iterates underflow; the Perron root is the eigenvalue of
    # largest real part for a nonnegative irreducible matrix.
    w, v = scipy.linalg.eig(M)
    k = int(np.argmax(w.real))
    vec = np.abs(v[:, k].real)
    return float(w[k].real), vec / vec.sum()


def _cgf(model, theta, x0=None):
    if isinstance(model, JointModel) and not _is_materializable(model):
        return sum(_cgf(u, theta)[0] for u in model.users), None
    M, shift = _tilted_scaled(model, theta)
    rho, vec = spectral_radius(M, x0=x0)
    return shift + math.log(rho), vec


def scaled_cgf(model, theta: float) -> float:
    """Scaled CGF of the negated net-generation partial sums at ``theta``."""
    require_valid(model)
    return _cgf(model, theta)[0]


@dataclass
class CgfCurve:
    """Samples of ``Lambda`` over a grid of tilts."""

    model: object
    thetas: np.ndarray
    values: np.ndarray

    def midpoint_violations(self, tol: float = 1e-9):
        """Pairs ``(i, j)`` where the curve exceeds the chord at the midpoint."""
        bad = []
        for i in range(len(self.thetas)):
            for j in range(i + 1, len(self.thetas)):
                mid = 0.5 * (self.thetas[i] + self.thetas[j])
                chord = 0.5 * (self.values[i] + self.values[j])
                if scaled_cgf(self.model, mid) > chord + tol:
                    bad.append((i, j))
        return bad

    def is_midpoint_convex(self, tol: float = 1e-9) -> bool:
        return not self.midpoint_violations(tol)


def cgf_curve(model, thetas) -> CgfCurve:
    thetas = np.asarray(thetas, dtype=float)
    return CgfCurve(model, thetas, np.array([scaled_cgf(model, t) for t in thetas]))


@dataclass
class DecayResult:
    """Positive root of ``Lambda`` with solver diagnostics."""

    rate: float
    bracket: tuple
    iterations: int
    residual: float
    tolerance: float

    def battery_estimate_for(self, eps: float) -> float:
        """Large-deviations battery size ``log(1/eps) / lambda``."""
        if not 0 < eps < 1:
            raise DomainError(f"LOLP target must lie in (0, 1), got {eps}")
        return math.log(1.0 / eps) / self.rate

    def to_dict(self, eps_list=()):
        return {
            "lambda": self.rate,
            "bracket": list(self.bracket),
            "iterations": self.iterations,
            "residual": self.residual,
            "battery_estimates": {repr(float(e)): self.battery_estimate_for(e) for e in eps_list},
        }


def decay_rate(model, tol: float = 1e-10) -> DecayResult:
    """LOLP decay rate in battery size.

    The bracket grows geometrically from ``drift / variance`` until
    ``Lambda`` turns positive, then bisection narrows it to ``tol``.

    Raises:
        DomainError: if the drift is not positive.
        NumericalError: if no sign change is found below the tilt cap.
    """
    require_valid(model)
    pi = stationary_distribution(model)
    delta = float(pi @ model.net_gen)
    if delta <= 0:
        raise DomainError(f"decay rate needs positive drift, got {delta:.6g}")
    rmax = float(np.max(np.abs(model.net_gen)))
    var = variance(model)
    start = delta / var if var > 0 else 1.0 / rmax

    evals = 0
    vec = None

    def lam(theta):
        nonlocal evals, vec
        evals += 1
        value, v = _cgf(model, theta, x0=vec)
        if v is not None:
            vec = v
        return value

    theta = start
    if lam(theta) < 0:
        lo, hi = theta, 2 * theta
        while lam(hi) < 0:
            lo, hi = hi, 2 * hi
            if hi * rmax > THETA_REWARD_CAP:
                raise NumericalError(f"no sign change of Lambda below theta={hi:.4g}")
    else:
        lo, hi = theta / 2, theta
        while lam(lo) >= 0:
            lo, hi = lo / 2, lo
            if lo < 1e-300:
                raise NumericalError("Lambda is non-negative arbitrarily close to zero")
    bracket = (lo, hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if lam(mid) < 0:
            lo = mid
        else:
            hi = mid
    root = 0.5 * (lo + hi)
    return DecayResult(
        rate=root,
        bracket=bracket,
        iterations=evals,
        residual=abs(_cgf(model, root, x0=vec)[0]),
        tolerance=tol,
    )


@dataclass
class DecayBound:
    """Joint decay rate against the slowest stand-alone rate."""

    joint: DecayResult
    per_user: list = field(default_factory=list)

    @property
    def lambda_joint(self) -> float:
        return self.joint.rate

    @property
    def lambda_min(self) -> float:
        return min(d.rate for d in self.per_user)

    @property
    def bound_satisfied(self) -> bool:
        return self.lambda_joint >= self.lambda_min - 1e-9

    @property
    def strict(self) -> bool:
        """True when the joint rate is strictly above the slowest user's."""
        return self.lambda_joint > self.lambda_min + 10 * self.joint.tolerance

    def to_dict(self):
        return {
            "lambda_joint": self.lambda_joint,
            "lambda_min": self.lambda_min,
            "per_user_lambdas": [d.rate for d in self.per_user],
            "bound_satisfied": self.bound_satisfied,
            "strict": self.strict,
        }


def decay_rate_bound(users, tol: float = 1e-10) -> DecayBound:
    """Compare the shared-battery decay rate with each user's own rate."""
    users = list(users)
    per_user = [decay_rate(u, tol) for u in users]
    joint = decay_rate(product_chain(users), tol) if len(users) > 1 else per_user[0]
    result = DecayBound(joint, per_user)
    if not result.bound_satisfied:
        raise NumericalError(
            f"joint rate {result.lambda_joint} below slowest user rate {result.lambda_min}"
        )
    return result
