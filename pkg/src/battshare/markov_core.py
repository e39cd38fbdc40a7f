"""Background Markov chains: validation, stationary laws, reversal, products.

A :class:`UserModel` is a finite DTMC with an integer net-generation reward
per state. Independent users combine into a :class:`JointModel` whose state
space is the lexicographically ordered product of the component spaces and
whose reward is the sum of component rewards.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from battshare.errors import (
    CapacityError,
    NumericalError,
    ParseError,
    StructuralError,
    ValidationError,
)

STOCHASTIC_TOL = 1e-12
STATIONARY_RESIDUAL_TOL = 1e-10
DEFAULT_STATE_CAP = 10**6
# Largest joint chain whose dense transition matrix is materialized.
DENSE_STATE_CAP = 4096


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class UserModel:
    """One user's background chain and per-state net generation.

    Args:
        transition: Row-stochastic matrix of shape (n, n).
        net_gen: Integer reward per state, in energy units per step.
        states: Optional state labels; defaults to ``0..n-1``.

    Only structural consistency is checked here; call :func:`validate` for
    the stochastic, irreducibility and A1/A2 checks.
    """

    def __init__(self, transition, net_gen, states=None):
        P = np.asarray(transition, dtype=float)
        r = np.asarray(net_gen)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise StructuralError(f"transition must be square, got shape {P.shape}")
        if r.ndim != 1 or r.shape[0] != P.shape[0]:
            raise StructuralError(
                f"net_gen has {r.size} entries but transition has {P.shape[0]} states"
            )
        if states is None:
            states = tuple(range(P.shape[0]))
        states = tuple(states)
        if len(states) != P.shape[0]:
            raise StructuralError(
                f"{len(states)} state labels for {P.shape[0]} states"
            )
        if len(set(states)) != len(states):
            raise StructuralError("state labels must be unique")
        if not np.all(np.isfinite(P)):
            raise StructuralError("transition contains non-finite entries")
        self._transition = _frozen(P)
        self._net_gen = _frozen(r)
        self._states = states
        self._cache = {}

    @property
    def transition(self) -> np.ndarray:
        return self._transition

    @property
    def net_gen(self) -> np.ndarray:
        return self._net_gen

    @property
    def states(self) -> tuple:
        return self._states

    @property
    def n_states(self) -> int:
        return len(self._states)

    def __repr__(self):
        return f"{type(self).__name__}(n_states={self.n_states}, net_gen={self.net_gen.tolist()})"


class JointModel(UserModel):
    """Product chain of independent users.

    The transition matrix is built on first access and only for chains of at
    most ``DENSE_STATE_CAP`` states; larger products are still usable for
    simulation and for quantities that factor over users.
    """

    def __init__(self, users, state_cap=DEFAULT_STATE_CAP):
        users = tuple(users)
        if not users:
            raise StructuralError("a joint model needs at least one user")
        sizes = [u.n_states for u in users]
        total = math.prod(sizes)
        if total > state_cap:
            raise CapacityError(
                f"product chain has {total} states, above the cap of {state_cap}; "
                "use Monte Carlo simulation (lolp-mc) instead of exact methods"
            )
        self.users = users
        self._states = tuple(
            tuple(u.states[i] for u, i in zip(users, idx))
            for idx in np.ndindex(*sizes)
        )
        r = reduce(lambda a, b: np.add.outer(a, b).ravel(), [u.net_gen for u in users])
        self._net_gen = _frozen(np.asarray(r, dtype=np.int64))
        self._transition = None
        self._cache = {}

    @property
    def transition(self) -> np.ndarray:
        if self._transition is None:
            if self.n_states > DENSE_STATE_CAP:
                raise CapacityError(
                    f"joint chain with {self.n_states} states is too large for a dense "
                    f"transition matrix (cap {DENSE_STATE_CAP}); use Monte Carlo"
                )
            self._transition = _frozen(
                reduce(np.kron, [u.transition for u in self.users])
            )
        return self._transition

    @property
    def materializable(self) -> bool:
        return self.n_states <= DENSE_STATE_CAP


def _is_materializable(model) -> bool:
    return not isinstance(model, JointModel) or model.materializable


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    state: object = None


@dataclass
class ValidationReport:
    """Pass/fail status of every model check."""

    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def raise_if_failed(self):
        bad = self.failures()
        if bad:
            c = bad[0]
            where = f" (state {c.state!r})" if c.state is not None else ""
            raise ValidationError(f"{c.name} failed{where}: {c.detail}", check=c.name, state=c.state)

    def to_dict(self):
        return {
            "ok": self.ok,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail,
                 "state": None if c.state is None else str(c.state)}
                for c in self.checks
            ],
        }


def _check_matrix(P, r, labels):
    checks = []
    neg = np.argwhere(P < 0)
    row_err = np.abs(P.sum(axis=1) - 1.0)
    if neg.size:
        i = int(neg[0, 0])
        checks.append(CheckResult("row_stochastic", False, "negative entry", labels[i]))
    elif np.any(row_err > STOCHASTIC_TOL):
        i = int(np.argmax(row_err))
        checks.append(CheckResult(
            "row_stochastic", False, f"row sums to {P[i].sum()!r}", labels[i]))
    else:
        checks.append(CheckResult("row_stochastic", True))

    n_comp, comp = connected_components(P > 0, directed=True, connection="strong")
    if n_comp == 1:
        checks.append(CheckResult("irreducible", True))
    else:
        i = int(np.argmax(comp != comp[0]))
        checks.append(CheckResult(
            "irreducible", False, f"{n_comp} communicating classes", labels[i]))

    diag = np.diag(P)
    if np.all(diag > 0):
        checks.append(CheckResult("A1_self_loops", True))
    else:
        i = int(np.argmin(diag > 0))
        checks.append(CheckResult("A1_self_loops", False, "zero self-transition probability", labels[i]))

    checks.extend(_check_rewards(r))
    return checks


def _check_rewards(r):
    checks = []
    if np.any(r < 0):
        checks.append(CheckResult("A2_deficit_state", True))
    else:
        checks.append(CheckResult("A2_deficit_state", False, "no state has negative net generation"))
    rf = np.asarray(r, dtype=float)
    bad = ~np.isfinite(rf) | (rf != np.round(rf))
    if np.any(bad):
        i = int(np.argmax(bad))
        checks.append(CheckResult("integer_rewards", False, f"reward {r[i]!r} is not an integer", i))
    else:
        checks.append(CheckResult("integer_rewards", True))
    return checks


def validate(model: UserModel, strict: bool = False) -> ValidationReport:
    """Run every model check and collect the results.

    With ``strict=True`` the first failed check raises :class:`ValidationError`.
    Joint models too large to materialize are checked component-wise, which
    is sufficient: a product of irreducible chains with positive self-loops is
    irreducible and aperiodic.
    """
    if isinstance(model, JointModel) and not model.materializable:
        checks = []
        for k, u in enumerate(model.users):
            for c in validate(u).checks:
                if not c.passed:
                    c = CheckResult(c.name, False, f"user {k}: {c.detail}", c.state)
                checks.append(c)
        report = ValidationReport(_merge_checks(checks))
    else:
        report = ValidationReport(_check_matrix(model.transition, model.net_gen, model.states))
    if report.ok:
        model._cache["validated"] = True
    if strict:
        report.raise_if_failed()
    return report


def _merge_checks(checks):
    merged = {}
    for c in checks:
        if c.name not in merged or not c.passed and merged[c.name].passed:
            merged[c.name] = c
    return list(merged.values())


def require_valid(model: UserModel) -> UserModel:
    if not model._cache.get("validated"):
        validate(model, strict=True)
    return model


def _solve_stationary(P):
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"stationary solve failed: {exc}") from exc
    residual = float(np.max(np.abs(pi @ P - pi))) if n else 0.0
    if residual > STATIONARY_RESIDUAL_TOL or np.any(pi < -STATIONARY_RESIDUAL_TOL):
        raise NumericalError(
            f"stationary solve residual {residual:.3e} exceeds {STATIONARY_RESIDUAL_TOL}",
            residual=residual,
        )
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def stationary_distribution(model: UserModel) -> np.ndarray:
    """Stationary law ``pi`` with ``pi P = pi`` and unit mass.

    Solves ``(P^T - I) pi = 0`` with the last equation replaced by the
    normalization. Joint models that are too large to materialize use the
    product of component laws.
    """
    pi = model._cache.get("pi")
    if pi is None:
        if _is_materializable(model):
            pi = _solve_stationary(model.transition)
        else:
            pi = reduce(np.kron, [stationary_distribution(u) for u in model.users])
        pi = _frozen(pi)
        model._cache["pi"] = pi
    return pi


def drift(model: UserModel) -> float:
    """Stationary mean net generation per step."""
    pi = stationary_distribution(model)
    d = float(pi @ model.net_gen)
    if d <= 0:
        warnings.warn(
            f"non-positive drift {d:.6g}: the loss-of-load decay rate is undefined",
            RuntimeWarning,
            stacklevel=2,
        )
    return d


def time_reverse(model: UserModel) -> UserModel:
    """Time-reversed chain ``P*[s, s'] = pi(s') P[s', s] / pi(s)``."""
    rev = model._cache.get("reverse")
    if rev is None:
        rev = _time_reverse(model)
        model._cache["reverse"] = rev
    return rev


def _time_reverse(model):
    if isinstance(model, JointModel):
        rev = JointModel([time_reverse(u) for u in model.users])
        if model._cache.get("validated"):
            rev._cache["validated"] = True
        return rev
    pi = stationary_distribution(model)
    if np.any(pi <= 0):
        raise NumericalError("stationary distribution has a zero entry; chain is not irreducible")
    P = model.transition
    Pstar = (P.T * pi[None, :]) / pi[:, None]
    Pstar /= Pstar.sum(axis=1, keepdims=True)
    rev = UserModel(Pstar, model.net_gen, model.states)
    rev._cache["pi"] = pi
    if model._cache.get("validated"):
        rev._cache["validated"] = True
    return rev


def product_chain(users, state_cap: int = DEFAULT_STATE_CAP) -> JointModel:
    """Joint chain of independent users, states in lexicographic order."""
    users = list(users)
    for u in users:
        require_valid(u)
    joint = JointModel(users, state_cap=state_cap)
    joint._cache["validated"] = True
    return joint


def variance(model: UserModel) -> float:
    """Stationary variance of the per-step net generation."""
    pi = stationary_distribution(model)
    r = model.net_gen.astype(float)
    m = pi @ r
    return float(pi @ (r - m) ** 2)


# -- chain-spec JSON -------------------------------------------------------

def _line_of(text, key):
    needle = f'"{key}"'
    pos = text.find(needle)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else None


def parse_chain(text: str) -> UserModel:
    """Parse a chain-spec JSON document into a :class:`UserModel`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", line=1)
    for key in ("transition", "net_gen"):
        if key not in doc:
            raise ParseError(f"missing required key {key!r}", line=1)
    unknown = set(doc) - {"states", "transition", "net_gen"}
    if unknown:
        k = sorted(unknown)[0]
        raise ParseError(f"unknown key {k!r}", line=_line_of(text, k))

    P = doc["transition"]
    if not isinstance(P, list) or not P or not all(isinstance(row, list) for row in P):
        raise ParseError("'transition' must be a non-empty list of rows", line=_line_of(text, "transition"))
    for i, row in enumerate(P):
        if len(row) != len(P) or not all(_is_number(x) for x in row):
            raise ParseError(
                f"transition row {i} must hold {len(P)} numbers",
                line=_line_of(text, "transition"),
            )
    r = doc["net_gen"]
    if not isinstance(r, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in r):
        raise ParseError("'net_gen' must be a list of integers", line=_line_of(text, "net_gen"))
    states = doc.get("states")
    if states is not None and not isinstance(states, list):
        raise ParseError("'states' must be a list", line=_line_of(text, "states"))
    try:
        return UserModel(P, np.array(r, dtype=np.int64), states)
    except StructuralError as exc:
        raise ParseError(str(exc), line=_line_of(text, "net_gen")) from exc


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def load_chain(path) -> UserModel:
    return parse_chain(Path(path).read_text(encoding="utf-8"))


def _label(s):
    # JSON-safe state label; product states become "a|b|c".
    if isinstance(s, tuple):
        return "|".join(map(str, s))
    if isinstance(s, (np.integer, np.floating)):
        return s.item()
    return s if isinstance(s, (str, int, float)) else str(s)


def chain_to_dict(model: UserModel) -> dict:
    return {
        "states": [_label(s) for s in model.states],
        "transition": model.transition.tolist(),
        "net_gen": [int(x) for x in model.net_gen],
    }


def save_chain(model: UserModel, path) -> None:
    Path(path).write_text(json.dumps(chain_to_dict(model), indent=2) + "\n", encoding="utf-8")
