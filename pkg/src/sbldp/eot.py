"""
Discrete static Schrodinger problem: entropic and exact optimal transport.

Potentials follow one convention throughout: on the support of an optimal plan
``cost[i, j] = -psi[i] + phi[j]``, the static rate is
``I_S(x_i, y_j) = cost[i, j] + psi[i] - phi[j]`` and potentials are shifted so
that ``psi[0] = 0``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.special import logsumexp

from . import streams
from .errors import NoConvergenceWarning, OffSupport, SizeCapExceeded
from .model import DiffusionModel, finite_cost, limit_cost

LOG_DOMAIN_BELOW = 0.05
EXACT_SIZE_CAP = 250_000
_NEWTON_AFTER = 2000
_NEWTON_MAX_M = 1000


@dataclass(frozen=True)
class DiscreteMarginal:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(atoms),):
            raise ValueError("one weight per atom required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite (compact support)")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, atoms) -> "DiscreteMarginal":
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        return cls(atoms, np.full(len(atoms), 1.0 / len(atoms)))

    @classmethod
    def dirac(cls, point) -> "DiscreteMarginal":
        return cls(np.atleast_2d(np.asarray(point, dtype=float)), np.ones(1))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self):
        return len(self.atoms)

    def index_of(self, point, atol: float = 1e-12) -> Optional[int]:
        point = np.atleast_1d(np.asarray(point, dtype=float))
        hit = np.flatnonzero(np.max(np.abs(self.atoms - point), axis=1) <= atol)
        return int(hit[0]) if len(hit) else None


@dataclass(frozen=True)
class DiscreteCoupling:
    """Entropic OT solution and its diagnostics.

    ``objective`` is ``<plan, cost> + eta KL(plan || mu x nu)``.
    """

    mu: DiscreteMarginal
    nu: DiscreteMarginal
    cost: np.ndarray
    plan: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    eta: float
    objective: float = math.nan
    marginal_error: float = math.nan
    n_iter: int = 0
    converged: bool = True
    log_domain: bool = False


@dataclass(frozen=True)
class ExactOT:
    mu: DiscreteMarginal
    nu: DiscreteMarginal
    cost: np.ndarray
    plan: np.ndarray
    value: float
    psi: np.ndarray
    phi: np.ndarray
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.plan, self.value, self.psi, self.phi))

    def rate_matrix(self) -> np.ndarray:
        return self.cost + self.psi[:, None] - self.phi[None, :]


def build_cost(model: DiffusionModel, mu: DiscreteMarginal, nu: DiscreteMarginal,
               mode: str = "limit") -> np.ndarray:
    """``-eta log p_eta(0, x_i; 1, y_j)`` (``finite_eta``) or its limit ``c(x_i, y_j)``."""
    x = mu.atoms[:, None, :]
    y = nu.atoms[None, :, :]
    if mode == "limit":
        return np.asarray(limit_cost(model, x, y), dtype=float)
    if mode == "finite_eta":
        return np.asarray(finite_cost(model, x, y), dtype=float)
    raise ValueError(f"unknown cost mode {mode!r}")


def _normalize(psi, phi):
    shift = psi[0]
    return psi - shift, phi - shift


def entropic_objective(plan, cost, mu: DiscreteMarginal, nu: DiscreteMarginal, eta: float) -> float:
    """``sum plan * cost + eta sum plan log(plan / (mu x nu))``."""
    ref = np.outer(mu.weights, nu.weights)
    pos = plan > 0
    kl = float(np.sum(plan[pos] * np.log(plan[pos] / ref[pos])))
    return float(np.sum(plan * cost)) + eta * kl


def _marginal_error(plan, a, b):
    return float(np.abs(plan.sum(1) - a).sum() + np.abs(plan.sum(0) - b).sum())


def sinkhorn(cost, mu: DiscreteMarginal, nu: DiscreteMarginal, eta: float, tol: float = 1e-9,
             max_iter: int = 100_000, *, log_domain: Optional[bool] = None) -> DiscreteCoupling:
    """Entropic OT by alternating scaling (full u-update, then full v-update).

    The plan has Gibbs form ``diag(u) exp(-cost/eta) diag(v)``; iteration stops once
    the L1 marginal violation is at most ``tol``. Below ``eta = 0.05``, or when the
    scaling iterates under/overflow, iterations run on log-potentials.
    """
    if eta <= 0 or tol <= 0:
        raise ValueError("eta and tol must be positive")
    cost = np.asarray(cost, dtype=float)
    a, b = mu.weights, nu.weights
    if log_domain is None:
        log_domain = eta < LOG_DOMAIN_BELOW
    if not log_domain:
        out = _sinkhorn_scaling(cost, a, b, eta, tol, max_iter)
        if out is None:
            log_domain = True
        else:
            plan, f, g, it, err = out
    if log_domain:
        plan, f, g, it, err = _sinkhorn_log(cost, a, b, eta, tol, max_iter)
    converged = err <= tol
    if not converged:
        warnings.warn(f"Sinkhorn stopped after {it} iterations with marginal error {err:.3g}",
                      NoConvergenceWarning, stacklevel=2)
    psi, phi = _normalize(-f, g)
    return DiscreteCoupling(mu, nu, cost, plan, psi, phi, float(eta),
                            entropic_objective(plan, cost, mu, nu, eta), err, it,
                            converged, log_domain)


def _sinkhorn_scaling(cost, a, b, eta, tol, max_iter):
    with np.errstate(under="ignore"):
        K = np.exp(-(cost - cost.min()) / eta)
    if np.any(K.sum(1) == 0) or np.any(K.sum(0) == 0):
        return None
    u = np.ones(len(a))
    v = np.ones(len(b))
    err, it = math.inf, 0
    with np.errstate(all="ignore"):
        for it in range(1, max_iter + 1):
            u = a / (K @ v)
            v = b / (K.T @ u)
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))
                    and np.all(u > 0) and np.all(v > 0)):
                return None
            plan = u[:, None] * K * v[None, :]
            err = _marginal_error(plan, a, b)
            if err <= tol:
                break
    if not np.all(plan > 0):
        return None
    f = eta * np.log(u) + cost.min()
    g = eta * np.log(v)
    return plan, f, g, it, err


def _log_iterations(cost, la, lb, eta, f, g, tol, max_iter, a, b):
    err, it = math.inf, 0
    plan = None
    for it in range(1, max_iter + 1):
        f = eta * (la - logsumexp((g[None, :] - cost) / eta, axis=1))
        g = eta * (lb - logsumexp((f[:, None] - cost) / eta, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - cost) / eta)
        err = _marginal_error(plan, a, b)
        if err <= tol:
            break
    return plan, f, g, it, err


def _sinkhorn_log(cost, a, b, eta, tol, max_iter):
    """Log-domain iterations with geometric eta-scaling warm starts."""
    la, lb = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    spread = float(cost.max() - cost.min())
    stages = []
    e = max(spread, eta)
    while e > eta * 2.0:
        stages.append(e)
        e /= 2.0
    total = 0
    for e in stages:
        _, f, g, it, _ = _log_iterations(cost, la, lb, e, f, g, max(tol, 1e-6), max_iter, a, b)
        total += it
    budget = min(max_iter, _NEWTON_AFTER) if len(b) <= _NEWTON_MAX_M else max_iter
    plan, f, g, it, err = _log_iterations(cost, la, lb, eta, f, g, tol, budget, a, b)
    total += it
    if err > tol and len(b) <= _NEWTON_MAX_M:
        plan, f, g, it, err = _newton_polish(cost, la, a, b, eta, g, tol)
        total += it
    return plan, f, g, total, err


def _semi_dual(cost, la, eta, g):
    f = eta * (la - logsumexp((g[None, :] - cost) / eta, axis=1))
    return f, np.exp((f[:, None] + g[None, :] - cost) / eta)


def _newton_polish(cost, la, a, b, eta, g, tol, max_steps=100):
    """Newton iterations on the column constraints, rows kept exact."""
    f, plan = _semi_dual(cost, la, eta, g)
    err = _marginal_error(plan, a, b)
    it = 0
    for it in range(1, max_steps + 1):
        if err <= tol:
            break
        col = plan.sum(0)
        jac = (np.diag(col) - plan.T @ (plan / a[:, None])) / eta
        step = np.linalg.lstsq(jac, b - col, rcond=None)[0]
        lam = 1.0
        while lam > 1e-8:
            f_new, p_new = _semi_dual(cost, la, eta, g + lam * step)
            e_new = _marginal_error(p_new, a, b)
            if e_new < err:
                break
            lam /= 2.0
        else:
            break
        g, f, plan, err = g + lam * step, f_new, p_new, e_new
    return plan, f, g, it, err


def exact_ot(cost, mu: DiscreteMarginal, nu: DiscreteMarginal, *,
             size_cap: int = EXACT_SIZE_CAP) -> ExactOT:
    """Exact Kantorovich solution with dual potentials.

    The transportation LP is solved by the HiGHS dual simplex; the returned basic
    duals are then re-solved on the spanning forest of the plan support so that
    ``cost = -psi + phi`` holds there to rounding. When the support graph is
    disconnected the optimal duals are not unique; the minimum-norm choice is
    returned, which does not depend on the order of the atoms.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n * m > size_cap:
        raise SizeCapExceeded(f"{n}x{m} exceeds the exact-OT size cap {size_cap}")
    a, b = mu.weights, nu.weights
    if n == 1 or m == 1:
        plan = np.outer(a, b)
        # every pair is in the support; duals follow from one row or column
        if n == 1:
            phi = cost[0].copy()
            psi = np.zeros(1)
        else:
            psi = -cost[:, 0].copy()
            phi = np.zeros(1)
        psi, phi = _normalize(psi, phi)
        return ExactOT(mu, nu, cost, plan, float(np.sum(plan * cost)), psi, phi)
    rows = np.zeros((n + m, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        rows[n + j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=rows, b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"transportation LP failed: {res.message}")
    plan = np.clip(res.x.reshape(n, m), 0.0, None)
    duals = res.eqlin.marginals
    alpha, beta = duals[:n].copy(), duals[n:].copy()
    support = plan > 1e-14
    alpha, beta, comp = _polish_duals(cost, support, alpha, beta)
    psi, phi = _min_norm_duals(cost, -alpha, beta, comp[:n], comp[n:])
    psi, phi = _normalize(psi, phi)
    value = float(np.sum(plan * cost))
    return ExactOT(mu, nu, cost, plan, value, psi, phi,
                   {"lp_value": float(res.fun), "support_size": int(support.sum())})


def _polish_duals(cost, support, alpha, beta):
    """Make ``alpha_i + beta_j = cost_ij`` exact on each support component.

    Each connected component of the bipartite support graph is anchored at the
    LP dual of its first row (or column) node and propagated by BFS.
    """
    n, m = cost.shape
    seen_r = np.zeros(n, bool)
    seen_c = np.zeros(m, bool)
    comp = np.full(n + m, -1)
    for root in range(n):
        if seen_r[root]:
            continue
        label = comp.max() + 1
        seen_r[root] = True
        queue = [("r", root)]
        while queue:
            kind, k = queue.pop()
            comp[k if kind == "r" else n + k] = label
            if kind == "r":
                for j in np.flatnonzero(support[k]):
                    if not seen_c[j]:
                        seen_c[j] = True
                        beta[j] = cost[k, j] - alpha[k]
                        queue.append(("c", j))
            else:
                for i in np.flatnonzero(support[:, k]):
                    if not seen_r[i]:
                        seen_r[i] = True
                        alpha[i] = cost[i, k] - beta[k]
                        queue.append(("r", i))
    return alpha, beta, comp


def _min_norm_duals(cost, psi, phi, comp_r, comp_c):
    """Shift each support component so that ``|psi|^2 + |phi|^2`` is minimal.

    A shift ``t_k`` added to both potentials of component ``k`` keeps
    ``cost = -psi + phi`` on the support; feasibility off the support bounds the
    differences ``t_B - t_A``. The quadratic program has one variable per component.
    """
    k = int(max(comp_r.max(), comp_c.max())) + 1
    if k == 1:
        return psi, phi
    slack = cost + psi[:, None] - phi[None, :]
    # bound[A, B]: largest allowed t_B - t_A
    bound = np.full((k, k), np.inf)
    np.minimum.at(bound, (comp_r[:, None].repeat(len(phi), 1), comp_c[None, :].repeat(len(psi), 0)),
                  slack)
    counts = np.bincount(comp_r, minlength=k) + np.bincount(comp_c, minlength=k)
    sums = np.bincount(comp_r, psi, minlength=k) + np.bincount(comp_c, phi, minlength=k)
    pairs = [(a, b) for a in range(k) for b in range(k) if a != b and np.isfinite(bound[a, b])]
    mat = np.zeros((len(pairs), k))
    for r, (a, b) in enumerate(pairs):
        mat[r, a], mat[r, b] = 1.0, -1.0
    rhs = np.array([bound[a, b] for a, b in pairs])
    res = minimize(lambda t: float(np.sum(counts * t * t + 2 * sums * t)),
                   np.zeros(k), jac=lambda t: 2 * counts * t + 2 * sums, method="SLSQP",
                   constraints=[{"type": "ineq", "fun": lambda t: rhs + mat @ t,
                                 "jac": lambda t: mat}],
                   options={"ftol": 1e-15, "maxiter": 500})
    t = res.x
    # snap to feasibility: shrink towards the feasible start t = 0 if rounding overshoots
    for _ in range(60):
        if np.all(rhs + mat @ t >= -1e-12):
            break
        t = 0.5 * t
    else:
        t = np.zeros(k)
    return psi + t[comp_r], phi + t[comp_c]


def static_rate(ot: ExactOT, x, y, cost_fn=None, *, strict: bool = False) -> float:
    """``I_S(x, y) = c(x, y) + psi(x) - phi(y)`` on the atoms of the marginals.

    Points off the discrete supports get ``+inf`` (or ``OffSupport`` if ``strict``).
    ``cost_fn(x, y)`` overrides the stored cost matrix entry.
    """
    i = ot.mu.index_of(x)
    j = ot.nu.index_of(y)
    if i is None or j is None:
        if strict:
            raise OffSupport(f"({x}, {y}) is not a pair of support atoms")
        return math.inf
    c = float(cost_fn(np.atleast_1d(x), np.atleast_1d(y))) if cost_fn is not None else ot.cost[i, j]
    return float(c + ot.psi[i] - ot.phi[j])


def dual_sensitivity(cost, mu: DiscreteMarginal, nu: DiscreteMarginal, seed: int = 0) -> dict:
    """Re-solve with permuted atom order and compare the static rate matrices.

    Non-unique Kantorovich potentials can change ``I_S`` off the optimal support;
    ``flagged`` is set when the two solutions differ by more than 1e-8.
    """
    rng = streams.generator(seed, "dual-permutation")
    first = exact_ot(cost, mu, nu)
    pr = rng.permutation(len(mu))
    pc = rng.permutation(len(nu))
    mu2 = DiscreteMarginal(mu.atoms[pr], mu.weights[pr])
    nu2 = DiscreteMarginal(nu.atoms[pc], nu.weights[pc])
    second = exact_ot(np.asarray(cost)[np.ix_(pr, pc)], mu2, nu2)
    back = np.empty_like(second.rate_matrix())
    back[np.ix_(pr, pc)] = second.rate_matrix()
    diff = float(np.max(np.abs(back - first.rate_matrix())))
    return {"max_rate_difference": diff, "flagged": diff > 1e-8}


def sample_static_coupling(plan, n: int, seed: int, mu: Optional[DiscreteMarginal] = None,
                           nu: Optional[DiscreteMarginal] = None, stage: str = "coupling"):
    """``n`` i.i.d. index pairs ``(i, j)`` drawn from ``plan``.

    With marginals supplied, returns the atom pairs ``(x, y)`` instead.
    """
    if mu is None and hasattr(plan, "mu"):
        mu, nu = plan.mu, plan.nu
    plan = np.asarray(plan.plan if hasattr(plan, "plan") else plan, dtype=float)
    p = np.clip(plan.ravel(), 0.0, None)
    p = p / p.sum()
    rng = streams.generator(seed, stage)
    flat = rng.choice(len(p), size=n, p=p)
    idx = np.stack(np.unravel_index(flat, plan.shape), axis=1)
    if mu is None:
        return idx
    return mu.atoms[idx[:, 0]], nu.atoms[idx[:, 1]]


def relative_entropy(p, q) -> float:
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    pos = p > 0
    if np.any(q[pos] == 0):
        return math.inf
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def entropy_decomposition(pi, ref) -> dict:
    """Split ``H(pi || R)`` for laws on ``(x_0, ..., x_{T-1})`` given as arrays.

    The first and last axes are the endpoints. Returns the joint entropy, the
    endpoint term ``H(pi_01 || R_01)`` and the averaged bridge term
    ``sum pi_01(x, y) H(pi^{xy} || R^{xy})``.
    """
    pi = np.asarray(pi, dtype=float)
    ref = np.asarray(ref, dtype=float)
    mid = tuple(range(1, pi.ndim - 1))
    pi01 = pi.sum(axis=mid)
    r01 = ref.sum(axis=mid)
    bridge = 0.0
    for idx in np.ndindex(pi01.shape):
        w = pi01[idx]
        if w == 0:
            continue
        sl = (idx[0], Ellipsis, idx[1])
        bridge += w * relative_entropy(pi[sl] / w, ref[sl] / r01[idx])
    return {"joint": relative_entropy(pi, ref), "endpoint": relative_entropy(pi01, r01),
            "bridge": bridge}


__all__ = [
    "DiscreteMarginal", "DiscreteCoupling", "ExactOT", "build_cost", "sinkhorn", "exact_ot",
    "static_rate", "dual_sensitivity", "sample_static_coupling", "entropic_objective",
    "relative_entropy", "entropy_decomposition",
]
