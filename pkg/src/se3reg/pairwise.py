"""Robust pairwise motion estimation by IRLS on SE(3).

Each outer iteration linearises the residuals ``p - dM M q`` around the
current motion with ``dM ~ I + hat6(v)``, solves the robust problem in the
twist ``v`` with a fixed number of IRLS rounds and then applies
``M <- exp_se3(v) M``.  The extrinsic mode instead applies ``v[3:]`` directly
as a translation increment, which (with one IRLS round) reproduces the
classic line-process update.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateGeometry
from .liegroup import RENORM_PERIOD, RigidMotion, exp_se3, exp_so3, hat3
from .robust_loss import FLOOR_FACTOR, AnnealSchedule, Loss, LossKind, anneal, loss_value, weight

# Smallest/largest Cholesky pivot of the Jacobi-scaled normal matrix.
PIVOT_RATIO = 1e-12


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Pairs ``(p[s], q[s])`` with the model ``p ~ M q``.

    ``q`` lives in the moving (source) scan and ``p`` in the fixed (target) one.
    """

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(-1, 3)
        q = np.array(self.q, dtype=float).reshape(-1, 3)
        if p.shape != q.shape:
            raise ValueError(f"p and q differ in shape: {p.shape} vs {q.shape}")
        if not (np.isfinite(p).all() and np.isfinite(q).all()):
            raise ValueError("correspondences contain non-finite coordinates")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_pairs(cls, pairs) -> CorrespondenceSet:
        pairs = list(pairs)
        if not pairs:
            return cls(np.empty((0, 3)), np.empty((0, 3)))
        p, q = zip(*pairs)
        return cls(np.asarray(p), np.asarray(q))

    def __len__(self):
        return self.p.shape[0]

    @property
    def scale(self) -> float:
        """Bounding-box diagonal of all points; a cheap stand-in for the diameter."""
        if len(self) == 0:
            return 0.0
        pts = np.vstack([self.p, self.q])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    def residuals(self, m: RigidMotion) -> np.ndarray:
        return np.linalg.norm(self.p - m.apply(self.q), axis=1)

    def subset(self, mask) -> CorrespondenceSet:
        return CorrespondenceSet(self.p[mask], self.q[mask])


class Parametrization(enum.Enum):
    INTRINSIC = "intrinsic"
    EXTRINSIC = "extrinsic"


@dataclass(frozen=True)
class SolverConfig:
    loss: Loss = field(default_factory=Loss.l_half)
    anneal: AnnealSchedule | None = None
    k_irls: int = 2
    epsilon: float = 1e-5
    max_outer: int = 100
    parametrization: Parametrization = Parametrization.INTRINSIC
    # None: FLOOR_FACTOR times the bounding-box diagonal of the data.
    floor: float | None = None

    def __post_init__(self):
        if self.k_irls < 1:
            raise ValueError("k_irls must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.floor is not None and not self.floor > 0:
            raise ValueError("floor must be positive")
        if self.anneal is not None and self.loss.kind is not LossKind.GEMAN_MCCLURE:
            raise ValueError("annealing only applies to the Geman-McClure loss")


@dataclass
class InnerRound:
    """Weighted objective of one IRLS round, at the previous and the new twist.

    Both values use the weights computed at the start of the round.
    """

    before: float
    after: float


@dataclass
class IterationRecord:
    cost: float
    update_norm: float
    elapsed: float
    inner: list[InnerRound] = field(default_factory=list)
    mu: float | None = None
    rmse: float | None = None


@dataclass
class ConvergenceTrace:
    initial_cost: float = float("nan")
    iterations: list[IterationRecord] = field(default_factory=list)

    def append(self, record: IterationRecord):
        self.iterations.append(record)

    def __len__(self):
        return len(self.iterations)

    @property
    def k_outer(self) -> int:
        return len(self.iterations)

    @property
    def costs(self) -> np.ndarray:
        return np.array([r.cost for r in self.iterations])

    @property
    def update_norms(self) -> np.ndarray:
        return np.array([r.update_norm for r in self.iterations])

    def k_outer_at(self, epsilon: float) -> int | None:
        """Outer iterations a run stopping at ``|v| <= epsilon`` would take."""
        for k, r in enumerate(self.iterations, start=1):
            if r.update_norm <= epsilon:
                return k
        return None


@dataclass
class RegistrationResult:
    motion: RigidMotion
    trace: ConvergenceTrace
    converged: bool


@dataclass(frozen=True, eq=False)
class LinearTerms:
    """Stacked per-correspondence blocks: ``a`` is (S, 3, 6), ``b`` is (S, 3)."""

    a: np.ndarray
    b: np.ndarray

    def __len__(self):
        return self.a.shape[0]

    def residuals(self, v) -> np.ndarray:
        return np.linalg.norm(self.a @ np.asarray(v, dtype=float) - self.b, axis=1)


def build_linear_terms(corrs: CorrespondenceSet, m_prev: RigidMotion) -> LinearTerms:
    """``a = [-hat3(M q) | I]`` and ``b = p - M q`` for every pair.

    ``|a v - b|`` equals ``|p - (I + hat6(v)) M q|``, so ``v = 0`` gives the
    current residual.
    """
    if len(corrs) == 0:
        raise ValueError("no correspondences")
    y = m_prev.apply(corrs.q)
    a = np.zeros((len(corrs), 3, 6))
    a[:, :, :3] = -hat3(y)
    a[:, :, 3:] = np.eye(3)
    return LinearTerms(a, corrs.p - y)


def solve_normal_equations(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve the SPD system ``h x = g``; raise DegenerateGeometry if rank deficient.

    The matrix is Jacobi-scaled first so the pivot test measures geometry
    rather than the spread of units or weights.
    """
    diag = np.diag(h)
    if not np.all(np.isfinite(h)) or np.any(diag <= 0):
        raise DegenerateGeometry("normal matrix has a zero or non-finite diagonal")
    d = 1.0 / np.sqrt(diag)
    hs = h * d[:, None] * d[None, :]
    try:
        c, lower = scipy.linalg.cho_factor(hs, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise DegenerateGeometry("normal matrix is not positive definite") from None
    pivots = np.diag(c) ** 2
    if pivots.min() < PIVOT_RATIO * pivots.max():
        raise DegenerateGeometry(
            f"normal matrix is rank deficient (pivot ratio {pivots.min() / pivots.max():.3g})"
        )
    ds = d if np.ndim(g) == 1 else d[:, None]
    return ds * scipy.linalg.cho_solve((c, lower), ds * g, check_finite=False)


def irls_solve(terms: LinearTerms, loss: Loss, k_irls: int, floor: float,
               rounds: list[InnerRound] | None = None) -> np.ndarray:
    """Run exactly ``k_irls`` reweighted solves of ``A^T W A v = A^T W b`` from ``v = 0``.

    When ``rounds`` is a list, one InnerRound per solve is appended to it.
    """
    a, b = terms.a, terms.b
    v = np.zeros(6)
    for _ in range(k_irls):
        e = np.linalg.norm(a @ v - b, axis=1)
        w = weight(loss, e, floor)
        h = np.einsum("s,sij,sik->jk", w, a, a)
        g = np.einsum("s,sij,si->j", w, a, b)
        v_new = solve_normal_equations(h, g)
        if rounds is not None:
            e_new = np.linalg.norm(a @ v_new - b, axis=1)
            rounds.append(InnerRound(float(w @ (e * e)), float(w @ (e_new * e_new))))
        v = v_new
    return v


def robust_cost(corrs: CorrespondenceSet, m: RigidMotion, loss: Loss) -> float:
    return float(np.sum(loss_value(loss, corrs.residuals(m))))


def _step(v: np.ndarray, parametrization: Parametrization) -> RigidMotion:
    if parametrization is Parametrization.INTRINSIC:
        return exp_se3(v)
    return RigidMotion(exp_so3(v[:3]), v[3:])


def _floor(config: SolverConfig, scale: float) -> float:
    if config.floor is not None:
        return config.floor
    return FLOOR_FACTOR * scale if scale > 0 else FLOOR_FACTOR


def estimate_pairwise(corrs: CorrespondenceSet, config: SolverConfig = SolverConfig(),
                      init: RigidMotion | None = None) -> RegistrationResult:
    """Robust estimate of ``M`` minimising ``sum rho(|p - M q|)``.

    Starts from the identity unless ``init`` is given and stops once the
    twist norm drops to ``config.epsilon`` (that last update is applied) or
    after ``config.max_outer`` iterations.
    """
    if len(corrs) < 3:
        raise ValueError(f"need at least 3 correspondences, got {len(corrs)}")
    floor = _floor(config, corrs.scale)
    loss = config.loss
    if config.anneal is not None:
        loss = loss.with_mu(config.anneal.mu0)

    m = RigidMotion.identity() if init is None else init
    trace = ConvergenceTrace(initial_cost=robust_cost(corrs, m, loss))
    converged = False
    start = time.perf_counter()
    for k in range(1, config.max_outer + 1):
        if config.anneal is not None:
            loss = loss.with_mu(anneal(config.anneal, loss.mu, k))
        terms = build_linear_terms(corrs, m)
        rounds: list[InnerRound] = []
        v = irls_solve(terms, loss, config.k_irls, floor, rounds)
        m = _step(v, config.parametrization) @ m
        if k % RENORM_PERIOD == 0:
            m = m.renormalized()
        norm = float(np.linalg.norm(v))
        trace.append(IterationRecord(
            cost=robust_cost(corrs, m, loss),
            update_norm=norm,
            elapsed=time.perf_counter() - start,
            inner=rounds,
            mu=loss.mu,
        ))
        if norm <= config.epsilon:
            converged = True
            break
    return RegistrationResult(m, trace, converged)


def estimate_pairwise_extrinsic(corrs: CorrespondenceSet, config: SolverConfig = SolverConfig(),
                                init: RigidMotion | None = None) -> RegistrationResult:
    """Same loop with the ``[omega, t]`` update, i.e. without the coupling matrix P."""
    cfg = SolverConfig(config.loss, config.anneal, config.k_irls, config.epsilon,
                       config.max_outer, Parametrization.EXTRINSIC, config.floor)
    return estimate_pairwise(corrs, cfg, init)


def umeyama_closed_form(corrs: CorrespondenceSet) -> RigidMotion:
    """Least-squares rigid motion (no scale) via SVD of the cross-covariance."""
    if len(corrs) < 3:
        raise DegenerateGeometry(f"need at least 3 correspondences, got {len(corrs)}")
    mp = corrs.p.mean(axis=0)
    mq = corrs.q.mean(axis=0)
    cov = (corrs.p - mp).T @ (corrs.q - mq) / len(corrs)
    u, s, vt = np.linalg.svd(cov)
    if s[0] == 0 or s[1] < 1e-12 * s[0]:
        raise DegenerateGeometry("correspondences are collinear or coincident")
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    r = (u * np.array([1.0, 1.0, d])) @ vt
    return RigidMotion(r, mp - r @ mq)
