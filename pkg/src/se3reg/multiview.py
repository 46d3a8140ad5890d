"""Joint robust registration of N scans over a view graph.

All absolute motions (scan to global) are updated together: every matched
pair ``(p_i, p_j)`` on edge ``(i, j)`` contributes a residual
``M_i p_i - M_j p_j`` that is linear in the stacked twists after the
first-order expansion ``dM_k ~ I + hat6(v_k)``.  Scan 0 defines the global
frame; its six columns are left out of the system instead of being pinned by
a prior.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph
import scipy.sparse.linalg

from .errors import DegenerateGeometry, DisconnectedGraph
from .liegroup import RENORM_PERIOD, RigidMotion, exp_se3, hat3
from .pairwise import (
    PIVOT_RATIO,
    ConvergenceTrace,
    CorrespondenceSet,
    InnerRound,
    IterationRecord,
    SolverConfig,
    solve_normal_equations,
)
from .robust_loss import FLOOR_FACTOR, Loss, anneal, loss_value, weight

# Above this many scans the stacked system is assembled and factored sparse.
DENSE_LIMIT = 200

MULTIVIEW_DEFAULTS = SolverConfig(k_irls=3, epsilon=1e-7)


@dataclass(frozen=True, eq=False)
class Edge:
    """Matched points between scans ``i`` and ``j``, each in its scan's frame.

    ``corrs.p`` holds the scan-``i`` points and ``corrs.q`` the scan-``j`` ones.
    """

    i: int
    j: int
    corrs: CorrespondenceSet


@dataclass(frozen=True, eq=False)
class ViewGraph:
    n: int
    motions: list[RigidMotion]
    edges: list[Edge] = field(default_factory=list)

    def __post_init__(self):
        object.__setattr__(self, "motions", list(self.motions))
        object.__setattr__(self, "edges", list(self.edges))
        if self.n < 1:
            raise ValueError("a view graph needs at least one scan")
        if len(self.motions) != self.n:
            raise ValueError(f"expected {self.n} motions, got {len(self.motions)}")
        for e in self.edges:
            if not 0 <= e.i < e.j < self.n:
                raise ValueError(f"edge ({e.i}, {e.j}) must satisfy 0 <= i < j < {self.n}")

    def with_motions(self, motions) -> ViewGraph:
        return ViewGraph(self.n, motions, self.edges)

    @property
    def scale(self) -> float:
        pts = [e.corrs.p for e in self.edges] + [e.corrs.q for e in self.edges]
        if not pts:
            return 0.0
        pts = np.vstack(pts)
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def check_connected(n: int, pairs) -> None:
    """Raise DisconnectedGraph unless the undirected edges ``pairs`` span all ``n`` nodes."""
    if n <= 1:
        return
    pairs = list(pairs)
    if not pairs:
        raise DisconnectedGraph(f"{n} scans but no edges")
    rows, cols = zip(*pairs)
    adj = scipy.sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    count, labels = scipy.sparse.csgraph.connected_components(adj, directed=False)
    if count > 1:
        lonely = sorted(int(k) for k in np.flatnonzero(labels != labels[0]))
        raise DisconnectedGraph(f"view graph has {count} components; not reachable from 0: {lonely}")


def fix_gauge(g: ViewGraph) -> ViewGraph:
    """Left-compose every motion with ``motions[0]^-1`` so scan 0 sits at the origin."""
    ref = g.motions[0].inverse()
    motions = [RigidMotion.identity()] + [ref @ m for m in g.motions[1:]]
    return g.with_motions(motions)


@dataclass(frozen=True, eq=False)
class EdgeTerms:
    """Linearised residuals of one edge: ``a_i v_i + a_j v_j - b`` per pair."""

    i: int
    j: int
    a_i: np.ndarray
    a_j: np.ndarray
    b: np.ndarray

    def residuals(self, v_i, v_j) -> np.ndarray:
        return np.linalg.norm(self.a_i @ v_i + self.a_j @ v_j - self.b, axis=1)


def _block(y: np.ndarray) -> np.ndarray:
    a = np.zeros((len(y), 3, 6))
    a[:, :, :3] = -hat3(y)
    a[:, :, 3:] = np.eye(3)
    return a


def build_multiview_terms(g: ViewGraph) -> list[EdgeTerms]:
    check_connected(g.n, [(e.i, e.j) for e in g.edges])
    terms = []
    for e in g.edges:
        y_i = g.motions[e.i].apply(e.corrs.p)
        y_j = g.motions[e.j].apply(e.corrs.q)
        terms.append(EdgeTerms(e.i, e.j, _block(y_i), -_block(y_j), y_j - y_i))
    return terms


def _split(v: np.ndarray, n: int) -> np.ndarray:
    """Per-scan twists (n, 6) from the stacked vector; scan 0 gets zeros."""
    out = np.zeros((n, 6))
    out[1:] = v.reshape(n - 1, 6)
    return out


def edge_residuals(terms: list[EdgeTerms], v: np.ndarray, n: int) -> list[np.ndarray]:
    per_scan = _split(v, n)
    return [t.residuals(per_scan[t.i], per_scan[t.j]) for t in terms]


def assemble_normal_equations(terms: list[EdgeTerms], weights: list[np.ndarray], n: int,
                              *, sparse: bool = False):
    """``A^T W A`` and ``A^T W b`` over the 6(n-1) free unknowns.

    Each edge touches only blocks (i,i), (j,j), (i,j) and (j,i).
    Returns a dense array, or a CSR matrix when ``sparse`` is set.
    """
    dim = 6 * (n - 1)
    g = np.zeros(dim)
    blocks: dict[tuple[int, int], np.ndarray] = {}

    def add(r, c, m):
        if r == 0 or c == 0:
            return
        key = (r, c)
        blocks[key] = blocks[key] + m if key in blocks else m

    for t, w in zip(terms, weights):
        hii = np.einsum("s,sij,sik->jk", w, t.a_i, t.a_i)
        hjj = np.einsum("s,sij,sik->jk", w, t.a_j, t.a_j)
        hij = np.einsum("s,sij,sik->jk", w, t.a_i, t.a_j)
        add(t.i, t.i, hii)
        add(t.j, t.j, hjj)
        add(t.i, t.j, hij)
        add(t.j, t.i, hij.T)
        if t.i:
            g[6 * (t.i - 1):6 * t.i] += np.einsum("s,sij,si->j", w, t.a_i, t.b)
        if t.j:
            g[6 * (t.j - 1):6 * t.j] += np.einsum("s,sij,si->j", w, t.a_j, t.b)

    if not sparse:
        h = np.zeros((dim, dim))
        for (r, c), m in blocks.items():
            h[6 * (r - 1):6 * r, 6 * (c - 1):6 * c] += m
        return h, g
    rows, cols, vals = [], [], []
    ii, jj = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
    for (r, c), m in blocks.items():
        rows.append((6 * (r - 1) + ii).ravel())
        cols.append((6 * (c - 1) + jj).ravel())
        vals.append(m.ravel())
    h = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim))
    return h, g


def _solve_sparse(h, g: np.ndarray) -> np.ndarray:
    diag = h.diagonal()
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise DegenerateGeometry("normal matrix has a zero or non-finite diagonal")
    d = 1.0 / np.sqrt(diag)
    scale = scipy.sparse.diags(d)
    hs = (scale @ h @ scale).tocsc()
    try:
        lu = scipy.sparse.linalg.splu(hs, diag_pivot_thresh=0.0)
    except RuntimeError as exc:
        raise DegenerateGeometry(f"normal matrix is singular: {exc}") from None
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() < PIVOT_RATIO * pivots.max():
        raise DegenerateGeometry("normal matrix is rank deficient")
    return d * lu.solve(d * g)


def solve_stacked(terms, weights, n: int) -> np.ndarray:
    if n <= DENSE_LIMIT:
        h, g = assemble_normal_equations(terms, weights, n)
        return solve_normal_equations(h, g)
    h, g = assemble_normal_equations(terms, weights, n, sparse=True)
    return _solve_sparse(h, g)


def irls_solve_multiview(terms: list[EdgeTerms], n: int, loss: Loss, k_irls: int,
                         floor: float, rounds: list[InnerRound] | None = None) -> np.ndarray:
    """``k_irls`` reweighted solves of the stacked system, starting from zero twists."""
    v = np.zeros(6 * (n - 1))
    for _ in range(k_irls):
        es = edge_residuals(terms, v, n)
        ws = [weight(loss, e, floor) for e in es]
        v_new = solve_stacked(terms, ws, n)
        if rounds is not None:
            es_new = edge_residuals(terms, v_new, n)
            before = sum(float(w @ (e * e)) for w, e in zip(ws, es))
            after = sum(float(w @ (e * e)) for w, e in zip(ws, es_new))
            rounds.append(InnerRound(before, after))
        v = v_new
    return v


def multiview_cost(g: ViewGraph, loss: Loss) -> float:
    total = 0.0
    for e in g.edges:
        d = g.motions[e.i].apply(e.corrs.p) - g.motions[e.j].apply(e.corrs.q)
        total += float(np.sum(loss_value(loss, np.linalg.norm(d, axis=1))))
    return total


@dataclass
class MultiviewResult:
    graph: ViewGraph
    trace: ConvergenceTrace
    converged: bool

    @property
    def motions(self) -> list[RigidMotion]:
        return self.graph.motions


def estimate_multiview(g: ViewGraph, config: SolverConfig = MULTIVIEW_DEFAULTS) -> MultiviewResult:
    """Refine the graph's motions; stops once ``|v| <= n * epsilon`` or at ``max_outer``.

    The input motions are the initial guess.  They are gauge-fixed first, so
    the returned ``motions[0]`` is the identity.
    """
    check_connected(g.n, [(e.i, e.j) for e in g.edges])
    g = fix_gauge(g)
    loss = config.loss
    if config.anneal is not None:
        loss = loss.with_mu(config.anneal.mu0)
    if config.floor is not None:
        floor = config.floor
    else:
        floor = FLOOR_FACTOR * g.scale if g.scale > 0 else FLOOR_FACTOR
    trace = ConvergenceTrace(initial_cost=multiview_cost(g, loss))
    if g.n == 1:
        return MultiviewResult(g, trace, True)

    motions = list(g.motions)
    tol = g.n * config.epsilon
    converged = False
    start = time.perf_counter()
    for k in range(1, config.max_outer + 1):
        if config.anneal is not None:
            loss = loss.with_mu(anneal(config.anneal, loss.mu, k))
        terms = build_multiview_terms(g)
        rounds: list[InnerRound] = []
        v = irls_solve_multiview(terms, g.n, loss, config.k_irls, floor, rounds)
        per_scan = _split(v, g.n)
        for i in range(1, g.n):
            motions[i] = exp_se3(per_scan[i]) @ motions[i]
            if k % RENORM_PERIOD == 0:
                motions[i] = motions[i].renormalized()
        g = g.with_motions(motions)
        norm = float(np.linalg.norm(v))
        trace.append(IterationRecord(
            cost=multiview_cost(g, loss),
            update_norm=norm,
            elapsed=time.perf_counter() - start,
            inner=rounds,
            mu=loss.mu,
        ))
        if norm <= tol:
            converged = True
            break
    return MultiviewResult(g, trace, converged)
