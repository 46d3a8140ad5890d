"""Nearest-neighbour correspondences, robust ICP and motion averaging.

This is the route for scans without reliable feature matches: register
every view-graph edge with a robust ICP, average the relative motions into
absolute ones, and repeat a few times.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import DisconnectedGraph, EmptyAfterPrune
from .liegroup import RigidMotion, exp_se3, log_se3
from .multiview import ViewGraph, check_connected
from .pairwise import (
    ConvergenceTrace,
    CorrespondenceSet,
    InnerRound,
    IterationRecord,
    RegistrationResult,
    SolverConfig,
    estimate_pairwise,
    solve_normal_equations,
)
from .robust_loss import FLOOR_FACTOR, loss_value, weight

log = logging.getLogger(__name__)

# Averaging works on twist residuals, which mix radians and lengths.
AVERAGING_DEFAULTS = SolverConfig(k_irls=2, epsilon=1e-7, floor=FLOOR_FACTOR)


class SpatialIndex:
    """Exact nearest-neighbour queries over a fixed cloud (k-d tree)."""

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        if len(pts) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def query(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest indexed point to each query."""
        d, idx = self._tree.query(np.asarray(points, dtype=float), k=1)
        return d, idx


# Few solver iterations per round: solving each round's nearest-neighbour
# pairs to convergence lets L1/2 lock onto wrong matches.
ICP_SOLVER_DEFAULTS = SolverConfig(max_outer=3)


@dataclass(frozen=True)
class IcpConfig:
    solver: SolverConfig = ICP_SOLVER_DEFAULTS
    max_icp_rounds: int = 50
    prune_multiplier: float = 2.5
    outer_pipeline_rounds: int = 3

    def __post_init__(self):
        if self.max_icp_rounds < 1 or self.outer_pipeline_rounds < 1:
            raise ValueError("round counts must be positive")
        if not self.prune_multiplier > 0:
            raise ValueError("prune_multiplier must be positive")


def nn_correspondences(src: PointCloud, dst: PointCloud, m: RigidMotion,
                       prune_multiplier: float = 2.5,
                       index: SpatialIndex | None = None) -> CorrespondenceSet:
    """Pair each ``m``-moved source point with its nearest target point.

    Pairs farther apart than ``prune_multiplier`` times the median distance
    are dropped.  The result has ``p`` from ``dst`` and ``q`` from ``src``.
    """
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("both clouds must be nonempty")
    index = index or SpatialIndex(dst)
    d, idx = index.query(m.apply(src.points))
    keep = d <= prune_multiplier * np.median(d)
    if keep.sum() < 3:
        raise EmptyAfterPrune(f"only {int(keep.sum())} pairs within {prune_multiplier} x median")
    return CorrespondenceSet(index.points[idx[keep]], src.points[keep])


def robust_icp_pair(src: PointCloud, dst: PointCloud, m0: RigidMotion | None = None,
                    cfg: IcpConfig = IcpConfig(),
                    index: SpatialIndex | None = None) -> RegistrationResult:
    """ICP whose motion step is the robust IRLS estimator, warm-started each round.

    Each trace entry is one ICP round: ``rmse`` is the RMS distance of that
    round's pruned pairs before the motion step and ``update_norm`` the size
    of the motion change ``|log(M_new M_old^-1)|``.
    """
    index = index or SpatialIndex(dst)
    m = RigidMotion.identity() if m0 is None else m0
    trace = ConvergenceTrace()
    converged = False
    start = time.perf_counter()
    for _ in range(cfg.max_icp_rounds):
        corrs = nn_correspondences(src, dst, m, cfg.prune_multiplier, index)
        r = corrs.residuals(m)
        if np.isnan(trace.initial_cost):
            trace.initial_cost = float(np.sqrt(np.mean(r * r)))
        step = estimate_pairwise(corrs, cfg.solver, init=m)
        change = float(np.linalg.norm(log_se3(step.motion @ m.inverse())))
        m = step.motion
        trace.append(IterationRecord(
            cost=step.trace.costs[-1],
            update_norm=change,
            elapsed=time.perf_counter() - start,
            rmse=float(np.sqrt(np.mean(r * r))),
        ))
        if change <= cfg.solver.epsilon:
            converged = True
            break
    return RegistrationResult(m, trace, converged)


def _infer_n(pairwise) -> int:
    return 1 + max(max(i, j) for i, j, _ in pairwise) if pairwise else 1


def spanning_tree_init(pairwise, n: int | None = None, counts=None) -> list[RigidMotion]:
    """Absolute motions chained from scan 0 along a maximum-count spanning tree.

    ``pairwise`` holds ``(i, j, M_ij)`` with ``M_ij`` mapping scan-j
    coordinates into scan i, i.e. ``M_ij = M_i^-1 M_j``.  ``counts`` (one per
    edge, e.g. correspondence counts) rank the edges; all-equal by default.
    """
    pairwise = list(pairwise)
    n = _infer_n(pairwise) if n is None else n
    check_connected(n, [(i, j) for i, j, _ in pairwise])
    if n == 1:
        return [RigidMotion.identity()]
    counts = np.ones(len(pairwise)) if counts is None else np.asarray(counts, dtype=float)

    best: dict[tuple[int, int], int] = {}
    for k, (i, j, _) in enumerate(pairwise):
        key = (min(i, j), max(i, j))
        if key not in best or counts[k] > counts[best[key]]:
            best[key] = k
    keys = list(best)
    cost = np.array([counts.max() + 1.0 - counts[best[key]] for key in keys])
    rows, cols = zip(*keys)
    graph = scipy.sparse.coo_matrix((cost, (rows, cols)), shape=(n, n)).tocsr()
    tree = scipy.sparse.csgraph.minimum_spanning_tree(graph)
    order, pred = scipy.sparse.csgraph.breadth_first_order(tree, 0, directed=False,
                                                           return_predecessors=True)
    absolute: list[RigidMotion | None] = [None] * n
    absolute[0] = RigidMotion.identity()
    for node in order[1:]:
        parent = int(pred[node])
        i, j, m_ij = pairwise[best[(min(parent, node), max(parent, node))]]
        if i == parent:
            absolute[node] = absolute[parent] @ m_ij
        else:
            absolute[node] = absolute[parent] @ m_ij.inverse()
    return absolute


def relative_residuals(pairwise, motions) -> np.ndarray:
    """``log(M_i M_ij M_j^-1)`` per edge, the global-frame inconsistency."""
    return np.array([log_se3(motions[i] @ m_ij @ motions[j].inverse())
                     for i, j, m_ij in pairwise])


def _average(pairwise, motions, n, loss, config, floor, trace, start):
    src = np.array([i for i, _, _ in pairwise])
    dst = np.array([j for _, j, _ in pairwise])
    # incidence: (D v)_e = v_j - v_i over the free scans 1..n-1
    inc = np.zeros((len(pairwise), n))
    inc[np.arange(len(pairwise)), dst] += 1.0
    inc[np.arange(len(pairwise)), src] -= 1.0
    inc = inc[:, 1:]
    for _ in range(config.max_outer):
        r = relative_residuals(pairwise, motions)
        v = np.zeros((n - 1, 6))
        rounds = []
        for _ in range(config.k_irls if loss is not None else 1):
            e = np.linalg.norm(inc @ v - r, axis=1)
            w = np.ones(len(e)) if loss is None else weight(loss, e, floor)
            h = inc.T @ (w[:, None] * inc)
            v_new = solve_normal_equations(h, inc.T @ (w[:, None] * r))
            e_new = np.linalg.norm(inc @ v_new - r, axis=1)
            rounds.append(InnerRound(float(w @ (e * e)), float(w @ (e_new * e_new))))
            v = v_new
        for k in range(1, n):
            motions[k] = exp_se3(v[k - 1]) @ motions[k]
        norm = float(np.linalg.norm(v))
        if trace is not None:
            e = np.linalg.norm(r, axis=1)
            cost = float(e @ e) if loss is None else float(np.sum(loss_value(loss, e)))
            trace.append(IterationRecord(cost=cost, update_norm=norm,
                                         elapsed=time.perf_counter() - start, inner=rounds))
        if norm <= n * config.epsilon:
            return True
    return False


def motion_average(pairwise, init, config: SolverConfig = AVERAGING_DEFAULTS,
                   trace: ConvergenceTrace | None = None) -> list[RigidMotion]:
    """Robust absolute motions from relative ones by IRLS in the Lie algebra.

    With left updates ``M_i <- exp(v_i) M_i`` the edge inconsistency
    ``r_ij = log(M_i M_ij M_j^-1)`` changes to first order by ``v_i - v_j``,
    so each outer iteration solves ``min sum_ij rho(|v_j - v_i - r_ij|)``
    with ``v_0 = 0`` for ``config.k_irls`` reweighted rounds, then applies
    the twists.  Stops once the stacked update norm is at most ``n * epsilon``.

    A plain least-squares average runs first.  Starting the robust loss at
    a spanning-tree solution would not work: the tree edges fit exactly, so
    their capped weights hold the tree in place whatever the other edges say.
    """
    pairwise = list(pairwise)
    init = list(init)
    n = len(init)
    check_connected(n, [(i, j) for i, j, _ in pairwise])
    ref = init[0].inverse()
    motions = [RigidMotion.identity()] + [ref @ m for m in init[1:]]
    if n == 1:
        return motions
    floor = config.floor if config.floor is not None else FLOOR_FACTOR
    start = time.perf_counter()
    _average(pairwise, motions, n, None, config, floor, trace, start)
    _average(pairwise, motions, n, config.loss, config, floor, trace, start)
    return motions


def initialize_from_pairwise(graph: ViewGraph, config: SolverConfig = SolverConfig(),
                             averaging: SolverConfig = AVERAGING_DEFAULTS) -> list[RigidMotion]:
    """Two-stage estimate: robust pairwise motion per edge, then motion averaging."""
    check_connected(graph.n, [(e.i, e.j) for e in graph.edges])
    pairwise, counts = [], []
    for e in graph.edges:
        result = estimate_pairwise(e.corrs, config)
        pairwise.append((e.i, e.j, result.motion))
        counts.append(len(e.corrs))
    start = spanning_tree_init(pairwise, graph.n, counts)
    return motion_average(pairwise, start, averaging)


def multiview_icp(scans: list[PointCloud], edges, cfg: IcpConfig = IcpConfig(),
                  init: list[RigidMotion] | None = None) -> list[RigidMotion]:
    """Alternate robust ICP on every edge with motion averaging.

    Returns scan-to-global motions with scan 0 as the global frame.
    ``init`` defaults to all identities, i.e. roughly pre-aligned scans.
    """
    n = len(scans)
    if n == 0:
        raise ValueError("no scans")
    if n == 1:
        return [RigidMotion.identity()]
    edges = [(int(i), int(j)) for i, j in edges]
    check_connected(n, edges)
    indices = [SpatialIndex(s) for s in scans]
    absolute = [RigidMotion.identity()] * n if init is None else list(init)
    for rnd in range(cfg.outer_pipeline_rounds):
        pairwise, counts = [], []
        for i, j in edges:
            m0 = absolute[i].inverse() @ absolute[j]
            result = robust_icp_pair(scans[j], scans[i], m0, cfg, indices[i])
            if not result.converged:
                log.warning("ICP on edge (%d, %d) hit the round limit", i, j)
            pairwise.append((i, j, result.motion))
            counts.append(min(len(scans[i]), len(scans[j])))
        if rnd == 0 and init is None:
            absolute = spanning_tree_init(pairwise, n, counts)
        absolute = motion_average(pairwise, absolute)
    ref = absolute[0].inverse()
    return [RigidMotion.identity()] + [ref @ m for m in absolute[1:]]


__all__ = [
    "AVERAGING_DEFAULTS",
    "DisconnectedGraph",
    "EmptyAfterPrune",
    "IcpConfig",
    "SpatialIndex",
    "initialize_from_pairwise",
    "motion_average",
    "multiview_icp",
    "nn_correspondences",
    "robust_icp_pair",
    "spanning_tree_init",
]
