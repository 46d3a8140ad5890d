"""Synthetic scenes, error metrics and benchmark runners.

Built-in models are normalised to unit surface diameter and placed at
``MODEL_CENTER``, in front of a notional sensor at the origin, the way
depth scans are usually expressed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cloud import PointCloud
from .liegroup import RigidMotion, random_rotation, rotation_angle_error
from .multiview import Edge, ViewGraph
from .pairwise import (
    CorrespondenceSet,
    ConvergenceTrace,
    Parametrization,
    RegistrationResult,
    SolverConfig,
    estimate_pairwise,
)
from .robust_loss import AnnealSchedule, Loss, LossKind

MODEL_CENTER = np.array([0.0, 0.0, 1.5])
EXACT_DIAMETER_LIMIT = 5000
MODELS = ("sphere", "cube", "blobs")

# (center, semi-axes) of the ellipsoids making up the "blobs" model.
_BLOBS = (
    ((0.00, 0.00, 0.00), (0.50, 0.38, 0.42)),
    ((0.42, 0.30, 0.18), (0.22, 0.20, 0.26)),
    ((-0.30, 0.45, 0.05), (0.16, 0.30, 0.14)),
    ((-0.15, -0.35, 0.35), (0.28, 0.17, 0.20)),
    ((0.30, -0.25, -0.35), (0.12, 0.12, 0.30)),
    ((-0.45, -0.05, -0.30), (0.20, 0.24, 0.12)),
)

CSV_HEADER = ("method", "loss", "k_irls", "sigma", "outliers", "seed",
              "rae_deg", "tne", "rmse", "k_outer", "ms")


def surface_diameter(cloud) -> float:
    """Largest pairwise distance.

    Exact (blockwise brute force) up to ``EXACT_DIAMETER_LIMIT`` points; above
    that the bounding-box diagonal, which is an upper bound.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) < 2:
        raise ValueError("diameter needs at least two points")
    if len(pts) > EXACT_DIAMETER_LIMIT:
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    best = 0.0
    sq = np.einsum("ij,ij->i", pts, pts)
    for start in range(0, len(pts), 512):
        blk = pts[start:start + 512]
        d2 = sq[start:start + 512, None] + sq[None, :] - 2.0 * blk @ pts.T
        best = max(best, float(d2.max()))
    return math.sqrt(max(best, 0.0))


def _sample_ellipsoid(rng, center, axes, n):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + d * np.asarray(axes)


def _inside_ellipsoid(pts, center, axes):
    return np.sum(((pts - np.asarray(center)) / np.asarray(axes)) ** 2, axis=1) < 1.0 - 1e-9


def make_model(name: str = "blobs", n_points: int = 1000, seed: int = 0,
               center=MODEL_CENTER) -> PointCloud:
    """Sample one of the built-in surfaces with unit diameter."""
    rng = np.random.default_rng(seed)
    if name == "sphere":
        pts = _sample_ellipsoid(rng, (0, 0, 0), (1, 1, 1), n_points)
    elif name == "cube":
        face = rng.integers(0, 6, size=n_points)
        pts = rng.uniform(-1.0, 1.0, size=(n_points, 3))
        axis = face // 2
        pts[np.arange(n_points), axis] = np.where(face % 2 == 0, -1.0, 1.0)
    elif name == "blobs":
        areas = np.array([a[0] * a[1] + a[1] * a[2] + a[0] * a[2] for _, a in _BLOBS])
        chunks = []
        need = n_points
        while need > 0:
            counts = rng.multinomial(2 * need, areas / areas.sum())
            for k, ((c, a), cnt) in enumerate(zip(_BLOBS, counts)):
                cand = _sample_ellipsoid(rng, c, a, cnt)
                keep = np.ones(len(cand), dtype=bool)
                for j, (c2, a2) in enumerate(_BLOBS):
                    if j != k:
                        keep &= ~_inside_ellipsoid(cand, c2, a2)
                chunks.append(cand[keep])
            pool = np.vstack(chunks)
            need = n_points - len(pool)
        pts = pool[rng.permutation(len(pool))[:n_points]]
    else:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")
    pts = pts - 0.5 * (pts.max(axis=0) + pts.min(axis=0))
    pts = pts / surface_diameter(pts)
    return PointCloud(pts + np.asarray(center, dtype=float))


@dataclass(frozen=True, eq=False)
class SyntheticPair:
    src: PointCloud
    dst: PointCloud
    corrs: CorrespondenceSet
    gt: RigidMotion
    diameter: float
    sigma: float
    outlier_fraction: float
    seed: int
    inliers: np.ndarray


def generate_pair(model: PointCloud, angle_max: float, sigma_rel: float,
                  outlier_fraction: float, seed: int, *, angle_min: float = 0.0,
                  shift_max: float = 0.25) -> SyntheticPair:
    """Rigidly move ``model``, add noise and corrupt a share of the matches.

    The motion rotates about the model centroid by an angle drawn uniformly
    from ``[angle_min, angle_max]`` (radians) and shifts it by up to
    ``shift_max`` diameters.  Correspondence ``s`` pairs ``dst[s]`` with
    ``src[s]``; outliers have their ``dst`` end replaced by a uniform sample
    in the bounding box of ``dst``.
    """
    if not 0.0 <= outlier_fraction <= 1.0:
        raise ValueError("outlier_fraction must lie in [0, 1]")
    if sigma_rel < 0:
        raise ValueError("sigma_rel must be nonnegative")
    rng = np.random.default_rng(seed)
    src = model.points
    diameter = surface_diameter(model)
    rot = random_rotation(rng, angle_max, angle_min)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    shift = direction * rng.uniform(0.0, shift_max) * diameter
    c = src.mean(axis=0)
    gt = RigidMotion(rot, c - rot @ c + shift)

    sigma = sigma_rel * diameter
    dst = gt.apply(src) + rng.normal(scale=sigma, size=src.shape) if sigma > 0 else gt.apply(src)
    p = dst.copy()
    n_out = int(round(outlier_fraction * len(src)))
    inliers = np.ones(len(src), dtype=bool)
    if n_out:
        idx = rng.choice(len(src), size=n_out, replace=False)
        p[idx] = rng.uniform(dst.min(axis=0), dst.max(axis=0), size=(n_out, 3))
        inliers[idx] = False
    inliers.setflags(write=False)
    return SyntheticPair(PointCloud(src), PointCloud(dst), CorrespondenceSet(p, src), gt,
                         diameter, sigma, outlier_fraction, seed, inliers)


@dataclass
class BenchRow:
    method: str
    loss: str
    k_irls: int
    sigma: float
    outliers: float
    seed: int
    rae_deg: float
    tne: float
    rmse: float
    k_outer: int
    ms: float


def ground_truth_rmse(motion: RigidMotion, pair: SyntheticPair) -> float:
    """RMS of |M_gt q - M q| over the uncorrupted pairs, in diameter units."""
    q = pair.corrs.q[pair.inliers]
    if len(q) == 0:
        return float("nan")
    d = np.linalg.norm(pair.gt.apply(q) - motion.apply(q), axis=1)
    return float(np.sqrt(np.mean(d * d)) / pair.diameter)


def evaluate(run: RegistrationResult, pair: SyntheticPair, *, method: str = "intrinsic",
             loss: str = "l12", k_irls: int = 2) -> BenchRow:
    m = run.motion
    trace = run.trace
    ms = 1000.0 * trace.iterations[-1].elapsed if len(trace) else 0.0
    return BenchRow(
        method=method,
        loss=loss,
        k_irls=k_irls,
        sigma=pair.sigma / pair.diameter,
        outliers=pair.outlier_fraction,
        seed=pair.seed,
        rae_deg=math.degrees(rotation_angle_error(m, pair.gt)),
        tne=float(np.linalg.norm(m.translation - pair.gt.translation)),
        rmse=ground_truth_rmse(m, pair),
        k_outer=trace.k_outer,
        ms=ms,
    )


def solver_config_for(loss_name: str, diameter: float, *, k_irls: int = 2,
                      epsilon: float = 1e-5, max_outer: int = 100,
                      extrinsic: bool = False, mu0: float | None = None,
                      divisor: float | None = None, period: int | None = None) -> SolverConfig:
    loss = Loss.parse(loss_name, 1.0)
    schedule = None
    if loss.kind is LossKind.GEMAN_MCCLURE:
        default = AnnealSchedule.for_diameter(diameter)
        start = default.mu0 if mu0 is None else mu0
        schedule = AnnealSchedule(start, divisor or default.divisor, period or default.period,
                                  min(default.mu_floor, start))
        loss = loss.with_mu(start)
    par = Parametrization.EXTRINSIC if extrinsic else Parametrization.INTRINSIC
    return SolverConfig(loss, schedule, k_irls, epsilon, max_outer, par)


def run_trial(model: PointCloud, seed: int, *, sigma_rel: float, outlier_fraction: float,
              angle_max: float, config: SolverConfig, loss_name: str) -> BenchRow:
    pair = generate_pair(model, angle_max, sigma_rel, outlier_fraction, seed)
    result = estimate_pairwise(pair.corrs, config)
    return evaluate(result, pair, method=config.parametrization.value,
                    loss=loss_name, k_irls=config.k_irls)


def run_benchmark(model_name: str = "blobs", *, sigma_rel: float = 0.0025,
                  outlier_fraction: float = 0.4, trials: int = 100, seed: int = 0,
                  loss_name: str = "l12", k_irls: int = 2, epsilon: float = 1e-5,
                  max_outer: int = 100, extrinsic: bool = False,
                  angle_max: float = math.radians(60.0), n_points: int = 1000,
                  threads: int = 1, mu0=None, divisor=None, period=None) -> list[BenchRow]:
    """Independent seeded trials; row order is trial order regardless of ``threads``."""
    model = make_model(model_name, n_points, seed)
    config = solver_config_for(loss_name, surface_diameter(model), k_irls=k_irls,
                               epsilon=epsilon, max_outer=max_outer, extrinsic=extrinsic,
                               mu0=mu0, divisor=divisor, period=period)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(trials)]

    def one(s):
        return run_trial(model, s, sigma_rel=sigma_rel, outlier_fraction=outlier_fraction,
                         angle_max=angle_max, config=config, loss_name=loss_name)

    if threads <= 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, seeds))


def summarize(rows: list[BenchRow]) -> dict:
    """Median RAE/TNE, mean/max RMSE and mean timing over a set of runs."""
    if not rows:
        return {"trials": 0}
    return {
        "trials": len(rows),
        "median_rae_deg": statistics.median(r.rae_deg for r in rows),
        "median_tne": statistics.median(r.tne for r in rows),
        "mean_rmse": statistics.fmean(r.rmse for r in rows),
        "max_rmse": max(r.rmse for r in rows),
        "mean_k_outer": statistics.fmean(r.k_outer for r in rows),
        "mean_ms": statistics.fmean(r.ms for r in rows),
    }


def rows_to_csv(rows: list[BenchRow], *, timing: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        d = asdict(r)
        if not timing:
            d["ms"] = float("nan")
        writer.writerow([_fmt(d[k]) for k in CSV_HEADER])
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# Convergence comparison: line-process emulation vs. intrinsic IRLS
# ---------------------------------------------------------------------------

COMPARE_METHODS = (
    ("lp_extrinsic_k1", Parametrization.EXTRINSIC, 1),
    ("intrinsic_k1", Parametrization.INTRINSIC, 1),
    ("intrinsic_k2", Parametrization.INTRINSIC, 2),
    ("intrinsic_k3", Parametrization.INTRINSIC, 3),
)


@dataclass
class ConvergenceTable:
    eps_list: list[float]
    max_outer: int
    k_outer: dict[str, list[int]] = field(default_factory=dict)
    traces: dict[str, ConvergenceTrace] = field(default_factory=dict)
    motions: dict[str, RigidMotion] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epsilon", *self.k_outer])
        for row, eps in enumerate(self.eps_list):
            writer.writerow([repr(float(eps)), *(v[row] for v in self.k_outer.values())])
        return buf.getvalue()

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "iteration", "cost", "update_norm"])
        for name, trace in self.traces.items():
            writer.writerow([name, 0, repr(trace.initial_cost), ""])
            for k, rec in enumerate(trace.iterations, start=1):
                writer.writerow([name, k, repr(rec.cost), repr(rec.update_norm)])
        return buf.getvalue()


def convergence_compare(pair: SyntheticPair, eps_list, *, max_outer: int = 100,
                        loss: Loss | None = None) -> ConvergenceTable:
    """K_outer needed by each method to reach each threshold in ``eps_list``.

    Every method runs once down to the smallest threshold; the count for a
    larger threshold is the first iteration whose update norm is within it,
    which is where a run stopped at that threshold would end.  Runs that
    never get there are recorded as ``max_outer``.
    """
    eps_list = [float(e) for e in eps_list]
    loss = loss or Loss.l_half()
    table = ConvergenceTable(eps_list, max_outer)
    for name, par, k in COMPARE_METHODS:
        cfg = SolverConfig(loss, None, k, min(eps_list), max_outer, par)
        result = estimate_pairwise(pair.corrs, cfg)
        ks = []
        for eps in eps_list:
            hit = result.trace.k_outer_at(eps)
            ks.append(max_outer if hit is None else hit)
        table.k_outer[name] = ks
        table.traces[name] = result.trace
        table.motions[name] = result.motion
    return table


# ---------------------------------------------------------------------------
# Multiview scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MultiviewProblem:
    """Scans of one model seen from ``n`` poses, with matched points per edge.

    ``gt[i]`` maps scan ``i`` coordinates to the model frame (``gt[0]`` is
    the identity). ``clean[k]`` holds the noise-free local points behind
    ``graph.edges[k]`` and ``inliers[k]`` marks its uncorrupted pairs.
    """

    graph: ViewGraph
    gt: list[RigidMotion]
    clean: list[tuple[np.ndarray, np.ndarray]]
    inliers: list[np.ndarray]
    diameter: float
    sigma: float


def all_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def generate_views(model: PointCloud, n_views: int, *, sigma_rel: float = 0.0,
                   outlier_fraction: float = 0.0, seed: int = 0,
                   corrs_per_edge: int = 200, edges=None,
                   angle_max: float = math.radians(30.0),
                   shift_max: float = 0.25) -> MultiviewProblem:
    """A view graph with known absolute motions.

    Scan ``i`` sees model point ``x`` at ``gt[i]^-1 x`` plus Gaussian noise.
    Each edge matches ``corrs_per_edge`` random model points; outliers have
    their scan-``j`` end replaced by a uniform sample in that scan's box.
    The graph's initial motions are all identity.
    """
    rng = np.random.default_rng(seed)
    x = model.points
    diameter = surface_diameter(model)
    sigma = sigma_rel * diameter
    c = x.mean(axis=0)
    gt = [RigidMotion.identity()]
    for _ in range(1, n_views):
        rot = random_rotation(rng, angle_max)
        d = rng.normal(size=3)
        d *= rng.uniform(0.0, shift_max) * diameter / np.linalg.norm(d)
        gt.append(RigidMotion(rot, c - rot @ c + d))
    local = [m.inverse().apply(x) for m in gt]
    lo = [pts.min(axis=0) for pts in local]
    hi = [pts.max(axis=0) for pts in local]

    edges = all_pairs(n_views) if edges is None else [tuple(e) for e in edges]
    graph_edges, clean, masks = [], [], []
    for i, j in edges:
        idx = rng.choice(len(x), size=min(corrs_per_edge, len(x)), replace=False)
        pi, pj = local[i][idx], local[j][idx]
        ni = pi + rng.normal(scale=sigma, size=pi.shape) if sigma > 0 else pi.copy()
        nj = pj + rng.normal(scale=sigma, size=pj.shape) if sigma > 0 else pj.copy()
        mask = np.ones(len(idx), dtype=bool)
        n_out = int(round(outlier_fraction * len(idx)))
        if n_out:
            bad = rng.choice(len(idx), size=n_out, replace=False)
            nj[bad] = rng.uniform(lo[j], hi[j], size=(n_out, 3))
            mask[bad] = False
        graph_edges.append(Edge(i, j, CorrespondenceSet(ni, nj)))
        clean.append((pi, pj))
        masks.append(mask)
    graph = ViewGraph(n_views, [RigidMotion.identity()] * n_views, graph_edges)
    return MultiviewProblem(graph, gt, clean, masks, diameter, sigma)


def multiview_rmse(motions, problem: MultiviewProblem) -> float:
    """RMS of |M_i x_i - M_j x_j| over all uncorrupted noise-free pairs, in diameters."""
    total, count = 0.0, 0
    for edge, (pi, pj), mask in zip(problem.graph.edges, problem.clean, problem.inliers):
        d = motions[edge.i].apply(pi[mask]) - motions[edge.j].apply(pj[mask])
        total += float(np.sum(d * d))
        count += int(mask.sum())
    return math.sqrt(total / count) / problem.diameter


def summary_json(rows: list[BenchRow]) -> str:
    return json.dumps(summarize(rows), indent=2, sort_keys=True)


@dataclass(frozen=True, eq=False)
class CropScans:
    """Partial scans of one model cut by azimuth windows around its centroid.

    ``gt[i]`` maps scan ``i`` coordinates to the model frame and
    ``model_index[i]`` says which model points scan ``i`` holds.
    """

    scans: list[PointCloud]
    gt: list[RigidMotion]
    model: PointCloud
    model_index: list[np.ndarray]
    diameter: float
    sigma: float

    def shared(self, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices into scans ``i`` and ``j`` of the model points both contain."""
        _, a, b = np.intersect1d(self.model_index[i], self.model_index[j],
                                 assume_unique=True, return_indices=True)
        return a, b


def generate_crops(model: PointCloud, n_scans: int = 4, *, overlap: float = 0.7,
                   sigma_rel: float = 0.0, seed: int = 0,
                   window: float = math.radians(180.0),
                   angle_max: float = math.radians(5.0),
                   shift_max: float = 0.03) -> CropScans:
    """Scans covering azimuth windows of width ``window``.

    Consecutive windows share ``overlap`` of their width.  Every scan is
    moved by its own small random motion and gets independent noise.
    """
    if not 0.0 < overlap < 1.0:
        raise ValueError("overlap must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    x = model.points
    diameter = surface_diameter(model)
    sigma = sigma_rel * diameter
    c = x.mean(axis=0)
    azimuth = np.arctan2(x[:, 1] - c[1], x[:, 0] - c[0])
    step = (1.0 - overlap) * window
    scans, gt, index = [], [], []
    for i in range(n_scans):
        lo = i * step - 0.5 * window
        offset = np.mod(azimuth - lo, 2.0 * math.pi)
        idx = np.flatnonzero(offset <= window)
        if i == 0:
            m = RigidMotion.identity()
        else:
            rot = random_rotation(rng, angle_max)
            d = rng.normal(size=3)
            d *= rng.uniform(0.0, shift_max) * diameter / np.linalg.norm(d)
            m = RigidMotion(rot, c - rot @ c + d)
        local = m.inverse().apply(x[idx])
        if sigma > 0:
            local = local + rng.normal(scale=sigma, size=local.shape)
        scans.append(PointCloud(local))
        gt.append(m)
        index.append(idx)
    return CropScans(scans, gt, model, index, diameter, sigma)


def overlap_rmse(motions, crops: CropScans, edges=None) -> float:
    """RMS of ``|M_i x - M_j x|`` over noise-free model points shared by each edge."""
    n = len(crops.scans)
    edges = all_pairs(n) if edges is None else edges
    total, count = 0.0, 0
    for i, j in edges:
        _, a, b = np.intersect1d(crops.model_index[i], crops.model_index[j],
                                 assume_unique=True, return_indices=True)
        x = crops.model.points[crops.model_index[i][a]]
        d = motions[i].apply(crops.gt[i].inverse().apply(x)) \
            - motions[j].apply(crops.gt[j].inverse().apply(x))
        total += float(np.sum(d * d))
        count += len(a)
    return math.sqrt(total / count) if count else 0.0
