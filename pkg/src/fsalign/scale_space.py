"""Scale-space filtering for 2-D point clustering.

Each point is treated as a unit light source; blurring the scatter image with
a Gaussian of scale sigma gives a density surface whose modes are cluster
centers. Modes are tracked with mean-shift iterations while sigma grows
geometrically (sigma_{j+1} = k * sigma_j); centers merge as the surface
smooths out, so the cluster count K falls monotonically. The cluster count
whose scale interval survives the longest (largest "lifetime") is selected,
and points farther than the selected scale from every center are flagged as
outliers.
"""

import math
from dataclasses import dataclass, field

import numpy as np

OUTLIER = -1

# lifetime constant: pi(sigma) = log(sigma/epsilon) / log(1.05)
_LIFETIME_C = 1.0 / math.log(1.05)

_WEIGHT_FLOOR = np.finfo(np.float64).tiny


@dataclass
class ScaleSweepConfig:
    """Knobs of the scale sweep.

    `sigma0 = None` picks half the 5th percentile of the nonzero pairwise
    point distances (clamped to >= epsilon), which starts the sweep below the
    intra-cluster scale so every K is visited. `convergence_tol` and
    `merge_tol` are fractions of the current sigma; absolute tolerances do
    not survive a geometric sweep.
    """

    sigma0: float | None = None
    k: float = 1.05
    epsilon: float = 0.01
    convergence_tol: float = 1e-6
    merge_tol: float = 1e-2
    max_inner_iters: int = 500
    max_scales: int = 400
    allow_single_cluster: bool = False

    def validate(self):
        if self.sigma0 is not None and not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if not self.k > 1:
            raise ValueError("scale multiplier k must exceed 1")
        for name in ("epsilon", "convergence_tol", "merge_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_inner_iters < 1 or self.max_scales < 1:
            raise ValueError("iteration limits must be >= 1")


@dataclass
class ClusterSnapshot:
    """Converged, deduplicated centers at one blur scale."""

    sigma: float
    centers: np.ndarray  # (K, 2)

    @property
    def K(self):
        return len(self.centers)


@dataclass
class LifetimeEntry:
    sigma_inf: float
    sigma_sup: float
    lifetime: float


@dataclass
class LifetimeTable:
    entries: dict = field(default_factory=dict)  # K -> LifetimeEntry


@dataclass
class SelectedModel:
    centers: np.ndarray  # (K, 2)
    sigma_star: float

    @property
    def K(self):
        return len(self.centers)


@dataclass
class Assignment:
    """Per-point labels: cluster index in [0, K) or OUTLIER (-1)."""

    labels: np.ndarray

    @property
    def outlier_mask(self):
        return self.labels == OUTLIER


@dataclass
class ClusteringResult:
    model: SelectedModel
    assignment: Assignment
    table: LifetimeTable
    snapshots: list
    truncated: bool


def as_points(points):
    """Coerce to a finite (N, 2) float64 array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise ValueError("points must have shape (N, 2) with N >= 1")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def gaussian_weight(x, c, sigma):
    """exp(-||x - c||^2 / (2 sigma^2)), the blur kernel response at x."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(x, dtype=np.float64) - np.asarray(c, dtype=np.float64)
    return float(np.exp(-np.dot(d, d) / (2.0 * sigma * sigma)))


def density(points, x, sigma):
    """Blurred scatter-image value at x: sum of kernel responses."""
    points = as_points(points)
    d = points - np.asarray(x, dtype=np.float64)
    return float(np.exp(-(d * d).sum(axis=1) / (2.0 * sigma * sigma)).sum())


def _shift_all(points, centers, sigma):
    """One mean-shift update of every center; rows with underflowed kernel
    mass are kept in place and reported as isolated."""
    diff = centers[:, None, :] - points[None, :, :]
    w = np.exp(-(diff * diff).sum(axis=2) / (2.0 * sigma * sigma))
    total = w.sum(axis=1)
    isolated = total < _WEIGHT_FLOOR
    safe = np.where(isolated, 1.0, total)
    new = (w @ points) / safe[:, None]
    new[isolated] = centers[isolated]
    return new, isolated


def mean_shift_step(points, center, sigma):
    """Kernel-weighted mean of the points around `center`.

    Fixed-point map of the blurred-density stationarity condition: iterating
    it climbs to a density mode. Returns (new_center, isolated); `isolated`
    is True when every kernel weight underflowed (sigma far too small for
    this center), in which case the center is returned unchanged.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    points = as_points(points)
    center = np.asarray(center, dtype=np.float64)
    new, isolated = _shift_all(points, center[None, :], sigma)
    return new[0], bool(isolated[0])


def _merge_centers(centers, tol):
    """Merge centers closer than `tol` (transitively); each surviving center
    is the mean of its component, ordered by smallest member index."""
    n = len(centers)
    if n == 1:
        return centers.copy()
    diff = centers[:, None, :] - centers[None, :, :]
    close = (diff * diff).sum(axis=2) <= tol * tol
    comp = np.full(n, -1, dtype=np.int64)
    n_comp = 0
    for i in range(n):
        if comp[i] >= 0:
            continue
        stack = [i]
        comp[i] = n_comp
        while stack:
            j = stack.pop()
            for m in np.nonzero(close[j] & (comp < 0))[0]:
                comp[m] = n_comp
                stack.append(int(m))
        n_comp += 1
    return np.stack([centers[comp == c].mean(axis=0) for c in range(n_comp)])


def converge_centers(points, init_centers, sigma, cfg):
    """Run every center to convergence at one scale, then deduplicate.

    Movement below `cfg.convergence_tol * sigma` (or kernel-mass underflow)
    stops a center; converged centers within `cfg.merge_tol * sigma` of each
    other collapse to their mean.
    """
    points = as_points(points)
    centers = np.atleast_2d(np.asarray(init_centers, dtype=np.float64)).copy()
    if centers.shape[0] < 1:
        raise ValueError("init_centers must be nonempty")
    tol = cfg.convergence_tol * sigma
    active = np.ones(len(centers), dtype=bool)
    for _ in range(cfg.max_inner_iters):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        new, isolated = _shift_all(points, centers[idx], sigma)
        moved = np.linalg.norm(new - centers[idx], axis=1)
        centers[idx] = new
        active[idx[(moved < tol) | isolated]] = False
    merged = _merge_centers(centers, cfg.merge_tol * sigma)
    return ClusterSnapshot(sigma=float(sigma), centers=merged)


def default_sigma0(points, cfg):
    """Half the 5th percentile of nonzero pairwise distances, >= epsilon."""
    points = as_points(points)
    if len(points) > 1:
        diff = points[:, None, :] - points[None, :, :]
        d = np.sqrt((diff * diff).sum(axis=2))
        nz = d[np.triu_indices(len(points), k=1)]
        nz = nz[nz > 0]
        if nz.size:
            return max(0.5 * float(np.percentile(nz, 5)), cfg.epsilon)
    return cfg.epsilon


def scale_sweep(points, cfg=None):
    """Track cluster centers across the geometric scale ladder.

    Scale j uses sigma_j = sigma0 * k**j. Scale 0 starts from all data
    points; every later scale starts from the previous converged centers, so
    K is non-increasing. Returns (snapshots, truncated); `truncated` is True
    when max_scales ran out before K reached 1.
    """
    cfg = cfg or ScaleSweepConfig()
    cfg.validate()
    points = as_points(points)
    sigma0 = cfg.sigma0 if cfg.sigma0 is not None else default_sigma0(points, cfg)
    snapshots = []
    seeds = points
    for j in range(cfg.max_scales):
        sigma = sigma0 * cfg.k**j
        snap = converge_centers(points, seeds, sigma, cfg)
        snapshots.append(snap)
        seeds = snap.centers
        if snap.K == 1:
            return snapshots, False
    return snapshots, True


def lifetime(sigma, cfg=None):
    """Stability measure of a scale: log(sigma/epsilon) / log(1.05)."""
    cfg = cfg or ScaleSweepConfig()
    if sigma < cfg.epsilon:
        raise ValueError("sigma must be >= epsilon")
    return _LIFETIME_C * math.log(sigma / cfg.epsilon)


def build_lifetime_table(snapshots, cfg=None):
    """Lifetime of each cluster count observed in the sweep.

    For each K the maximal contiguous scale run [sigma_inf, sigma_sup] is
    scored with lifetime(sigma_sup) - lifetime(sigma_inf); with k = 1.05
    that difference equals the number of scale steps survived.
    """
    cfg = cfg or ScaleSweepConfig()
    if not snapshots:
        raise ValueError("snapshots must be nonempty")
    entries = {}
    j = 0
    while j < len(snapshots):
        k_val = snapshots[j].K
        j2 = j
        while j2 + 1 < len(snapshots) and snapshots[j2 + 1].K == k_val:
            j2 += 1
        life = lifetime(snapshots[j2].sigma, cfg) - lifetime(snapshots[j].sigma, cfg)
        prev = entries.get(k_val)
        if prev is None or life > prev.lifetime:
            entries[k_val] = LifetimeEntry(
                sigma_inf=snapshots[j].sigma,
                sigma_sup=snapshots[j2].sigma,
                lifetime=life,
            )
        j = j2 + 1
    return LifetimeTable(entries=entries)


def select_model(snapshots, table, allow_single_cluster=False):
    """Pick the longest-lived K and its median scale.

    K = 1 persists forever as sigma grows, so it is skipped unless it is the
    only K (or explicitly allowed). Lifetime ties (within 1e-9) break toward
    larger K; an even-length interval takes the lower median scale.
    """
    if not table.entries:
        raise ValueError("lifetime table is empty")
    entries = dict(table.entries)
    if not allow_single_cluster and len(entries) > 1:
        entries.pop(1, None)
    best_life = max(e.lifetime for e in entries.values())
    best_k = max(k for k, e in entries.items() if e.lifetime >= best_life - 1e-9)
    entry = entries[best_k]
    run = [
        j
        for j, s in enumerate(snapshots)
        if s.K == best_k and entry.sigma_inf <= s.sigma <= entry.sigma_sup
    ]
    mid = run[(len(run) - 1) // 2]
    snap = snapshots[mid]
    return SelectedModel(centers=snap.centers.copy(), sigma_star=snap.sigma)


def assign_points(points, model):
    """Nearest-center labels; points farther than sigma_star from every
    center get the OUTLIER label. Equidistant points take the lower index."""
    points = as_points(points)
    diff = points[:, None, :] - model.centers[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    labels = dist.argmin(axis=1).astype(np.int64)
    nearest = dist[np.arange(len(points)), labels]
    labels[nearest > model.sigma_star] = OUTLIER
    return Assignment(labels=labels)


def cluster_points(points, cfg=None):
    """Full pipeline: sweep, lifetime table, model selection, assignment."""
    cfg = cfg or ScaleSweepConfig()
    points = as_points(points)
    snapshots, truncated = scale_sweep(points, cfg)
    table = build_lifetime_table(snapshots, cfg)
    model = select_model(
        snapshots, table, allow_single_cluster=cfg.allow_single_cluster
    )
    assignment = assign_points(points, model)
    return ClusteringResult(
        model=model,
        assignment=assignment,
        table=table,
        snapshots=snapshots,
        truncated=truncated,
    )


def result_to_dict(result):
    """JSON-ready view of a clustering result."""
    return {
        "k": int(result.model.K),
        "sigma_star": float(result.model.sigma_star),
        "centers": [[float(x), float(y)] for x, y in result.model.centers],
        "assignments": [
            "outlier" if lab == OUTLIER else int(lab)
            for lab in result.assignment.labels
        ],
        "lifetimes": {
            str(k): {
                "sigma_inf": float(e.sigma_inf),
                "sigma_sup": float(e.sigma_sup),
                "lifetime": float(e.lifetime),
            }
            for k, e in sorted(result.table.entries.items())
        },
    }
