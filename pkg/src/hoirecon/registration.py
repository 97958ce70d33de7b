"""Alignment of a generated shape prior to a target cloud.

ICP alternates nearest-neighbor matching (target -> transformed prior)
with a closed-form similarity fit, optionally restarted from a coarse
grid of 24 octahedral rotations. The resulting transform feeds the
pseudo-correspondence map used to supervise refinement training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import PointCloud, SimilarityTransform, SpatialIndex, apply


class DegenerateGeometryError(ValueError):
    """Correspondences too degenerate for a closed-form similarity fit."""


@dataclass(frozen=True)
class IcpOptions:
    max_iterations: int = 50
    convergence_eps: float = 1e-10  # change in mean squared error, m^2
    estimate_scale: bool = True
    initial: SimilarityTransform = field(default_factory=SimilarityTransform.identity)
    restart_grid: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.convergence_eps > 0:
            raise ValueError("convergence_eps must be positive")


@dataclass(frozen=True)
class CorrespondenceMap:
    """indices[i] = prior index nearest to ground-truth point i."""

    indices: np.ndarray
    prior_size: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("indices must be one-dimensional")
        if idx.size and (idx.min() < 0 or idx.max() >= self.prior_size):
            raise ValueError("correspondence index out of range")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.shape[0]


def best_fit_similarity(src: PointCloud, dst: PointCloud, pairs,
                        estimate_scale: bool = True) -> SimilarityTransform:
    """Closed-form similarity minimizing sum ||dst - (s R src + t)||^2
    over the given (src index, dst index) pairs. Reflections are excluded."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] < 3:
        raise DegenerateGeometryError("need at least 3 (src, dst) pairs")
    s_pts = src.points[pairs[:, 0]]
    d_pts = dst.points[pairs[:, 1]]
    mu_s = s_pts.mean(axis=0)
    mu_d = d_pts.mean(axis=0)
    s_c = s_pts - mu_s
    d_c = d_pts - mu_d
    cov = d_c.T @ s_c / pairs.shape[0]
    u_mat, sing, vt_mat = np.linalg.svd(cov)
    if sing[1] < 1e-15 * max(sing[0], 1e-300):
        raise DegenerateGeometryError("rank-deficient cross-covariance (collinear pairs)")
    sign = np.ones(3)
    if np.linalg.det(u_mat) * np.linalg.det(vt_mat) < 0:
        sign[2] = -1.0
    rotation = u_mat @ np.diag(sign) @ vt_mat
    if estimate_scale:
        var_s = (s_c ** 2).sum() / pairs.shape[0]
        if var_s <= 0:
            raise DegenerateGeometryError("zero-variance source points")
        scale = float((sing * sign).sum() / var_s)
        if scale <= 0:
            raise DegenerateGeometryError("non-positive fitted scale")
    else:
        scale = 1.0
    translation = mu_d - scale * rotation @ mu_s
    return SimilarityTransform(rotation, translation, scale)


def octahedral_rotations() -> list[np.ndarray]:
    """The 24 rotation matrices of the cube, in a deterministic order."""
    mats = []
    for perm in ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)):
        for signs in ((1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
                      (-1, 1, 1), (-1, 1, -1), (-1, -1, 1), (-1, -1, -1)):
            mat = np.zeros((3, 3))
            for row, (col, sign) in enumerate(zip(perm, signs)):
                mat[row, col] = sign
            if np.linalg.det(mat) > 0:
                mats.append(mat)
    return mats


def _icp_single(prior: PointCloud, target: PointCloud, opts: IcpOptions,
                init: SimilarityTransform):
    transform = init
    prev_mse = np.inf
    mse = np.inf
    tgt = np.ascontiguousarray(target.points)
    for _ in range(opts.max_iterations):
        moved = apply(transform, prior)
        idx, d2 = SpatialIndex(moved).nearest_batch(tgt)
        mse = float(d2.mean())
        if prev_mse - mse <= opts.convergence_eps:
            break
        prev_mse = mse
        pairs = np.column_stack([idx, np.arange(len(target))])
        transform = best_fit_similarity(prior, target, pairs, opts.estimate_scale)
    return transform, mse


def icp_align(prior: PointCloud, target: PointCloud,
              opts: IcpOptions | None = None) -> tuple[SimilarityTransform, float]:
    """Align the prior to the target; returns the transform and the final
    mean squared correspondence error (m^2)."""
    opts = opts or IcpOptions()
    if len(prior) < 3 or len(target) < 3:
        raise ValueError("icp_align requires clouds with at least 3 points")
    inits = [opts.initial]
    if opts.restart_grid:
        prior_centroid = prior.centroid()
        target_centroid = target.centroid()
        for rot in octahedral_rotations():
            # Restart: rotate about the prior centroid, then align centroids.
            translation = target_centroid - rot @ prior_centroid
            inits.append(opts.initial.compose(
                SimilarityTransform(rot, translation)))
    best = None
    failure = None
    for init in inits:
        try:
            transform, mse = _icp_single(prior, target, opts, init)
        except DegenerateGeometryError as err:
            # A bad start (e.g. all targets matching one prior point) can
            # degenerate; other restarts may still converge.
            failure = err
            continue
        if best is None or mse < best[1]:
            best = (transform, mse)
    if best is None:
        raise failure
    return best


def pseudo_correspondence(gt: PointCloud, transform: SimilarityTransform,
                          prior: PointCloud) -> CorrespondenceMap:
    """For each ground-truth point, the index of the nearest transformed
    prior point. Ties break to the lowest prior index; the map is not
    necessarily injective."""
    if len(gt) == 0 or len(prior) == 0:
        raise ValueError("pseudo_correspondence requires non-empty clouds")
    moved = apply(transform, prior)
    idx, _ = SpatialIndex(moved).nearest_batch(np.ascontiguousarray(gt.points))
    return CorrespondenceMap(idx, len(prior))


def sphere_prior(n: int, radius: float = 1.0, seed: int = 0) -> PointCloud:
    """Antipodally symmetrized Fibonacci-lattice sphere sampling; the seed
    picks a deterministic rotation of the lattice so distinct seeds give
    distinct clouds. Symmetrization keeps the centroid at the origin to
    floating-point cancellation accuracy."""
    if n < 4:
        raise ValueError("sphere prior needs at least 4 points")
    if not radius > 0:
        raise ValueError("radius must be positive")
    pairs = n // 2
    odd = n % 2 == 1
    if odd:
        pairs = (n - 3) // 2
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    i = np.arange(pairs, dtype=np.float64)
    # Lattice over the upper hemisphere only; each point gets its antipode.
    z = 1.0 - (2.0 * i + 1.0) / (2.0 * pairs) if pairs else np.empty(0)
    phi = 2.0 * np.pi * i / golden
    r_xy = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    upper = np.column_stack([r_xy * np.cos(phi), r_xy * np.sin(phi), z])
    parts = [upper, -upper]
    if odd:
        # Zero-centroid filler: an equilateral triangle on the equator.
        ang = 2.0 * np.pi * np.arange(3) / 3.0
        parts.append(np.column_stack(
            [np.cos(ang), np.sin(ang), np.zeros(3)]))
    pts = radius * np.concatenate(parts, axis=0)
    rng = np.random.default_rng(seed)
    rot = _random_rotation(rng)
    return PointCloud(pts @ rot.T)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    mat = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(mat)
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def farthest_point_sample(points: np.ndarray, count: int,
                          start: int = 0) -> np.ndarray:
    """Indices of a deterministic farthest-point subsample (seeded at
    `start`). Returns `count` indices in selection order."""
    n = points.shape[0]
    if count > n:
        raise ValueError(f"cannot sample {count} points from {n}")
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    min_d2 = ((points - points[start]) ** 2).sum(axis=1)
    for k in range(1, count):
        nxt = int(np.argmax(min_d2))
        chosen[k] = nxt
        d2 = ((points - points[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return chosen


class PriorProvider:
    """Deterministic source of a category-labelled prior cloud."""

    def get(self, category: str) -> PointCloud:
        raise NotImplementedError


class SpherePriorProvider(PriorProvider):
    def __init__(self, n: int = 256, radius: float = 0.05, seed: int = 0):
        self.n = n
        self.radius = radius
        self.seed = seed

    def get(self, category: str) -> PointCloud:
        # Same sphere regardless of category; the category only keys the seed mix.
        return sphere_prior(self.n, self.radius, self.seed)


class PrototypeLibrary:
    """Directory of prototype clouds with a `label<TAB>filename` manifest."""

    def __init__(self, root: Path, manifest_name: str = "manifest.tsv"):
        from . import fileio

        self.root = Path(root)
        self._read_cloud = fileio.read_cloud
        manifest = self.root / manifest_name
        if not manifest.is_file():
            raise FileNotFoundError(f"prototype manifest not found: {manifest}")
        self.entries: dict[str, str] = {}
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            label, _, filename = line.partition("\t")
            if not filename:
                raise ValueError(f"malformed manifest line: {line!r}")
            self.entries[label] = filename

    def categories(self) -> list[str]:
        return sorted(self.entries)

    def load(self, category: str) -> PointCloud:
        if category not in self.entries:
            raise KeyError(
                f"unknown category {category!r}; available: {self.categories()}")
        return self._read_cloud(self.root / self.entries[category])


def library_prior(category: str, library: PrototypeLibrary,
                  count: int | None = None) -> PointCloud:
    """Stored prototype cloud, farthest-point resampled to `count` points."""
    proto = library.load(category)
    if count is None or count >= len(proto):
        return proto
    idx = farthest_point_sample(proto.points, count)
    return PointCloud(proto.points[idx])


class LibraryPriorProvider(PriorProvider):
    def __init__(self, library: PrototypeLibrary, count: int | None = None):
        self.library = library
        self.count = count

    def get(self, category: str) -> PointCloud:
        return library_prior(category, self.library, self.count)
