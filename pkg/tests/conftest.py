import numpy as np
import pytest

from hoirecon.fusion import FeatureGrid, FusionConfig, GlobalFeature, RefinerSample
from hoirecon.geom import CameraIntrinsics, PointCloud
from hoirecon.registration import CorrespondenceMap


TINY_CONFIG = FusionConfig(p1=4, p2=2, grid1=(4, 4), grid2=(4, 4),
                           c1=3, c2=3, cg=3, hidden=4)


def _degenerate(camera, prior, gt, corr):
    """Reject instances where the chamfer assignment or the projection
    distance sits on a kink; finite differences are meaningless there."""
    for a, b in ((gt, prior), (prior, gt)):
        d2 = ((a[:, np.newaxis] - b[np.newaxis]) ** 2).sum(axis=2)
        part = np.sort(d2, axis=1)
        if np.min(part[:, 1] - part[:, 0]) < 2e-5:
            return True
    from hoirecon.geom import project_points
    uv_gt = project_points(camera, gt)
    uv_prior = project_points(camera, prior)
    pix = np.linalg.norm(uv_gt - uv_prior[corr.indices], axis=1)
    return pix.min() < 0.2


def tiny_sample(seed=0, config=TINY_CONFIG, n_points=8):
    """Minimal refinement instance: 8 points, 4 patches, 4x4 grids."""
    rng = np.random.default_rng(seed)
    camera = CameraIntrinsics(30.0, 30.0, 8.0, 8.0, 16, 16)
    while True:
        pts = (rng.normal(scale=0.03, size=(n_points, 3))
               + np.array([0.0, 0.0, 0.5]))
        prior = PointCloud(pts)
        gt = PointCloud(pts + rng.normal(scale=0.01, size=pts.shape))
        d2 = ((gt.points[:, np.newaxis] - pts[np.newaxis]) ** 2).sum(axis=2)
        corr = CorrespondenceMap(d2.argmin(axis=1), n_points)
        if not _degenerate(camera, prior.points, gt.points, corr):
            break
    h1, w1 = config.grid1
    h2, w2 = config.grid2
    return RefinerSample(
        prior=prior,
        gt_object=gt,
        correspondence=corr,
        camera=camera,
        grid1=FeatureGrid(rng.normal(size=(h1, w1, config.c1)),
                          stride=camera.width / w1),
        grid2=FeatureGrid(rng.normal(size=(h2, w2, config.c2)),
                          stride=camera.width / w2),
        global_feature=GlobalFeature(rng.normal(size=config.cg)),
        mask_gt_coarse=(rng.uniform(size=(h2, w2)) < 0.5).astype(np.float64),
        hand_joints_gt=rng.normal(scale=0.05, size=(21, 3)),
        hand_joints_pred=rng.normal(scale=0.05, size=(21, 3)),
        object_center_gt=prior.centroid(),
        object_center_pred=prior.centroid() + rng.normal(scale=0.005, size=3),
    )


@pytest.fixture
def tiny_config():
    return TINY_CONFIG
