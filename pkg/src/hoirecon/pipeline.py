"""End-to-end glue: scenes -> registered priors -> refinement samples.

The command line and the evaluation entry points are thin wrappers around
these functions, which makes the full pipeline scriptable without shelling
out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hand, synth
from .fusion import FusionConfig, RefinerSample, TrainConfig, forward_refine
from .geom import PointCloud, SimilarityTransform, apply, chamfer
from .losses import Mask, occlusion_rate
from .registration import (CorrespondenceMap, IcpOptions, PriorProvider,
                           icp_align, pseudo_correspondence)


@dataclass(frozen=True)
class RegisteredScene:
    scene: synth.SceneSample
    prior: PointCloud               # category prior in its canonical frame
    transform: SimilarityTransform  # prior frame -> camera frame
    aligned_prior: PointCloud
    correspondence: CorrespondenceMap
    icp_mse: float


def register_scene(scene: synth.SceneSample, provider: PriorProvider,
                   opts: IcpOptions | None = None) -> RegisteredScene:
    """Fit the category prior to the observed object cloud and build the
    pseudo-correspondence from ground truth to aligned prior points."""
    prior = provider.get(scene.category)
    transform, mse = icp_align(prior, scene.object_cloud, opts)
    aligned = apply(transform, prior)
    corr = pseudo_correspondence(scene.object_cloud, transform, prior)
    return RegisteredScene(scene, prior, transform, aligned, corr, mse)


def coarse_mask(mask: Mask, grid_shape: tuple[int, int]) -> np.ndarray:
    """Binary mask at grid resolution; a cell is on when at least half of
    its pixels are."""
    pooled = synth._block_mean(mask.data[:, :, np.newaxis], *grid_shape)[:, :, 0]
    return (pooled >= 0.5).astype(np.float64)


def assemble_sample(scene: synth.SceneSample, prior: PointCloud,
                    correspondence: CorrespondenceMap | None,
                    fusion_config: FusionConfig = FusionConfig(),
                    feature_seed: int = 0) -> RefinerSample:
    """Assemble everything the refinement forward pass needs for one scene.

    The predicted hand joints come from the heatmap branch and the predicted
    object center from the aligned prior, so both pose terms carry real
    estimation error rather than placeholders.
    """
    feat_cfg = synth.FeatureConfig(
        grid1=fusion_config.grid1, grid2=fusion_config.grid2,
        channels1=fusion_config.c1, channels2=fusion_config.c2)
    grid1, grid2, global_feature = synth.synth_features(
        scene, feat_cfg, seed=feature_seed)
    joints_pred = hand.keypoints_from_heatmaps(scene.heatmaps, scene.camera)
    return RefinerSample(
        prior=prior,
        gt_object=scene.object_cloud,
        correspondence=correspondence,
        camera=scene.camera,
        grid1=grid1,
        grid2=grid2,
        global_feature=global_feature,
        mask_gt_coarse=coarse_mask(scene.amodal, fusion_config.grid2),
        hand_joints_gt=scene.hand_joints,
        hand_joints_pred=joints_pred,
        object_center_gt=scene.object_center,
        object_center_pred=prior.centroid(),
    )


def build_sample(registered: RegisteredScene,
                 fusion_config: FusionConfig = FusionConfig(),
                 feature_seed: int = 0) -> RefinerSample:
    return assemble_sample(registered.scene, registered.aligned_prior,
                           registered.correspondence, fusion_config,
                           feature_seed)


def make_dataset(count: int, scene_config: synth.SceneConfig,
                 base_seed: int = 0) -> list[synth.SceneSample]:
    return [synth.make_scene(scene_config, base_seed + k) for k in range(count)]


def refine_cloud(params: dict, sample: RefinerSample,
                 config: FusionConfig) -> PointCloud:
    return PointCloud(forward_refine(params, sample, config).refined.value)


def evaluation_records(registered: list[RegisteredScene],
                       samples: list[RefinerSample],
                       params: dict | None,
                       config: FusionConfig) -> list[dict]:
    """Per-scene records for metric aggregation. Without parameters the
    prediction is the aligned prior itself (the prior-only baseline)."""
    records = []
    for reg, sample in zip(registered, samples):
        pred = (sample.prior if params is None
                else refine_cloud(params, sample, config))
        skeleton = hand.default_skeleton()
        pose, _ = hand.inverse_kinematics(sample.hand_joints_pred, skeleton)
        pred_joints = hand.forward_kinematics(skeleton, pose)
        records.append({
            "id": f"scene{reg.scene.seed:05d}",
            "pred_object": pred,
            "gt_object": reg.scene.object_cloud,
            "pred_hand": pred_joints,
            "gt_hand": reg.scene.hand_joints,
            "occlusion": occlusion_rate(reg.scene.visible, reg.scene.amodal),
        })
    return records


def predicted_center(scene: synth.SceneSample) -> np.ndarray:
    """Estimated object center without ground-truth access: the amodal mask
    centroid unprojected at the mean visible splat depth."""
    mask = scene.amodal.data
    if mask.sum() == 0:
        raise ValueError("cannot estimate a center from an empty amodal mask")
    rows, cols = np.nonzero(mask)
    zbuf = synth._splat_zbuffer(scene.object_cloud.points, scene.camera, 2)
    visible_depths = zbuf[np.isfinite(zbuf)]
    depth = float(visible_depths.mean()) if visible_depths.size else 0.5
    from .geom import unproject
    return unproject(scene.camera, float(cols.mean()), float(rows.mean()), depth)


def center_aligned_prior(prior: PointCloud, center: np.ndarray) -> PointCloud:
    """Prior translated so its centroid sits at the estimated center; the
    inference-time stand-in for the training-only fitted transform."""
    return PointCloud(prior.points - prior.centroid() + np.asarray(center))


def chamfer_centered_mm2(pred: PointCloud, gt: PointCloud) -> float:
    """Chamfer in mm^2 after moving both clouds to their own centroids."""
    pred_mm = PointCloud((pred.points - pred.centroid()) * 1000.0)
    gt_mm = PointCloud((gt.points - gt.centroid()) * 1000.0)
    return chamfer(pred_mm, gt_mm)
