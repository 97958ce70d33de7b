"""Loss terms for the refinement objective, the occlusion-rate formula,
and the evaluation report (Chamfer in mm, F-scores, occlusion deciles).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .fusion import AttentionState, hard_argmax_uv, _cell_centers
from .geom import CameraIntrinsics, PointCloud, chamfer, f_score, project_points
from .registration import CorrespondenceMap

LAMBDA_WEIGHT = 0.1
LAMBDA_PROJ = 0.01

DEFAULT_OBJECT_THRESHOLDS_MM = (5.0, 10.0)
DEFAULT_HAND_THRESHOLDS_MM = (1.0, 5.0)

_CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class Mask:
    """H x W raster; binary foreground for amodal/visible roles, values in
    [0, 1] for the predicted-probability role."""

    data: np.ndarray
    role: str  # amodal | visible | probability

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("mask must be a 2D raster")
        if self.role in ("amodal", "visible"):
            if not np.isin(data, (0.0, 1.0)).all():
                raise ValueError(f"{self.role} mask must be binary")
        elif self.role == "probability":
            if np.any(data < 0) or np.any(data > 1):
                raise ValueError("probability mask values must lie in [0, 1]")
        else:
            raise ValueError(f"unknown mask role {self.role!r}")
        object.__setattr__(self, "data", data)

    def area(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class LossBreakdown:
    rec: float
    weight: float
    proj: float
    mask: float
    ph: float
    po: float

    def __post_init__(self):
        for name in ("rec", "weight", "proj", "mask", "ph", "po"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"loss term {name!r} is not finite")

    @property
    def total(self) -> float:
        return (self.rec + self.mask + self.ph + self.po
                + LAMBDA_WEIGHT * self.weight + LAMBDA_PROJ * self.proj)

    def as_dict(self) -> dict[str, float]:
        return {"rec": self.rec, "weight": self.weight, "proj": self.proj,
                "mask": self.mask, "ph": self.ph, "po": self.po,
                "total": self.total}


def loss_total(rec: float, weight: float, proj: float, mask: float,
               ph: float, po: float) -> LossBreakdown:
    return LossBreakdown(rec=rec, weight=weight, proj=proj, mask=mask,
                         ph=ph, po=po)


def loss_weight(state: AttentionState, gt: PointCloud, corr: CorrespondenceMap,
                camera: CameraIntrinsics, mode: str = "hard",
                patch_of_prior: np.ndarray | None = None) -> float:
    """Mean squared pixel distance between projected ground-truth points and
    the attention peak of their pseudo-corresponding prior point.

    `patch_of_prior` maps a prior point index to its attention row; by
    default rows are assumed to be per prior point. Soft mode substitutes
    the expected cell-center coordinate for the argmax."""
    if len(corr) != len(gt):
        raise ValueError("correspondence length must equal |V|")
    gt_uv = project_points(camera, gt.points)
    if mode == "hard":
        peak_uv = hard_argmax_uv(state.weights, state.grid_shape, state.stride)
    elif mode == "soft":
        peak_uv = state.weights @ _cell_centers(state.grid_shape, state.stride)
    else:
        raise ValueError(f"mode must be 'hard' or 'soft', got {mode!r}")
    rows = corr.indices if patch_of_prior is None else patch_of_prior[corr.indices]
    diff = gt_uv - peak_uv[rows]
    return float((diff ** 2).sum(axis=1).mean())


def loss_proj(gt: PointCloud, refined: PointCloud, corr: CorrespondenceMap,
              camera: CameraIntrinsics) -> float:
    """Mean unsquared pixel distance between projected ground-truth points
    and the projection of their pseudo-corresponding refined points."""
    if len(corr) != len(gt):
        raise ValueError("correspondence length must equal |V|")
    gt_uv = project_points(camera, gt.points)
    refined_uv = project_points(camera, refined.points)
    diff = gt_uv - refined_uv[corr.indices]
    return float(np.sqrt((diff ** 2).sum(axis=1)).mean())


def loss_rec(refined: PointCloud, gt: PointCloud) -> float:
    return chamfer(refined, gt)


def loss_mask(pred: Mask, gt: Mask) -> float:
    """Summed binary cross-entropy with probabilities clamped away from 0/1."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(
            f"mask shape mismatch: {pred.data.shape} vs {gt.data.shape}")
    if pred.role != "probability":
        raise ValueError("prediction must be a probability mask")
    if gt.role == "probability":
        raise ValueError("ground truth must be a binary mask")
    prob = np.clip(pred.data, _CLAMP_EPS, 1.0 - _CLAMP_EPS)
    labels = gt.data
    return float(-(labels * np.log(prob) + (1.0 - labels) * np.log(1.0 - prob)).sum())


def loss_pose(pred_center, gt_center) -> float:
    """Squared Euclidean distance between a predicted and true 3D center."""
    diff = np.asarray(pred_center, dtype=np.float64) - np.asarray(gt_center, dtype=np.float64)
    if not np.isfinite(diff).all():
        raise ValueError("centers must be finite")
    return float((diff ** 2).sum())


def loss_pose_joints(pred_joints: np.ndarray, gt_joints: np.ndarray) -> float:
    """Hand term: per-joint squared distances summed over the 21 joints."""
    pred = np.asarray(pred_joints, dtype=np.float64)
    gt = np.asarray(gt_joints, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[1:] != (3,):
        raise ValueError("expected matching (J, 3) joint arrays")
    return float(((pred - gt) ** 2).sum())


def occlusion_rate(visible: Mask, amodal: Mask) -> float:
    """1 - (visible area + 1) / (amodal area + 1), clamped to [0, 1)."""
    if visible.data.shape != amodal.data.shape:
        raise ValueError("mask shapes differ")
    if np.any(visible.data > amodal.data):
        warnings.warn("visible mask is not a subset of the amodal mask; "
                      "negative rates clamp to 0")
    rate = 1.0 - (visible.area() + 1.0) / (amodal.area() + 1.0)
    return max(rate, 0.0)


# --------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class SampleMetrics:
    sample_id: str
    chamfer_object_mm2: float
    f_object: tuple[float, ...]
    chamfer_hand_mm2: float
    f_hand: tuple[float, ...]
    occlusion: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-sample metrics plus aggregates. Chamfer values are computed on
    mm-scaled clouds, i.e. squared distances in mm²."""

    samples: tuple[SampleMetrics, ...]
    object_thresholds_mm: tuple[float, ...]
    hand_thresholds_mm: tuple[float, ...]
    centered: bool

    @property
    def median_chamfer_object(self) -> float:
        return float(np.median([s.chamfer_object_mm2 for s in self.samples]))

    @property
    def median_chamfer_hand(self) -> float:
        return float(np.median([s.chamfer_hand_mm2 for s in self.samples]))

    def mean_f_object(self) -> tuple[float, ...]:
        return tuple(float(np.mean([s.f_object[i] for s in self.samples]))
                     for i in range(len(self.object_thresholds_mm)))

    def mean_f_hand(self) -> tuple[float, ...]:
        return tuple(float(np.mean([s.f_hand[i] for s in self.samples]))
                     for i in range(len(self.hand_thresholds_mm)))


def _to_mm(cloud, centered: bool) -> PointCloud:
    # Accepts PointCloud or a raw (n, 3) array such as a joint set.
    pts = (cloud.points if isinstance(cloud, PointCloud)
           else np.asarray(cloud, dtype=np.float64)) * 1000.0
    if centered:
        pts = pts - pts.mean(axis=0)
    return PointCloud(pts)


def evaluate(records, object_thresholds_mm=DEFAULT_OBJECT_THRESHOLDS_MM,
             hand_thresholds_mm=DEFAULT_HAND_THRESHOLDS_MM,
             centered: bool = False) -> MetricsReport:
    """Score (pred, gt) cloud pairs per sample.

    `records` is an iterable of dicts with keys: id, pred_object, gt_object,
    pred_hand, gt_hand, occlusion. Centered mode subtracts each cloud's
    centroid before scoring (object-only comparison convention)."""
    records = list(records)
    if not records:
        raise ValueError("evaluate requires at least one sample")
    rows = []
    for rec in records:
        pred_o = _to_mm(rec["pred_object"], centered)
        gt_o = _to_mm(rec["gt_object"], centered)
        pred_h = _to_mm(rec["pred_hand"], centered)
        gt_h = _to_mm(rec["gt_hand"], centered)
        rows.append(SampleMetrics(
            sample_id=str(rec["id"]),
            chamfer_object_mm2=chamfer(pred_o, gt_o),
            f_object=tuple(f_score(pred_o, gt_o, tau) for tau in object_thresholds_mm),
            chamfer_hand_mm2=chamfer(pred_h, gt_h),
            f_hand=tuple(f_score(pred_h, gt_h, tau) for tau in hand_thresholds_mm),
            occlusion=float(rec.get("occlusion", 0.0)),
        ))
    return MetricsReport(tuple(rows), tuple(object_thresholds_mm),
                         tuple(hand_thresholds_mm), centered)


def occlusion_binned_report(rates, chamfers) -> list[dict[str, float]]:
    """Sort samples by occlusion rate, split into 10 equal-count groups
    (remainder spread over the earliest groups), and report the median
    Chamfer per group. Ties in rate keep input order (stable sort)."""
    rates = np.asarray(rates, dtype=np.float64)
    chamfers = np.asarray(chamfers, dtype=np.float64)
    if rates.shape != chamfers.shape or rates.ndim != 1:
        raise ValueError("rates and chamfers must be matching 1D arrays")
    n = rates.size
    if n < 10:
        raise ValueError(f"need at least 10 samples for decile binning, got {n}")
    order = np.argsort(rates, kind="stable")
    base, extra = divmod(n, 10)
    bins = []
    start = 0
    for b in range(10):
        size = base + (1 if b < extra else 0)
        members = order[start:start + size]
        start += size
        bins.append({
            "bin": float(b),
            "count": float(size),
            "rate_low": float(rates[members].min()),
            "rate_high": float(rates[members].max()),
            "median_chamfer": float(np.median(chamfers[members])),
        })
    return bins


# ------------------------------------------------------------ report tables

def report_to_text(report: MetricsReport) -> str:
    """Tab-separated table: header, one row per sample, then aggregate rows.
    Bit-stable for identical inputs. F-score aggregates are means."""
    obj_cols = [f"FS_o@{_fmt_tau(t)}" for t in report.object_thresholds_mm]
    hand_cols = [f"FS_h@{_fmt_tau(t)}" for t in report.hand_thresholds_mm]
    header = ["id", "CD_o_mm2", *obj_cols, "CD_h_mm2", *hand_cols, "occlusion"]
    lines = ["#centered\t" + ("1" if report.centered else "0"),
             "\t".join(header)]
    for s in report.samples:
        cells = [s.sample_id, _fmt(s.chamfer_object_mm2),
                 *(_fmt(v) for v in s.f_object), _fmt(s.chamfer_hand_mm2),
                 *(_fmt(v) for v in s.f_hand), _fmt(s.occlusion)]
        lines.append("\t".join(cells))
    lines.append("\t".join(["median", _fmt(report.median_chamfer_object),
                            *("" for _ in obj_cols),
                            _fmt(report.median_chamfer_hand),
                            *("" for _ in hand_cols), ""]))
    lines.append("\t".join(["mean", "", *(_fmt(v) for v in report.mean_f_object()),
                            "", *(_fmt(v) for v in report.mean_f_hand()), ""]))
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> MetricsReport:
    lines = [line for line in text.splitlines() if line]
    if len(lines) < 3 or not lines[0].startswith("#centered\t"):
        raise ValueError("malformed report: missing header")
    centered = lines[0].split("\t")[1] == "1"
    header = lines[1].split("\t")
    obj_taus = tuple(float(c.split("@")[1]) for c in header if c.startswith("FS_o@"))
    hand_taus = tuple(float(c.split("@")[1]) for c in header if c.startswith("FS_h@"))
    n_obj, n_hand = len(obj_taus), len(hand_taus)
    samples = []
    for line in lines[2:]:
        cells = line.split("\t")
        if cells[0] in ("median", "mean"):
            continue
        pos = 1
        cd_o = float(cells[pos]); pos += 1
        f_o = tuple(float(v) for v in cells[pos:pos + n_obj]); pos += n_obj
        cd_h = float(cells[pos]); pos += 1
        f_h = tuple(float(v) for v in cells[pos:pos + n_hand]); pos += n_hand
        samples.append(SampleMetrics(cells[0], cd_o, f_o, cd_h, f_h,
                                     float(cells[pos])))
    return MetricsReport(tuple(samples), obj_taus, hand_taus, centered)


def _fmt(value: float) -> str:
    return repr(float(value))


def _fmt_tau(tau: float) -> str:
    return f"{tau:g}"
