"""Command-line orchestration: dataset synthesis, prior registration,
refiner training, evaluation, and the occlusion study.

Every command is deterministic under a fixed seed and writes through a
temporary path renamed into place on success, so interrupted runs never
leave partial outputs and reruns are byte-identical.
"""

from __future__ import annotations

import configparser
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from . import fileio, hand, pipeline, synth
from .fusion import FusionConfig, TrainConfig, train_refiner
from .geom import chamfer
from .losses import (occlusion_binned_report, occlusion_rate, evaluate,
                     report_from_text, report_to_text)
from .registration import (DegenerateGeometryError, IcpOptions,
                           LibraryPriorProvider, PriorProvider,
                           PrototypeLibrary, SpherePriorProvider)


class ConfigError(click.ClickException):
    """All validation failures reported together."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    jobs: int = 1
    # dataset
    train_count: int = 50
    test_count: int = 10
    families: tuple[str, ...] = ("box", "can")
    raster: int = 256
    focal: float = 300.0
    object_points: int = 1024
    # prior
    prior_source: str = "sphere"
    prior_points: int = 512
    prior_radius: float = 0.05
    library_path: str = ""
    # icp
    icp_max_iterations: int = 50
    icp_estimate_scale: bool = True
    icp_restart_grid: bool = True
    # fusion
    p1: int = 128
    p2: int = 32
    grid1: int = 32
    grid2: int = 16
    channels: int = 64
    hidden: int = 256
    head_gain: float = 25.0
    # training
    epochs: int = 200
    learning_rate: float = 5e-5
    fine_tune_epochs: int = 25
    fine_tune_rate: float = 1e-5
    batch_size: int = 1
    # metrics
    object_thresholds_mm: tuple[float, ...] = (5.0, 10.0)
    hand_thresholds_mm: tuple[float, ...] = (1.0, 5.0)
    centered: bool = True

    def scene_config(self) -> synth.SceneConfig:
        return synth.SceneConfig(raster=self.raster, focal=self.focal,
                                 families=self.families,
                                 object_points=self.object_points)

    def fusion_config(self) -> FusionConfig:
        c = self.channels
        return FusionConfig(p1=self.p1, p2=self.p2,
                            grid1=(self.grid1, self.grid1),
                            grid2=(self.grid2, self.grid2),
                            c1=c, c2=c, cg=c, hidden=self.hidden,
                            head_gain=self.head_gain)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                           fine_tune_epochs=self.fine_tune_epochs,
                           fine_tune_rate=self.fine_tune_rate,
                           batch_size=self.batch_size, seed=self.seed,
                           fusion=self.fusion_config())

    def icp_options(self) -> IcpOptions:
        return IcpOptions(max_iterations=self.icp_max_iterations,
                          estimate_scale=self.icp_estimate_scale,
                          restart_grid=self.icp_restart_grid)

    def prior_provider(self) -> PriorProvider:
        if self.prior_source == "sphere":
            return SpherePriorProvider(self.prior_points, self.prior_radius,
                                       self.seed)
        library = PrototypeLibrary(Path(self.library_path))
        return LibraryPriorProvider(library, self.prior_points)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _parse_families(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


# section -> key -> (attribute, parser)
_SCHEMA = {
    "run": {"seed": ("seed", int), "out": ("out", str), "jobs": ("jobs", int)},
    "dataset": {
        "train_count": ("train_count", int),
        "test_count": ("test_count", int),
        "families": ("families", _parse_families),
        "raster": ("raster", int),
        "focal": ("focal", float),
        "object_points": ("object_points", int),
    },
    "prior": {
        "source": ("prior_source", str),
        "points": ("prior_points", int),
        "radius": ("prior_radius", float),
        "library": ("library_path", str),
    },
    "icp": {
        "max_iterations": ("icp_max_iterations", int),
        "estimate_scale": ("icp_estimate_scale", _parse_bool),
        "restart_grid": ("icp_restart_grid", _parse_bool),
    },
    "fusion": {
        "p1": ("p1", int), "p2": ("p2", int),
        "grid1": ("grid1", int), "grid2": ("grid2", int),
        "channels": ("channels", int), "hidden": ("hidden", int),
        "head_gain": ("head_gain", float),
    },
    "training": {
        "epochs": ("epochs", int),
        "learning_rate": ("learning_rate", float),
        "fine_tune_epochs": ("fine_tune_epochs", int),
        "fine_tune_rate": ("fine_tune_rate", float),
        "batch_size": ("batch_size", int),
    },
    "metrics": {
        "object_thresholds_mm": ("object_thresholds_mm", _parse_floats),
        "hand_thresholds_mm": ("hand_thresholds_mm", _parse_floats),
        "centered": ("centered", _parse_bool),
    },
}


def load_config(path: str | None) -> RunConfig:
    config = RunConfig()
    problems: list[str] = []
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError([f"config file not found: {path}"])
        for section in parser.sections():
            if section not in _SCHEMA:
                problems.append(f"unknown section [{section}]")
                continue
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    problems.append(f"unknown key {section}.{key}")
                    continue
                attr, parse = _SCHEMA[section][key]
                try:
                    setattr(config, attr, parse(raw))
                except ValueError as err:
                    problems.append(f"{section}.{key}: {err}")
    problems.extend(_validate(config))
    if problems:
        raise ConfigError(problems)
    return config


def _validate(config: RunConfig) -> list[str]:
    problems = []
    for attr in ("train_count", "test_count", "raster", "object_points",
                 "prior_points", "icp_max_iterations", "p1", "p2", "grid1",
                 "grid2", "channels", "hidden", "batch_size", "jobs"):
        if getattr(config, attr) < 1:
            problems.append(f"{attr} must be positive")
    for attr in ("prior_radius", "learning_rate", "fine_tune_rate", "head_gain",
                 "focal"):
        if not getattr(config, attr) > 0:
            problems.append(f"{attr} must be positive")
    if config.epochs < 0 or config.fine_tune_epochs < 0:
        problems.append("epoch counts must be non-negative")
    for family in config.families:
        if family not in synth.SHAPE_FAMILIES:
            problems.append(
                f"dataset.families: unknown family {family!r}; "
                f"expected one of {synth.SHAPE_FAMILIES}")
    if not config.families:
        problems.append("dataset.families must name at least one family")
    if config.prior_source not in ("sphere", "library"):
        problems.append(
            f"prior.source must be 'sphere' or 'library', got {config.prior_source!r}")
    if config.prior_source == "library":
        if not config.library_path:
            problems.append("prior.library is required when source = library")
        elif not Path(config.library_path).is_dir():
            problems.append(
                f"prior.library does not resolve to a directory: {config.library_path}")
    return problems


# ------------------------------------------------------------------- helpers

def _pmap(fn, items, jobs: int):
    """Order-preserving map, optionally fanned out over worker threads."""
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".part")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _atomic_replace_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.rename(tmp, final)


def _fmt(value: float) -> str:
    return repr(float(value))


def _sample_dirs(split_dir: Path) -> list[Path]:
    if not split_dir.is_dir():
        raise click.ClickException(f"missing dataset split: {split_dir}")
    return sorted(d for d in split_dir.iterdir() if d.is_dir())


# ----------------------------------------------------------------- the group

@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run configuration file (INI sections).")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--out", type=click.Path(), default=None,
              help="Override the output directory.")
@click.option("--jobs", type=int, default=None,
              help="Worker threads for per-sample fan-out.")
@click.pass_context
def main(ctx, config_path, seed, out, jobs):
    """Hand-object reconstruction pipeline at desk scale."""
    config = load_config(config_path)
    if seed is not None:
        config.seed = seed
    if out is not None:
        config.out = out
    if jobs is not None:
        config.jobs = jobs
    problems = _validate(config)
    if problems:
        raise ConfigError(problems)
    ctx.obj = config


@main.command("synth-gen")
@click.pass_obj
def synth_gen(config: RunConfig):
    """Generate the train/test scene dataset."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "dataset.part"
    if tmp.exists():
        shutil.rmtree(tmp)
    scene_config = config.scene_config()
    rates = []
    for split, count, base in (("train", config.train_count, config.seed),
                               ("test", config.test_count,
                                config.seed + 100000)):
        scenes = _pmap(lambda k: synth.make_scene(scene_config, base + k),
                       range(count), config.jobs)
        for scene in scenes:
            synth.save_sample(tmp / split / f"scene{scene.seed:06d}", scene)
            rates.append(occlusion_rate(scene.visible, scene.amodal))
    _atomic_replace_dir(tmp, out / "dataset")
    quartiles = np.percentile(rates, [25, 50, 75])
    click.echo("occlusion-rate quartiles: "
               + " ".join(_fmt(q) for q in quartiles))


def _load_split(config: RunConfig, split: str) -> list[tuple[Path, synth.SceneSample]]:
    split_dir = Path(config.out) / "dataset" / split
    dirs = _sample_dirs(split_dir)
    scenes = _pmap(synth.load_sample, dirs, config.jobs)
    return list(zip(dirs, scenes))


@main.command("register")
@click.pass_obj
def register(config: RunConfig):
    """Fit category priors to the training split; the test split receives
    center-aligned priors only (no fitted transform at inference)."""
    out = Path(config.out)
    provider = config.prior_provider()
    opts = config.icp_options()
    tmp = out / "register.part"
    if tmp.exists():
        shutil.rmtree(tmp)
    failures = 0
    chamfers = []

    def fit(entry):
        sample_dir, scene = entry
        try:
            return pipeline.register_scene(scene, provider, opts)
        except DegenerateGeometryError as err:
            click.echo(f"{sample_dir.name}: registration failed: {err}", err=True)
            return None

    train = _load_split(config, "train")
    for (sample_dir, scene), reg in zip(train, _pmap(fit, train, config.jobs)):
        if reg is None:
            failures += 1
            continue
        dest = tmp / "train" / sample_dir.name
        dest.mkdir(parents=True, exist_ok=True)
        fileio.write_cloud(reg.aligned_prior, dest / "prior.ply")
        fileio.write_tensor(reg.transform.matrix(), dest / "transform.tens")
        fileio.write_tensor(reg.correspondence.indices.astype(np.float64),
                            dest / "correspondence.tens")
        chamfers.append(chamfer(reg.aligned_prior, scene.object_cloud))
    for sample_dir, scene in _load_split(config, "test"):
        prior = provider.get(scene.category)
        aligned = pipeline.center_aligned_prior(
            prior, pipeline.predicted_center(scene))
        dest = tmp / "test" / sample_dir.name
        dest.mkdir(parents=True, exist_ok=True)
        fileio.write_cloud(aligned, dest / "prior.ply")
    _atomic_replace_dir(tmp, out / "register")
    click.echo(f"registered {len(chamfers)} training samples"
               + (f" ({failures} failed)" if failures else "")
               + f", mean post-fit chamfer {_fmt(float(np.mean(chamfers)))} m^2"
               if chamfers else "no training samples registered")


def _registered_samples(config: RunConfig, split: str):
    """RefinerSamples for a split, reading priors (and for the training
    split, correspondences) written by the register command."""
    out = Path(config.out)
    fusion_config = config.fusion_config()
    entries = []
    for sample_dir, scene in _load_split(config, split):
        reg_dir = out / "register" / split / sample_dir.name
        if not reg_dir.is_dir():
            continue  # registration may have failed for this sample
        prior = fileio.read_cloud(reg_dir / "prior.ply")
        corr = None
        corr_path = reg_dir / "correspondence.tens"
        if corr_path.exists():
            from .registration import CorrespondenceMap
            indices = fileio.read_tensor(corr_path).astype(np.int64)
            corr = CorrespondenceMap(indices, len(prior))
        entries.append((scene, pipeline.assemble_sample(
            scene, prior, corr, fusion_config, feature_seed=config.seed)))
    if not entries:
        raise click.ClickException(f"no registered samples in split {split!r}")
    return entries


_TRACE_COLUMNS = ("epoch", "fine_tune", "rec", "weight", "proj", "mask",
                  "ph", "po", "total")


@main.command("train")
@click.pass_obj
def train(config: RunConfig):
    """Train the refiner on the registered training split."""
    out = Path(config.out)
    samples = [sample for _, sample in _registered_samples(config, "train")]
    train_config = config.train_config()
    try:
        params, trace = train_refiner(samples, train_config)
    except FloatingPointError as err:
        raise click.ClickException(str(err))
    tmp = out / "params.part"
    if tmp.exists():
        shutil.rmtree(tmp)
    fileio.write_tensors(params, tmp)
    _atomic_replace_dir(tmp, out / "params")
    lines = ["\t".join(_TRACE_COLUMNS)]
    for row in trace:
        lines.append("\t".join(_fmt(row[c]) for c in _TRACE_COLUMNS))
    _atomic_write_text(out / "trace.tsv", "\n".join(lines) + "\n")
    click.echo(f"trained {len(trace)} epochs on {len(samples)} samples")


@main.command("eval")
@click.option("--centered/--no-centered", default=None,
              help="Center clouds before scoring (overrides config).")
@click.option("--thresholds", default=None,
              help="Comma-separated object F-score thresholds in mm.")
@click.option("--prior-only", is_flag=True,
              help="Score the aligned priors without refinement.")
@click.pass_obj
def eval_cmd(config: RunConfig, centered, thresholds, prior_only):
    """Score the test split and write the metrics report."""
    out = Path(config.out)
    centered = config.centered if centered is None else centered
    object_thresholds = (config.object_thresholds_mm if thresholds is None
                         else _parse_floats(thresholds))
    params = None
    if not prior_only:
        params_dir = out / "params"
        if not params_dir.is_dir():
            raise click.ClickException(
                f"missing params archive {params_dir}; train first or pass --prior-only")
        params = fileio.read_tensors(params_dir)
    fusion_config = config.fusion_config()
    skeleton = hand.default_skeleton()
    records = []
    for scene, sample in _registered_samples(config, "test"):
        pred_object = (sample.prior if params is None
                       else pipeline.refine_cloud(params, sample, fusion_config))
        pose, _ = hand.inverse_kinematics(sample.hand_joints_pred, skeleton)
        records.append({
            "id": f"scene{scene.seed:06d}",
            "pred_object": pred_object,
            "gt_object": scene.object_cloud,
            "pred_hand": hand.forward_kinematics(skeleton, pose),
            "gt_hand": scene.hand_joints,
            "occlusion": occlusion_rate(scene.visible, scene.amodal),
        })
    report = evaluate(records, object_thresholds, config.hand_thresholds_mm,
                      centered=centered)
    _atomic_write_text(out / "report.tsv", report_to_text(report))
    click.echo(f"median object chamfer {_fmt(report.median_chamfer_object)} mm^2 "
               f"over {len(records)} samples")


@main.command("occlusion-report")
@click.argument("report_path", type=click.Path(exists=True))
@click.pass_obj
def occlusion_report(config: RunConfig, report_path):
    """Decile table of median chamfer by occlusion rate, plus a line plot."""
    report = report_from_text(Path(report_path).read_text(encoding="utf-8"))
    rates = [s.occlusion for s in report.samples]
    chamfers = [s.chamfer_object_mm2 for s in report.samples]
    try:
        bins = occlusion_binned_report(rates, chamfers)
    except ValueError as err:
        raise click.ClickException(str(err))
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ("bin", "count", "rate_low", "rate_high", "median_chamfer")
    lines = ["\t".join(header)]
    for row in bins:
        lines.append("\t".join(_fmt(row[c]) for c in header))
    _atomic_write_text(out / "occlusion_bins.tsv", "\n".join(lines) + "\n")
    svg = _svg_line_plot([row["bin"] for row in bins],
                         [row["median_chamfer"] for row in bins],
                         "median object chamfer (mm^2) by occlusion decile")
    _atomic_write_text(out / "occlusion_plot.svg", svg)
    click.echo(f"wrote {out / 'occlusion_bins.tsv'} and {out / 'occlusion_plot.svg'}")


def _svg_line_plot(xs, ys, title: str) -> str:
    """Deterministic standalone line plot; no rendering dependencies."""
    width, height, margin = 640, 400, 60
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return margin + (x - x_lo) / x_span * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / y_span * (height - 2 * margin)

    points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'  <rect width="{width}" height="{height}" fill="white"/>\n'
        f'  <text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="monospace" font-size="14">{title}</text>\n'
        f'  <line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>\n'
        f'  <line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>\n'
        f'  <text x="{margin}" y="{height - margin + 20}" font-family="monospace" '
        f'font-size="12">{x_lo:g}</text>\n'
        f'  <text x="{width - margin}" y="{height - margin + 20}" text-anchor="end" '
        f'font-family="monospace" font-size="12">{x_hi:g}</text>\n'
        f'  <text x="{margin - 6}" y="{height - margin}" text-anchor="end" '
        f'font-family="monospace" font-size="12">{y_lo:g}</text>\n'
        f'  <text x="{margin - 6}" y="{margin}" text-anchor="end" '
        f'font-family="monospace" font-size="12">{y_hi:g}</text>\n'
        f'  <polyline points="{points}" fill="none" stroke="steelblue" '
        f'stroke-width="2"/>\n'
        "</svg>\n"
    )


if __name__ == "__main__":
    main()
