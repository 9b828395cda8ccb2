"""End-to-end prior -> train -> detect -> evaluate, driven by a flat key=value config."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import raster as R
from .affinity import AffinityConfig, prior as compute_prior, PriorMap
from .change_extraction import difference_image, spatial_filter, threshold_map, confusion_map
from .losses import LossWeights
from .metrics import binary_metrics, write_report
from .translators import TrainConfig, ARCHS, train, write_history, load_model

logger = logging.getLogger(__name__)

SEED_ENV = "HETCD_SEED"


@dataclass
class PipelineConfig:
    # affinity prior
    patch_size: int = 20
    stride: int = 5
    knn_fraction: float = 0.75
    multiscale: bool = True
    # translation network and schedule
    arch: str = "xnet"
    variant: str = "proposed"
    epochs: int = 240
    batches_per_epoch: int = 10
    batch_size: int = 10
    patch_hw: int = 100
    lr: float = 1e-5
    milestones: tuple = (80, 160)
    augment: bool = True
    dropout: float = 0.2
    # loss weights
    w_adv: float = 1.0
    w_AE: float = 0.2
    w_cyc: float = 2.0
    w_alpha: float = 3.0
    w_theta: float = 0.001
    # change extraction
    filter: bool = True
    filter_iterations: int = 5
    filter_kernel_width: float = 0.1
    filter_radius: int = 2
    filter_sigma_spatial: float = 1.0
    otsu_bins: int = 256
    # input handling: "none" or "log" (log-intensity, for speckled SAR data)
    x_transform: str = "none"
    y_transform: str = "none"
    seed: int = 0

    def affinity(self) -> AffinityConfig:
        return AffinityConfig(self.patch_size, self.stride, self.knn_fraction, self.multiscale)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batches_per_epoch, self.batch_size, self.patch_hw,
                           self.lr, tuple(self.milestones), self.seed, self.augment, self.dropout)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_adv, self.w_AE, self.w_cyc, self.w_alpha, self.w_theta)

    def validate(self) -> "PipelineConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {sorted(ARCHS)}")
        for key in ("x_transform", "y_transform"):
            if getattr(self, key) not in TRANSFORMS:
                raise ConfigError(f"{key} must be one of {sorted(TRANSFORMS)}")
        try:
            self.affinity()
            self.train_config()
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


TRANSFORMS = {"none": lambda a: a, "log": lambda a: np.log(np.maximum(a, 1e-6))}
_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _parse_value(name: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _BOOL[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def apply_overrides(cfg: PipelineConfig, pairs: dict[str, str], source: str = "") -> PipelineConfig:
    """New config with string values parsed according to each field's type."""
    defaults = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    updates = {}
    for key, text in pairs.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}{' in ' + source if source else ''}")
        updates[key] = _parse_value(key, text, defaults[key])
    return replace(cfg, **updates)


def parse_kv(text: str, source: str = "") -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(file: str | os.PathLike | None = None, overrides: dict[str, str] | None = None,
                   base: PipelineConfig | None = None, env=os.environ) -> PipelineConfig:
    """Defaults < config file < explicit overrides; ``HETCD_SEED`` replaces the seed when set."""
    cfg = base if base is not None else PipelineConfig()
    if file is not None:
        cfg = apply_overrides(cfg, parse_kv(Path(file).read_text(), str(file)), str(file))
    if overrides:
        cfg = apply_overrides(cfg, overrides, "overrides")
    if env.get(SEED_ENV):
        cfg = apply_overrides(cfg, {"seed": env[SEED_ENV]}, SEED_ENV)
    return cfg.validate()


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- staged output -------------------------------------------------------------

class Outputs:
    """Files are written under a ``.partial`` name and renamed once every stage succeeded."""

    def __init__(self):
        self.pending: list[Path] = []

    def path(self, final) -> Path:
        final = Path(final)
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(final.name + ".partial")
        self.pending.append(final)
        return tmp

    def commit(self) -> None:
        for final in self.pending:
            os.replace(final.with_name(final.name + ".partial"), final)
        self.pending = []


def write_config_snapshot(cfg: PipelineConfig, out: Outputs, directory) -> Path:
    target = Path(directory) / "config.resolved"
    out.path(target).write_text(format_config(cfg))
    return target


# -- stages --------------------------------------------------------------------

def prepare(raw: R.Raster, transform: str) -> R.NormalizedRaster:
    return R.normalize(R.Raster(TRANSFORMS[transform](np.asarray(raw.data, dtype=np.float64))))


def load_truth(path) -> np.ndarray:
    r = R.load(path)
    return np.asarray(r.data[:, :, 0]) > 0.5


def detect(model, x, y, cfg: PipelineConfig):
    """Unfiltered difference image (scored by AUC) and the thresholded, optionally filtered, map."""
    out = model.translate(x, y)
    diff = difference_image(x.data, out["x_hat"], y.data, out["y_hat"])
    d = diff.combined
    if cfg.filter:
        d = spatial_filter(d, cfg.filter_iterations, cfg.filter_kernel_width,
                           cfg.filter_radius, cfg.filter_sigma_spatial)
    cmap = threshold_map(d, cfg.otsu_bins)
    if cmap.degenerate:
        logger.warning("difference image is constant; change map is degenerate")
    return diff.combined, cmap


@dataclass
class Artifacts:
    files: dict = field(default_factory=dict)
    metrics: object = None


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - reported with the stage name
                raise StageError(name, exc) from exc
        return inner
    return wrap


def run_pipeline(x: R.Raster, y: R.Raster, truth: np.ndarray | None, cfg: PipelineConfig,
                 out_dir) -> Artifacts:
    out_dir = Path(out_dir)
    out = Outputs()
    art = Artifacts()
    write_config_snapshot(cfg, out, out_dir)

    @_stage("prior")
    def stage_prior():
        if x.shape[:2] != y.shape[:2]:
            raise ValueError(f"images are not aligned: {x.shape[:2]} vs {y.shape[:2]}")
        xn, yn = prepare(x, cfg.x_transform), prepare(y, cfg.y_transform)
        pm = compute_prior(xn, yn, cfg.affinity())
        R.save(pm.as_raster(), out.path(out_dir / "alpha.hcdr"))
        R.save_png(pm.alpha, out.path(out_dir / "alpha.png"), value_range=(0.0, 1.0))
        return xn, yn, pm

    @_stage("train")
    def stage_train(xn, yn, pm):
        res = train(cfg.arch, xn, yn, pm, cfg.train_config(), cfg.loss_weights(), variant=cfg.variant)
        res.model.save(out.path(out_dir / "model.hcdm"))
        write_history(res.history, out.path(out_dir / "history.csv"))
        return res.model

    @_stage("detect")
    def stage_detect(model, xn, yn):
        d, cmap = detect(model, xn, yn, cfg)
        R.save(R.Raster(d.astype(np.float32)), out.path(out_dir / "d.hcdr"))
        R.save_png(cmap.mask, out.path(out_dir / "map.png"))
        return d, cmap

    @_stage("evaluate")
    def stage_evaluate(d, cmap):
        if truth.shape != d.shape:
            raise ValueError(f"truth {truth.shape} does not match image {d.shape}")
        rep = binary_metrics(cmap.mask, truth, d)
        write_report(rep, out.path(out_dir / "metrics.csv"))
        R.save_png(confusion_map(cmap.mask, truth), out.path(out_dir / "confusion.png"))
        return rep

    xn, yn, pm = stage_prior()
    model = stage_train(xn, yn, pm)
    d, cmap = stage_detect(model, xn, yn)
    if truth is not None:
        art.metrics = stage_evaluate(d, cmap)
    else:
        logger.info("no ground truth given; evaluation skipped")
    art.files = {p.name: p for p in out.pending}
    out.commit()
    return art


def run_toy(seed: int, out_dir, patch_size: int = 8, stride: int = 8) -> Artifacts:
    """Toy walkthrough: the thresholded prior alone is the change map."""
    from .synthetic import make_toy

    out_dir = Path(out_dir)
    out = Outputs()
    cfg = apply_overrides(PipelineConfig(), {**PRESET_DEFAULTS["toy"], "seed": str(seed),
                                             "patch_size": str(patch_size), "stride": str(stride)}).validate()
    write_config_snapshot(cfg, out, out_dir)
    x, y, truth = make_toy(cfg.seed)
    xn, yn = prepare(R.Raster(x), cfg.x_transform), prepare(R.Raster(y), cfg.y_transform)
    pm = compute_prior(xn, yn, cfg.affinity())
    cmap = threshold_map(pm.alpha)
    rep = binary_metrics(cmap.mask, truth, pm.alpha)
    R.save(R.Raster(x.astype(np.float32)), out.path(out_dir / "x.hcdr"))
    R.save(R.Raster(y.astype(np.float32)), out.path(out_dir / "y.hcdr"))
    R.save_png(truth, out.path(out_dir / "truth.png"))
    R.save(pm.as_raster(), out.path(out_dir / "alpha.hcdr"))
    R.save_png(pm.alpha, out.path(out_dir / "alpha.png"), value_range=(0.0, 1.0))
    R.save_png(cmap.mask, out.path(out_dir / "map.png"))
    R.save_png(confusion_map(cmap.mask, truth), out.path(out_dir / "confusion.png"))
    write_report(rep, out.path(out_dir / "metrics.csv"))
    art = Artifacts({p.name: p for p in out.pending}, rep)
    out.commit()
    return art


def synthesize(preset: str, seed: int):
    from .synthetic import make_toy, make_scene, SceneSpec

    if preset == "toy":
        return make_toy(seed)
    if preset == "scene":
        return make_scene(SceneSpec(seed=seed))
    raise ValueError(f"unknown preset {preset!r}")


# presets write raw SAR-like intensities for X
PRESET_DEFAULTS = {"toy": {"x_transform": "log", "patch_size": "8", "stride": "8", "multiscale": "false"},
                   "scene": {"x_transform": "log"}}
