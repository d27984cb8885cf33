"""Pipeline configuration: one JSON file, command-line overrides on top."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .captions import CaptionConstraints, EndpointConfig
from .dataset import DatasetConfig
from .embed import EncoderDims
from .errors import ConfigError
from .morphology import StageClass, StageParams, default_stage_params
from .train import TrainConfig

PROVIDERS = ("template", "remote")


@dataclass
class RemoteConfig:
    url: str = ""
    model: str = ""
    api_key_env: str = "MYCOCLIP_API_KEY"
    timeout: float = 30.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    max_inflight: int = 4
    replay_dir: str | None = None
    record_dir: str | None = None

    def endpoint(self) -> EndpointConfig:
        return EndpointConfig(
            url=self.url, model=self.model, api_key_env=self.api_key_env, timeout=self.timeout,
            max_attempts=self.max_attempts, backoff_base=self.backoff_base,
            max_inflight=self.max_inflight, record_dir=self.record_dir,
        )


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "run"
    threads: int = 1
    count_per_class: int = 300
    canvas: int = 64
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    image_ext: str = "png"
    stage_params: dict[StageClass, StageParams] = field(default_factory=default_stage_params)
    captions: CaptionConstraints = field(default_factory=CaptionConstraints)
    provider: str = "template"
    remote: RemoteConfig = field(default_factory=RemoteConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    eval_split: str = "val"
    prototype_mode: str = "mean"

    @property
    def run_dir(self) -> Path:
        return Path(self.out)

    @property
    def data_dir(self) -> Path:
        return self.run_dir / "data"

    @property
    def train_dir(self) -> Path:
        return self.run_dir / "train"

    @property
    def eval_dir(self) -> Path:
        return self.run_dir / "eval"

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            count_per_class=self.count_per_class,
            canvas=self.canvas,
            master_seed=self.seed,
            split_fractions=tuple(self.split_fractions),
            stage_params=self.stage_params,
            captions=self.captions,
            image_ext=self.image_ext,
            out_dir=str(self.data_dir),
            workers=self.threads,
        )

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed, prototype_mode=self.prototype_mode)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "threads": self.threads,
            "dataset": {
                "count_per_class": self.count_per_class,
                "canvas": self.canvas,
                "split_fractions": list(self.split_fractions),
                "image_ext": self.image_ext,
                "stage_params": {s.label: p.to_dict() for s, p in sorted(self.stage_params.items())},
            },
            "captions": {
                "provider": self.provider,
                **dataclasses.asdict(self.captions),
                "remote": dataclasses.asdict(self.remote),
            },
            "train": {k: v for k, v in self.train_config().to_dict().items() if k not in ("seed", "prototype_mode")},
            "eval": {"split": self.eval_split, "prototype_mode": self.prototype_mode},
        }

    def digest(self) -> str:
        """Hash of the content-determining settings (run location and worker count excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("out", "threads")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _take(section: dict, key: str, kind, where: str, default=None):
    if key not in section:
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    wrong_type = not isinstance(value, kind)
    if isinstance(value, bool) and kind is not bool:
        wrong_type = True
    if wrong_type:
        raise ConfigError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {value!r}")
    return value


def _check_keys(section: Any, allowed, where: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(sorted(unknown))}")
    return section


def _dataclass_from(cls, section: dict, where: str, base=None):
    """Build ``cls`` from ``section``, starting from ``base`` (or defaults)."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    _check_keys(section, names, where)
    kwargs = {}
    for key, value in section.items():
        default = getattr(base, key) if base is not None else names[key].default
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected a list, got {value!r}")
            value = tuple(value)
        elif isinstance(default, bool):
            value = _take(section, key, bool, where)
        elif isinstance(default, int):
            value = _take(section, key, int, where)
        elif isinstance(default, float):
            value = _take(section, key, float, where)
        elif isinstance(default, str):
            value = _take(section, key, str, where)
        kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    _check_keys(raw, ("seed", "out", "threads", "dataset", "captions", "train", "eval"), "config")
    cfg.seed = _take(raw, "seed", int, "config", cfg.seed)
    cfg.out = _take(raw, "out", str, "config", cfg.out)
    cfg.threads = _take(raw, "threads", int, "config", cfg.threads)

    ds = _check_keys(raw.get("dataset", {}), ("count_per_class", "canvas", "split_fractions", "image_ext", "stage_params"), "dataset")
    cfg.count_per_class = _take(ds, "count_per_class", int, "dataset", cfg.count_per_class)
    cfg.canvas = _take(ds, "canvas", int, "dataset", cfg.canvas)
    fr = _take(ds, "split_fractions", list, "dataset", list(cfg.split_fractions))
    if len(fr) != 3 or not all(isinstance(x, (int, float)) for x in fr):
        raise ConfigError("dataset.split_fractions: expected three numbers")
    cfg.split_fractions = tuple(float(x) for x in fr)
    cfg.image_ext = _take(ds, "image_ext", str, "dataset", cfg.image_ext)
    sp = _check_keys(ds.get("stage_params", {}), [s.label for s in StageClass], "dataset.stage_params")
    for label, section in sp.items():
        stage = StageClass.parse(label)
        cfg.stage_params[stage] = _dataclass_from(StageParams, section, f"dataset.stage_params.{label}",
                                                  cfg.stage_params[stage])

    cap = dict(raw.get("captions", {}))
    _check_keys(cap, {*(f.name for f in dataclasses.fields(CaptionConstraints)), "provider", "remote"}, "captions")
    cfg.provider = _take(cap, "provider", str, "captions", cfg.provider)
    if cfg.provider not in PROVIDERS:
        raise ConfigError(f"captions.provider: must be one of {', '.join(PROVIDERS)}")
    cfg.remote = _dataclass_from(RemoteConfig, cap.pop("remote", {}), "captions.remote", cfg.remote)
    cap.pop("provider", None)
    cfg.captions = _dataclass_from(CaptionConstraints, cap, "captions", cfg.captions)

    tr = dict(raw.get("train", {}))
    dims = tr.pop("dims", None)
    if "seed" in tr or "prototype_mode" in tr:
        raise ConfigError("train: seed and prototype_mode are set at the top level and in eval")
    cfg.train = _dataclass_from(TrainConfig, tr, "train", cfg.train)
    if dims is not None:
        cfg.train = dataclasses.replace(cfg.train, dims=_dataclass_from(EncoderDims, dims, "train.dims", cfg.train.dims))

    ev = _check_keys(raw.get("eval", {}), ("split", "prototype_mode"), "eval")
    cfg.eval_split = _take(ev, "split", str, "eval", cfg.eval_split)
    cfg.prototype_mode = _take(ev, "prototype_mode", str, "eval", cfg.prototype_mode)
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
