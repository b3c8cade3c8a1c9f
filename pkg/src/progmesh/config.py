"""TOML run configuration: one document for dataset, pipeline and training settings."""
import dataclasses
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .networks import NetConfig
from .synth.dataset import DatasetConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineSection:
    """Grid geometry relative to the template plus network settings."""
    global_resolution: int = 16
    local_resolution: int = 8
    extent_factor: float = 1.2       # global grid span / template bbox diagonal
    local_ratio: float = 0.25        # local spacing / global spacing
    fusion: str = "mean_std"
    rotate_global: bool = False
    rotate_local: bool = True
    net: NetConfig = field(default_factory=NetConfig)

    def build(self, hierarchy):
        from .pipeline import PipelineConfig
        return PipelineConfig.for_template(
            hierarchy.full, hierarchy.depth, global_resolution=self.global_resolution,
            local_resolution=self.local_resolution, extent_factor=self.extent_factor,
            local_ratio=self.local_ratio, fusion=self.fusion, rotate_global=self.rotate_global,
            rotate_local=self.rotate_local, net=NetConfig(**dataclasses.asdict(self.net)))


def _train_default(stage, iterations):
    return lambda: TrainConfig(stage=stage, iterations=iterations)


@dataclass
class EvalSection:
    scan_factor: int = 10
    n_thresholds: int = 51


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    train_global: TrainConfig = field(default_factory=_train_default("global", 2000))
    train_local: TrainConfig = field(default_factory=_train_default("local", 1000))
    eval: EvalSection = field(default_factory=EvalSection)
    model_seed: int = 7


def _from_dict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"[{where}] must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kw = {}
    for name, value in d.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            merged = dataclasses.asdict(default)
            merged.update(value if isinstance(value, dict) else {})
            if not isinstance(value, dict):
                raise ConfigError(f"[{where}.{name}] must be a table")
            kw[name] = _from_dict(type(default), merged, f"{where}.{name}" if where else name)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'root'}]: {exc}") from exc


def config_from_dict(d):
    base = to_dict(RunConfig())
    merged = {}
    for k, v in d.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            merged[k] = {**base[k], **v}
        else:
            merged[k] = v
    return _from_dict(RunConfig, merged, "")


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def set_value(cfg, dotted, value):
    """Apply a ``section.key=value`` override (value already typed)."""
    d = to_dict(cfg)
    node = d
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config section {p!r} in {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value
    return config_from_dict(d)


def save_toml(path, doc):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        tomli_w.dump(doc, fh)


def save_config(path, cfg):
    save_toml(path, to_dict(cfg))
