"""TOML run configuration mapped one-to-one onto the typed configs.

Sections: ``[model]`` (DiTConfig), ``[condense]`` (CondenseConfig minus the
model), ``[diffusion]`` (DiffusionSchedule), ``[sigma_fit]`` (SigmaFitConfig)
and ``[train]`` (TrainConfig). Any unknown section or key is an error.
"""

from dataclasses import asdict, dataclass, field, fields

import tomli

from .condense import CondenseConfig, SigmaFitConfig, TrainConfig
from .diffusion import DiffusionSchedule
from .dit import DiTConfig
from .errors import ConfigurationError


@dataclass
class RunConfig:
    model: DiTConfig = field(default_factory=lambda: DiTConfig(depth=8, backing="factorized"))
    condense: CondenseConfig = field(default_factory=CondenseConfig)
    diffusion: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    sigma_fit: SigmaFitConfig = field(default_factory=SigmaFitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        cond = asdict(self.condense)
        cond.pop("model")
        return {
            "model": self.model.to_dict(),
            "condense": cond,
            "diffusion": self.diffusion.to_dict(),
            "sigma_fit": asdict(self.sigma_fit),
            "train": asdict(self.train),
        }


def _take(cls, section, values, skip=()):
    if not isinstance(values, dict):
        raise ConfigurationError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return dict(values)


def parse_config(doc):
    sections = {"model", "condense", "diffusion", "sigma_fit", "train"}
    unknown = sorted(set(doc) - sections)
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
    model_kw = _take(DiTConfig, "model", doc.get("model", {}))
    diff_kw = _take(DiffusionSchedule, "diffusion", doc.get("diffusion", {}))
    if "timesteps" in model_kw and "timesteps" in diff_kw and model_kw["timesteps"] != diff_kw["timesteps"]:
        raise ConfigurationError("[model].timesteps and [diffusion].timesteps disagree")
    steps = diff_kw.get("timesteps", model_kw.get("timesteps", DiffusionSchedule.timesteps))
    model_kw["timesteps"] = diff_kw["timesteps"] = steps
    model_kw.setdefault("backing", "factorized")
    model_kw.setdefault("depth", 8)
    try:
        model = DiTConfig(**model_kw)
        diffusion = DiffusionSchedule(**diff_kw)
        condense = CondenseConfig(model=model, **_take(CondenseConfig, "condense", doc.get("condense", {}), skip=("model",)))
        sigma_fit = SigmaFitConfig(**_take(SigmaFitConfig, "sigma_fit", doc.get("sigma_fit", {})))
        train = TrainConfig(**_take(TrainConfig, "train", doc.get("train", {})))
    except TypeError as e:
        raise ConfigurationError(str(e)) from None
    return RunConfig(model, condense, diffusion, sigma_fit, train)


def load_config(path):
    with open(path, "rb") as f:
        try:
            doc = tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from None
    return parse_config(doc)
