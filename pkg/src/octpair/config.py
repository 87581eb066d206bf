"""Pipeline configuration: YAML sections, presets and the resolved-config hash."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .models import EncoderConfig
from .phantom import STUDY_INSERTION_COUNTS, SceneLayout, acquisition_config
from .preprocess import PreprocessConfig
from .splits import FRACTION_GRID
from .sweep import SweepSpec
from .training import RunConfig

# Desk-scale acquisition: 1 kHz instead of the 91 kHz device rate, with the
# averaging window scaled by the same factor (1000 * 1000 / 91000 ~ 11).
DEFAULTS = {
    "seed": 0,
    "simulate": {
        "counts": dict(STUDY_INSERTION_COUNTS),
        "acquisition": {
            "a_scan_rate": 1000.0,
            "insertion_velocity": 100.0,
            "depth_samples": 256,
            "noise_floor": 0.02,
            "attenuation_length": 200.0,
            "motion_length": 80.0,
            "fresh_contrast": 0.5,
            "speckle_decorrelation": 0.004,
            "phase_noise_gain": 0.5,
        },
        "layout": {
            "n_layers": [3, 5],
            "duration": [20.0, 60.0],
            "min_layer_fraction": 0.12,
            "param_jitter": 0.15,
        },
    },
    "preprocess": {
        "window": 11,
        "depth_lo": 0,
        "depth_hi": None,
        "uncertainty_half_width": 2,
        "crop_w": 256,
        "crop_h": 250,
    },
    "model": {
        "architecture": "resnet18_style",
        "embed_dim": 512,
        "widths": [16, 32, 64],
        "pretrained_weights": None,
    },
    "objectives": {"temperature": 0.1, "symmetric": False},
    "train": {
        "batch_size": 28,
        "epochs": 100,
        "pretrain_epochs": 100,
        "learning_rate": 1e-4,
        "pretrain_learning_rate": 1e-4,
        "deterministic": False,
    },
    "sweep": {
        "n_folds": 3,
        "inits": ["scratch", "generic_pretrained", "contrastive_checkpoint"],
        "fractions": list(FRACTION_GRID),
        "modality_modes": ["dual", "intensity_only", "phase_only"],
        "modality_fractions": None,
        "modality_init": "contrastive_checkpoint",
        "workers": 1,
    },
}

# values replaced wholesale instead of merged key by key
_LEAF_DICTS = {("simulate", "counts")}
# execution details that do not change any result
_UNHASHED = {("sweep", "workers")}

PAPER_GRID = {
    "model": {"architecture": "resnet18_style", "embed_dim": 512},
    "objectives": {"temperature": 0.1},
    "train": {"batch_size": 28, "epochs": 100, "pretrain_epochs": 100},
    "sweep": {
        "n_folds": 3,
        "inits": ["scratch", "generic_pretrained", "contrastive_checkpoint"],
        "fractions": list(FRACTION_GRID),
        "modality_modes": ["dual", "intensity_only", "phase_only"],
        "modality_fractions": None,
    },
}


class ConfigError(ValueError):
    pass


def _default_at(path: tuple):
    node = DEFAULTS
    for key in path:
        node = node[key]
    return node


def _check_type(value, default, where: str):
    # keys whose default is None are optional and accept null
    if default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, (list, tuple))
        value = list(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def merge(base: dict, override: dict, path: tuple = ()) -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys are errors."""
    if not isinstance(override, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be a mapping")
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        default = base[key]
        if isinstance(default, dict) and path + (key,) not in _LEAF_DICTS:
            out[key] = merge(default, value or {}, path + (key,))
        elif path + (key,) in _LEAF_DICTS:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = dict(value)
        else:
            out[key] = _check_type(value, _default_at(path + (key,)), where)
    return out


def toy_preset() -> dict:
    text = resources.files("octpair").joinpath("data/toy.yaml").read_text()
    return yaml.safe_load(text)


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return data or {}


class PipelineConfig:
    """Resolved configuration: defaults, then presets and files, then CLI overrides."""

    def __init__(self, data: dict):
        self.data = merge(DEFAULTS, data)
        self._validate()

    @classmethod
    def resolve(
        cls,
        path=None,
        toy: bool = False,
        paper_grid: bool = False,
        seed: Optional[int] = None,
        workers: Optional[int] = None,
    ) -> "PipelineConfig":
        data = copy.deepcopy(DEFAULTS)
        if toy:
            data = merge(data, toy_preset())
        if path is not None:
            data = merge(data, load_yaml(path))
        if paper_grid:
            data = merge(data, PAPER_GRID)
        if seed is not None:
            data = merge(data, {"seed": int(seed)})
        if workers is not None:
            data = merge(data, {"sweep": {"workers": int(workers)}})
        return cls(data)

    def _validate(self) -> None:
        # building every typed view surfaces range errors at load time
        try:
            self.insertion_base()
            self.layout()
            self.preprocess()
            self.encoder()
            self.run_config()
            self.sweep_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.data["sweep"]["workers"] < 1:
            raise ConfigError("sweep.workers must be >= 1")

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def insertion_base(self):
        return acquisition_config(**self.data["simulate"]["acquisition"])

    def layout(self) -> SceneLayout:
        return SceneLayout(**self.data["simulate"]["layout"])

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(**self.data["preprocess"])

    def encoder(self) -> EncoderConfig:
        m = self.data["model"]
        return EncoderConfig(m["architecture"], m["embed_dim"], widths=tuple(m["widths"]))

    def run_config(self) -> RunConfig:
        t = self.data["train"]
        o = self.data["objectives"]
        return RunConfig(
            batch_size=t["batch_size"],
            epochs=t["epochs"],
            pretrain_epochs=t["pretrain_epochs"],
            learning_rate=t["learning_rate"],
            pretrain_learning_rate=t["pretrain_learning_rate"],
            temperature=o["temperature"],
            symmetric=o["symmetric"],
            seed=self.seed,
        )

    def sweep_spec(self) -> SweepSpec:
        s = self.data["sweep"]
        return SweepSpec(
            inits=tuple(s["inits"]),
            fractions=tuple(s["fractions"]),
            modality_modes=tuple(s["modality_modes"]),
            modality_fractions=None if s["modality_fractions"] is None else tuple(s["modality_fractions"]),
            modality_init=s["modality_init"],
            n_folds=s["n_folds"],
        )

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def section_hash(self, *sections: str) -> str:
        """Hash over the named sections (all when none given), minus execution-only keys."""
        data = copy.deepcopy(self.data)
        for section, key in _UNHASHED:
            data[section].pop(key, None)
        if sections:
            data = {k: data[k] for k in sections}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def config_hash(self) -> str:
        return self.section_hash()
