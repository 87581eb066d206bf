"""Synthetic needle-insertion recordings.

A phantom is a stack of tissue layers along the insertion axis. The needle
advances at constant velocity; each A-scan looks ``depth_samples`` ahead of
the tip. Intensity is class-conditioned multiplicative speckle (a texture
frozen in tissue coordinates times a fast-decorrelating component) with
exponential attenuation in depth. Phase accumulates a per-class drift plus
jitter between consecutive A-scans and is stored wrapped into (-pi, pi].
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import yaml

from . import _kernels, arrayio
from .seeding import derive_seed

log = logging.getLogger(__name__)

TISSUE_CLASSES = ("gelatin", "pork", "beef", "turkey")
CLASS_INDEX = {name: i for i, name in enumerate(TISSUE_CLASSES)}
MEAT_CLASSES = ("beef", "pork", "turkey")
STUDY_INSERTION_COUNTS = {"beef": 34, "pork": 14, "turkey": 18}

DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"

# Insertions are synthesized in blocks of A-scans to bound peak memory.
_CHUNK = 8192
_BANK = 1 << 20


class SceneError(ValueError):
    """Raised for physically under-specified or invalid phantom scenes."""


@dataclass(frozen=True)
class SpeckleParams:
    reflectivity: float
    grain: float
    contrast: float

    def __post_init__(self):
        if not 0.0 <= self.reflectivity <= 1.0:
            raise SceneError(f"reflectivity {self.reflectivity} outside [0, 1]")
        if not 0.0 <= self.contrast <= 1.0:
            raise SceneError(f"contrast {self.contrast} outside [0, 1]")
        if self.grain < 1:
            raise SceneError(f"grain scale {self.grain} < 1")


@dataclass(frozen=True)
class PhaseParams:
    drift: float
    jitter: float

    def __post_init__(self):
        if self.jitter < 0:
            raise SceneError(f"jitter {self.jitter} < 0")
        if abs(self.drift) >= math.pi:
            raise SceneError(f"drift {self.drift} rad/A-scan aliases (|drift| >= pi)")


@dataclass(frozen=True)
class TissueLayerSpec:
    """One layer of a phantom. ``thickness=None`` marks a terminal layer."""

    tissue_class: str
    thickness: Optional[int]
    speckle: SpeckleParams
    phase: PhaseParams

    def __post_init__(self):
        if self.tissue_class not in CLASS_INDEX:
            raise SceneError(f"unknown tissue class {self.tissue_class!r}")
        if self.thickness is not None and int(self.thickness) < 1:
            raise SceneError(f"layer thickness {self.thickness} < 1")

    @classmethod
    def of(cls, tissue_class: str, thickness: Optional[int], table=None):
        """Layer with the class's parameters from the default table."""
        table = table or default_tissue_table()
        speckle, phase = table[tissue_class]
        return cls(tissue_class, thickness, speckle, phase)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TissueLayerSpec":
        return cls(
            tissue_class=d["tissue_class"],
            thickness=None if d["thickness"] is None else int(d["thickness"]),
            speckle=SpeckleParams(**d["speckle"]),
            phase=PhaseParams(**d["phase"]),
        )


@dataclass(frozen=True)
class InsertionConfig:
    layer_sequence: tuple
    insertion_velocity: float  # depth samples per second
    a_scan_rate: float = 1000.0
    duration: float = 40.0
    depth_samples: int = 256
    noise_floor: float = 0.02
    seed: int = 0
    attenuation_length: float = 200.0
    motion_length: float = 80.0
    fresh_contrast: float = 0.5
    speckle_decorrelation: float = 0.004  # seconds
    phase_noise_gain: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "layer_sequence", tuple(self.layer_sequence))
        if not self.layer_sequence:
            raise SceneError("layer_sequence is empty")
        if self.layer_sequence[0].tissue_class != "gelatin":
            raise SceneError("first layer must be gelatin")
        for layer in self.layer_sequence[:-1]:
            if layer.thickness is None:
                raise SceneError("only the last layer may be terminal")
        if self.a_scan_rate <= 0 or self.duration <= 0:
            raise SceneError("a_scan_rate and duration must be positive")
        if self.insertion_velocity < 0:
            raise SceneError("insertion_velocity must be non-negative")
        if self.depth_samples < 250:
            raise SceneError(f"depth_samples {self.depth_samples} < 250")
        if self.noise_floor < 0:
            raise SceneError("noise_floor must be non-negative")
        if not 0.0 <= self.fresh_contrast <= 1.0:
            raise SceneError("fresh_contrast outside [0, 1]")
        if self.attenuation_length <= 0 or self.motion_length <= 0:
            raise SceneError("attenuation/motion lengths must be positive")
        if self.n_ascans < 1:
            raise SceneError("duration x a_scan_rate rounds to zero A-scans")
        terminal = self.layer_sequence[-1].thickness is None
        if not terminal:
            total = sum(layer.thickness for layer in self.layer_sequence)
            if self.needle_depth(self.n_ascans - 1) >= total:
                raise SceneError(
                    "needle passes the last layer before the recording ends and "
                    "no terminal layer is given"
                )

    @property
    def n_ascans(self) -> int:
        return int(round(self.a_scan_rate * self.duration))

    def needle_depth(self, t):
        return np.asarray(t, dtype=np.float64) * self.insertion_velocity / self.a_scan_rate

    def layer_edges(self) -> np.ndarray:
        """Cumulative start depth of every layer (length = n_layers)."""
        th = [layer.thickness or 0 for layer in self.layer_sequence[:-1]]
        return np.concatenate([[0.0], np.cumsum(th, dtype=np.float64)])

    def scene_end(self) -> float:
        last = self.layer_sequence[-1]
        if last.thickness is None:
            return math.inf
        return float(self.layer_edges()[-1] + last.thickness)

    def replace(self, **changes) -> "InsertionConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layer_sequence"] = [layer.to_dict() for layer in self.layer_sequence]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InsertionConfig":
        d = dict(d)
        d["layer_sequence"] = tuple(TissueLayerSpec.from_dict(x) for x in d["layer_sequence"])
        return cls(**d)


@dataclass
class RawInsertionRecord:
    intensity: np.ndarray  # depth_samples x T
    phase: np.ndarray  # depth_samples x T, wrapped into (-pi, pi]
    boundary_times: list  # [(a-scan index, tissue class entered), ...]
    config: InsertionConfig
    insertion_id: str = ""

    @property
    def n_ascans(self) -> int:
        return self.intensity.shape[1]

    def needle_classes(self) -> np.ndarray:
        return needle_class_indices(self.config)


def _load_table(text: str):
    raw = yaml.safe_load(text)
    table = {}
    for name in TISSUE_CLASSES:
        entry = raw["classes"][name]
        table[name] = (SpeckleParams(**entry["speckle"]), PhaseParams(**entry["phase"]))
    return int(raw["version"]), table


_DEFAULT_TABLE = None


def default_tissue_table() -> dict:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        text = resources.files("octpair").joinpath("data/tissue_params.yaml").read_text()
        _DEFAULT_TABLE = _load_table(text)
    return _DEFAULT_TABLE[1]


def tissue_table_version() -> int:
    default_tissue_table()
    return _DEFAULT_TABLE[0]


def load_tissue_table(path) -> dict:
    return _load_table(Path(path).read_text())[1]


def wrap_phase(x: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    y = x - (2 * np.pi) * np.rint(x / (2 * np.pi))
    return np.where(y <= -np.pi, y + 2 * np.pi, y)


def _layer_lookup(config: InsertionConfig, depth: np.ndarray) -> np.ndarray:
    """Layer index at tissue depth; ``n_layers`` means beyond the scene."""
    idx = np.searchsorted(config.layer_edges(), depth, side="right") - 1
    idx = np.maximum(idx, 0)
    end = config.scene_end()
    if math.isfinite(end):
        idx = np.where(depth >= end, len(config.layer_sequence), idx)
    return idx


def needle_class_indices(config: InsertionConfig) -> np.ndarray:
    """Class index in front of the needle tip for every A-scan."""
    layers = _layer_lookup(config, config.needle_depth(np.arange(config.n_ascans)))
    lut = np.array([CLASS_INDEX[x.tissue_class] for x in config.layer_sequence], dtype=np.int64)
    return lut[layers]


def boundary_times_from_classes(classes: np.ndarray) -> list:
    change = np.flatnonzero(np.diff(classes)) + 1
    idx = np.concatenate([[0], change])
    return [(int(t), TISSUE_CLASSES[int(classes[t])]) for t in idx]


def _frozen_texture(config: InsertionConfig, length: int, rng: np.random.Generator) -> np.ndarray:
    """Speckle texture in tissue coordinates, one sample per depth unit."""
    grid = np.arange(length, dtype=np.float64)
    layer_of = _layer_lookup(config, grid)
    tex = np.ones(length, dtype=np.float64)
    for k, layer in enumerate(config.layer_sequence):
        mask = layer_of == k
        c = layer.speckle.contrast
        # drawn for every layer so the stream does not depend on layer extents
        g = max(1, int(round(layer.speckle.grain)))
        if c == 0:
            rng.standard_normal(1)
            continue
        # mean of g iid Gamma(1/(g c^2), g c^2) has mean 1 and std c
        raw = rng.gamma(1.0 / (g * c * c), g * c * c, size=length + g)
        smooth = np.convolve(raw, np.ones(g) / g, mode="valid")[:length]
        tex[mask] = smooth[mask]
    return tex


def generate_insertion(config: InsertionConfig, insertion_id: str = "") -> RawInsertionRecord:
    """Simulate one insertion; bit-identical for equal configs.

    Per-sample randomness is read from per-insertion banks of normal and
    gamma variates at random per-column offsets, which keeps generation
    cheap at full-scale A-scan rates.
    """
    rng = np.random.default_rng(config.seed)
    T, D = config.n_ascans, config.depth_samples
    layers = config.layer_sequence
    f32 = np.float32

    # row n_layers is the void beyond a finite scene
    refl = np.array([x.speckle.reflectivity for x in layers] + [0.0], dtype=f32)
    drift = np.array([x.phase.drift for x in layers] + [0.0], dtype=f32)
    jitter = np.array([x.phase.jitter for x in layers] + [0.0], dtype=f32)

    depth = np.arange(D)
    atten = np.exp(-depth / config.attenuation_length).astype(f32)
    motion = np.exp(-depth / config.motion_length).astype(f32)

    tex_len = int(math.ceil(float(config.needle_depth(T)) + D)) + 2
    texture = _frozen_texture(config, tex_len, rng).astype(f32)
    phi = rng.uniform(-np.pi, np.pi, size=D)

    # phase noise grows where the attenuated signal nears the noise floor
    mean_refl = float(np.mean(refl[:-1]))
    noise = config.noise_floor
    phase_floor = (
        config.phase_noise_gain * noise / (mean_refl * atten + noise + 1e-12)
    ).astype(f32)

    run = _kernels.RUN
    noise_bank = rng.standard_normal(_BANK, dtype=f32)
    fc = config.fresh_contrast
    if fc > 0:
        fresh_bank = rng.gamma(1.0 / (fc * fc), fc * fc, size=_BANK // 4).astype(f32)
    else:
        fresh_bank = np.empty(0, dtype=f32)
    hold = max(1, int(round(config.a_scan_rate * config.speckle_decorrelation)))

    intensity = np.empty((D, T), dtype=f32)
    phase = np.empty((D, T), dtype=f32)
    for t0 in range(0, T, _CHUNK):
        n = min(T, t0 + _CHUNK) - t0
        n_runs = -(-n // run)
        fresh_idx = np.arange(t0, t0 + n) // hold
        fresh_idx -= fresh_idx[0]
        n_fresh = -(-(int(fresh_idx[-1]) + 1) // run)
        fresh_off = rng.integers(0, max(1, fresh_bank.size - run), size=(D, n_fresh))
        int_off = rng.integers(0, _BANK - run, size=(D, n_runs))
        phs_off = rng.integers(0, _BANK - run, size=(D, n_runs))
        _kernels.synth_block(
            config.needle_depth(np.arange(t0, t0 + n)),
            config.layer_edges()[1:], config.scene_end(), len(layers),
            refl, drift, jitter, texture, atten, motion, phase_floor,
            fresh_bank, fresh_off, fresh_idx, noise_bank, int_off, phs_off, noise,
            phi, intensity[:, t0 : t0 + n], phase[:, t0 : t0 + n],
        )

    classes = needle_class_indices(config)
    return RawInsertionRecord(
        intensity=intensity,
        phase=phase,
        boundary_times=boundary_times_from_classes(classes),
        config=config,
        insertion_id=insertion_id,
    )


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SceneLayout:
    """How per-insertion layer stacks are drawn for a dataset.

    Each insertion alternates gelatin and its meat class, starting in
    gelatin; the last layer is terminal. Durations of the crossed layers
    are split from the recording duration so every layer is reached.
    """

    n_layers: tuple = (3, 5)
    duration: tuple = (20.0, 60.0)
    min_layer_fraction: float = 0.12
    param_jitter: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "n_layers", tuple(int(x) for x in self.n_layers))
        object.__setattr__(self, "duration", tuple(float(x) for x in self.duration))
        lo, hi = self.n_layers
        if not 2 <= lo <= hi:
            raise SceneError("n_layers range must satisfy 2 <= lo <= hi")
        if not 0 < self.duration[0] <= self.duration[1]:
            raise SceneError("invalid duration range")
        if not 0 <= self.min_layer_fraction < 1.0 / hi:
            raise SceneError("min_layer_fraction too large for the layer count")
        if self.param_jitter < 0:
            raise SceneError("param_jitter must be non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


@dataclass(frozen=True)
class InsertionPlan:
    insertion_id: str
    meat_class: str
    seed: int
    config: InsertionConfig


def _jittered(speckle: SpeckleParams, phase: PhaseParams, rng, amount: float):
    if amount == 0:
        rng.standard_normal(2)
        return speckle, phase
    a, b = np.exp(amount * rng.standard_normal(2))
    refl = float(min(1.0, speckle.reflectivity * a))
    drift = float(np.clip(phase.drift * b, -3.0, 3.0))
    return dataclasses.replace(speckle, reflectivity=refl), dataclasses.replace(phase, drift=drift)


def plan_insertion(meat_class, base_config, layout, seed, table=None) -> InsertionConfig:
    """Draw the layer stack for one insertion of a phantom with ``meat_class``."""
    table = table or default_tissue_table()
    rng = np.random.default_rng(derive_seed(seed, "layout"))
    n = int(rng.integers(layout.n_layers[0], layout.n_layers[1] + 1))
    duration = float(rng.uniform(*layout.duration))
    params = {
        name: _jittered(*table[name], rng, layout.param_jitter) for name in ("gelatin", meat_class)
    }
    frac = rng.dirichlet(np.full(n, 4.0))
    frac = layout.min_layer_fraction + frac * (1.0 - n * layout.min_layer_fraction)
    travel = duration * base_config.insertion_velocity
    layers = []
    for k in range(n):
        name = "gelatin" if k % 2 == 0 else meat_class
        thickness = None if k == n - 1 else max(1, int(round(frac[k] * travel)))
        layers.append(TissueLayerSpec(name, thickness, *params[name]))
    return base_config.replace(layer_sequence=tuple(layers), duration=duration, seed=seed)


def plan_dataset(counts: dict, base_config, master_seed: int, layout=None) -> list:
    layout = layout or SceneLayout()
    plans = []
    for meat in MEAT_CLASSES:
        if meat not in counts:
            continue
        if int(counts[meat]) < 1:
            raise SceneError(f"insertion count for {meat} must be >= 1")
        for k in range(int(counts[meat])):
            seed = derive_seed(master_seed, "insertion", meat, k)
            config = plan_insertion(meat, base_config, layout, seed)
            plans.append(InsertionPlan(f"{meat}-{k:03d}", meat, seed, config))
    unknown = set(counts) - set(MEAT_CLASSES)
    if unknown:
        raise SceneError(f"unknown meat classes {sorted(unknown)}")
    return plans


def iter_insertions(counts, base_config, master_seed, layout=None) -> Iterator:
    """Yield ``(plan, record)`` without touching disk."""
    for plan in plan_dataset(counts, base_config, master_seed, layout):
        yield plan, generate_insertion(plan.config, plan.insertion_id)


@dataclass
class DatasetManifest:
    root: Path
    master_seed: int
    insertions: list  # dicts: id, meat_class, seed, path, n_ascans
    base_config: dict = field(default_factory=dict)
    layout: dict = field(default_factory=dict)
    tissue_table_version: int = 1
    format_version: int = DATASET_FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "kind": "octpair-dataset",
            "format_version": self.format_version,
            "master_seed": self.master_seed,
            "tissue_table_version": self.tissue_table_version,
            "base_config": self.base_config,
            "layout": self.layout,
            "insertions": self.insertions,
        }

    def write(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        if d.get("kind") != "octpair-dataset":
            raise SceneError(f"{path} is not a dataset manifest")
        if d.get("format_version") != DATASET_FORMAT_VERSION:
            raise SceneError(f"unsupported dataset format {d.get('format_version')}")
        return cls(
            root=path.parent,
            master_seed=d["master_seed"],
            insertions=d["insertions"],
            base_config=d["base_config"],
            layout=d["layout"],
            tissue_table_version=d["tissue_table_version"],
        )

    def class_counts(self) -> dict:
        out = {}
        for ins in self.insertions:
            out[ins["meat_class"]] = out.get(ins["meat_class"], 0) + 1
        return out

    def meat_class_of(self) -> dict:
        return {ins["id"]: ins["meat_class"] for ins in self.insertions}

    def load_record(self, insertion_id: str) -> RawInsertionRecord:
        entry = next(x for x in self.insertions if x["id"] == insertion_id)
        return load_record(Path(self.root) / entry["path"])


def save_record(record: RawInsertionRecord, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrayio.write_array(directory / "intensity.f32", record.intensity, "intensity")
    arrayio.write_array(directory / "phase.f32", record.phase, "phase")
    meta = {
        "insertion_id": record.insertion_id,
        "boundary_times": [list(b) for b in record.boundary_times],
        "config": record.config.to_dict(),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_record(directory) -> RawInsertionRecord:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    intensity, m1 = arrayio.read_array(directory / "intensity.f32")
    phase, m2 = arrayio.read_array(directory / "phase.f32")
    if (m1, m2) != ("intensity", "phase"):
        raise arrayio.ArrayFormatError(f"{directory}: modality tags {m1}/{m2}")
    return RawInsertionRecord(
        intensity=intensity,
        phase=phase,
        boundary_times=[(int(t), c) for t, c in meta["boundary_times"]],
        config=InsertionConfig.from_dict(meta["config"]),
        insertion_id=meta["insertion_id"],
    )


def generate_dataset(
    per_class_insertion_counts: dict,
    base_config: InsertionConfig,
    master_seed: int,
    out_dir,
    layout: Optional[SceneLayout] = None,
    force: bool = False,
) -> DatasetManifest:
    """Simulate and persist every insertion, then write the manifest last."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / MANIFEST_NAME
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; overwrite with --force (force=True)")
    layout = layout or SceneLayout()
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for plan, record in iter_insertions(per_class_insertion_counts, base_config, master_seed, layout):
        save_record(record, out_dir / plan.insertion_id)
        entries.append(
            {
                "id": plan.insertion_id,
                "meat_class": plan.meat_class,
                "seed": plan.seed,
                "path": plan.insertion_id,
                "n_ascans": record.n_ascans,
            }
        )
        log.info("simulated %s (%d A-scans)", plan.insertion_id, record.n_ascans)
    base = base_config.to_dict()
    base.pop("layer_sequence")
    manifest = DatasetManifest(
        root=out_dir,
        master_seed=int(master_seed),
        insertions=entries,
        base_config=base,
        layout=layout.to_dict(),
        tissue_table_version=tissue_table_version(),
    )
    manifest.write()
    return manifest


def acquisition_config(**overrides) -> InsertionConfig:
    """Base config for datasets: a placeholder single-layer stack plus acquisition fields."""
    return InsertionConfig(layer_sequence=(TissueLayerSpec.of("gelatin", None),), **overrides)

