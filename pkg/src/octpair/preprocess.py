"""Raw insertion records to labeled, aligned intensity/phase crop pairs.

Pipeline per insertion: assemble M-scans, average over time, crop rows,
label averaged columns from the boundary ground truth, then tile
non-overlapping windows along time.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels, arrayio
from .phantom import CLASS_INDEX, TISSUE_CLASSES, RawInsertionRecord, iter_insertions

log = logging.getLogger(__name__)

MODALITIES = ("intensity", "phase")
EXCLUDED = -1
CROP_H = 250
CROP_W = 256
REFERENCE_WINDOW = 1000
CROP_FORMAT_VERSION = 1
CROP_MANIFEST_NAME = "crops.json"


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class MScan:
    data: np.ndarray  # height x width
    modality: str
    insertion_id: str = ""
    columns_per_cell: int = 1

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise PreprocessError(f"unknown modality {self.modality!r}")
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise PreprocessError(f"M-scan must be a non-empty 2-D array, got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ColumnLabels:
    labels: np.ndarray  # class index per averaged column, EXCLUDED = -1
    uncertainty_half_width: int

    @property
    def width(self) -> int:
        return self.labels.shape[0]

    def names(self) -> list:
        return ["EXCLUDED" if c == EXCLUDED else TISSUE_CLASSES[c] for c in self.labels]


@dataclass
class CropPair:
    intensity: np.ndarray  # crop_h x crop_w
    phase: np.ndarray
    time_window_index: int
    insertion_id: str
    label: Optional[int] = None  # class index
    column_start: int = 0

    @property
    def label_name(self) -> Optional[str]:
        return None if self.label is None else TISSUE_CLASSES[self.label]


def assemble_mscan(record: RawInsertionRecord, modality: str) -> MScan:
    """Side-by-side A-scans of one modality (a view, not a copy)."""
    if modality == "intensity":
        data = record.intensity
    elif modality == "phase":
        data = record.phase
    else:
        raise PreprocessError(f"unknown modality {modality!r}")
    if record.intensity.shape != record.phase.shape:
        raise PreprocessError("intensity and phase arrays differ in shape")
    return MScan(data, modality, record.insertion_id, 1)


def temporal_average(mscan: MScan, window: int = REFERENCE_WINDOW) -> MScan:
    """Mean over consecutive, non-overlapping blocks of ``window`` columns.

    Intensity is averaged directly. Phase is averaged in its temporal
    difference representation: the wrapped column-to-column difference per
    depth row (zero into column 0), which is what carries motion.
    """
    if window < 1:
        raise PreprocessError("window must be >= 1")
    if mscan.columns_per_cell != 1:
        raise PreprocessError("M-scan is already averaged")
    if window > mscan.width:
        raise PreprocessError(f"window {window} exceeds M-scan width {mscan.width}")
    n_out = mscan.width // window
    if mscan.modality == "intensity":
        blocks = mscan.data[:, : n_out * window].reshape(mscan.height, n_out, window)
        out = blocks.mean(axis=2, dtype=np.float64).astype(np.float32)
    else:
        out = np.empty((mscan.height, n_out), dtype=np.float32)
        _kernels.phase_difference_mean(np.ascontiguousarray(mscan.data), window, out)
    return MScan(out, mscan.modality, mscan.insertion_id, window)


def spatial_crop(mscan: MScan, depth_lo: int, depth_hi: int, min_height: int = CROP_H) -> MScan:
    if not 0 <= depth_lo < depth_hi <= mscan.height:
        raise PreprocessError(f"invalid row range [{depth_lo}, {depth_hi}) for height {mscan.height}")
    if depth_hi - depth_lo < min_height:
        raise PreprocessError(f"row range {depth_hi - depth_lo} shorter than crop height {min_height}")
    return MScan(mscan.data[depth_lo:depth_hi], mscan.modality, mscan.insertion_id, mscan.columns_per_cell)


def raw_classes(record: RawInsertionRecord) -> np.ndarray:
    """Class index of every raw A-scan, expanded from ``boundary_times``."""
    T = record.n_ascans
    out = np.empty(T, dtype=np.int64)
    times = [t for t, _ in record.boundary_times] + [T]
    for (t, name), t_next in zip(record.boundary_times, times[1:]):
        out[t:t_next] = CLASS_INDEX[name]
    return out


def label_columns(record: RawInsertionRecord, window: int, uncertainty_half_width: int = 2) -> ColumnLabels:
    """Majority class per averaged column, with cells near boundaries EXCLUDED."""
    if window < 1 or uncertainty_half_width < 0:
        raise PreprocessError("window must be >= 1 and half width >= 0")
    n_out = record.n_ascans // window
    classes = raw_classes(record)[: n_out * window].reshape(n_out, window)
    counts = np.stack([(classes == c).sum(axis=1) for c in range(len(TISSUE_CLASSES))], axis=1)
    best = counts.max(axis=1, keepdims=True)
    # ties go to the class present at the start of the cell
    first = classes[:, 0]
    tied_first = counts[np.arange(n_out), first] == best[:, 0]
    labels = np.where(tied_first, first, counts.argmax(axis=1)).astype(np.int64)
    h = uncertainty_half_width
    for t, _ in record.boundary_times[1:]:
        cell = t // window
        labels[max(0, cell - h) : max(0, min(n_out, cell + h + 1))] = EXCLUDED
    return ColumnLabels(labels, h)


def extract_crops(
    intensity: MScan,
    phase: MScan,
    labels: ColumnLabels,
    crop_w: int = CROP_W,
    crop_h: int = CROP_H,
) -> list:
    """Tile the time axis with non-overlapping ``crop_h`` x ``crop_w`` windows."""
    if intensity.modality != "intensity" or phase.modality != "phase":
        raise PreprocessError("expected an intensity and a phase M-scan")
    if intensity.data.shape != phase.data.shape:
        raise PreprocessError("intensity and phase M-scans differ in shape")
    if intensity.height < crop_h:
        raise PreprocessError(f"M-scan height {intensity.height} < crop height {crop_h}")
    if labels.width != intensity.width:
        raise PreprocessError("column labels do not match M-scan width")
    crops = []
    for k in range(intensity.width // crop_w):
        c0 = k * crop_w
        cols = labels.labels[c0 : c0 + crop_w]
        uniq = np.unique(cols)
        label = int(uniq[0]) if uniq.size == 1 and uniq[0] != EXCLUDED else None
        crops.append(
            CropPair(
                intensity=np.array(intensity.data[:crop_h, c0 : c0 + crop_w], dtype=np.float32),
                phase=np.array(phase.data[:crop_h, c0 : c0 + crop_w], dtype=np.float32),
                time_window_index=k,
                insertion_id=intensity.insertion_id,
                label=label,
                column_start=c0,
            )
        )
    return crops


@dataclass(frozen=True)
class PreprocessConfig:
    window: int = REFERENCE_WINDOW
    depth_lo: int = 0
    depth_hi: Optional[int] = None
    uncertainty_half_width: int = 2
    crop_w: int = CROP_W
    crop_h: int = CROP_H


def preprocess_record(record: RawInsertionRecord, config: PreprocessConfig = PreprocessConfig()) -> list:
    """Full per-insertion pipeline: record to crop pairs."""
    if record.n_ascans < config.window:
        return []
    hi = record.intensity.shape[0] if config.depth_hi is None else config.depth_hi
    scans = []
    for modality in MODALITIES:
        m = temporal_average(assemble_mscan(record, modality), config.window)
        scans.append(spatial_crop(m, config.depth_lo, hi, config.crop_h))
    labels = label_columns(record, config.window, config.uncertainty_half_width)
    return extract_crops(scans[0], scans[1], labels, config.crop_w, config.crop_h)


def crops_from_mscans(intensity, phase, column_labels, insertion_id, config=PreprocessConfig()) -> list:
    """Entry point for externally acquired, already averaged M-scans.

    Decoding vendor OCT files is not supported; callers supply averaged
    intensity and phase arrays plus per-column class indices (EXCLUDED
    where unknown).
    """
    labels = ColumnLabels(np.asarray(column_labels, dtype=np.int64), config.uncertainty_half_width)
    hi = intensity.shape[0] if config.depth_hi is None else config.depth_hi
    i = spatial_crop(MScan(np.asarray(intensity, np.float32), "intensity", insertion_id, config.window), config.depth_lo, hi, config.crop_h)
    p = spatial_crop(MScan(np.asarray(phase, np.float32), "phase", insertion_id, config.window), config.depth_lo, hi, config.crop_h)
    return extract_crops(i, p, labels, config.crop_w, config.crop_h)


# --------------------------------------------------------------------------
# crop collections and the on-disk crop store


@dataclass
class CropSet:
    """Stacked crop pairs; ``labels`` holds -1 for unlabeled crops."""

    intensity: np.ndarray  # N x H x W
    phase: np.ndarray
    labels: np.ndarray
    insertion_ids: np.ndarray  # N strings
    time_window_index: np.ndarray
    meat_class: dict = field(default_factory=dict)  # insertion id -> meat class

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def from_pairs(cls, pairs: Sequence[CropPair], meat_class=None) -> "CropSet":
        if not pairs:
            raise PreprocessError("no crops")
        return cls(
            intensity=np.stack([p.intensity for p in pairs]).astype(np.float32),
            phase=np.stack([p.phase for p in pairs]).astype(np.float32),
            labels=np.array([-1 if p.label is None else p.label for p in pairs], dtype=np.int64),
            insertion_ids=np.array([p.insertion_id for p in pairs]),
            time_window_index=np.array([p.time_window_index for p in pairs], dtype=np.int64),
            meat_class=dict(meat_class or {}),
        )

    def subset(self, index) -> "CropSet":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return CropSet(
            self.intensity[index],
            self.phase[index],
            self.labels[index],
            self.insertion_ids[index],
            self.time_window_index[index],
            self.meat_class,
        )

    def from_insertions(self, ids) -> np.ndarray:
        """Indices of crops belonging to any of ``ids``."""
        return np.flatnonzero(np.isin(self.insertion_ids, list(ids)))

    def labeled(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def label_counts(self) -> dict:
        out = {name: 0 for name in TISSUE_CLASSES}
        out["unlabeled"] = 0
        for c in self.labels:
            out["unlabeled" if c < 0 else TISSUE_CLASSES[c]] += 1
        return out


def write_crop_store(pairs_by_insertion: dict, out_dir, meat_class: dict, config: PreprocessConfig, extra=None) -> Path:
    """Persist crops as one stacked array per insertion and modality plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    files = {}
    for ins_id in sorted(pairs_by_insertion):
        pairs = pairs_by_insertion[ins_id]
        if not pairs:
            continue
        d = out_dir / ins_id
        d.mkdir(exist_ok=True)
        arrayio.write_array(d / "intensity.f32", np.stack([p.intensity for p in pairs]), "intensity")
        arrayio.write_array(d / "phase.f32", np.stack([p.phase for p in pairs]), "phase")
        files[ins_id] = ins_id
        for slot, p in enumerate(pairs):
            entries.append(
                {
                    "crop_id": f"{ins_id}/{p.time_window_index:04d}",
                    "insertion_id": ins_id,
                    "time_window_index": p.time_window_index,
                    "column_start": p.column_start,
                    "slot": slot,
                    "label": p.label_name or "unlabeled",
                }
            )
    manifest = {
        "kind": "octpair-crops",
        "format_version": CROP_FORMAT_VERSION,
        "class_index": {name: i for i, name in enumerate(TISSUE_CLASSES)},
        "preprocess": config.__dict__,
        "meat_class": {k: meat_class[k] for k in sorted(pairs_by_insertion) if k in meat_class},
        "files": files,
        "crops": entries,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / CROP_MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_crop_store(path) -> CropSet:
    path = Path(path)
    if path.is_dir():
        path = path / CROP_MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"crop manifest {path} not found")
    manifest = json.loads(path.read_text())
    if manifest.get("kind") != "octpair-crops":
        raise PreprocessError(f"{path} is not a crop manifest")
    if manifest.get("format_version") != CROP_FORMAT_VERSION:
        raise PreprocessError(f"unsupported crop format {manifest.get('format_version')}")
    arrays = {}
    for ins_id, rel in manifest["files"].items():
        a, _ = arrayio.read_array(path.parent / rel / "intensity.f32")
        b, _ = arrayio.read_array(path.parent / rel / "phase.f32")
        arrays[ins_id] = (a, b)
    crops = manifest["crops"]
    return CropSet(
        intensity=np.stack([arrays[c["insertion_id"]][0][c["slot"]] for c in crops]),
        phase=np.stack([arrays[c["insertion_id"]][1][c["slot"]] for c in crops]),
        labels=np.array([-1 if c["label"] == "unlabeled" else CLASS_INDEX[c["label"]] for c in crops], dtype=np.int64),
        insertion_ids=np.array([c["insertion_id"] for c in crops]),
        time_window_index=np.array([c["time_window_index"] for c in crops], dtype=np.int64),
        meat_class=manifest["meat_class"],
    )


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def simulate_crops(counts: dict, base_config, master_seed: int, layout=None, config: PreprocessConfig = PreprocessConfig()):
    """Simulate a dataset and preprocess it in memory.

    Returns ``(CropSet, pairs_by_insertion, meat_class)``; raw records are
    dropped as soon as their crops are cut.
    """
    pairs_by_insertion, meat_class = {}, {}
    for plan, record in iter_insertions(counts, base_config, master_seed, layout):
        pairs_by_insertion[plan.insertion_id] = preprocess_record(record, config)
        meat_class[plan.insertion_id] = plan.meat_class
    pairs = [p for k in sorted(pairs_by_insertion) for p in pairs_by_insertion[k]]
    return CropSet.from_pairs(pairs, meat_class), pairs_by_insertion, meat_class
