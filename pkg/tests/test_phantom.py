import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octpair import arrayio
from octpair.phantom import (
    DatasetManifest,
    InsertionConfig,
    SceneError,
    SceneLayout,
    SpeckleParams,
    PhaseParams,
    TISSUE_CLASSES,
    TissueLayerSpec,
    acquisition_config,
    default_tissue_table,
    generate_dataset,
    generate_insertion,
    load_record,
    needle_class_indices,
    plan_dataset,
    save_record,
    wrap_phase,
)
from octpair.preprocess import raw_classes
from oracles import class_at_index
from conftest import layered_config


def test_single_layer_record():
    cfg = InsertionConfig((TissueLayerSpec.of("gelatin", None),), insertion_velocity=50.0, a_scan_rate=1000, duration=1.0)
    rec = generate_insertion(cfg)
    assert rec.intensity.shape == rec.phase.shape == (256, 1000)
    assert rec.boundary_times == [(0, "gelatin")]


def test_closed_form_crossing_time():
    layers = (TissueLayerSpec.of("gelatin", 100), TissueLayerSpec.of("beef", None))
    cfg = InsertionConfig(layers, insertion_velocity=100.0, a_scan_rate=1000, duration=1.5)
    assert generate_insertion(cfg).boundary_times == [(0, "gelatin"), (1000, "beef")]


def test_bit_identical_and_seed_sensitive(small_config):
    a = generate_insertion(small_config)
    b = generate_insertion(small_config)
    assert a.intensity.tobytes() == b.intensity.tobytes()
    assert a.phase.tobytes() == b.phase.tobytes()
    c = generate_insertion(small_config.replace(seed=1))
    assert not np.array_equal(a.intensity, c.intensity)


def test_record_invariants(small_config):
    rec = generate_insertion(small_config)
    assert rec.n_ascans == round(small_config.a_scan_rate * small_config.duration)
    assert rec.intensity.min() >= 0
    assert rec.phase.min() > -np.pi and rec.phase.max() <= np.pi
    times = [t for t, _ in rec.boundary_times]
    assert times[0] == 0 and rec.boundary_times[0][1] == "gelatin"
    assert all(t1 > t0 for t0, t1 in zip(times, times[1:]))


@settings(max_examples=25, deadline=None)
@given(
    thick=st.lists(st.integers(1, 200), min_size=1, max_size=4),
    velocity=st.floats(5.0, 400.0),
    rate=st.sampled_from([200.0, 1000.0]),
    meat=st.sampled_from(["beef", "pork", "turkey"]),
)
def test_boundary_consistency(thick, velocity, rate, meat):
    layers = [TissueLayerSpec.of("gelatin" if k % 2 == 0 else meat, t) for k, t in enumerate(thick)]
    layers.append(TissueLayerSpec.of("gelatin" if len(thick) % 2 == 0 else meat, None))
    cfg = InsertionConfig(tuple(layers), insertion_velocity=velocity, a_scan_rate=rate, duration=2.0)
    classes = needle_class_indices(cfg)
    expected = [class_at_index(cfg, t) for t in range(cfg.n_ascans)]
    assert [TISSUE_CLASSES[c] for c in classes] == expected
    # the record's boundary list expands to the same labels
    rec = generate_insertion(cfg.replace(depth_samples=250))
    assert [TISSUE_CLASSES[c] for c in raw_classes(rec)] == expected


def test_class_statistics_separation():
    """Mean column intensity and mean |phase step| differ by >= 3 noise floors for every class pair."""
    noise = acquisition_config(insertion_velocity=100.0).noise_floor
    for seed in range(4):
        stats = {}
        for cls in TISSUE_CLASSES:
            layers = (TissueLayerSpec.of("gelatin", 1), TissueLayerSpec.of(cls, None))
            cfg = InsertionConfig(layers, insertion_velocity=100.0, a_scan_rate=1000, duration=1.2, seed=seed)
            rec = generate_insertion(cfg)
            window = slice(100, 1100)
            steps = wrap_phase(np.diff(rec.phase[:, window], axis=1))
            stats[cls] = (rec.intensity[:, window].mean(), np.abs(steps).mean())
        for a, b in itertools.combinations(TISSUE_CLASSES, 2):
            assert abs(stats[a][0] - stats[b][0]) >= 3 * noise, (seed, a, b, "intensity")
            assert abs(stats[a][1] - stats[b][1]) >= 3 * noise, (seed, a, b, "phase")


def test_config_validation():
    g = TissueLayerSpec.of("gelatin", None)
    with pytest.raises(SceneError):
        InsertionConfig((TissueLayerSpec.of("beef", None),), insertion_velocity=1.0)
    with pytest.raises(SceneError):
        InsertionConfig((g,), insertion_velocity=1.0, depth_samples=249)
    with pytest.raises(SceneError):
        InsertionConfig((g,), insertion_velocity=1.0, a_scan_rate=0)
    with pytest.raises(SceneError):
        InsertionConfig((TissueLayerSpec.of("gelatin", None), g), insertion_velocity=1.0)
    # finite scene that the needle leaves before the recording ends
    with pytest.raises(SceneError):
        InsertionConfig((TissueLayerSpec.of("gelatin", 10),), insertion_velocity=100.0, duration=1.0)
    with pytest.raises(ValueError):
        SpeckleParams(reflectivity=1.5, grain=2, contrast=0.3)
    with pytest.raises(ValueError):
        PhaseParams(drift=0.1, jitter=-1.0)
    with pytest.raises(ValueError):
        TissueLayerSpec.of("gelatin", 0)


def test_default_table_covers_all_classes():
    table = default_tissue_table()
    assert set(table) == set(TISSUE_CLASSES)
    for speckle, _ in table.values():
        assert 0 <= speckle.reflectivity <= 1 and 0 <= speckle.contrast <= 1 and speckle.grain >= 1


def test_wrap_phase_range(rng):
    x = rng.uniform(-50, 50, 10_000)
    w = wrap_phase(np.concatenate([x, [np.pi, -np.pi, 3 * np.pi]]))
    assert w.min() > -np.pi and w.max() <= np.pi
    assert np.allclose(np.exp(1j * w[:-3]), np.exp(1j * x))
    assert w[-3] == pytest.approx(np.pi) and w[-2] == pytest.approx(np.pi)


def test_record_roundtrip(tmp_path, small_config):
    rec = generate_insertion(small_config.replace(duration=0.5), "x-1")
    save_record(rec, tmp_path / "x-1")
    back = load_record(tmp_path / "x-1")
    assert np.array_equal(back.intensity, rec.intensity)
    assert np.array_equal(back.phase, rec.phase)
    assert back.boundary_times == rec.boundary_times
    assert back.config == rec.config


def test_array_format(tmp_path, rng):
    data = rng.standard_normal((7, 5)).astype(np.float32)
    arrayio.write_array(tmp_path / "a.f32", data, "phase")
    back, modality = arrayio.read_array(tmp_path / "a.f32")
    assert modality == "phase" and np.array_equal(back, data)
    raw = (tmp_path / "a.f32").read_bytes()
    assert raw[:6] == b"OCTARR"
    assert raw.endswith(data.astype("<f4").tobytes())
    (tmp_path / "bad.f32").write_bytes(b"NOTARR" + raw[6:])
    with pytest.raises(arrayio.ArrayFormatError):
        arrayio.read_array(tmp_path / "bad.f32")
    (tmp_path / "short.f32").write_bytes(raw[:-4])
    with pytest.raises(arrayio.ArrayFormatError):
        arrayio.read_array(tmp_path / "short.f32")


def test_plan_dataset_study_counts():
    base = acquisition_config(insertion_velocity=100.0)
    plans = plan_dataset({"beef": 34, "pork": 14, "turkey": 18}, base, master_seed=0)
    assert len(plans) == 66
    assert len({p.seed for p in plans}) == 66
    for p in plans:
        seq = p.config.layer_sequence
        assert seq[0].tissue_class == "gelatin" and seq[-1].thickness is None
        assert 3 <= len(seq) <= 5 and 20 <= p.config.duration <= 60
        assert {layer.tissue_class for layer in seq} == {"gelatin", p.meat_class}
    with pytest.raises(SceneError):
        plan_dataset({"beef": 0}, base, 0)
    with pytest.raises(SceneError):
        plan_dataset({"chicken": 1}, base, 0)


def test_generate_dataset_manifest_and_guard(tmp_path):
    base = acquisition_config(insertion_velocity=50.0, a_scan_rate=200.0, depth_samples=250)
    layout = SceneLayout(n_layers=(3, 3), duration=(2.0, 3.0))
    counts = {"beef": 1, "pork": 1, "turkey": 1}
    m1 = generate_dataset(counts, base, 9, tmp_path / "a", layout)
    m2 = generate_dataset(counts, base, 9, tmp_path / "b", layout)
    assert len(m1.insertions) == 3 and len({i["seed"] for i in m1.insertions}) == 3
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    before = (tmp_path / "a/manifest.json").read_bytes()
    with pytest.raises(FileExistsError):
        generate_dataset(counts, base, 10, tmp_path / "a", layout)
    assert (tmp_path / "a/manifest.json").read_bytes() == before
    loaded = DatasetManifest.load(tmp_path / "a")
    assert loaded.class_counts() == counts
    rec = loaded.load_record("pork-000")
    assert rec.config.layer_sequence[1].tissue_class == "pork"
    doc = json.loads(before)
    assert doc["format_version"] == 1 and doc["tissue_table_version"] >= 1


def test_layered_fixture_has_two_crossings():
    rec = generate_insertion(layered_config(duration=2.0))
    assert [c for _, c in rec.boundary_times] == ["gelatin", "beef", "gelatin"]
    assert [t for t, _ in rec.boundary_times] == [0, 800, 1400]
