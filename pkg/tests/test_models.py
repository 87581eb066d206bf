import numpy as np
import pytest
import torch

from octpair.models import (
    CheckpointError,
    EncoderConfig,
    HeadConfig,
    TissueNet,
    classify,
    encode,
    init_weights,
    load_checkpoint,
    load_model,
    parameter_digest,
    replicate_channels,
    save_checkpoint,
    save_model,
    scratch_model,
)

TINY = EncoderConfig("tiny_conv", 32, widths=(8, 8, 16))


def _crop(rng):
    return replicate_channels(rng.random((250, 256)).astype(np.float32))


def test_replicate_channels(rng):
    x = rng.random((4, 5))
    y = replicate_channels(x)
    assert y.shape == (4, 5, 3)
    assert all(np.array_equal(y[:, :, c], x) for c in range(3))
    with pytest.raises(ValueError):
        replicate_channels(np.zeros((2, 2, 2)))


def test_resnet_embedding_shape(rng):
    model = scratch_model(EncoderConfig(), "dual", seed=0)
    z = encode(_crop(rng), "f", model, "intensity")
    assert z.vector.shape == (512,) and z.source_modality == "intensity"
    assert np.all(np.isfinite(z.vector))


def test_head_dims():
    assert HeadConfig("dual", 512).layer_dims == [1024, 512, 4]
    assert HeadConfig("phase_only", 512).layer_dims == [512, 512, 4]
    model = TissueNet(TINY, "intensity_only")
    assert model.head[0].in_features == 32 and model.head[-1].out_features == 4


def test_classify_logits(rng):
    model = scratch_model(TINY, "dual", seed=1)
    crop = _crop(rng)
    zi = encode(crop, "f", model, "intensity")
    zp = encode(crop, "g", model, "phase")
    logits = classify([zi, zp], model)
    assert logits.shape == (4,)
    # agrees with the batched forward path
    with torch.no_grad():
        model.eval()
        batched = model(torch.tensor(crop[:, :, 0])[None], torch.tensor(crop[:, :, 0])[None])[0].numpy()
    assert np.allclose(logits, batched, atol=1e-5)


def test_branch_and_modality_mismatch(rng):
    model = scratch_model(TINY, "dual", seed=1)
    crop = _crop(rng)
    with pytest.raises(ValueError):
        encode(crop, "f", model, "phase")
    with pytest.raises(ValueError):
        encode(crop, "h", model, "intensity")
    with pytest.raises(ValueError):
        encode(crop[:, :, 0], "f", model, "intensity")
    bad = crop.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        encode(bad, "f", model, "intensity")
    zi = encode(crop, "f", model, "intensity")
    with pytest.raises(ValueError):
        classify([zi], model)
    single = scratch_model(TINY, "phase_only", seed=1)
    with pytest.raises(ValueError):
        classify([zi], single)
    with pytest.raises(ValueError):
        single(x_int=torch.zeros(1, 250, 256))


def test_scratch_init_seeded_and_branches_differ():
    a = scratch_model(TINY, "dual", seed=3)
    b = scratch_model(TINY, "dual", seed=3)
    assert parameter_digest(a) == parameter_digest(b)
    assert parameter_digest(a.f) != parameter_digest(a.g)
    assert parameter_digest(scratch_model(TINY, "dual", seed=4)) != parameter_digest(a)


def test_checkpoint_roundtrip(tmp_path):
    src = scratch_model(TINY, "dual", seed=9)
    path = save_checkpoint(tmp_path / "ck.pt", src, seed=9)
    model = init_weights("contrastive_checkpoint", TINY, "dual", seed=0, checkpoint_path=path)
    assert parameter_digest(model.f) == parameter_digest(src.f)
    assert parameter_digest(model.g) == parameter_digest(src.g)
    assert load_checkpoint(path)["seed"] == 9


def test_checkpoint_errors(tmp_path):
    path = save_checkpoint(tmp_path / "ck.pt", scratch_model(TINY, "dual", 0), seed=0)
    other = EncoderConfig("tiny_conv", 64, widths=(8, 8, 16))
    with pytest.raises(CheckpointError):
        init_weights("contrastive_checkpoint", other, checkpoint_path=path)
    with pytest.raises(CheckpointError):
        init_weights("contrastive_checkpoint", TINY)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    with pytest.raises(ValueError):
        init_weights("imagenet", TINY)


def test_generic_pretrained_needs_local_weights(tmp_path, monkeypatch):
    monkeypatch.setenv("OCTPAIR_IMAGENET_WEIGHTS", str(tmp_path / "missing.pth"))
    monkeypatch.setattr(torch.hub, "get_dir", lambda: str(tmp_path))
    with pytest.raises(FileNotFoundError):
        init_weights("generic_pretrained", EncoderConfig())
    with pytest.raises(CheckpointError):
        init_weights("generic_pretrained", TINY)


def test_generic_pretrained_loads_local_file(tmp_path):
    from torchvision.models import resnet18

    torch.manual_seed(0)
    state = resnet18(weights=None).state_dict()
    torch.save(state, tmp_path / "w.pth")
    model = init_weights("generic_pretrained", EncoderConfig(), pretrained_path=str(tmp_path / "w.pth"))
    assert torch.equal(model.f.conv1.weight, state["conv1.weight"])
    assert torch.equal(model.g.conv1.weight, state["conv1.weight"])


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig("vgg")
    with pytest.raises(ValueError):
        EncoderConfig("resnet18_style", 128)
    with pytest.raises(ValueError):
        HeadConfig("triple")


def test_save_load_model(tmp_path, rng):
    model = scratch_model(TINY, "phase_only", seed=2)
    path = save_model(tmp_path / "m.pt", model, {"fold": 1})
    back = load_model(path)
    assert back.mode == "phase_only" and not back.training
    assert parameter_digest(back) == parameter_digest(model)
    x = torch.tensor(rng.random((2, 250, 256)), dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        assert torch.equal(model(x_phs=x), back(x_phs=x))
    with pytest.raises(CheckpointError):
        load_model(save_checkpoint(tmp_path / "ck.pt", model, 0))
