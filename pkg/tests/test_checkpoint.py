import pytest
import torch

from diffprobe.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from diffprobe.hashing import file_sha256
from diffprobe.layers import ParamStore, ema_update
from diffprobe.training import build_denoiser


@pytest.fixture
def saved(tiny_config, tmp_path):
    model = build_denoiser(tiny_config)
    store = ParamStore(model)
    ema_update(store, 0.999)
    with torch.no_grad():
        model.conv_out.weight.fill_(0.25)
    snapshot = tiny_config.model_dump(mode="json", exclude={"output_dir", "workers"})
    path = tmp_path / "ckpt" / "best.dprb"
    digest = save_checkpoint(path, model, store.shadow, snapshot, {"epoch": 3})
    return path, digest, model, store


def test_round_trip(saved, tiny_config):
    path, digest, model, store = saved
    checkpoint = load_checkpoint(path)

    assert checkpoint.sha256 == digest == file_sha256(path)
    assert checkpoint.extra == {"epoch": 3}
    assert checkpoint.num_timesteps == tiny_config.schedule.T
    assert checkpoint.denoiser_config == tiny_config.model
    for name, tensor in model.state_dict().items():
        assert torch.equal(checkpoint.live[name], tensor), name
    for name, tensor in store.shadow.items():
        assert torch.equal(checkpoint.ema[name], tensor), name


def test_build_denoiser_prefers_ema_and_is_frozen(saved):
    path, _, model, store = saved
    checkpoint = load_checkpoint(path)

    ema_model = checkpoint.build_denoiser()
    assert not ema_model.training
    assert not any(p.requires_grad for p in ema_model.parameters())
    assert torch.equal(ema_model.conv_out.weight, store.shadow["conv_out.weight"])

    live_model = checkpoint.build_denoiser(use_ema=False)
    assert torch.all(live_model.conv_out.weight == 0.25)


def test_saving_is_byte_stable(saved, tmp_path):
    path, digest, model, store = saved
    checkpoint = load_checkpoint(path)
    again = save_checkpoint(tmp_path / "copy.dprb", model, store.shadow, checkpoint.config, {"epoch": 3})
    assert again == digest


def test_wrong_magic(tmp_path):
    path = tmp_path / "bogus.dprb"
    path.write_bytes(b"NOPE1" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="is not a DPRB1 checkpoint"):
        load_checkpoint(path)


def test_truncated_file(saved, tmp_path):
    path, *_ = saved
    truncated = tmp_path / "truncated.dprb"
    truncated.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="Truncated tensor"):
        load_checkpoint(truncated)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="Failed to read checkpoint"):
        load_checkpoint(tmp_path / "missing.dprb")
