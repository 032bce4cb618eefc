import pytest
import torch

from conftest import tiny_config, with_random_lora
from tah.backbone import TaHModel
from tah.checkpoint import (Checkpoint, decode, encode, load, model_checkpoint, restore, save,
                            save_content_addressed)
from tah.decider import IterationDecider
from tah.errors import CheckpointError


def _ckpt():
    cfg = tiny_config()
    model = with_random_lora(TaHModel(cfg, seed=1))
    return model, model_checkpoint(model, IterationDecider(cfg, seed=2), meta={"step": 3},
                                   extra={"optim.m.x": torch.arange(4)})


def test_save_load_save_is_byte_identical(tmp_path):
    _, ck = _ckpt()
    a = save(tmp_path / "a.tah", ck)
    b = save(tmp_path / "b.tah", load(tmp_path / "a.tah"))
    assert a == b
    assert (tmp_path / "a.tah").read_bytes()[:4] == b"TAH1"


def test_restore_rebuilds_identical_model(tmp_path):
    model, ck = _ckpt()
    m2, dec = restore(decode(encode(ck)))
    tokens = torch.tensor([[1, 2, 3]])
    d = torch.tensor([[2, 1, 2]])
    assert torch.equal(model(tokens, depths=d), m2(tokens, depths=d))
    assert dec is not None
    assert decode(encode(ck)).header["meta"] == {"step": 3}


def test_dtypes_survive():
    ck = Checkpoint({"k": 1}, {"a": torch.ones(2, dtype=torch.float32), "b": torch.ones(1, dtype=torch.float64),
                               "c": torch.tensor([7]), "s": torch.tensor(2.5, dtype=torch.float64)})
    back = decode(encode(ck))
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and torch.equal(back.tensors[k], v)


def test_corrupt_files_raise(tmp_path):
    _, ck = _ckpt()
    data = encode(ck)
    with pytest.raises(CheckpointError):
        decode(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError):
        decode(data[:-3])
    with pytest.raises(CheckpointError):
        decode(data + b"\0")
    with pytest.raises(CheckpointError):
        load(tmp_path / "missing.tah")
    with pytest.raises(CheckpointError):
        encode(Checkpoint({}, {"x": torch.ones(1, dtype=torch.int8)}))


def test_content_addressed_names(tmp_path):
    _, ck = _ckpt()
    p1 = save_content_addressed(tmp_path, "m", ck)
    p2 = save_content_addressed(tmp_path, "m", ck)
    assert p1 == p2 and len(list(tmp_path.iterdir())) == 1
