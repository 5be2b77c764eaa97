import struct

import numpy as np
import pytest
import torch

from f3.checkpoint import (CRCMismatchError, Checkpoint, CheckpointError, CheckpointVersionError,
                           ShapeMismatchError, UnknownSectionError, decode_checkpoint, encode_checkpoint,
                           load_checkpoint, load_into_module, module_sections, save_checkpoint)
from f3.field import FeatureFieldModel, SmootherConfig
from f3.hashgrid import HashGridConfig
from f3.train import PredictorHead


def sample(rng):
    return Checkpoint({"b": [1, 2], "a": {"x": 0.5}},
                      {"w": rng.normal(size=(3, 4)).astype(np.float32), "scalar": np.float32(2.0).reshape(()),
                       "t": rng.normal(size=(2, 1, 5)).astype(np.float32)})


def test_round_trip_is_byte_identical(tmp_path, rng):
    ck = sample(rng)
    save_checkpoint(tmp_path / "a.f3ck", ck)
    back = load_checkpoint(tmp_path / "a.f3ck")
    assert back.config == ck.config
    for k in ck.sections:
        assert np.array_equal(back.sections[k], ck.sections[k]) and back.sections[k].shape == ck.sections[k].shape
    save_checkpoint(tmp_path / "b.f3ck", back)
    assert (tmp_path / "a.f3ck").read_bytes() == (tmp_path / "b.f3ck").read_bytes()


def test_header_layout(rng):
    raw = encode_checkpoint(sample(rng))
    assert raw[:4] == b"F3CK" and struct.unpack_from("<H", raw, 4)[0] == 1


def test_crc_detects_corruption(rng):
    raw = bytearray(encode_checkpoint(sample(rng)))
    raw[-10] ^= 0xFF
    with pytest.raises(CRCMismatchError):
        decode_checkpoint(bytes(raw))


def test_version_and_magic_errors(rng):
    import zlib
    raw = bytearray(encode_checkpoint(sample(rng)))
    raw[4:6] = struct.pack("<H", 9)
    body = bytes(raw[:-4])
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(CheckpointError, match="not an F3CK"):
        decode_checkpoint(b"NOPE" + bytes(raw[4:]))


def test_partial_load_and_missing_section(rng):
    raw = encode_checkpoint(sample(rng))
    part = decode_checkpoint(raw, sections={"w"})
    assert set(part.sections) == {"w"} and part.config == {"a": {"x": 0.5}, "b": [1, 2]}
    assert decode_checkpoint(raw, sections=set()).sections == {}
    with pytest.raises(UnknownSectionError, match="nope"):
        decode_checkpoint(raw, sections={"nope"})


def small_model():
    grid = HashGridConfig(levels=2, table_size=2**8, r_min=(4, 4, 1), r_max=(8, 8, 2), extent=(8, 8, 4))
    return FeatureFieldModel(grid, SmootherConfig(blocks=1, channels=4, receptive_field=7), seed=3)


def test_module_round_trip():
    src, dst = small_model(), FeatureFieldModel(small_model().grid, small_model().smoother_config, seed=9)
    load_into_module(dst, module_sections(src, "f3."), "f3.")
    for (k, a), (_, b) in zip(src.state_dict().items(), dst.state_dict().items()):
        assert torch.equal(a, b), k


def test_module_errors_name_the_section():
    model = small_model()
    secs = module_sections(model, "f3.")
    bad = dict(secs)
    bad["f3.tables"] = np.zeros((1, 2, 3), dtype=np.float32)
    with pytest.raises(ShapeMismatchError, match="f3.tables"):
        load_into_module(model, bad, "f3.")
    extra = dict(secs)
    extra["f3.ghost"] = np.zeros(1, dtype=np.float32)
    with pytest.raises(UnknownSectionError, match="f3.ghost"):
        load_into_module(model, extra, "f3.")
    partial = {k: v for k, v in secs.items() if k != "f3.tables"}
    with pytest.raises(UnknownSectionError, match="tables"):
        load_into_module(model, partial, "f3.")
    load_into_module(model, partial, "f3.", strict=False)


def test_head_sections_are_independent():
    head = PredictorHead(4, 4)
    secs = module_sections(head, "head.")
    assert set(secs) == {"head.weight", "head.bias"}
