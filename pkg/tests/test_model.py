import dataclasses

import pytest
import torch

from rapnet.cell import AblationFlags
from rapnet.errors import BadMagicError, DataError, ShapeError, TruncatedFileError
from rapnet.model import (
    ModelConfig,
    RAPNet,
    encode_checkpoint,
    forward_sequence,
    init_state,
    load_checkpoint,
    parameter_groups,
    read_checkpoint_header,
    save_checkpoint,
)
from rapnet.recall import LongMemory

TINY = ModelConfig(layers=2, hidden=4, n_regions=4, t_in=2, t_total=4, height=8, width=8, kernel_size=3)


def _frames(cfg, batch=2, t=None, dtype=torch.float32):
    return torch.rand(batch, t or cfg.t_total, cfg.frame_channels, cfg.height, cfg.width, dtype=dtype)


def test_config_roundtrip_and_validation():
    cfg = dataclasses.replace(TINY, flags=AblationFlags.from_variant("h"))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.memory_capacity == cfg.t_total and cfg.n_forecast == 2
    with pytest.raises(DataError):
        ModelConfig(t_in=5, t_total=5)
    with pytest.raises(DataError):
        ModelConfig.from_dict({**TINY.to_dict(), "bogus": 1})


@pytest.mark.parametrize("t_in,t_total", [(5, 15), (2, 4), (3, 7)])
def test_forward_emits_t_minus_one_frames(t_in, t_total):
    cfg = dataclasses.replace(TINY, t_in=t_in, t_total=t_total, height=8, width=8)
    model = RAPNet(cfg)
    out = forward_sequence(_frames(cfg), model, torch.ones(t_total - 1, dtype=torch.bool))
    assert out.shape == (2, t_total - 1, 1, 8, 8)
    forecast = out[:, t_in - 1:]
    assert forecast.shape[1] == t_total - t_in
    pred = model.predict(_frames(cfg, t=t_in))
    assert pred.shape == (2, t_total - t_in, 1, 8, 8)
    assert pred.min() >= 0 and pred.max() <= 1


def test_standard_config_forecasts_ten_frames():
    cfg = dataclasses.replace(TINY, t_in=5, t_total=15)
    assert RAPNet(cfg).predict(_frames(cfg, batch=1, t=5)).shape[1] == 10


def test_free_running_ignores_future_truth():
    model = RAPNet(TINY)
    frames = _frames(TINY)
    tampered = frames.clone()
    tampered[:, TINY.t_in:] = torch.rand_like(tampered[:, TINY.t_in:])
    free = torch.zeros(TINY.t_total - 1, dtype=torch.bool)
    with torch.no_grad():
        assert torch.equal(model(frames, free), model(tampered, free))
        assert torch.equal(model(frames, free), model(frames[:, :TINY.t_in]))


def test_teacher_forcing_reads_truth():
    model = RAPNet(TINY)
    frames = _frames(TINY)
    tampered = frames.clone()
    tampered[:, TINY.t_in] = 1 - tampered[:, TINY.t_in]
    forced = torch.ones(TINY.t_total - 1, dtype=torch.bool)
    with torch.no_grad():
        a, b = model(frames, forced), model(tampered, forced)
    assert torch.equal(a[:, :TINY.t_in], b[:, :TINY.t_in])
    assert not torch.equal(a[:, TINY.t_in:], b[:, TINY.t_in:])


def test_per_sample_teacher_mask():
    model = RAPNet(TINY)
    frames = _frames(TINY)
    mask = torch.zeros(2, TINY.t_total - 1, dtype=torch.bool)
    mask[0] = True
    with torch.no_grad():
        mixed = model(frames, mask)
        forced = model(frames, torch.ones_like(mask))
        free = model(frames, torch.zeros_like(mask))
    assert torch.equal(mixed[0], forced[0]) and torch.equal(mixed[1], free[1])


def test_input_contract_errors():
    model = RAPNet(TINY)
    with pytest.raises(ShapeError):
        model(torch.rand(2, 4, 1, 9, 8))
    with pytest.raises(DataError):
        model(_frames(TINY, t=3))
    with pytest.raises(DataError):
        model(_frames(TINY) * 2)
    with pytest.raises(DataError):
        model(_frames(TINY, t=2), torch.ones(3, dtype=torch.bool))
    with pytest.raises(ShapeError):
        model(_frames(TINY), torch.ones(5, dtype=torch.bool))


def test_ram_disabled_output_independent_of_buffer_contents():
    cfg = dataclasses.replace(TINY, flags=AblationFlags.from_variant("cell"))
    model = RAPNet(cfg)
    frames = _frames(cfg)
    clean = init_state(cfg, 2)
    dirty = init_state(cfg, 2)
    dirty.memories = [LongMemory(torch.randn_like(m.data) * 100, 0) for m in dirty.memories]
    with torch.no_grad():
        assert torch.equal(model(frames, state=clean), model(frames, state=dirty))


def test_ram_enabled_depends_on_history():
    model = RAPNet(TINY)
    frames = _frames(TINY)
    other = frames.clone()
    other[:, 0] = torch.rand_like(other[:, 0])
    with torch.no_grad():
        assert not torch.equal(model(frames)[:, -1], model(other)[:, -1])


def test_parameter_groups():
    full = parameter_groups(n for n, _ in RAPNet(TINY).named_parameters())
    expected = {"head"} | {f"cells.{l}.{g}" for l in range(2) for g in ("gates", "rab_x", "rab_h", "ram")}
    assert full == expected
    x_only = dataclasses.replace(TINY, flags=AblationFlags.from_variant("x"))
    assert parameter_groups(n for n, _ in RAPNet(x_only).named_parameters()) == {
        "head", "cells.0.gates", "cells.1.gates", "cells.0.rab_x", "cells.1.rab_x"
    }


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_roundtrip_bit_exact(tmp_path, dtype):
    model = RAPNet(TINY).to(dtype)
    path = tmp_path / "m.rapnet"
    payload = save_checkpoint(path, model, {"note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert loaded.cfg == TINY
    for (n1, a), (n2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and a.dtype == b.dtype and torch.equal(a, b)
    assert encode_checkpoint(loaded, {"note": "x"}) == payload
    frames = _frames(TINY, dtype=dtype)
    with torch.no_grad():
        assert torch.equal(model(frames), loaded(frames))
    assert read_checkpoint_header(path)["config"] == TINY.to_dict()


def test_checkpoint_is_deterministic():
    torch.manual_seed(5)
    a = encode_checkpoint(RAPNet(TINY))
    torch.manual_seed(5)
    b = encode_checkpoint(RAPNet(TINY))
    assert a == b


def test_checkpoint_corruption(tmp_path):
    payload = encode_checkpoint(RAPNet(TINY))
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOPE" + payload[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)
    bad.write_bytes(payload[:20])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(bad)
    bad.write_bytes(payload[:-3])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(bad)


def test_gradients_flow_to_every_parameter():
    model = RAPNet(TINY).double()
    out = model(_frames(TINY, dtype=torch.float64), torch.ones(TINY.t_total - 1, dtype=torch.bool))
    out.square().sum().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name
        if not name.endswith("proj_k.weight"):
            assert p.grad.abs().sum() > 0, name


def test_zero_parameters_generate_zero_frames():
    model = RAPNet(TINY)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        out = model(_frames(TINY))
    assert out.shape == (2, TINY.t_total - 1, 1, 8, 8)
    assert torch.all(out == 0)


def test_init_state_is_zero_and_seed_independent():
    cfg = dataclasses.replace(TINY, layers=4)
    torch.manual_seed(1)
    a = init_state(cfg, 2)
    torch.manual_seed(2)
    b = init_state(cfg, 2)
    assert len(a.h) == len(a.c) == len(a.memories) == 4
    assert all(m.fill_count == 0 for m in a.memories)
    for x, y in zip(a.h + a.c + [a.m], b.h + b.c + [b.m]):
        assert torch.all(x == 0) and torch.equal(x, y)


def test_single_layer_spatial_memory_chain():
    cfg = dataclasses.replace(TINY, layers=1, flags=AblationFlags(False, False, False))
    model = RAPNet(cfg).double()
    frames = _frames(cfg, batch=1, dtype=torch.float64)
    cell = model.cells[0]
    state = init_state(cfg, 1, torch.float64)
    h, c, m, mem = state.h[0], state.c[0], state.m, state.memories[0]
    expected = []
    with torch.no_grad():
        for tau in range(cfg.t_total - 1):
            x = frames[:, tau] if tau < cfg.t_in else model.head(h)
            h, c, m, mem = cell(x, h, c, m, mem)
            expected.append(model.head(h))
        assert torch.equal(model(frames), torch.stack(expected, 1))
