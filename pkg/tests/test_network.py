"""Dual-decoder network contracts: shapes, ranges, determinism, checkpoints."""

import numpy as np
import pytest

from geoseg.errors import FileFormatError, ShapeError
from geoseg.geometry import sdm_target
from geoseg.losses import LossConfig, total_loss
from geoseg.network import (DualDecoderNet, NetworkConfig, load_checkpoint,
                            net_from_checkpoint, save_checkpoint, select_final)
from geoseg.tensor import SGD, Tensor
from geoseg.training import Batch

rng = np.random.default_rng(31)


def small_net(rank=2, width=4, depth=2, seed=5, norm="instance"):
    return DualDecoderNet(NetworkConfig(rank=rank, width=width, depth=depth,
                                        normalization=norm, seed=seed))


def test_output_shapes_2d():
    net = DualDecoderNet(NetworkConfig(rank=2, width=8, depth=3, seed=0))
    out = net.forward(Tensor(rng.standard_normal((1, 1, 64, 64))))
    for t in (out.seg1, out.seg2, out.sdm1, out.sdm2):
        assert t.shape == (1, 1, 64, 64)
    assert out.logits1.shape == (1, 2, 64, 64)


def test_output_shapes_3d():
    net = small_net(rank=3, width=2, depth=2, seed=1)
    out = net.forward(Tensor(rng.standard_normal((1, 1, 32, 32, 16))))
    assert out.seg1.shape == (1, 1, 32, 32, 16)


def test_batch_dimension_preserved():
    net = small_net()
    out = net.forward(Tensor(rng.standard_normal((4, 1, 16, 16))))
    assert out.seg1.shape[0] == 4


def test_output_ranges_and_finiteness():
    net = small_net(seed=3)
    out = net.forward(Tensor(rng.standard_normal((2, 1, 16, 16)) * 5.0))
    for t in (out.seg1, out.seg2):
        assert np.isfinite(t.data).all()
        assert (t.data >= 0.0).all() and (t.data <= 1.0).all()
    for t in (out.sdm1, out.sdm2):
        assert np.isfinite(t.data).all()
        assert (t.data > -1.0).all() and (t.data < 1.0).all()


def test_decoder_outputs_differ_at_init():
    net = small_net(seed=9)
    out = net.forward(Tensor(rng.standard_normal((2, 1, 16, 16))))
    assert np.abs(out.seg1.data - out.seg2.data).mean() > 0.0


def test_build_determinism_and_seed_sensitivity():
    a = small_net(seed=7)
    b = small_net(seed=7)
    c = small_net(seed=8)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data)
               for n in a.params)


def test_forward_determinism_bitwise():
    x = rng.standard_normal((2, 1, 16, 16))
    out1 = small_net(seed=2).forward(Tensor(x))
    out2 = small_net(seed=2).forward(Tensor(x))
    np.testing.assert_array_equal(out1.seg1.data, out2.seg1.data)
    np.testing.assert_array_equal(out1.sdm2.data, out2.sdm2.data)


def test_divisibility_error_names_required_multiple():
    net = small_net(depth=2)
    with pytest.raises(ShapeError, match="divisible by 4"):
        net.forward(Tensor(rng.standard_normal((1, 1, 10, 12))))


def test_select_final_returns_decoder_one():
    net = small_net(seed=4)
    out = net.forward(Tensor(rng.standard_normal((1, 1, 16, 16))))
    final = select_final(out)
    assert final is out.seg1
    assert not np.array_equal(final.data, out.seg2.data)


def test_gradient_step_touches_every_branch():
    net = small_net(seed=6)
    opt = SGD(net.parameters(), lr=0.05, momentum=0.0)
    spatial = (16, 16)
    masks = (rng.random((2,) + spatial) < 0.4).astype(np.float64)
    targets = np.stack([sdm_target(m).values for m in masks])
    batch = Batch(images=rng.standard_normal((4, 1) + spatial),
                  masks=masks, sdm_targets=targets,
                  labeled_flags=[True, True, False, False],
                  degenerate_flags=[False, False])
    before = {name: p.data.copy() for name, p in net.params.items()}
    out = net.forward(Tensor(batch.images))
    bd = total_loss(out, batch, 50, 100, LossConfig(k=9.0))
    opt.zero_grad()
    bd.total.backward()
    opt.step()
    for prefix in ("enc.", "dec1.", "dec2."):
        changed = any(not np.array_equal(before[n], p.data)
                      for n, p in net.params.items() if n.startswith(prefix))
        assert changed, f"no parameter under {prefix} moved"


# -- checkpoint container ------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    net = small_net(seed=12)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net, extra_tensors={"extra/rngish": np.arange(4)},
                    meta={"step": 3})
    config, tensors, meta = load_checkpoint(path)
    assert config == net.config
    assert meta["step"] == 3
    np.testing.assert_array_equal(tensors["extra/rngish"], np.arange(4))
    restored, _, _ = net_from_checkpoint(path)
    for name in net.params:
        np.testing.assert_array_equal(restored.params[name].data,
                                      net.params[name].data)


def test_checkpoint_restored_net_same_forward(tmp_path):
    net = small_net(seed=13)
    x = rng.standard_normal((1, 1, 16, 16))
    want = net.forward(Tensor(x)).seg1.data
    save_checkpoint(tmp_path / "n.ckpt", net)
    restored, _, _ = net_from_checkpoint(tmp_path / "n.ckpt")
    np.testing.assert_array_equal(restored.forward(Tensor(x)).seg1.data, want)


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    blob = b'{"format": "something-else", "tensors": {}}'
    path.write_bytes(len(blob).to_bytes(8, "little") + blob)
    with pytest.raises(FileFormatError, match="format"):
        load_checkpoint(path)


def test_checkpoint_truncated_payload_rejected(tmp_path):
    net = small_net(seed=14)
    path = tmp_path / "trunc.ckpt"
    save_checkpoint(path, net)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(FileFormatError, match="size"):
        load_checkpoint(path)


def test_checkpoint_header_longer_than_file_rejected(tmp_path):
    path = tmp_path / "short.ckpt"
    path.write_bytes((1 << 20).to_bytes(8, "little") + b"xx")
    with pytest.raises(FileFormatError):
        load_checkpoint(path)
