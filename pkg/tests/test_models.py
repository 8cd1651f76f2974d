import numpy as np
import pytest

from ctpseg import kernels as K
from ctpseg import models as M
from ctpseg.autodiff import Tensor, grad_check
from ctpseg.data import SliceBatch
from ctpseg.errors import (
    ArchitectureMismatch,
    BinTooSmall,
    ConfigInvalid,
    CorruptFile,
    NoMatch,
    VersionMismatch,
    WrongChannelCount,
)
from ctpseg.losses import LossConfig, ce_loss, foreground_probability
from ctpseg.training import RmspropState, train_step


def _t(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- initializer layer -------------------------------------------------------


def test_initializer_full_size_shape():
    bn = K.BatchNormState(5)
    k = Tensor(np.random.default_rng(0).standard_normal((3, 5, 1, 1)).astype(np.float32))
    x = Tensor(np.random.default_rng(1).standard_normal((1, 5, 256, 256)).astype(np.float32))
    assert M.initializer_layer(x, bn, k).shape == (1, 3, 256, 256)


def test_initializer_zero_input_zero_output():
    bn = K.BatchNormState(5, dtype=np.float64)
    bn.mode = "eval"  # running mean 0, shift 0
    k = _t(np.random.default_rng(2).standard_normal((3, 5, 1, 1)))
    out = M.initializer_layer(_t(np.zeros((2, 5, 4, 4))), bn, k)
    assert np.all(out.data == 0.0)


def test_initializer_per_pixel_matmul():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 6, 7)) * rng.uniform(1, 20, (1, 5, 1, 1)) + 10
    bn = K.BatchNormState(5, dtype=np.float64)
    bn.scale.data[:] = rng.uniform(0.5, 2, 5)
    bn.shift.data[:] = rng.standard_normal(5)
    k = rng.standard_normal((3, 5, 1, 1))
    out = M.initializer_layer(_t(x), bn, _t(k)).data
    mu, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    for n, i, j in [(0, 0, 0), (1, 5, 6), (0, 3, 2), (1, 1, 4)]:
        v = (x[n, :, i, j] - mu) / np.sqrt(var + bn.eps) * bn.scale.data + bn.shift.data
        assert np.allclose(out[n, :, i, j], k[:, :, 0, 0] @ v, atol=1e-12)


def test_initializer_wrong_channels():
    bn = K.BatchNormState(5)
    k = Tensor(np.ones((3, 5, 1, 1), np.float32))
    with pytest.raises(WrongChannelCount):
        M.initializer_layer(Tensor(np.ones((1, 4, 8, 8), np.float32)), bn, k)
    net = M.build_pspnet()
    with pytest.raises(WrongChannelCount):
        net(Tensor(np.ones((1, 3, 64, 64), np.float32)))


# -- pyramid pooling -----------------------------------------------------------


def test_pyramid_channel_arithmetic():
    f = Tensor(np.random.default_rng(4).standard_normal((2, 64, 6, 6)).astype(np.float32))
    out = M.pyramid_pooling(f, [1, 2, 3, 6], 16)
    assert out.shape == (2, 128, 6, 6)
    assert np.array_equal(out.data[:, :64], f.data)  # F_final is passed through


def test_pyramid_constant_input_levels_constant():
    f = Tensor(np.full((1, 8, 6, 6), 3.0))
    module = M.PyramidPooling(8, (1, 2, 3, 6), 2, np.random.default_rng(0), dtype=np.float64)
    module.eval()
    out = module(f).data
    for c in range(8, out.shape[1]):
        assert np.ptp(out[0, c]) < 1e-12


def test_pyramid_bin_too_small():
    with pytest.raises(BinTooSmall):
        M.pyramid_pooling(Tensor(np.ones((1, 4, 5, 5))), [1, 2, 6], 2)


# -- architectures ------------------------------------------------------------


def test_pspnet_shapes_and_mask():
    net = M.build_pspnet(seed=1)
    x = np.random.default_rng(5).standard_normal((2, 5, 64, 64)).astype(np.float32)
    logits = net(Tensor(x))
    assert logits.shape == (2, 2, 64, 64)
    mask = np.argmax(logits.data, axis=1)
    assert mask.shape == (2, 64, 64) and set(np.unique(mask)) <= {0, 1}
    assert M.build_pspnet(seed=1).num_parameters() == net.num_parameters()


def test_pspnet_other_input_sizes():
    for size in [(32, 32), (48, 40)]:
        net = M.build_pspnet(M.PspConfig(input_size=size))
        assert net(Tensor(np.ones((1, 5, *size), np.float32))).shape == (1, 2, *size)


def test_pspnet_config_invalid():
    with pytest.raises(ConfigInvalid):
        M.build_pspnet(M.PspConfig(bins=(1, 3, 2)))
    with pytest.raises(ConfigInvalid):
        M.build_pspnet(M.PspConfig(input_size=(16, 16)))  # feature map 4x4 < bin 6
    with pytest.raises(ConfigInvalid):
        M.PspConfig.from_dict({"bogus": 1})


def test_unet_shapes_and_skip_channels():
    net = M.build_unet2d(M.UNetConfig(levels=4, base_channels=4))
    assert net(Tensor(np.ones((1, 5, 64, 64), np.float32))).shape == (1, 2, 64, 64)
    for i in range(4):
        up = getattr(net, f"up{i}").weight.shape[1]
        enc = getattr(net, f"enc{i}").conv2.conv.weight.shape[0]
        dec_in = getattr(net, f"dec{i}").conv1.conv.weight.shape[1]
        assert dec_in == up + enc


def test_unet_indivisible_size():
    with pytest.raises(ConfigInvalid):
        M.build_unet2d(M.UNetConfig(levels=4, input_size=(63, 63)))
    net = M.build_unet2d(M.UNetConfig(levels=2, base_channels=2, input_size=(16, 16)))
    with pytest.raises(ConfigInvalid):
        net(Tensor(np.ones((1, 5, 15, 15), np.float32)))


def test_unknown_architecture():
    with pytest.raises(ConfigInvalid):
        M.build_model("vnet")


# -- trainable flags ----------------------------------------------------------


def _one_step(net, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 32, 32)).astype(np.float32)
    y = (rng.random((2, 32, 32)) < 0.2).astype(np.uint8)
    train_step(net, SliceBatch(x, y, [("s", 0), ("s", 1)]), LossConfig(kind="ce"), RmspropState(1e-2))


def test_freeze_backbone_one_step():
    net = M.build_pspnet(M.PspConfig(input_size=(32, 32)), seed=2)
    M.set_trainable(net, "backbone.*", False)
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    _one_step(net)
    for n, p in net.named_parameters():
        if n.startswith("backbone."):
            assert np.array_equal(p.data, before[n]), n
    assert not np.array_equal(net.head.classifier.weight.data, before["head.classifier.weight"])

    M.set_trainable(net, "*", True)
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    _one_step(net, seed=1)
    assert not np.array_equal(net.backbone.stem.conv.weight.data, before["backbone.stem.conv.weight"])


def test_freeze_all_keeps_loss_constant():
    net = M.build_pspnet(M.PspConfig(input_size=(32, 32)), seed=3)
    M.set_trainable(net, "*", False)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 32, 32)).astype(np.float32)
    y = (rng.random((2, 32, 32)) < 0.2).astype(np.uint8)
    losses = []
    for _ in range(3):
        net.train()
        losses.append(ce_loss(foreground_probability(net(Tensor(x))), y).item())
        _one_step(net)
    assert losses[0] == losses[1] == losses[2]


def test_set_trainable_no_match():
    with pytest.raises(NoMatch):
        M.set_trainable(M.build_pspnet(), "decoder.*", False)


def test_frozen_eval_forward_bit_identical():
    net = M.build_pspnet(seed=4)
    M.set_trainable(net, "*", False)
    net.eval()
    x = np.random.default_rng(6).standard_normal((2, 5, 64, 64)).astype(np.float32)
    a = net.predict_logits(x)
    b = net.predict_logits(x)
    assert a.tobytes() == b.tobytes()


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_bytes(tmp_path):
    net = M.build_pspnet(seed=5)
    M.save_checkpoint(net, tmp_path / "a.ckpt", epoch=3, best_dsc=0.5)
    loaded = M.load_checkpoint(tmp_path / "a.ckpt")
    M.save_checkpoint(loaded, tmp_path / "b.ckpt", epoch=3, best_dsc=0.5)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for (n, p), (_, q) in zip(net.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    assert M.read_checkpoint(tmp_path / "a.ckpt").config == M.read_checkpoint(tmp_path / "b.ckpt").config


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "a.ckpt"
    M.save_checkpoint(M.build_unet2d(M.UNetConfig(base_channels=2, levels=2, input_size=(16, 16))), path)
    data = path.read_bytes()
    with pytest.raises(CorruptFile):
        M.decode_checkpoint(data[: len(data) // 2])
    flipped = bytearray(data)
    flipped[100] ^= 0xFF
    with pytest.raises(CorruptFile):
        M.decode_checkpoint(bytes(flipped))


def test_checkpoint_architecture_and_version(tmp_path):
    path = tmp_path / "u.ckpt"
    M.save_checkpoint(M.build_unet2d(M.UNetConfig(base_channels=2, levels=2, input_size=(16, 16))), path)
    with pytest.raises(VersionMismatch):
        M.load_checkpoint(path, arch="pspnet")
    with pytest.raises(ArchitectureMismatch):
        M.load_checkpoint(path, arch="pspnet")
    ckpt = M.read_checkpoint(path)
    ckpt.version = 99
    with pytest.raises(VersionMismatch):
        M.decode_checkpoint(M.encode_checkpoint(ckpt))


# -- end-to-end gradient -------------------------------------------------------


def test_tiny_pspnet_grad_check():
    cfg = M.PspConfig(bins=(1, 2), backbone_channels=(4, 4, 4, 4), input_size=(8, 8), head_channels=4)
    net = M.build_pspnet(cfg, seed=7, dtype=np.float64)
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((2, 5, 8, 8)))
    y = (rng.random((2, 8, 8)) < 0.3).astype(float)
    params = net.parameters()

    def f():
        return ce_loss(foreground_probability(net(x)), y)

    assert grad_check(f, params) <= 1e-3
