import numpy as np
import pytest

from tctseg import tensor as T
from tctseg.errors import ConfigError, ShapeError
from tctseg.unet import UNetConfig, build_unet, forward_full, forward_inference, layer_shapes

LADDER_AT_16 = {
    "enc1.conv1": (1, 16), "enc1.conv2": (16, 16),
    "enc2.conv1": (16, 16), "enc2.conv2": (16, 32),
    "enc3.conv1": (32, 32), "enc3.conv2": (32, 64),
    "enc4.conv1": (64, 64), "enc4.conv2": (64, 128),
    "enc5.conv1": (128, 128), "enc5.conv2": (128, 256),
    "dec4.conv1": (384, 128), "dec4.conv2": (128, 128),
    "dec3.conv1": (192, 64), "dec3.conv2": (64, 64),
    "dec2.conv1": (96, 32), "dec2.conv2": (32, 32),
    "dec1.conv1": (48, 16), "dec1.conv2": (16, 16),
}


def test_ladder_matches_reference_table():
    shapes = {n: (i, o) for n, i, o in layer_shapes(UNetConfig(num_classes=5, base_width=16))}
    for name, io in LADDER_AT_16.items():
        assert shapes[name] == io, name
    assert shapes["msh"] == (16, 6)
    assert all(shapes[f"ath.{j}"] == (16, 2) for j in range(1, 6))


def test_width_two_is_an_eighth():
    full = {n: (i, o) for n, i, o in layer_shapes(UNetConfig(num_classes=3, base_width=16))}
    small = {n: (i, o) for n, i, o in layer_shapes(UNetConfig(num_classes=3, base_width=2))}
    for name in LADDER_AT_16:
        i16, o16 = full[name]
        i2, o2 = small[name]
        assert o2 * 8 == o16
        if not name == "enc1.conv1":
            assert i2 * 8 == i16


def test_parameter_count_near_reference():
    model = build_unet(UNetConfig(num_classes=5, base_width=16), seed=0)
    count = model.parameter_count()
    assert abs(count - 4.12e6) / 4.12e6 < 0.05
    assert count == 4_123_814
    assert model.parameter_count(include_ath=True) == count + 5 * (16 * 2 * 27 + 2)


def test_same_seed_same_parameters():
    cfg = UNetConfig(num_classes=3, base_width=4)
    a, b = build_unet(cfg, seed=7), build_unet(cfg, seed=7)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = build_unet(cfg, seed=8)
    assert not np.array_equal(a.params["enc1.conv1.weight"].data, c.params["enc1.conv1.weight"].data)


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(num_classes=3, patch_size=(24, 32, 32))
    with pytest.raises(ConfigError):
        UNetConfig(num_classes=0)


def test_forward_shapes():
    model = build_unet(UNetConfig(num_classes=3, base_width=2, patch_size=(16, 16, 16)), seed=0)
    out = forward_full(model, np.zeros((1, 1, 16, 16, 16), np.float32))
    assert out.msh_logits.shape == (1, 4, 16, 16, 16)
    assert len(out.ath_logits) == 3
    assert all(a.shape == (1, 2, 16, 16, 16) for a in out.ath_logits)


def test_input_shape_errors():
    model = build_unet(UNetConfig(num_classes=2, base_width=2), seed=0)
    with pytest.raises(ShapeError):
        forward_full(model, np.zeros((1, 1, 20, 16, 16), np.float32))
    with pytest.raises(ShapeError):
        forward_full(model, np.zeros((1, 2, 16, 16, 16), np.float32))


def test_zero_heads_give_uniform_probabilities():
    model = build_unet(UNetConfig(num_classes=3, base_width=2), seed=0)
    for name, p in model.named_parameters():
        if name.startswith(("msh", "ath")):
            p.data = np.zeros_like(p.data)
    x = np.random.default_rng(0).standard_normal((1, 1, 16, 16, 16)).astype(np.float32)
    out = forward_full(model, x)
    assert np.allclose(T.softmax_channels(out.msh_logits).data, 0.25)
    for a in out.ath_logits:
        assert np.allclose(T.softmax_channels(a).data, 0.5)


def test_inference_equals_softmax_of_training_path():
    model = build_unet(UNetConfig(num_classes=3, base_width=2), seed=1)
    x = np.random.default_rng(1).standard_normal((2, 1, 16, 16, 16)).astype(np.float32)
    probs = forward_inference(model, x).data
    ref = T.softmax_channels(forward_full(model, x).msh_logits).data
    assert np.array_equal(probs, ref)
    assert np.abs(probs.sum(axis=1) - 1).max() < 1e-6


def test_inference_never_touches_auxiliary_heads():
    model = build_unet(UNetConfig(num_classes=3, base_width=2), seed=1)
    for n in model.ath_parameter_names():
        del model.params[n]
    x = np.zeros((1, 1, 16, 16, 16), np.float32)
    forward_inference(model, x)
    assert all(p.grad is None for p in model.parameters())


def test_auxiliary_heads_are_independent():
    """The fused evaluation must equal one convolution per head."""
    model = build_unet(UNetConfig(num_classes=3, base_width=2), seed=2)
    x = np.random.default_rng(2).standard_normal((1, 1, 16, 16, 16)).astype(np.float32)
    out = forward_full(model, x)
    # zeroing head 2 changes only head 2
    before = [a.data.copy() for a in out.ath_logits]
    model.params["ath.2.weight"].data = np.zeros_like(model.params["ath.2.weight"].data)
    after = forward_full(model, x).ath_logits
    assert np.array_equal(before[0], after[0].data)
    assert np.array_equal(before[2], after[2].data)
    assert np.allclose(after[1].data, 0.0)


def test_skip_aux_path():
    model = build_unet(UNetConfig(num_classes=3, base_width=2), seed=0)
    out = forward_full(model, np.zeros((1, 1, 16, 16, 16), np.float32), aux=False)
    assert out.ath_logits == []


def test_full_depth_gradient_through_network():
    """Full five-stage network at 16^3 with a scalar loss, float64."""
    rng = np.random.default_rng(3)
    model = build_unet(UNetConfig(num_classes=2, base_width=2, patch_size=(16, 16, 16)), seed=3)
    model = model.astype(np.float64)
    for n, p in model.named_parameters():
        if n.endswith(".bias"):
            p.data = rng.uniform(-0.1, 0.1, p.shape)
    x = rng.standard_normal((1, 1, 16, 16, 16))
    names = [n for n, _ in model.named_parameters()]
    probe = [rng.standard_normal((1, 3, 16, 16, 16))] + [rng.standard_normal((1, 2, 16, 16, 16))] * 2

    def loss(*ts):
        model.params = dict(zip(names, ts))
        out = forward_full(model, x)
        total = T.tsum(T.mul(T.softmax_channels(out.msh_logits), T.Tensor(probe[0])))
        for a, r in zip(out.ath_logits, probe[1:]):
            total = T.add(total, T.tsum(T.mul(T.softmax_channels(a), T.Tensor(r))))
        return total

    inputs = [p for _, p in model.named_parameters()]
    info = {}
    err = T.grad_check(loss, inputs, h=1e-5, max_coords=3, resolve=1e-4, report=info)
    assert err < 1e-4
    assert info["unresolved"] <= 0.05 * info["probed"]
