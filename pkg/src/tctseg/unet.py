"""Five-stage 3-D U-Net with one main head and one auxiliary head per class."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from tctseg import tensor as T
from tctseg.errors import ConfigError, ShapeError

# encoder output widths at base width 16
_LADDER = (16, 32, 64, 128, 256)


@dataclass
class UNetConfig:
    num_classes: int
    in_channels: int = 1
    base_width: int = 8
    patch_size: tuple = (32, 32, 32)
    # number of encoder stages; 5 is the reference network, fewer only
    # exists so tiny patches (8^3 gradient checks) remain valid
    depth: int = 5

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if len(self.patch_size) != 3:
            raise ConfigError(f"patch_size must have 3 entries, got {self.patch_size}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.base_width < 2:
            raise ConfigError(f"base_width must be >= 2, got {self.base_width}")
        if not 1 <= self.depth <= 5:
            raise ConfigError(f"depth must lie in 1..5, got {self.depth}")
        div = self.divisor
        if any(s % div for s in self.patch_size):
            raise ConfigError(f"patch_size {self.patch_size} must be divisible by {div}")

    @property
    def divisor(self):
        return 2 ** (self.depth - 1)

    def widths(self):
        """Encoder stage output widths, scaled by base_width/16."""
        return tuple(w * self.base_width // 16 for w in _LADDER[: self.depth])


def layer_shapes(config):
    """(name, in_channels, out_channels) for every convolution, in build order."""
    w = config.widths()
    layers = []
    cin = config.in_channels
    for k in range(config.depth):
        if k == 0:
            layers.append((f"enc1.conv1", cin, w[0]))
            layers.append((f"enc1.conv2", w[0], w[0]))
        else:
            layers.append((f"enc{k + 1}.conv1", w[k - 1], w[k - 1]))
            layers.append((f"enc{k + 1}.conv2", w[k - 1], w[k]))
    for k in range(config.depth - 2, -1, -1):
        layers.append((f"dec{k + 1}.conv1", w[k] + w[k + 1], w[k]))
        layers.append((f"dec{k + 1}.conv2", w[k], w[k]))
    layers.append(("msh", w[0], config.num_classes + 1))
    for j in range(1, config.num_classes + 1):
        layers.append((f"ath.{j}", w[0], 2))
    return layers


class UNetModel:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def ath_parameter_names(self):
        return [n for n in self.params if n.startswith("ath.")]

    def parameter_count(self, include_ath=False):
        return sum(
            p.size for n, p in self.params.items() if include_ath or not n.startswith("ath.")
        )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype):
        params = OrderedDict(
            (n, T.Tensor(p.data.astype(dtype), requires_grad=p.requires_grad, name=n))
            for n, p in self.params.items()
        )
        return UNetModel(self.config, params)

    def forward_full(self, patch, aux=True):
        return forward_full(self, patch, aux)

    def forward_inference(self, patch):
        return forward_inference(self, patch)


@dataclass
class ModelOutput:
    msh_logits: T.Tensor
    ath_logits: list = field(default_factory=list)


def build_unet(config, seed=0):
    """Fresh model; He fan-in normal weights and zero biases drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, cin, cout in layer_shapes(config):
        fan_in = cin * 27
        w = rng.standard_normal((cout, cin, 3, 3, 3)) * np.sqrt(2.0 / fan_in)
        params[f"{name}.weight"] = T.Tensor(w.astype(np.float32), requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = T.Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{name}.bias")
    return UNetModel(config, params)


def _conv(model, name, x, relu=True):
    y = T.conv3d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"], padding=1)
    return T.relu(y) if relu else y


def _check_input(model, patch):
    cfg = model.config
    if patch.ndim != 5:
        raise ShapeError(f"expected a [B, C, Z, Y, X] patch, got shape {patch.shape}")
    if patch.shape[1] != cfg.in_channels:
        raise ShapeError(f"patch has {patch.shape[1]} channels, model expects {cfg.in_channels}")
    if any(s % cfg.divisor for s in patch.shape[2:]):
        raise ShapeError(f"patch spatial dims {patch.shape[2:]} must be divisible by {cfg.divisor}")


def _backbone(model, patch):
    depth = model.config.depth
    skips = []
    x = patch
    for k in range(depth):
        if k > 0:
            x = T.maxpool3d(x, 2)
        x = _conv(model, f"enc{k + 1}.conv1", x)
        x = _conv(model, f"enc{k + 1}.conv2", x)
        skips.append(x)
    for k in range(depth - 2, -1, -1):
        up = T.upsample_trilinear3d(x, 2)
        x = T.concat([skips[k], up], axis=1)
        x = _conv(model, f"dec{k + 1}.conv1", x)
        x = _conv(model, f"dec{k + 1}.conv2", x)
    return x


def forward_full(model, patch, aux=True):
    """Main-head logits plus every auxiliary head's logits (training path).

    ``aux=False`` skips the auxiliary heads, for objectives that never use them.
    """
    if not isinstance(patch, T.Tensor):
        patch = T.Tensor(patch)
    _check_input(model, patch)
    feat = _backbone(model, patch)
    msh = _conv(model, "msh", feat, relu=False)
    aths = []
    if aux:
        n = model.config.num_classes
        # all auxiliary heads as one convolution; parameters stay per head
        w = T.concat([model.params[f"ath.{j}.weight"] for j in range(1, n + 1)], axis=0)
        b = T.concat([model.params[f"ath.{j}.bias"] for j in range(1, n + 1)], axis=0)
        fused = T.conv3d(feat, w, b, padding=1)
        aths = [fused[:, 2 * j:2 * j + 2] for j in range(n)]
    return ModelOutput(msh, aths)


def forward_inference(model, patch):
    """Main-head class probabilities only; no tape, auxiliary heads never read."""
    if not isinstance(patch, T.Tensor):
        patch = T.Tensor(patch)
    _check_input(model, patch)
    with T.no_grad():
        feat = _backbone(model, patch)
        return T.softmax_channels(_conv(model, "msh", feat, relu=False))
