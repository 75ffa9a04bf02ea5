"""The four networks: encoder, generator, latent and input discriminators.

Every parameterized layer is spectral-normalized via power iteration, with
the iteration vectors held as module buffers so they travel with
checkpoints. The input discriminator exposes taps on its hidden layers
(f_1 from the first convolution, f_2..f_4 from the residual stages, plus
the pre-activation counterpart of f_4) for the reconstruction loss and the
novelty scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

SN_EPS = 1e-12


class NetShapeError(Exception):
    """An input tensor does not match the network's expected shape."""


def power_iteration_step(weight2d: torch.Tensor, u: torch.Tensor):
    """One power-iteration step on a 2-D weight.

    Returns ``(sigma, u_new, v)``: the spectral-norm estimate and the
    updated left/right vectors. Inputs are treated as constants (no
    gradients flow from here).
    """
    with torch.no_grad():
        v = F.normalize(weight2d.t().mv(u), dim=0, eps=SN_EPS)
        u_new = F.normalize(weight2d.mv(v), dim=0, eps=SN_EPS)
        sigma = torch.dot(u_new, weight2d.mv(v))
    return sigma, u_new, v


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, steps: int = 1):
    """Divide ``weight`` by its estimated spectral norm.

    The weight is flattened to (out, rest) for the power iteration. A zero
    weight leaves the tensor unchanged (the estimate is floored at machine
    epsilon and normalization is skipped). Returns ``(normalized, u_new)``.
    """
    w2d = weight.reshape(weight.shape[0], -1)
    sigma, u_new = None, u
    for _ in range(max(1, steps)):
        sigma, u_new, _v = power_iteration_step(w2d, u_new)
    if float(sigma) <= np.finfo(np.float32).eps:
        return weight, u_new
    return weight / sigma, u_new


class _SpectralBase(nn.Module):
    """Shared power-iteration plumbing for normalized layers.

    In training mode each forward advances the power iteration by one step
    before scaling; in eval mode the stored vectors are reused unchanged,
    so inference is a fixed deterministic function of the parameters.
    """

    weight_raw: nn.Parameter

    def _register_sn(self, out_dim: int, rest_dim: int):
        self.register_buffer("sn_u", F.normalize(torch.randn(out_dim), dim=0, eps=SN_EPS))
        self.register_buffer("sn_v", F.normalize(torch.randn(rest_dim), dim=0, eps=SN_EPS))

    def normalized_weight(self) -> torch.Tensor:
        w = self.weight_raw
        w2d = w.reshape(w.shape[0], -1)
        if self.training:
            _sigma, u_new, v_new = power_iteration_step(w2d, self.sn_u)
            self.sn_u.copy_(u_new)
            self.sn_v.copy_(v_new)
        # sigma is recomputed with gradients attached to the raw weight; the
        # clones keep this forward's graph valid if a later forward advances
        # the buffers in place
        u, v = self.sn_u.clone(), self.sn_v.clone()
        sigma = torch.dot(u, torch.mv(w2d, v))
        if float(sigma.detach()) <= np.finfo(np.float32).eps:
            return w
        return w / sigma

    @torch.no_grad()
    def warm_up(self, steps: int = 5):
        w2d = self.weight_raw.reshape(self.weight_raw.shape[0], -1)
        for _ in range(steps):
            _sigma, u_new, v_new = power_iteration_step(w2d, self.sn_u)
            self.sn_u.copy_(u_new)
            self.sn_v.copy_(v_new)


class SpectralLinear(_SpectralBase):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight_raw = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        nn.init.kaiming_normal_(self.weight_raw, mode="fan_in", nonlinearity="relu")
        self._register_sn(out_features, in_features)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


class SpectralConv2d(_SpectralBase):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, dilation: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.weight_raw = nn.Parameter(
            torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.kaiming_normal_(self.weight_raw, mode="fan_in", nonlinearity="relu")
        self._register_sn(out_channels, in_channels * kernel_size * kernel_size)

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.bias,
                        stride=self.stride, padding=self.padding, dilation=self.dilation)


class DownBlock(nn.Module):
    """Residual block halving the spatial size by average pooling.

    Pre-activation layout: ReLU - conv3x3 - ReLU - conv3x3 - avgpool on the
    residual branch; 1x1 projection + avgpool on the shortcut.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = SpectralConv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = SpectralConv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut = SpectralConv2d(in_channels, out_channels, 1)

    def forward(self, x):
        h = self.conv1(F.relu(x))
        h = self.conv2(F.relu(h))
        h = F.avg_pool2d(h, 2)
        return h + F.avg_pool2d(self.shortcut(x), 2)


def atrous_kernel_size(in_size: int) -> int:
    """Kernel size of a 2-dilated unpadded conv that exactly halves ``in_size``."""
    if in_size % 4 != 0:
        raise ValueError(f"input size {in_size} cannot be halved by a 2-dilated conv")
    return in_size // 4 + 1


class AtrousDownBlock(nn.Module):
    """Residual block halving the spatial size by a dilated convolution.

    The 2-dilated conv uses no padding, with the kernel sized so the output
    map is exactly half the input; the shortcut is a strided 1x1 conv.
    """

    def __init__(self, in_channels: int, out_channels: int, in_size: int):
        super().__init__()
        self.in_size = in_size
        k = atrous_kernel_size(in_size)
        self.conv1 = SpectralConv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = SpectralConv2d(out_channels, out_channels, k, dilation=2)
        self.shortcut = SpectralConv2d(in_channels, out_channels, 1, stride=2)

    def forward(self, x):
        if x.shape[-1] != self.in_size:
            raise NetShapeError(f"expected spatial size {self.in_size}, got {x.shape[-1]}")
        h = self.conv1(F.relu(x))
        h = self.conv2(F.relu(h))
        return h + self.shortcut(x)


class UpBlock(nn.Module):
    """Residual block with optional nearest-neighbor x2 upsampling.

    The shortcut upsamples alongside the residual branch and projects only
    when the channel count changes.
    """

    def __init__(self, in_channels: int, out_channels: int, upsample: bool = True):
        super().__init__()
        self.upsample = upsample
        self.conv1 = SpectralConv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = SpectralConv2d(out_channels, out_channels, 3, padding=1)
        if in_channels != out_channels:
            self.shortcut = SpectralConv2d(in_channels, out_channels, 1)
        else:
            self.shortcut = nn.Identity()

    def _up(self, x):
        return F.interpolate(x, scale_factor=2, mode="nearest") if self.upsample else x

    def forward(self, x):
        h = self._up(F.relu(x))
        h = self.conv1(h)
        h = self.conv2(F.relu(h))
        return h + self.shortcut(self._up(x))


@dataclass
class FeatureStack:
    """Ordered hidden-layer projections of the input discriminator.

    ``levels[0]`` is the input itself; ``levels[1]`` the first convolution
    output; ``levels[2..4]`` the residual stage outputs, the last one
    activated. ``preact`` is the pre-activation counterpart of the final
    level (``levels[4] == relu(preact)``).
    """

    levels: list[torch.Tensor]
    preact: torch.Tensor

    def __len__(self) -> int:
        return len(self.levels)


class LatentDiscriminator(nn.Module):
    """MLP on latent codes: d_z - 200 - 200 - 1 with LeakyReLU(0.2)."""

    def __init__(self, d_z: int = 100, hidden: int = 200):
        super().__init__()
        self.d_z = d_z
        self.fc1 = SpectralLinear(d_z, hidden)
        self.fc2 = SpectralLinear(hidden, hidden)
        self.fc3 = SpectralLinear(hidden, 1)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.d_z:
            raise NetShapeError(f"expected (n, {self.d_z}) codes, got {tuple(z.shape)}")
        h = F.leaky_relu(self.fc1(z), 0.2)
        h = F.leaky_relu(self.fc2(h), 0.2)
        return self.fc3(h).squeeze(1)


class InputDiscriminator(nn.Module):
    """Residual CNN on images with hidden-layer feature taps.

    Stages: conv (32x32xw), three avgpool residual blocks (16x16x2w,
    8x8x4w, 4x4x8w), ReLU, global average pool, linear head. The reference
    width is w=32.
    """

    def __init__(self, channels: int = 3, base_width: int = 32):
        super().__init__()
        self.channels = channels
        w = base_width
        self.conv1 = SpectralConv2d(channels, w, 3, padding=1)
        self.block1 = DownBlock(w, 2 * w)
        self.block2 = DownBlock(2 * w, 4 * w)
        self.block3 = DownBlock(4 * w, 8 * w)
        self.fc = SpectralLinear(8 * w, 1)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels or x.shape[2:] != (32, 32):
            raise NetShapeError(
                f"expected (n, {self.channels}, 32, 32) images, got {tuple(x.shape)}")

    def forward(self, x, want_features: bool = False):
        self._check(x)
        f1 = self.conv1(x)
        f2 = self.block1(f1)
        f3 = self.block2(f2)
        h4 = self.block3(f3)
        f4 = F.relu(h4)
        pooled = f4.mean(dim=(2, 3))
        logits = self.fc(pooled).squeeze(1)
        if not want_features:
            return logits, None
        return logits, FeatureStack(levels=[x, f1, f2, f3, f4], preact=h4)

    def features(self, x) -> FeatureStack:
        _, stack = self.forward(x, want_features=True)
        return stack


class Encoder(nn.Module):
    """Residual CNN mapping images to d_z-dimensional codes.

    Downsampling uses dilated convolutions; the final fully connected layer
    is linear (unbounded) unless the bounded ``tanh_output`` ablation
    variant is selected.
    """

    def __init__(self, channels: int = 3, d_z: int = 100, base_width: int = 32,
                 tanh_output: bool = False):
        super().__init__()
        self.channels = channels
        self.d_z = d_z
        self.tanh_output = tanh_output
        w = base_width
        self.conv1 = SpectralConv2d(channels, w, 3, padding=1)
        self.block1 = AtrousDownBlock(w, 2 * w, in_size=32)
        self.block2 = AtrousDownBlock(2 * w, 4 * w, in_size=16)
        self.block3 = AtrousDownBlock(4 * w, 8 * w, in_size=8)
        self.fc = SpectralLinear(4 * 4 * 8 * w, d_z)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels or x.shape[2:] != (32, 32):
            raise NetShapeError(
                f"expected (n, {self.channels}, 32, 32) images, got {tuple(x.shape)}")
        h = self.conv1(x)
        h = self.block1(h)
        h = self.block2(h)
        h = self.block3(h)
        h = F.relu(h).flatten(1)
        z = self.fc(h)
        return torch.tanh(z) if self.tanh_output else z


class Generator(nn.Module):
    """Residual CNN mapping latent codes back to images.

    Four upsampling residual stages (the last keeps the spatial size) and a
    final convolution; output passes through tanh so reconstructions live
    in [-1, 1] like the inputs.
    """

    def __init__(self, d_z: int = 100, channels: int = 3, base_width: int = 32):
        super().__init__()
        self.d_z = d_z
        self.channels = channels
        w = base_width
        self.fc = SpectralLinear(d_z, 4 * 4 * 8 * w)
        self.block1 = UpBlock(8 * w, 4 * w)
        self.block2 = UpBlock(4 * w, 2 * w)
        self.block3 = UpBlock(2 * w, w)
        self.block4 = UpBlock(w, w, upsample=False)
        self.conv_out = SpectralConv2d(w, channels, 3, padding=1)
        self._width = w

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.d_z:
            raise NetShapeError(f"expected (n, {self.d_z}) codes, got {tuple(z.shape)}")
        h = self.fc(z).reshape(z.shape[0], 8 * self._width, 4, 4)
        h = self.block1(h)
        h = self.block2(h)
        h = self.block3(h)
        h = self.block4(h)
        return torch.tanh(self.conv_out(h))


class NoveltyModel(nn.Module):
    """Bundle of the four networks plus bookkeeping shared by one run."""

    def __init__(self, channels: int = 3, d_z: int = 100, base_width: int = 32,
                 tanh_encoder: bool = False):
        super().__init__()
        self.channels = channels
        self.d_z = d_z
        self.base_width = base_width
        self.tanh_encoder = tanh_encoder
        self.encoder = Encoder(channels, d_z, base_width, tanh_output=tanh_encoder)
        self.generator = Generator(d_z, channels, base_width)
        self.latent_disc = LatentDiscriminator(d_z)
        self.input_disc = InputDiscriminator(channels, base_width)
        self.register_buffer("iteration", torch.zeros((), dtype=torch.int64))

    @property
    def trained_iterations(self) -> int:
        return int(self.iteration)

    def mark_trained(self, t: int):
        self.iteration.fill_(int(t))

    def reconstruct(self, x):
        return self.generator(self.encoder(x))


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """He-initialize all normalized layers deterministically.

    Weights get fan-in-scaled normal draws, biases zero, and the power
    iteration vectors are re-drawn as random unit vectors and warmed up
    with a few iterations. Iteration order over modules is the fixed
    registration order, so the result is a pure function of the seed.
    """
    rng = np.random.default_rng(seed)
    for _name, module in model.named_modules():
        if isinstance(module, (SpectralLinear, SpectralConv2d)):
            w = module.weight_raw
            fan_in = int(np.prod(w.shape[1:]))
            draw = rng.standard_normal(tuple(w.shape)) * np.sqrt(2.0 / fan_in)
            with torch.no_grad():
                w.copy_(torch.from_numpy(draw).to(w.dtype))
                module.bias.zero_()
                u = rng.standard_normal(module.sn_u.shape[0])
                module.sn_u.copy_(torch.from_numpy(u / np.linalg.norm(u)).to(w.dtype))
            module.warm_up(steps=5)
    return model


def build_model(config, channels: int | None = None) -> NoveltyModel:
    """Construct and He-initialize a model from a training config."""
    ch = channels if channels is not None else config.channels
    if ch not in (1, 3):
        raise ValueError(f"channel count must be 1 or 3, got {ch}")
    model = NoveltyModel(channels=ch, d_z=config.d_z, base_width=config.base_width,
                      tanh_encoder=config.tanh_encoder)
    init_weights(model, config.seed)
    return model
