"""Discriminator (weight-normalised 3D U-Net), patch generator and noise encoder.

All public forwards take channels-last volumes ``(B, H, W, D, C)`` and the
discriminator returns channels-last logits ``(B, H, W, D, K)``; the permutes to
torch's channels-first layout happen inside.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .errors import ContractError, GeometryError
from .losses import FeatureSummary, GaussianPosterior


@dataclass
class DiscriminatorSpec:
    in_channels: int = 2
    num_classes: int = 4
    base_width: int = 32
    depth: int = 3  # number of average-pooling steps
    leaky_slope: float = 0.2
    feature_tap: int | None = None  # encoder stage; None -> depth - 1

    def __post_init__(self):
        if self.depth < 2:
            raise ContractError("discriminator depth must be >= 2")
        if self.feature_tap is None:
            self.feature_tap = self.depth - 1
        if not 0 <= self.feature_tap <= self.depth:
            raise ContractError(f"feature_tap must lie in 0..{self.depth}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    @property
    def tap_id(self) -> str:
        return f"encoder.{self.feature_tap}"

    def tap_channels(self) -> int:
        return self.base_width * 2 ** self.feature_tap


@dataclass
class GeneratorSpec:
    noise_dim: int = 100
    out_channels: int = 2
    out_side: int = 32
    base_width: int = 16

    def __post_init__(self):
        n = self.out_side // 2
        if self.out_side < 4 or self.out_side % 2 or n & (n - 1):
            raise ContractError("out_side must be a power-of-two multiple of the 2^3 seed grid")

    @property
    def n_stages(self) -> int:
        return int(round(np.log2(self.out_side // 2)))


@dataclass
class EncoderSpec:
    in_channels: int = 2
    noise_dim: int = 100
    layers: int = 3
    theta: float = 1.0
    base_width: int = 16


def _wn_conv(cin, cout, kernel, padding=0):
    return weight_norm(nn.Conv3d(cin, cout, kernel, padding=padding))


def _wn_upconv(cin, cout):
    # ConvTranspose weights are (in, out, ...); normalise per output channel.
    return weight_norm(nn.ConvTranspose3d(cin, cout, 2, stride=2), dim=1)


class _ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, slope):
        super().__init__(
            _wn_conv(cin, cout, 3, padding=1),
            nn.LeakyReLU(slope),
            _wn_conv(cout, cout, 3, padding=1),
            nn.LeakyReLU(slope),
        )


def _to_channels_first(x):
    return x.permute(0, 4, 1, 2, 3)


def _to_channels_last(x):
    return x.permute(0, 2, 3, 4, 1)


class Discriminator(nn.Module):
    """3D U-Net with weight norm, leaky ReLU and average pooling.

    ``encoder[i]`` is the conv block at resolution ``2^-i``; ``encoder[depth]``
    is the bottleneck.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w, s = spec.base_width, spec.leaky_slope
        widths = [w * 2 ** i for i in range(spec.depth + 1)]
        self.encoder = nn.ModuleList()
        cin = spec.in_channels
        for width in widths:
            self.encoder.append(_ConvBlock(cin, width, s))
            cin = width
        self.pool = nn.AvgPool3d(2)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in reversed(range(spec.depth)):
            self.up.append(_wn_upconv(widths[i + 1], widths[i]))
            self.decoder.append(_ConvBlock(2 * widths[i], widths[i], s))
        self.head = _wn_conv(w, spec.num_classes, 1)

    def _check(self, x):
        if x.ndim != 5 or x.shape[-1] != self.spec.in_channels:
            raise GeometryError(f"expected (B, H, W, D, {self.spec.in_channels}), got {tuple(x.shape)}")
        d = self.spec.divisor
        if any(n % d for n in x.shape[1:4]):
            raise GeometryError(f"spatial size {tuple(x.shape[1:4])} must be divisible by {d}")

    def forward(self, x):
        """Logits (B, H, W, D, K) for the K real classes."""
        self._check(x)
        h = _to_channels_first(x)
        skips = []
        for i, block in enumerate(self.encoder):
            h = block(h)
            if i < self.spec.depth:
                skips.append(h)
                h = self.pool(h)
        for up, block in zip(self.up, self.decoder):
            h = block(torch.cat([up(h), skips.pop()], dim=1))
        return _to_channels_last(self.head(h))

    def features(self, x):
        """Spatially averaged activations (B, C) of the tapped encoder stage."""
        self._check(x)
        h = _to_channels_first(x)
        for i, block in enumerate(self.encoder):
            h = block(h)
            if i == self.spec.feature_tap:
                return h.mean(dim=(2, 3, 4))
            h = self.pool(h)
        raise AssertionError("unreachable")

    def feature_summary(self, x) -> FeatureSummary:
        return FeatureSummary.from_features(self.features(x), self.spec.tap_id)


class Generator(nn.Module):
    """Volumetric transposed-convolution generator, noise (B, d) -> patches (B, s, s, s, M)."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        n = spec.n_stages
        widths = [spec.base_width * 2 ** (n - 1 - i) for i in range(n)]
        self.seed_channels = widths[0]
        self.project = nn.Linear(spec.noise_dim, widths[0] * 8)
        self.seed_norm = nn.BatchNorm3d(widths[0])
        layers = []
        for i in range(n):
            cin = widths[i]
            if i == n - 1:
                layers += [nn.ConvTranspose3d(cin, spec.out_channels, 4, stride=2, padding=1), nn.Tanh()]
            else:
                layers += [
                    nn.ConvTranspose3d(cin, widths[i + 1], 4, stride=2, padding=1),
                    nn.BatchNorm3d(widths[i + 1]),
                    nn.ReLU(),
                ]
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.spec.noise_dim:
            raise GeometryError(f"noise must be (B, {self.spec.noise_dim}), got {tuple(z.shape)}")
        h = self.project(z).view(-1, self.seed_channels, 2, 2, 2)
        h = torch.relu(self.seed_norm(h))
        return _to_channels_last(self.body(h))


def posterior_from_raw(mu, raw_sigma, theta):
    """Squash an unconstrained scale into (0, theta] via theta * sigmoid."""
    # Floor keeps sigma > 0 when the sigmoid underflows in float32.
    sigma = theta * torch.sigmoid(raw_sigma).clamp(min=1e-6)
    return GaussianPosterior(mu=mu, sigma=sigma, theta=theta)


class Encoder(nn.Module):
    """Three strided conv layers mapping a patch to q(z | x) = N(mu, sigma^2)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.in_channels
        for i in range(spec.layers):
            cout = spec.base_width * 2 ** i
            layers += [nn.Conv3d(cin, cout, 4, stride=2, padding=1), nn.BatchNorm3d(cout), nn.LeakyReLU(0.2)]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(cin, 2 * spec.noise_dim)

    def forward(self, x) -> GaussianPosterior:
        if x.ndim != 5 or x.shape[-1] != self.spec.in_channels:
            raise GeometryError(f"expected (B, H, W, D, {self.spec.in_channels}), got {tuple(x.shape)}")
        h = self.body(_to_channels_first(x)).mean(dim=(2, 3, 4))
        mu, raw = self.out(h).chunk(2, dim=1)
        return posterior_from_raw(mu, raw, self.spec.theta)


def build_discriminator(spec: DiscriminatorSpec) -> Discriminator:
    return Discriminator(spec)


def build_generator(spec: GeneratorSpec) -> Generator:
    return Generator(spec)


def build_encoder(spec: EncoderSpec) -> Encoder:
    return Encoder(spec)


def sample_noise(batch: int, d: int, rng: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """I.i.d. uniform noise on [-1, 1]^d."""
    if batch < 1 or d < 1:
        raise ContractError("batch and d must be >= 1")
    return torch.rand(batch, d, generator=rng, dtype=dtype) * 2.0 - 1.0


def weight_directions(module: nn.Module):
    """Yield ``(v / ||v||, dim)`` for every weight-normalised layer.

    The norm runs over all axes except ``dim``, so each slice along ``dim`` of
    the returned direction has unit L2 norm.
    """
    for sub in module.modules():
        params = getattr(sub, "parametrizations", None)
        if params is None or "weight" not in params:
            continue
        v = params.weight.original1
        dim = params.weight[0].dim
        axes = [a for a in range(v.ndim) if a != dim]
        yield v / torch.linalg.vector_norm(v, dim=axes, keepdim=True), dim


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, modules: dict, specs: dict, extra: dict | None = None):
    """Write parameters and buffers of ``modules`` to one ``.npz`` archive.

    Arrays are keyed ``"<module>/<state_dict key>"``; ``specs`` (dataclasses) and
    ``extra`` go into a JSON string stored under ``"__meta__"``.
    """
    arrays = {}
    for name, module in modules.items():
        for key, value in module.state_dict().items():
            arrays[f"{name}/{key}"] = value.detach().cpu().numpy()
    meta = {"format_version": 1, "specs": {k: asdict(v) for k, v in specs.items()}, "extra": extra or {}}
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(modules, meta)`` rebuilt from an archive written by ``save_checkpoint``."""
    builders = {
        "discriminator": (DiscriminatorSpec, Discriminator),
        "generator": (GeneratorSpec, Generator),
        "encoder": (EncoderSpec, Encoder),
    }
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        modules = {}
        for name, fields in meta["specs"].items():
            spec_cls, module_cls = builders[name]
            module = module_cls(spec_cls(**fields))
            prefix = f"{name}/"
            state = {k[len(prefix):]: torch.from_numpy(archive[k].copy()) for k in archive.files if k.startswith(prefix)}
            module.load_state_dict(state)
            modules[name] = module
    return modules, meta
