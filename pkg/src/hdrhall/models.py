"""Generator, discriminator and ablation networks built from declarative specs."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_GAUSS_BOUND = 4.753424308822899  # |inv_cdf(1e-6)| of the pixel transform


class SpatialSizeError(ValueError):
    """Input height/width is not divisible by the network's resampling factor."""


@dataclass(frozen=True)
class GeneratorSpec:
    """Declarative description of the range-expansion UNet."""

    level_widths: tuple[int, ...] = (3, 64, 128, 256, 512, 512, 512, 512, 1024)
    kernel: int = 4
    norm: str = "instance"  # instance | batch
    activation: str = "selu"
    resample: str = "bilinear"
    skip_fusion: str = "single-convolution"
    residual_blocks: bool = True
    spectral_norm: bool = False

    def __post_init__(self):
        if len(self.level_widths) != 9:
            raise ValueError("level_widths must have 9 entries (8 resampling steps)")
        if self.level_widths[0] != 3:
            raise ValueError("level 0 carries the RGB raster itself, width must be 3")
        _check_supported(self)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (len(self.level_widths) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "unet"
        d["level_widths"] = list(self.level_widths)
        return d


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Declarative description of the patch classifier."""

    layer_widths: tuple[int, ...] = (64, 128, 256, 512, 1)
    downsample_layers: int = 3
    kernel: int = 4
    leaky_slope: float = 0.2
    spectral_norm: bool = False

    def __post_init__(self):
        if self.layer_widths[-1] != 1:
            raise ValueError("final layer must emit a single score channel")
        if self.downsample_layers >= len(self.layer_widths):
            raise ValueError("more downsampling layers than layers")

    @property
    def spatial_divisor(self) -> int:
        return 2**self.downsample_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d


@dataclass(frozen=True)
class AblationSpec:
    """Smaller single-model variants: IN/BN UNet and a skipless autoencoder."""

    variant: str = "unet_in"  # unet_in | unet_bn | autoencoder
    encoder_widths: tuple[int, ...] = (64, 128, 256, 512)
    bottleneck_width: int = 512
    bottleneck_depth: int = 8
    dilations: tuple[int, ...] = (1, 2, 4, 8, 8, 8, 8, 8)
    kernel: int = 4
    spectral_norm: bool = False

    def __post_init__(self):
        if self.variant not in ("unet_in", "unet_bn", "autoencoder"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.dilations) != self.bottleneck_depth:
            raise ValueError("need one dilation per bottleneck layer")

    @property
    def norm(self) -> str:
        return "batch" if self.variant == "unet_bn" else "instance"

    @property
    def has_skips(self) -> bool:
        return self.variant != "autoencoder"

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (len(self.encoder_widths) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "ablation"
        d["encoder_widths"] = list(self.encoder_widths)
        d["dilations"] = list(self.dilations)
        return d


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "unet")
    if kind == "unet":
        d["level_widths"] = tuple(d["level_widths"])
        return GeneratorSpec(**d)
    if kind == "ablation":
        d["encoder_widths"] = tuple(d["encoder_widths"])
        d["dilations"] = tuple(d["dilations"])
        return AblationSpec(**d)
    raise ValueError(f"unknown generator spec kind {kind!r}")


def _check_supported(spec: GeneratorSpec) -> None:
    if spec.norm not in ("instance", "batch"):
        raise ValueError(f"unknown norm {spec.norm!r}")
    if spec.activation != "selu":
        raise ValueError("only the selu activation is implemented")
    if spec.resample != "bilinear":
        raise ValueError("only bilinear resampling is implemented")
    if spec.skip_fusion != "single-convolution":
        raise ValueError("only single-convolution skip fusion is implemented")
    if not spec.residual_blocks:
        raise ValueError("plain (non-residual) blocks are not implemented")


class InstanceNorm(nn.Module):
    """Affine-free instance normalization.

    1x1 feature maps (the UNet bottom at 256x256 inputs) pass through
    unchanged: their spatial variance is identically zero and normalizing
    would erase the signal and kill the gradient of the producing conv.
    """

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        if x.shape[2] * x.shape[3] == 1:
            return x
        mu = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps)


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return InstanceNorm()
    return nn.BatchNorm2d(channels, affine=False)


def _pad_same(x, kernel: int, dilation: int = 1):
    total = (kernel - 1) * dilation
    lo = total // 2
    return F.pad(x, (lo, total - lo, lo, total - lo))


class ResBlock(nn.Module):
    """Two same-size convolutions with norm and SELU around an additive shortcut.

    Convolutions that feed a normalization carry no bias: the mean subtraction
    would cancel it exactly, leaving a dead parameter.
    """

    def __init__(self, cin: int, cout: int, kernel: int = 4, norm: str = "instance", dilation: int = 1):
        super().__init__()
        self.kernel = kernel
        self.dilation = dilation
        self.conv1 = nn.Conv2d(cin, cout, kernel, dilation=dilation, bias=False)
        self.norm1 = _make_norm(norm, cout)
        self.conv2 = nn.Conv2d(cout, cout, kernel, dilation=dilation, bias=False)
        self.norm2 = _make_norm(norm, cout)
        self.project = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        h = F.selu(self.norm1(self.conv1(_pad_same(x, self.kernel, self.dilation))))
        h = self.norm2(self.conv2(_pad_same(h, self.kernel, self.dilation)))
        s = x if self.project is None else self.project(x)
        return F.selu(h + s)


def _resize(x, factor: float):
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


def _check_divisible(x, divisor: int) -> None:
    h, w = x.shape[-2], x.shape[-1]
    if h % divisor or w % divisor:
        raise SpatialSizeError(f"spatial size {h}x{w} not divisible by {divisor}")


class RangeExpansionUNet(nn.Module):
    """UNet mapping an LDR raster in [-1,1] to a Gaussian-space HDR raster.

    Each encoder level halves the resolution bilinearly and applies a residual
    block; the decoder mirrors this and fuses each skip with a single 1x1
    convolution. The level-0 skip is the input raster itself, and the level-0
    fusion is the (linear) output layer, clamped to the transform bounds.
    """

    def __init__(self, spec: GeneratorSpec, output_bound: float | None = DEFAULT_GAUSS_BOUND):
        super().__init__()
        self.spec = spec
        self.output_bound = output_bound
        w = spec.level_widths
        self.down = nn.ModuleList(
            ResBlock(w[i], w[i + 1], spec.kernel, spec.norm) for i in range(len(w) - 1)
        )
        # Level 0 decodes at w[1] channels; its fusion conv produces the raster.
        self.up = nn.ModuleList(
            ResBlock(w[i + 1], w[i] if i else w[1], spec.kernel, spec.norm)
            for i in range(len(w) - 1)
        )
        # Fusion convs run bottom-up over levels 7..0; level 0 fuses the input
        # image with the decoded features and emits the output raster.
        self.fuse = nn.ModuleList(
            nn.Conv2d((w[i] if i else w[1]) + w[i], w[i], kernel_size=1)
            for i in range(len(w) - 1)
        )

    def forward(self, x):
        _check_divisible(x, self.spec.spatial_divisor)
        skips = [x]
        h = x
        for block in self.down:
            h = block(_resize(h, 0.5))
            skips.append(h)
        for i in range(len(self.up) - 1, -1, -1):
            h = self.up[i](_resize(h, 2.0))
            h = self.fuse[i](torch.cat([h, skips[i]], dim=1))
        if self.output_bound is not None:
            h = torch.clamp(h, -self.output_bound, self.output_bound)
        return h


class PatchDiscriminator(nn.Module):
    """Fully convolutional patch classifier emitting raw hinge scores."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        widths = spec.layer_widths
        convs = []
        cin = 3
        for cout in widths:
            convs.append(nn.Conv2d(cin, cout, spec.kernel))
            cin = cout
        self.convs = nn.ModuleList(convs)

    def forward(self, x, return_features: bool = False):
        _check_divisible(x, self.spec.spatial_divisor)
        feats = []
        h = x
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            if i < self.spec.downsample_layers:
                h = _resize(h, 0.5)
            h = conv(_pad_same(h, self.spec.kernel))
            if i != last:
                h = F.leaky_relu(h, self.spec.leaky_slope)
                feats.append(h)
        return (h, feats) if return_features else h

    def features(self, x):
        """Intermediate activations of every layer except the final score conv."""
        _, feats = self.forward(x, return_features=True)
        return feats


class DilatedBottleneckNet(nn.Module):
    """Ablation topology: short encoder/decoder around a deep dilated bottleneck.

    The unet_* variants keep one skip per encoder level (1x1 pre-skip
    projection, concatenation, 1x1 post-fuse); the autoencoder variant has
    none, so the bottleneck alone must carry the content.
    """

    def __init__(self, spec: AblationSpec, output_bound: float | None = DEFAULT_GAUSS_BOUND):
        super().__init__()
        self.spec = spec
        self.output_bound = output_bound
        w = spec.encoder_widths
        self.stem = ResBlock(3, w[0], spec.kernel, spec.norm)
        self.down = nn.ModuleList(
            ResBlock(w[i], w[i + 1], spec.kernel, spec.norm) for i in range(len(w) - 1)
        )
        self.bottleneck = nn.ModuleList(
            ResBlock(spec.bottleneck_width, spec.bottleneck_width, spec.kernel, spec.norm, dilation=d)
            for d in spec.dilations
        )
        self.bottleneck_in = (
            nn.Conv2d(w[-1], spec.bottleneck_width, 1)
            if w[-1] != spec.bottleneck_width
            else nn.Identity()
        )
        self.bottleneck_out = (
            nn.Conv2d(spec.bottleneck_width, w[-1], 1)
            if w[-1] != spec.bottleneck_width
            else nn.Identity()
        )
        self.up = nn.ModuleList(
            ResBlock(w[i + 1], w[i], spec.kernel, spec.norm) for i in range(len(w) - 1)
        )
        if spec.has_skips:
            self.pre_skip = nn.ModuleList(nn.Conv2d(w[i], w[i], 1) for i in range(len(w) - 1))
            self.post_fuse = nn.ModuleList(nn.Conv2d(2 * w[i], w[i], 1) for i in range(len(w) - 1))
        else:
            self.pre_skip = self.post_fuse = None
        self.head = nn.Conv2d(w[0], 3, 1)

    def forward(self, x):
        _check_divisible(x, self.spec.spatial_divisor)
        h = self.stem(x)
        skips = [h]
        for block in self.down:
            h = block(_resize(h, 0.5))
            skips.append(h)
        h = self.bottleneck_in(h)
        for block in self.bottleneck:
            h = block(h)
        h = self.bottleneck_out(h)
        for i in range(len(self.up) - 1, -1, -1):
            h = self.up[i](_resize(h, 2.0))
            if self.post_fuse is not None:
                h = self.post_fuse[i](torch.cat([h, self.pre_skip[i](skips[i])], dim=1))
        h = self.head(h)
        if self.output_bound is not None:
            h = torch.clamp(h, -self.output_bound, self.output_bound)
        return h


def bottleneck_receptive_field(dilations, kernel: int = 4, convs_per_block: int = 2) -> int:
    """Receptive-field extent of a stack of residual blocks, in input pixels."""
    return 1 + sum(convs_per_block * (kernel - 1) * d for d in dilations)


# ---------------------------------------------------------------------------
# Spectral normalization
# ---------------------------------------------------------------------------


class SpectralNorm(nn.Module):
    """Weight parametrization dividing by the power-iterated top singular value.

    One power iteration runs per training-mode forward; `power_iterate` refines
    the estimate in place for as many steps as requested. A zero weight matrix
    is passed through unchanged rather than divided by its zero norm.
    """

    def __init__(self, weight: torch.Tensor, eps: float = 1e-12):
        super().__init__()
        self.eps = eps
        mat = weight.detach().flatten(1)
        u = F.normalize(torch.randn(mat.shape[0], dtype=mat.dtype), dim=0, eps=eps)
        v = F.normalize(torch.randn(mat.shape[1], dtype=mat.dtype), dim=0, eps=eps)
        self.register_buffer("u", u)
        self.register_buffer("v", v)

    @torch.no_grad()
    def _iterate(self, mat: torch.Tensor, steps: int) -> None:
        u, v = self.u, self.v
        for _ in range(steps):
            v = F.normalize(mat.t() @ u, dim=0, eps=self.eps)
            u = F.normalize(mat @ v, dim=0, eps=self.eps)
        self.u.copy_(u)
        self.v.copy_(v)

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.flatten(1)
        if self.training:
            self._iterate(mat.detach(), 1)
        sigma = torch.dot(self.u, mat @ self.v)
        if float(sigma.detach()) <= self.eps:
            return weight
        return weight / sigma


def apply_spectral_norm(network: nn.Module) -> nn.Module:
    """Register spectral normalization on the weight of every conv/linear layer."""
    for module in network.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            nn.utils.parametrize.register_parametrization(
                module, "weight", SpectralNorm(module.weight)
            )
    return network


def power_iterate(network: nn.Module, steps: int) -> None:
    """Refine every spectral-norm estimate with extra power iterations."""
    for module in network.modules():
        if not nn.utils.parametrize.is_parametrized(module, "weight"):
            continue
        for par in module.parametrizations.weight:
            if isinstance(par, SpectralNorm):
                original = module.parametrizations.weight.original
                par._iterate(original.detach().flatten(1), steps)


def spectral_sigmas(network: nn.Module) -> dict[str, float]:
    """Exact top singular value of every spectrally normalized effective weight."""
    out = {}
    for name, module in network.named_modules():
        if nn.utils.parametrize.is_parametrized(module, "weight"):
            mat = module.weight.detach().flatten(1)
            out[name] = float(torch.linalg.svdvals(mat)[0])
    return out


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_generator(
    spec: GeneratorSpec, output_bound: float | None = DEFAULT_GAUSS_BOUND
) -> RangeExpansionUNet:
    net = RangeExpansionUNet(spec, output_bound)
    if spec.spectral_norm:
        apply_spectral_norm(net)
    return net


def build_discriminator(spec: DiscriminatorSpec) -> PatchDiscriminator:
    net = PatchDiscriminator(spec)
    if spec.spectral_norm:
        apply_spectral_norm(net)
    return net


def build_ablation(
    spec: AblationSpec, output_bound: float | None = DEFAULT_GAUSS_BOUND
) -> DilatedBottleneckNet:
    net = DilatedBottleneckNet(spec, output_bound)
    if spec.spectral_norm:
        apply_spectral_norm(net)
    return net


def build_from_spec(spec, output_bound: float | None = DEFAULT_GAUSS_BOUND):
    if isinstance(spec, GeneratorSpec):
        return build_generator(spec, output_bound)
    if isinstance(spec, AblationSpec):
        return build_ablation(spec, output_bound)
    raise TypeError(f"cannot build a generator from {type(spec).__name__}")
