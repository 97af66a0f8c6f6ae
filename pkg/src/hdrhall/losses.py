"""Training objectives: hinge GAN losses, perceptual and feature-matching terms."""

from __future__ import annotations

import csv
from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

LOG_FIELDS = ("step", "d_loss", "g_gan", "g_perc", "g_fm", "g_total")


@dataclass(frozen=True)
class LossReport:
    """Scalar loss values of one optimization step.

    g_total is always the fixed-order sum (g_gan + g_perc) + g_fm of the other
    fields, so logged rows can be re-audited exactly.
    """

    d_loss: float
    g_gan: float
    g_perc: float
    g_fm: float

    @property
    def g_total(self) -> float:
        return (self.g_gan + self.g_perc) + self.g_fm

    def csv_row(self, step: int) -> list:
        return [step, self.d_loss, self.g_gan, self.g_perc, self.g_fm, self.g_total]


class LossLog:
    """Append-only CSV training log, one row per iteration."""

    def __init__(self, path):
        self.path = path
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(LOG_FIELDS)

    def append(self, step: int, report: LossReport) -> None:
        self._writer.writerow(report.csv_row(step))
        self._file.flush()

    def close(self) -> None:
        self._file.close()


def hinge(x, y):
    """max(0, 1 - x*y) for scores x and labels y in {-1, +1}."""
    return torch.clamp(1.0 - x * y, min=0.0)


def d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge objective, meaned over every patch score."""
    real_term = torch.clamp(1.0 - real_scores, min=0.0).mean()
    fake_term = torch.clamp(1.0 + fake_scores, min=0.0).mean()
    return real_term + fake_term


def g_gan_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Generator adversarial term: negative mean patch score."""
    return -fake_scores.mean()


def _layer_l1(feats_a, feats_b) -> torch.Tensor:
    if len(feats_a) != len(feats_b):
        raise ValueError("feature lists differ in length")
    total = None
    weight = 1.0 / len(feats_a)
    for a, b in zip(feats_a, feats_b):
        if a.shape != b.shape:
            raise ValueError(f"feature shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        term = weight * (a - b).abs().mean()
        total = term if total is None else total + term
    return total


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor) -> torch.Tensor:
    """Mean L1 distance between extractor activations, uniformly weighted."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return _layer_l1(extractor(pred), extractor(target))


@contextmanager
def _frozen_params(module: nn.Module):
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


def feature_matching_loss(pred: torch.Tensor, target: torch.Tensor, discriminator) -> torch.Tensor:
    """Perceptual-style L1 over the discriminator's intermediate activations.

    The discriminator weights are flagged non-differentiable while the graph is
    built, so backpropagation reaches `pred` but never accumulates into them.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if isinstance(discriminator, nn.Module):
        with _frozen_params(discriminator):
            feats_pred = discriminator.features(pred)
            with torch.no_grad():
                feats_target = discriminator.features(target)
    else:  # feature-extractor stubs used by the oracle tests
        feats_pred = discriminator.features(pred)
        feats_target = discriminator.features(target)
    return _layer_l1(feats_pred, [t.detach() for t in feats_target])


def g_total(
    pred: torch.Tensor,
    target: torch.Tensor,
    fake_scores: torch.Tensor,
    extractor,
    discriminator,
    d_loss_value: float = 0.0,
    extractor_inputs: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, LossReport]:
    """Combine the generator objective with unit weights on all three terms.

    The feature-matching term always sees (pred, target); the perceptual term
    sees `extractor_inputs` when given, which is how the trainer feeds the
    extractor display-referred rasters while the discriminator stays in the
    transformed space.
    """
    gan = g_gan_loss(fake_scores)
    perc_pair = extractor_inputs if extractor_inputs is not None else (pred, target)
    perc = perceptual_loss(perc_pair[0], perc_pair[1], extractor)
    fm = feature_matching_loss(pred, target, discriminator)
    total = (gan + perc) + fm
    report = LossReport(
        d_loss=float(d_loss_value),
        g_gan=float(gan.detach()),
        g_perc=float(perc.detach()),
        g_fm=float(fm.detach()),
    )
    return total, report


# ---------------------------------------------------------------------------
# Feature extractors for the perceptual term
# ---------------------------------------------------------------------------


def display_referred(linear: torch.Tensor, stops: float = 0.0, gamma: float = 2.2) -> torch.Tensor:
    """Differentiable exposure+gamma mapping of linear radiance to [0,1]."""
    return torch.clamp((2.0**stops) * linear, min=0.0, max=1.0) ** (1.0 / gamma)


class IdentityExtractor(nn.Module):
    """Single identity layer; reduces the perceptual loss to plain L1."""

    def forward(self, x):
        return [x]

    def features(self, x):
        return [x]


class RandomFeatureExtractor(nn.Module):
    """Frozen, seeded random conv stack with four pooling stages.

    Hermetic stand-in for a pretrained classification backbone: deterministic,
    needs no downloaded weights, and still mixes pixels across scales.
    """

    def __init__(self, widths=(16, 32, 64, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        cin = 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (cin * 9) ** -0.5)
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.avg_pool2d(F.relu(conv(h)), 2)
            feats.append(h)
        return feats


class VggFeatureExtractor(nn.Module):
    """Activations after the first four pooling stages of a pretrained VGG16.

    Inputs are display-referred [0,1] RGB rasters; ImageNet normalization is
    applied internally. Requires torchvision and downloadable weights, so the
    hermetic test suite uses RandomFeatureExtractor instead.
    """

    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)
    _POOL_SLICES = (5, 10, 17, 24)  # vgg16.features indices just past each pool

    def __init__(self):
        super().__init__()
        try:
            from torchvision import models as tv_models

            vgg = tv_models.vgg16(weights=tv_models.VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # torchvision missing or weights unavailable
            raise RuntimeError(
                "pretrained VGG features unavailable; use the 'random' extractor"
            ) from exc
        self.slices = nn.ModuleList()
        prev = 0
        for stop in self._POOL_SLICES:
            self.slices.append(nn.Sequential(*list(vgg.features.children())[prev:stop]))
            prev = stop
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        mean = x.new_tensor(self._MEAN).view(1, 3, 1, 1)
        std = x.new_tensor(self._STD).view(1, 3, 1, 1)
        h = (x - mean) / std
        feats = []
        for block in self.slices:
            h = block(h)
            feats.append(h)
        return feats


def make_extractor(kind: str, seed: int = 0) -> nn.Module:
    if kind == "random":
        return RandomFeatureExtractor(seed=seed)
    if kind == "identity":
        return IdentityExtractor()
    if kind == "vgg":
        return VggFeatureExtractor()
    raise ValueError(f"unknown extractor kind {kind!r}")
