"""Bijective map between exponentially distributed radiance and Gaussian space.

Linear HDR pixel values of natural images are heavily skewed towards zero and
are modeled here as Exp(lambda). Pushing them through their own CDF and then
the inverse Gaussian CDF yields approximately standard-normal values, which are
far better behaved as network inputs and regression targets. The map is clamped
at a small CDF epsilon so true black stays finite, and inverted exactly on the
unclamped interior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import special

import torch


class EmptySampleError(Exception):
    """Raised when rate estimation gets no strictly positive pixel values."""


@dataclass(frozen=True)
class TransformParams:
    """Exponential rate and CDF clamp for the radiance/Gaussian map."""

    lam: float = 1.0
    eps: float = 1e-6

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")

    @property
    def gauss_bound(self) -> float:
        """Magnitude of the Gaussian-space values at the clamp, |inv_cdf(eps)|."""
        return float(-gauss_inv_cdf(self.eps))

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(f"lambda = {self.lam!r}\n")
            f.write(f"eps = {self.eps!r}\n")

    @classmethod
    def load(cls, path) -> "TransformParams":
        values = {}
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, value = line.partition("=")
                values[key.strip()] = float(value)
        try:
            return cls(lam=values["lambda"], eps=values["eps"])
        except KeyError as exc:
            raise ValueError(f"missing key {exc} in params file {path}") from exc


@dataclass(frozen=True)
class GaussianImage:
    """HxWx3 raster in Gaussian space, bounded by the transform clamp."""

    pixels: np.ndarray
    params: TransformParams

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {self.pixels.shape}")
        bound = self.params.gauss_bound * (1.0 + 1e-6)
        if not np.all(np.abs(px) <= bound):
            raise ValueError("values exceed the clamp-induced Gaussian bounds")
        object.__setattr__(self, "pixels", px)


def gauss_cdf(x):
    """Standard normal CDF, 0.5*(1 + erf(x/sqrt(2))), evaluated via erfc."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * special.erfc(-x / math.sqrt(2.0))
    return float(out) if out.ndim == 0 else out

def gauss_inv_cdf(p):
    """Standard normal inverse CDF on (0, 1).

    Wichura's AS 241 (PPND16) rational approximation, accurate to ~1e-16
    relative; validated in the test suite against bisection on gauss_cdf.
    """
    p_in = np.asarray(p, dtype=np.float64)
    if np.any(p_in <= 0.0) or np.any(p_in >= 1.0):
        raise ValueError("p must lie strictly inside (0, 1)")
    p = np.atleast_1d(p_in)

    q = p - 0.5
    out = np.empty_like(q)

    central = np.abs(q) <= 0.425
    r = 0.180625 - q[central] * q[central]
    out[central] = q[central] * _ppnd16_poly(r, _A_CENTRAL, _B_CENTRAL)

    tail = ~central
    pt = np.minimum(p[tail], 1.0 - p[tail])
    r = np.sqrt(-np.log(pt))
    near = r <= 5.0
    val = np.empty_like(r)
    val[near] = _ppnd16_poly(r[near] - 1.6, _A_NEAR, _B_NEAR)
    val[~near] = _ppnd16_poly(r[~near] - 5.0, _A_FAR, _B_FAR)
    out[tail] = np.where(q[tail] < 0.0, -val, val)
    return float(out[0]) if p_in.ndim == 0 else out.reshape(p_in.shape)


def _ppnd16_poly(r, num, den):
    return np.polyval(num, r) / np.polyval(den, r)


# AS 241 PPND16 coefficients (highest order first, as np.polyval expects).
_A_CENTRAL = (
    2.5090809287301226727e3, 3.3430575583588128105e4, 6.7265770927008700853e4,
    4.5921953931549871457e4, 1.3731693765509461125e4, 1.9715909503065514427e3,
    1.3314166789178437745e2, 3.3871328727963666080e0,
)
_B_CENTRAL = (
    5.2264952788528545610e3, 2.8729085735721942674e4, 3.9307895800092710610e4,
    2.1213794301586595867e4, 5.3941960214247511077e3, 6.8718700749205790830e2,
    4.2313330701600911252e1, 1.0,
)
_A_NEAR = (
    7.74545014278341407640e-4, 2.27238449892691845833e-2, 2.41780725177450611770e-1,
    1.27045825245236838258e0, 3.64784832476320460504e0, 5.76949722146069140550e0,
    4.63033784615654529590e0, 1.42343711074968357734e0,
)
_B_NEAR = (
    1.05075007164441684324e-9, 5.47593808499534494600e-4, 1.51986665636164571966e-2,
    1.48103976427480074590e-1, 6.89767334985100004550e-1, 1.67638483018380384940e0,
    2.05319162663775882187e0, 1.0,
)
_A_FAR = (
    2.01033439929228813265e-7, 2.71155556874348757815e-5, 1.24266094738807843860e-3,
    2.65321895265761230930e-2, 2.96560571828504891230e-1, 1.78482653991729133580e0,
    5.46378491116411436990e0, 6.65790464350110377720e0,
)
_B_FAR = (
    2.04426310338993978564e-15, 1.42151175831644588870e-7, 1.84631831751005468180e-5,
    7.86869131145613259100e-4, 1.48753612908506148525e-2, 1.36929880922735805310e-1,
    5.99832206555887937690e-1, 1.0,
)


def estimate_lambda(samples: Iterable, eps: float = 1e-6) -> TransformParams:
    """Fit the exponential rate as 1 / mean over every pixel value of `samples`.

    Accepts HdrImage instances or bare arrays. One global rate is fitted and
    frozen; it is not a per-image quantity.
    """
    total, count = 0.0, 0
    any_positive = False
    for sample in samples:
        px = np.asarray(getattr(sample, "pixels", sample), dtype=np.float64)
        total += float(px.sum())
        count += px.size
        any_positive = any_positive or bool(np.any(px > 0))
    if count == 0 or not any_positive:
        raise EmptySampleError("need at least one strictly positive pixel value")
    return TransformParams(lam=count / total, eps=eps)


def forward_array(x: np.ndarray, params: TransformParams) -> np.ndarray:
    """Elementwise inv_cdf(clamp(1 - exp(-lambda*x), eps, 1-eps))."""
    x = np.asarray(x, dtype=np.float64)
    cdf = -np.expm1(-params.lam * x)
    cdf = np.clip(cdf, params.eps, 1.0 - params.eps)
    return gauss_inv_cdf(cdf)


def inverse_array(y: np.ndarray, params: TransformParams) -> np.ndarray:
    """Elementwise -log(1 - clamp(cdf(y), eps, 1-eps)) / lambda."""
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(gauss_cdf(y), params.eps, 1.0 - params.eps)
    return -np.log1p(-p) / params.lam


def forward(img, params: TransformParams) -> GaussianImage:
    """Transform a linear HdrImage into Gaussian space."""
    return GaussianImage(forward_array(img.pixels, params).astype(np.float32), params)


def inverse(img: GaussianImage, params: TransformParams):
    """Transform a GaussianImage back to linear radiance."""
    from .hdrcore import HdrImage

    return HdrImage(inverse_array(img.pixels, params).astype(np.float32))


# Tensor twins of forward/inverse, used inside the training loop where the
# transform must stay differentiable. erf/erfinv keep them numerically in step
# with the array implementations (cross-checked in tests).


def forward_tensor(x: torch.Tensor, params: TransformParams) -> torch.Tensor:
    cdf = -torch.expm1(-params.lam * x)
    cdf = torch.clamp(cdf, params.eps, 1.0 - params.eps)
    return math.sqrt(2.0) * torch.erfinv(2.0 * cdf - 1.0)


def inverse_tensor(y: torch.Tensor, params: TransformParams) -> torch.Tensor:
    cdf = 0.5 * (1.0 + torch.erf(y / math.sqrt(2.0)))
    cdf = torch.clamp(cdf, params.eps, 1.0 - params.eps)
    return -torch.log1p(-cdf) / params.lam
