"""Simulated HDR training pairs from an LDR-only corpus.

Each sample is built by expanding an 8-bit photo to linear radiance with a
pluggable range expander, random-cropping and resizing to 256x256, and culling
the result back to LDR. The culled raster is the network input and the
expanded raster the regression/adversarial target, so badly exposed regions
exist by construction and their ground truth is known.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import cv2
import numpy as np
from PIL import Image

from .hdrcore import DegenerateImageError, HdrImage, LdrImage, culling

log = logging.getLogger(__name__)

SAMPLE_SIZE = 256


class TooSmallInputError(ValueError):
    pass


class ExhaustedManifestError(Exception):
    """Every manifest entry was skipped as degenerate; no pairs can be produced."""


@dataclass(frozen=True)
class ExpanderHandle:
    """Pluggable LDR-to-HDR range expander.

    kind "analytic-gamma" inverts a gamma curve, (codes/255)**gamma * scale,
    and needs no weights; kind "checkpoint-model" runs the generator stored in
    a DHH1 checkpoint file.
    """

    kind: str = "analytic-gamma"
    gamma: float = 2.2
    scale: float = 1.0
    checkpoint: str | None = None

    def __post_init__(self):
        if self.kind == "analytic-gamma":
            if not (self.gamma > 1.0 and self.scale > 0.0):
                raise ValueError("analytic-gamma needs gamma > 1 and scale > 0")
        elif self.kind == "checkpoint-model":
            if not self.checkpoint:
                raise ValueError("checkpoint-model needs a checkpoint path")
        else:
            raise ValueError(f"unknown expander kind {self.kind!r}")

    def expand(self, ldr: LdrImage) -> HdrImage:
        if self.kind == "analytic-gamma":
            linear = np.power(ldr.pixels.astype(np.float64) / 255.0, self.gamma) * self.scale
            return HdrImage(linear.astype(np.float32))
        from .trainer import predict  # deferred: trainer depends on this module

        return predict(self.checkpoint, ldr)


@dataclass(frozen=True)
class SamplePair:
    """One training example: culled LDR input and its linear HDR target."""

    input: LdrImage
    target: HdrImage

    def __post_init__(self):
        if self.input.pixels.shape[:2] != self.target.pixels.shape[:2]:
            raise ValueError("input and target differ in size")


def crop_resize(
    pixels: np.ndarray, rng: np.random.Generator, out_size: int = SAMPLE_SIZE
) -> np.ndarray:
    """Random square crop with side in [out_size, min(H,W)], resized bilinearly."""
    h, w = pixels.shape[:2]
    if min(h, w) < out_size:
        raise TooSmallInputError(f"image {h}x{w} smaller than {out_size}")
    side = int(rng.integers(out_size, min(h, w) + 1))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = pixels[top : top + side, left : left + side]
    if side == out_size:
        return np.ascontiguousarray(crop)
    return cv2.resize(
        np.ascontiguousarray(crop, dtype=np.float32),
        (out_size, out_size),
        interpolation=cv2.INTER_LINEAR,
    )


def augment(
    ldr: LdrImage,
    expander: ExpanderHandle,
    rng: np.random.Generator,
    fraction: float = 0.10,
) -> SamplePair:
    """Expand, crop/resize and cull one LDR photo into a SamplePair.

    Raises DegenerateImageError for images whose expanded crop has no usable
    luminance range (callers skip those samples).
    """
    expanded = expander.expand(ldr)
    target = HdrImage(crop_resize(expanded.pixels, rng))
    return SamplePair(input=culling(target, fraction=fraction), target=target)


# ---------------------------------------------------------------------------
# Corpus manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Manifest:
    """Sorted list of decodable corpus images with their dimensions."""

    root: str
    records: tuple[tuple[str, int, int], ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.records)

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            for rel, w, h in self.records:
                f.write(f"{rel}\t{w}\t{h}\n")

    @classmethod
    def load(cls, path, root) -> "Manifest":
        records = []
        with open(path) as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                rel, w, h = line.split("\t")
                records.append((rel, int(w), int(h)))
        return cls(root=os.fspath(root), records=tuple(records))

    def read_image(self, index: int) -> LdrImage:
        rel = self.records[index][0]
        with Image.open(os.path.join(self.root, rel)) as img:
            rgb = np.asarray(img.convert("RGB"))
        return LdrImage(rgb)


def scan_corpus(root, tags: Sequence[str] = ()) -> Manifest:
    """Walk a directory tree and record every decodable image, sorted by path.

    With `tags`, only the matching top-level subdirectories are scanned (the
    corpus layout is one directory per category). Unreadable entries are
    logged and skipped, never fatal.
    """
    root = os.fspath(root)
    roots = [os.path.join(root, t) for t in tags] if tags else [root]
    paths = []
    for base in roots:
        for dirpath, _, filenames in os.walk(base):
            for name in filenames:
                paths.append(os.path.join(dirpath, name))
    records = []
    for path in sorted(paths):
        rel = os.path.relpath(path, root)
        try:
            with Image.open(path) as img:
                img.verify()
            with Image.open(path) as img:
                width, height = img.size
        except Exception as exc:
            log.warning("skipping unreadable corpus entry %s: %s", rel, exc)
            continue
        records.append((rel.replace(os.sep, "/"), width, height))
    records.sort(key=lambda r: r[0])
    return Manifest(root=root, records=tuple(records))


def batch_iter(
    manifest: Manifest,
    expander: ExpanderHandle,
    batch_size: int,
    seed: int,
    fraction: float = 0.10,
) -> Iterator[list[SamplePair]]:
    """Infinite stream of SamplePair batches over seeded shuffled epochs.

    Degenerate samples are replaced by the next candidate; incomplete trailing
    batches are dropped so batch shapes stay constant.
    """
    if len(manifest) == 0:
        raise ExhaustedManifestError("manifest is empty")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(manifest))
        batch: list[SamplePair] = []
        produced = 0
        for index in order:
            try:
                ldr = manifest.read_image(int(index))
                pair = augment(ldr, expander, rng, fraction=fraction)
            except (DegenerateImageError, TooSmallInputError) as exc:
                log.debug("skipping sample %d: %s", index, exc)
                continue
            batch.append(pair)
            if len(batch) == batch_size:
                produced += 1
                yield batch
                batch = []
        # drop-last: leftover pairs are discarded at the epoch boundary
        if produced == 0:
            raise ExhaustedManifestError("no usable samples left after skipping degenerates")
