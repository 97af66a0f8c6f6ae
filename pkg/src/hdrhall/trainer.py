"""Alternating GAN optimization with two-timescale Adam, checkpoints and logging."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from . import losses, models, pixtransform
from .datapipe import SamplePair
from .hdrcore import HdrImage, LdrImage


class NonFiniteLossError(RuntimeError):
    """A loss term went NaN/inf; training aborts instead of skipping silently."""

    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"non-finite loss at step {step}: {term} = {value}")
        self.step = step
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop hyperparameters; defaults follow the training recipe.

    The discriminator runs at four times the generator learning rate (two
    timescales); desk-scale runs override batch_size/max_iters downwards.
    """

    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 36
    max_iters: int = 700_000
    update_ratio: str = "1:1"
    seed: int = 0
    checkpoint_every: int = 10_000
    spectral_norm: bool = True
    extractor: str = "random"

    def __post_init__(self):
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        self.ratio_steps()

    def ratio_steps(self) -> tuple[int, int]:
        try:
            d_steps, g_steps = (int(v) for v in self.update_ratio.split(":"))
        except ValueError as exc:
            raise ValueError(f"bad update_ratio {self.update_ratio!r}") from exc
        if d_steps < 1 or g_steps < 1:
            raise ValueError("update ratio parts must be >= 1")
        return d_steps, g_steps

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            for key, value in asdict(self).items():
                f.write(f"{key} = {value}\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls(**parse_config_text(path))


def parse_config_text(path) -> dict:
    """Read a key-value config file into typed TrainConfig fields."""
    types = {f.name: f.type for f in TrainConfig.__dataclass_fields__.values()}
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            if kind in ("float", float):
                out[key] = float(value)
            elif kind in ("int", int):
                out[key] = int(value)
            elif kind in ("bool", bool):
                out[key] = value.lower() in ("1", "true", "yes")
            else:
                out[key] = value
    return out


@dataclass
class TrainerState:
    """Everything a training run mutates, bundled for stepping and checkpoints."""

    config: TrainConfig
    gen_spec: object
    disc_spec: models.DiscriminatorSpec
    params: pixtransform.TransformParams
    generator: nn.Module
    discriminator: nn.Module
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    extractor: nn.Module
    step: int = 0

    def learning_rates(self) -> tuple[float, float]:
        return (
            float(self.opt_g.param_groups[0]["lr"]),
            float(self.opt_d.param_groups[0]["lr"]),
        )


def init_state(
    config: TrainConfig,
    params: pixtransform.TransformParams,
    gen_spec=None,
    disc_spec: models.DiscriminatorSpec | None = None,
) -> TrainerState:
    """Build networks and optimizers with seeded, reproducible initialization."""
    torch.manual_seed(config.seed)
    if gen_spec is None:
        gen_spec = models.GeneratorSpec(spectral_norm=config.spectral_norm)
    if disc_spec is None:
        disc_spec = models.DiscriminatorSpec(spectral_norm=config.spectral_norm)
    generator = models.build_from_spec(gen_spec, output_bound=params.gauss_bound)
    discriminator = models.build_discriminator(disc_spec)
    opt_g = torch.optim.Adam(
        generator.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2)
    )
    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=config.lr_d, betas=(config.beta1, config.beta2)
    )
    extractor = losses.make_extractor(config.extractor, seed=config.seed)
    return TrainerState(
        config=config,
        gen_spec=gen_spec,
        disc_spec=disc_spec,
        params=params,
        generator=generator,
        discriminator=discriminator,
        opt_g=opt_g,
        opt_d=opt_d,
        extractor=extractor,
    )


def batch_tensors(batch: Sequence[SamplePair]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack a batch into (inputs in [-1,1], linear targets), both NCHW float32."""
    inputs = np.stack([p.input.pixels for p in batch]).astype(np.float32)
    targets = np.stack([p.target.pixels for p in batch]).astype(np.float32)
    x = torch.from_numpy(inputs).permute(0, 3, 1, 2) / 127.5 - 1.0
    t = torch.from_numpy(targets).permute(0, 3, 1, 2)
    return x, t


def _check_finite(step: int, **terms) -> None:
    for name, value in terms.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not np.isfinite(v):
            raise NonFiniteLossError(step, name, v)


def train_step(state: TrainerState, batch: Sequence[SamplePair]) -> losses.LossReport:
    """One alternating update: discriminator first, then generator.

    The discriminator compares the transformed target against the transformed
    detached prediction; the generator optimizes the hinge score plus the
    perceptual term (on inverse-transformed, display-referred rasters) and the
    feature-matching term (in the discriminator's transformed input space).
    """
    g, d = state.generator, state.discriminator
    g.train()
    d.train()
    x, target_linear = batch_tensors(batch)
    target_gauss = pixtransform.forward_tensor(target_linear, state.params)

    d_steps, g_steps = state.config.ratio_steps()

    d_value = 0.0
    for _ in range(d_steps):
        with torch.no_grad():
            fake = g(x)
        loss_d = losses.d_loss(d(target_gauss), d(fake))
        _check_finite(state.step, d_loss=loss_d)
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()
        d_value = float(loss_d.detach())

    report = None
    for _ in range(g_steps):
        with losses._frozen_params(d):
            fake = g(x)
            scores = d(fake)
            pred_linear = pixtransform.inverse_tensor(fake, state.params)
            display_pair = (
                losses.display_referred(pred_linear),
                losses.display_referred(target_linear),
            )
            total, report = losses.g_total(
                fake,
                target_gauss,
                scores,
                state.extractor,
                d,
                d_loss_value=d_value,
                extractor_inputs=display_pair,
            )
            _check_finite(
                state.step,
                g_gan=report.g_gan,
                g_perc=report.g_perc,
                g_fm=report.g_fm,
            )
            state.opt_g.zero_grad(set_to_none=True)
            total.backward()
            state.opt_g.step()

    state.step += 1
    return report


def train_loop(
    state: TrainerState,
    batches,
    max_iters: int | None = None,
    log: losses.LossLog | None = None,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
):
    """Drive train_step over a batch stream, logging and checkpointing as configured."""
    limit = max_iters if max_iters is not None else state.config.max_iters
    every = checkpoint_every if checkpoint_every is not None else state.config.checkpoint_every
    reports = []
    for batch in batches:
        if state.step >= limit:
            break
        report = train_step(state, batch)
        reports.append(report)
        if log is not None:
            log.append(state.step, report)
        if checkpoint_path is not None and every > 0 and state.step % every == 0:
            save_checkpoint(state, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return reports


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def _state_dict_tensors(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def _optimizer_tensors(prefix: str, opt: torch.optim.Adam) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors = {}
    layout = {"param_groups": sd["param_groups"], "state_keys": {}}
    for pid, entry in sd["state"].items():
        keys = {}
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}/{pid}/{key}"] = value.detach().cpu().numpy()
                keys[key] = "tensor"
            else:
                keys[key] = value
        layout["state_keys"][str(pid)] = keys
    return layout, tensors


def _optimizer_from(layout: dict, tensors: dict, prefix: str, opt: torch.optim.Adam) -> None:
    state = {}
    for pid_str, keys in layout["state_keys"].items():
        pid = int(pid_str)
        entry = {}
        for key, marker in keys.items():
            if marker == "tensor":
                entry[key] = torch.from_numpy(tensors[f"{prefix}/{pid}/{key}"].copy())
            else:
                entry[key] = marker
        state[pid] = entry
    opt.load_state_dict({"state": state, "param_groups": layout["param_groups"]})


def save_checkpoint(state: TrainerState, path) -> None:
    tensors = {}
    tensors.update(_state_dict_tensors("generator", state.generator))
    tensors.update(_state_dict_tensors("discriminator", state.discriminator))
    layout_g, t_g = _optimizer_tensors("opt_g", state.opt_g)
    layout_d, t_d = _optimizer_tensors("opt_d", state.opt_d)
    tensors.update(t_g)
    tensors.update(t_d)
    meta = {
        "step": state.step,
        "transform": {"lambda": state.params.lam, "eps": state.params.eps},
        "generator_spec": state.gen_spec.to_dict(),
        "discriminator_spec": state.disc_spec.to_dict(),
        "train_config": asdict(state.config),
        "opt_g_layout": layout_g,
        "opt_d_layout": layout_d,
    }
    ckpt.save_container(path, meta, tensors)


def load_checkpoint(path) -> TrainerState:
    meta, tensors = ckpt.load_container(path)
    config = TrainConfig(**meta["train_config"])
    params = pixtransform.TransformParams(
        lam=meta["transform"]["lambda"], eps=meta["transform"]["eps"]
    )
    gen_spec = models.spec_from_dict(meta["generator_spec"])
    disc_spec = models.DiscriminatorSpec(
        layer_widths=tuple(meta["discriminator_spec"]["layer_widths"]),
        downsample_layers=meta["discriminator_spec"]["downsample_layers"],
        kernel=meta["discriminator_spec"]["kernel"],
        leaky_slope=meta["discriminator_spec"]["leaky_slope"],
        spectral_norm=meta["discriminator_spec"]["spectral_norm"],
    )
    state = init_state(config, params, gen_spec=gen_spec, disc_spec=disc_spec)

    def restore(prefix: str, module: nn.Module) -> None:
        sd = {
            name[len(prefix) + 1 :]: torch.from_numpy(arr.copy())
            for name, arr in tensors.items()
            if name.startswith(prefix + "/")
        }
        module.load_state_dict(sd)

    restore("generator", state.generator)
    restore("discriminator", state.discriminator)
    _optimizer_from(meta["opt_g_layout"], tensors, "opt_g", state.opt_g)
    _optimizer_from(meta["opt_d_layout"], tensors, "opt_d", state.opt_d)
    state.step = int(meta["step"])
    return state


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _pad_to_multiple(pixels: np.ndarray, divisor: int) -> tuple[np.ndarray, int, int]:
    h, w = pixels.shape[:2]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph == 0 and pw == 0:
        return pixels, 0, 0
    padded = np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return padded, ph, pw


def predict(source, ldr: LdrImage) -> HdrImage:
    """Run the generator on one LDR image and return linear radiance.

    `source` is a TrainerState or a checkpoint path. Sizes that are not a
    multiple of the network's resampling factor are reflect-padded and the
    output cropped back.
    """
    state = source if isinstance(source, TrainerState) else load_checkpoint(source)
    g = state.generator
    g.eval()
    divisor = state.gen_spec.spatial_divisor
    padded, ph, pw = _pad_to_multiple(ldr.pixels, divisor)
    x = torch.from_numpy(padded.astype(np.float32)).permute(2, 0, 1)[None] / 127.5 - 1.0
    with torch.no_grad():
        fake = g(x)
        linear = pixtransform.inverse_tensor(fake, state.params)
    out = linear[0].permute(1, 2, 0).numpy()
    if ph or pw:
        out = out[: ldr.height, : ldr.width]
    return HdrImage(np.ascontiguousarray(out, dtype=np.float32))


def load_params_for(source) -> pixtransform.TransformParams:
    """Read just the TransformParams from a checkpoint file."""
    meta, _ = ckpt.load_container(source)
    return pixtransform.TransformParams(
        lam=meta["transform"]["lambda"], eps=meta["transform"]["eps"]
    )
