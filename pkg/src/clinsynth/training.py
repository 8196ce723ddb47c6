"""Training loops, checkpoints and checkpoint-backed synthesis.

Checkpoints are single ``torch.save`` containers::

    {"format": "clinsynth-checkpoint", "version": 1,
     "params": {"generator.<name>": tensor, "discriminator.<name>": tensor, ...},
     "metadata": {"config": ..., "epoch": ..., "seed": ..., "encoder": ..., "schema": ...},
     "train_state": {...}}   # optimiser and RNG state, for resuming

A ``loss_history.csv`` (step, term, value) and ``progress.jsonl`` sit next to them.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffusion
from .backbones import (NUM_CLASSES, DiffusionUNet, FusionSpec, Generator, PatchDiscriminator,
                        diffusion_config, generator_config, one_hot_mask)
from .data_pipeline import CropSpec, VolumeSample, lung_criterion, random_crop
from .errors import ConfigError, NumericalError
from .tabular_text import Schema, default_schema, describe, schema_from_dict, schema_to_dict
from .text_embedding import EncoderHandle, embed, make_encoder, stack

log = logging.getLogger(__name__)

BACKBONES = ("unet", "pix2pix", "ddpm")
FORMAT = "clinsynth-checkpoint"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    base_channels: int = 32
    depth_levels: int = 4
    fusion_kind: str = "auto"  # auto: cross_attention for GANs, affine for diffusion
    fusion_levels: Optional[tuple[int, ...]] = None
    key_dim: Optional[int] = None
    residual: bool = True
    disc_base_channels: int = 16
    disc_n_down: int = 3


@dataclass
class DiffusionConfig:
    T: int = diffusion.DEFAULT_T
    beta_schedule: str = "linear"
    sigma_mode: str = "beta"


@dataclass
class TrainConfig:
    backbone: str = "pix2pix"
    use_text: bool = False
    lr: Optional[float] = None  # None: 1e-4 for GAN/U-Net, 1e-5 for diffusion
    batch_size: int = 2
    epochs: int = 1800
    decay_start_epoch: int = 800
    seed: int = 0
    l1_weight: float = 100.0
    adv_weight: float = 1.0
    adam_betas: Optional[tuple[float, float]] = None  # None: (0.5, 0.999) GAN, (0.9, 0.999) diffusion
    checkpoint_every: int = 0
    crop_size: tuple[int, int, int] = (64, 256, 256)
    min_lung_fraction: float = 0.01
    max_crop_attempts: int = 50
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.diffusion, dict):
            self.diffusion = DiffusionConfig(**self.diffusion)
        self.crop_size = tuple(int(s) for s in self.crop_size)
        if self.adam_betas is not None:
            self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.model.fusion_levels is not None:
            self.model.fusion_levels = tuple(int(i) for i in self.model.fusion_levels)
        if self.backbone not in BACKBONES:
            raise ConfigError(f"train.backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.lr is None:
            self.lr = 1e-5 if self.backbone == "ddpm" else 1e-4
        if self.adam_betas is None:
            self.adam_betas = (0.9, 0.999) if self.backbone == "ddpm" else (0.5, 0.999)
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("train.batch_size and train.epochs must be positive")
        if not 0 <= self.decay_start_epoch < self.epochs:
            raise ConfigError("train.decay_start_epoch must lie in [0, epochs)")

    @property
    def fusion_kind(self) -> str:
        kind = self.model.fusion_kind
        if kind == "auto":
            return "affine" if self.backbone == "ddpm" else "cross_attention"
        return kind

    def crop_spec(self) -> CropSpec:
        return CropSpec(self.crop_size, lung_criterion(self.crop_size, self.min_lung_fraction), self.max_crop_attempts)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant until ``decay_start_epoch``, then linear towards zero at ``epochs``."""
    if epoch < cfg.decay_start_epoch:
        return cfg.lr
    return cfg.lr * ((cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start_epoch))


# -- model construction -----------------------------------------------------

def build_models(cfg: TrainConfig, embed_dim: int | None = None, num_classes: int = NUM_CLASSES) -> dict[str, nn.Module]:
    fusion = None
    if cfg.use_text:
        if embed_dim is None:
            raise ConfigError("use_text needs the encoder embedding dimension")
        m = cfg.model
        fusion = FusionSpec(cfg.fusion_kind, embed_dim, m.fusion_levels, m.key_dim, m.residual)
    m = cfg.model
    if cfg.backbone == "ddpm":
        gcfg = diffusion_config(m.base_channels, m.depth_levels, fusion, num_classes)
        return {"model": DiffusionUNet(gcfg, cfg.diffusion.T, num_classes)}
    models = {"generator": Generator(generator_config(m.base_channels, m.depth_levels, fusion, num_classes))}
    if cfg.backbone == "pix2pix":
        models["discriminator"] = PatchDiscriminator(1, num_classes, m.disc_base_channels, m.disc_n_down)
    return models


def encoder_meta(encoder: EncoderHandle | None) -> dict | None:
    if encoder is None:
        return None
    return {"encoder_id": encoder.encoder_id, "backend": encoder.backend, "dimension": encoder.dimension,
            "model_name_or_path": encoder.model_name_or_path, "max_tokens": encoder.max_tokens}


# -- checkpoint container ---------------------------------------------------

def _atomic_torch_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".pt")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | os.PathLike, models: dict[str, nn.Module], metadata: dict,
                    train_state: dict | None = None) -> Path:
    params = {f"{prefix}.{k}": v.detach().clone() for prefix, m in models.items() for k, v in m.state_dict().items()}
    path = Path(path)
    _atomic_torch_save({"format": FORMAT, "version": FORMAT_VERSION, "params": params, "metadata": metadata,
                        "train_state": train_state or {}}, path)
    return path


@dataclass
class Checkpoint:
    path: Path
    config: TrainConfig
    models: dict[str, nn.Module]
    metadata: dict
    train_state: dict

    @property
    def schema(self) -> Schema:
        if self.metadata.get("schema"):
            return schema_from_dict(self.metadata["schema"])
        return default_schema()

    def encoder(self, cache_dir=None) -> EncoderHandle | None:
        meta = self.metadata.get("encoder")
        if meta is None:
            return None
        return make_encoder(meta["encoder_id"], meta["backend"], meta["dimension"], meta.get("model_name_or_path"),
                            meta.get("max_tokens", 512), cache_dir)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    meta = blob["metadata"]
    cfg = TrainConfig.from_dict(meta["config"])
    enc = meta.get("encoder")
    models = build_models(cfg, enc["dimension"] if enc else None, meta.get("num_classes", NUM_CLASSES))
    for prefix, model in models.items():
        plen = len(prefix) + 1
        state = {k[plen:]: v for k, v in blob["params"].items() if k.startswith(prefix + ".")}
        model.load_state_dict(state)
        model.eval()
    return Checkpoint(path, cfg, models, meta, blob.get("train_state", {}))


# -- training ---------------------------------------------------------------

class _RunLog:
    def __init__(self, out_dir: Path, verbose: bool):
        self.history_path = out_dir / "loss_history.csv"
        self.progress_path = out_dir / "progress.jsonl"
        self.verbose = verbose
        self.rows: list[tuple[int, str, float]] = []

    def loss(self, step: int, term: str, value: float):
        self.rows.append((step, term, value))

    def event(self, **record):
        line = json.dumps(record, sort_keys=True)
        with open(self.progress_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        if self.verbose:
            print(line, flush=True)

    def flush(self):
        with open(self.history_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "term", "value"])
            for step, term, value in self.rows:
                w.writerow([step, term, repr(value)])


def read_loss_history(path: str | os.PathLike) -> list[tuple[int, str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["step"]), r["term"], float(r["value"])) for r in csv.DictReader(fh)]


def _texts_for(samples: Sequence[VolumeSample], schema: Schema) -> list[str]:
    return [describe(s.record, schema).text for s in samples]


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[tuple[int, str, float]]
    encoder_calls: int = 0


def _set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def train(cfg: TrainConfig, samples: Sequence[VolumeSample], encoder: EncoderHandle | None, out_dir: str | os.PathLike,
          schema: Schema | None = None, resume_from: str | os.PathLike | None = None, verbose: bool = False,
          run_config: dict | None = None, max_epochs: int | None = None) -> TrainResult:
    """Train the configured backbone; returns the final checkpoint.

    ``max_epochs`` stops early (after that many epochs in total) while keeping
    the learning-rate schedule of the full run; used to exercise resuming.
    """
    if not samples:
        raise ConfigError("training dataset is empty")
    if cfg.use_text and encoder is None:
        raise ConfigError("use_text requires a text encoder")
    if not cfg.use_text:
        encoder = None
    schema = schema or default_schema()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _set_determinism(cfg.seed)

    models = build_models(cfg, encoder.dimension if encoder else None)
    is_ddpm = cfg.backbone == "ddpm"
    main = models["model" if is_ddpm else "generator"]
    opt = {"main": torch.optim.Adam(main.parameters(), lr=cfg.lr, betas=cfg.adam_betas)}
    if "discriminator" in models:
        opt["disc"] = torch.optim.Adam(models["discriminator"].parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    schedule = diffusion.make_schedule(cfg.diffusion.T, cfg.diffusion.beta_schedule) if is_ddpm else None
    crop_spec = cfg.crop_spec()
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    texts = _texts_for(samples, schema) if encoder else None
    runlog = _RunLog(out_dir, verbose)
    start_epoch, step = 0, 0

    if resume_from is not None:
        ck = torch.load(resume_from, map_location="cpu", weights_only=True)
        for prefix, model in models.items():
            plen = len(prefix) + 1
            model.load_state_dict({k[plen:]: v for k, v in ck["params"].items() if k.startswith(prefix + ".")})
        st = ck["train_state"]
        for name, o in opt.items():
            o.load_state_dict(st["optimizers"][name])
        rng.bit_generator.state = st["numpy_rng"]
        noise_gen.set_state(st["noise_rng"])
        torch.set_rng_state(st["torch_rng"])
        start_epoch, step = st["epoch"], st["step"]
        runlog.rows = [tuple(r) for r in st.get("history", [])]

    meta_base = {"config": cfg.to_dict(), "seed": cfg.seed, "encoder": encoder_meta(encoder),
                 "schema": schema_to_dict(schema), "num_classes": NUM_CLASSES, "run_config": run_config,
                 "torch_version": str(torch.__version__)}
    last_good: Path | None = None

    def snapshot(epoch: int, name: str) -> Path:
        state = {"optimizers": {k: o.state_dict() for k, o in opt.items()}, "numpy_rng": rng.bit_generator.state,
                 "noise_rng": noise_gen.get_state(), "torch_rng": torch.get_rng_state(), "epoch": epoch,
                 "step": step, "history": [list(r) for r in runlog.rows]}
        return save_checkpoint(out_dir / name, models, {**meta_base, "epoch": epoch}, state)

    end_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    for m in models.values():
        m.train()
    for epoch in range(start_epoch, end_epoch):
        lr = lr_schedule(epoch, cfg)
        for o in opt.values():
            for g in o.param_groups:
                g["lr"] = lr
        order = rng.permutation(len(samples))
        t0 = time.time()
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            crops = [random_crop(samples[i], crop_spec, rng) for i in idx]
            real = torch.from_numpy(np.stack([c.image for c in crops]))[:, None].float()
            mask = one_hot_mask(torch.from_numpy(np.stack([c.mask for c in crops])))
            emb = stack([embed(encoder, texts[i]) for i in idx]) if encoder else None
            step += 1
            if is_ddpm:
                losses = _ddpm_step(main, opt["main"], real, mask, emb, schedule, noise_gen)
            else:
                losses = _gan_step(models, opt, real, mask, emb, cfg)
            for term, value in losses.items():
                if not math.isfinite(value):
                    runlog.flush()
                    raise NumericalError(f"non-finite {term} loss at epoch {epoch} step {step}; "
                                         f"last good checkpoint: {last_good}")
                runlog.loss(step, term, value)
        runlog.event(epoch=epoch, step=step, lr=lr, seconds=round(time.time() - t0, 3),
                     **{k: v for k, v in losses.items()})
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < end_epoch:
            last_good = snapshot(epoch + 1, f"epoch{epoch + 1:05d}.pt")
    final = snapshot(end_epoch, "final.pt")
    runlog.flush()
    for m in models.values():
        m.eval()
    return TrainResult(final, list(runlog.rows), encoder.backend_calls if encoder else 0)


def _gan_step(models, opt, real, mask, emb, cfg: TrainConfig) -> dict[str, float]:
    G = models["generator"]
    D = models.get("discriminator")
    fake = G(mask, emb)
    out = {}
    if D is not None:
        opt["disc"].zero_grad(set_to_none=True)
        d_real = D(real, mask)
        d_fake = D(fake.detach(), mask)
        loss_d = 0.5 * (F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real))
                        + F.binary_cross_entropy_with_logits(d_fake, torch.zeros_like(d_fake)))
        loss_d.backward()
        opt["disc"].step()
        out["D"] = loss_d.item()
    opt["main"].zero_grad(set_to_none=True)
    l1 = F.l1_loss(fake, real)
    loss_g = cfg.l1_weight * l1
    if D is not None:
        pred = D(fake, mask)
        adv = F.binary_cross_entropy_with_logits(pred, torch.ones_like(pred))
        loss_g = loss_g + cfg.adv_weight * adv
        out["G_adv"] = adv.item()
    loss_g.backward()
    opt["main"].step()
    out["G_L1"] = l1.item()
    return out


def _ddpm_step(model, opt, x0, mask, emb, schedule, gen) -> dict[str, float]:
    opt.zero_grad(set_to_none=True)
    loss = diffusion.training_loss(model, x0, mask, emb, schedule, gen)
    loss.backward()
    opt.step()
    return {"eps_mse": loss.item()}


def train_pix2pix(cfg: TrainConfig, samples, encoder, out_dir, **kw) -> TrainResult:
    if cfg.backbone not in ("pix2pix", "unet"):
        raise ConfigError(f"train_pix2pix got backbone {cfg.backbone!r}")
    return train(cfg, samples, encoder, out_dir, **kw)


def train_ddpm(cfg: TrainConfig, samples, encoder, out_dir, **kw) -> TrainResult:
    if cfg.backbone != "ddpm":
        raise ConfigError(f"train_ddpm got backbone {cfg.backbone!r}")
    return train(cfg, samples, encoder, out_dir, **kw)


# -- synthesis --------------------------------------------------------------

class Synthesizer:
    """Wraps a loaded checkpoint as mask (+ record text) -> image."""

    def __init__(self, checkpoint: Checkpoint, encoder: EncoderHandle | None = None, cache_dir=None):
        self.checkpoint = checkpoint
        self.cfg = checkpoint.config
        self.schema = checkpoint.schema
        self.uses_text = self.cfg.use_text
        self.encoder = encoder or (checkpoint.encoder(cache_dir) if self.uses_text else None)
        if self.cfg.backbone == "ddpm":
            self.model = checkpoint.models["model"]
            self.schedule = diffusion.make_schedule(self.cfg.diffusion.T, self.cfg.diffusion.beta_schedule)
        else:
            self.model = checkpoint.models["generator"]
            self.schedule = None
        self.model.eval()

    @classmethod
    def from_path(cls, path, encoder=None, cache_dir=None) -> "Synthesizer":
        return cls(load_checkpoint(path), encoder, cache_dir)

    @property
    def spatial_factor(self) -> int:
        return 2 ** self.cfg.model.depth_levels

    def embed_records(self, records) -> torch.Tensor | None:
        if not self.uses_text:
            return None
        return stack([embed(self.encoder, describe(r, self.schema)) for r in records])

    @torch.no_grad()
    def synthesize(self, mask: torch.Tensor, emb: torch.Tensor | None, generator: torch.Generator | None = None,
                   **sample_kw) -> torch.Tensor:
        """(B, D, H, W) labels -> (B, 1, D, H, W) normalised intensities."""
        onehot = one_hot_mask(mask)
        if self.cfg.backbone == "ddpm":
            return diffusion.sample(self.model, onehot, emb, self.schedule, generator,
                                    (mask.shape[0], 1, *mask.shape[1:]), self.cfg.diffusion.sigma_mode, **sample_kw)
        return self.model(onehot, emb)
