"""Counterfactual prompt edits: what changes in the synthesis when one attribute changes.

Both syntheses of a pair share the mask crop, the weights and every random
draw; only the text embedding differs, so the voxel difference is
attributable to the edited attribute.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .backbones import CLASS_NAMES
from .data_pipeline import CropSpec, VolumeSample, eval_crops, subject_seed, write_volume
from .errors import ConfigError
from .tabular_text import Schema, describe

LUNG_LABELS = (1, 2)


@dataclass
class CounterfactualSpec:
    attribute: str
    from_value: Any
    to_value: Any
    subjects: Sequence[str] = ()
    seed: int = 0

    def validate(self, schema: Schema) -> None:
        attr = schema[self.attribute]  # raises UnknownAttributeError
        for v in (self.from_value, self.to_value):
            if attr.coerce(v) is None:
                raise ConfigError(f"value {v!r} is not valid for attribute {self.attribute!r}")


@dataclass
class CounterfactualPair:
    vol_a: np.ndarray
    vol_b: np.ndarray
    mask: np.ndarray
    image: np.ndarray  # real crop, used as heatmap background
    offset: tuple[int, int, int]
    text_a: str
    text_b: str


def counterfactual_pair(synthesizer, sample: VolumeSample, spec: CounterfactualSpec, crop_spec: CropSpec) -> CounterfactualPair:
    """Synthesize the same crop under ``from_value`` and ``to_value`` of one attribute."""
    if not synthesizer.uses_text:
        raise ConfigError("counterfactual analysis needs a text-conditioned model")
    spec.validate(synthesizer.schema)
    crop = eval_crops(sample, crop_spec, spec.seed, n=1)[0]
    rec_a = sample.record.with_value(spec.attribute, spec.from_value)
    rec_b = sample.record.with_value(spec.attribute, spec.to_value)
    emb = synthesizer.embed_records([rec_a, rec_b])
    mask = torch.from_numpy(crop.mask[None])
    seed = subject_seed(spec.seed, sample.subject_id) % (2 ** 63)
    vol_a = synthesizer.synthesize(mask, emb[:1], torch.Generator().manual_seed(seed))[0, 0].numpy()
    vol_b = synthesizer.synthesize(mask, emb[1:], torch.Generator().manual_seed(seed))[0, 0].numpy()
    return CounterfactualPair(vol_a, vol_b, crop.mask, crop.image, crop.offset,
                              describe(rec_a, synthesizer.schema).text, describe(rec_b, synthesizer.schema).text)


@dataclass
class DifferenceMap:
    delta: np.ndarray  # vol_b - vol_a, normalised intensity units
    mask: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES
    summary: dict = field(default_factory=dict)

    @property
    def abs_delta(self) -> np.ndarray:
        return np.abs(self.delta)


def summarize(delta: np.ndarray, mask: np.ndarray, class_names: Sequence[str] = CLASS_NAMES) -> dict:
    """Signed/absolute means and fraction positive, overall, per class and for the lungs."""
    def stats(sel):
        if not sel.any():
            return {"mean_delta": float("nan"), "mean_abs_delta": float("nan"), "fraction_positive": float("nan"),
                    "voxels": 0}
        d = delta[sel].astype(np.float64)
        return {"mean_delta": float(d.mean()), "mean_abs_delta": float(np.abs(d).mean()),
                "fraction_positive": float((d > 0).mean()), "voxels": int(sel.sum())}

    out = {"all": stats(np.ones(delta.shape, dtype=bool))}
    for label, name in enumerate(class_names):
        out[name] = stats(mask == label)
    out["lung"] = stats(np.isin(mask, LUNG_LABELS))
    return out


def difference_map(vol_a: np.ndarray, vol_b: np.ndarray, mask: np.ndarray,
                   class_names: Sequence[str] = CLASS_NAMES) -> DifferenceMap:
    if vol_a.shape != vol_b.shape or vol_a.shape != mask.shape:
        raise ValueError(f"shape mismatch: {vol_a.shape}, {vol_b.shape}, mask {mask.shape}")
    delta = np.asarray(vol_b, dtype=np.float64) - np.asarray(vol_a, dtype=np.float64)
    return DifferenceMap(delta, mask, tuple(class_names), summarize(delta, mask, class_names))


def heatmap_limit(delta: np.ndarray) -> float:
    """Symmetric colour limit: 99th percentile of |delta| (1.0 for an all-zero map)."""
    v = float(np.percentile(np.abs(delta), 99))
    return v if v > 0 else 1.0


def overlay_rgb(delta_slice: np.ndarray, background: np.ndarray, vmax: float, alpha: float = 0.75,
                cmap: str = "RdBu_r") -> tuple[np.ndarray, np.ndarray]:
    """(overlay colours, composited image), both (H, W, 3) floats in [0, 1].

    The overlay uses a diverging map centred at zero; its opacity grows with
    |delta| / vmax so unchanged voxels show the background.
    """
    import matplotlib

    colors = matplotlib.colormaps[cmap](np.clip(0.5 + 0.5 * delta_slice / vmax, 0, 1))[..., :3]
    bg = np.clip((np.asarray(background, dtype=np.float64) + 1) / 2, 0, 1)[..., None].repeat(3, axis=-1)
    a = alpha * np.clip(np.abs(delta_slice) / vmax, 0, 1)[..., None]
    return colors, (1 - a) * bg + a * colors


def render_heatmap(diff: DifferenceMap, slice_index: int, background: np.ndarray, out_path: str | os.PathLike,
                   absolute: bool = False, figure: bool = True) -> Path:
    """Write the native-resolution overlay PNG (and a captioned figure with a colorbar)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not 0 <= slice_index < diff.delta.shape[0]:
        raise IndexError(f"slice {slice_index} outside [0, {diff.delta.shape[0]})")
    delta = diff.abs_delta if absolute else diff.delta
    vmax = heatmap_limit(delta)
    _, composite = overlay_rgb(delta[slice_index], background[slice_index], vmax,
                               cmap="Reds" if absolute else "RdBu_r")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(out_path, composite)
    if figure:
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(background[slice_index], cmap="gray", vmin=-1, vmax=1)
        im = ax.imshow(delta[slice_index], cmap="Reds" if absolute else "RdBu_r", alpha=0.6,
                       vmin=0 if absolute else -vmax, vmax=vmax)
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title(f"{'|delta|' if absolute else 'delta'} slice {slice_index}")
        ax.axis("off")
        fig.savefig(out_path.with_name(out_path.stem + "_figure.png"), dpi=100, bbox_inches="tight")
        plt.close(fig)
    return out_path


AGGREGATE_FIELDS = ("subject", "class", "mean_delta", "mean_abs_delta", "fraction_positive", "voxels")


def analyze(synthesizer, samples: Sequence[VolumeSample], spec: CounterfactualSpec, crop_spec: CropSpec,
            out_dir: str | os.PathLike, slices: str | Sequence[int] = "mid") -> list[dict]:
    """Run the counterfactual for every requested subject and write maps, heatmaps and an aggregate CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wanted = set(spec.subjects)
    rows = []
    for sample in samples:
        if wanted and sample.subject_id not in wanted:
            continue
        pair = counterfactual_pair(synthesizer, sample, spec, crop_spec)
        diff = difference_map(pair.vol_a, pair.vol_b, pair.mask)
        sid = sample.subject_id
        write_volume(out_dir / "deltas" / f"{sid}_delta.raw", diff.delta.astype(np.float32))
        write_volume(out_dir / "deltas" / f"{sid}_absdelta.raw", diff.abs_delta.astype(np.float32))
        idx = [diff.delta.shape[0] // 2] if slices == "mid" else list(slices)
        for z in idx:
            render_heatmap(diff, z, pair.image, out_dir / "heatmaps" / f"{sid}_z{z:03d}.png")
            render_heatmap(diff, z, pair.image, out_dir / "heatmaps" / f"{sid}_z{z:03d}_abs.png", absolute=True)
        for cls, s in diff.summary.items():
            rows.append({"subject": sid, "class": cls, **{k: s[k] for k in AGGREGATE_FIELDS[2:]}})
    with open(out_dir / "aggregate.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows
