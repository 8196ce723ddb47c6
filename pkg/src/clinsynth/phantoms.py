"""Synthetic chest phantoms for end-to-end runs without real CT data.

Two ellipsoid lungs, a tube airway and a soft-tissue body. Lungs carry a
smoothed random texture; the ``smoker`` flag raises lung density and adds
dot-like nodules (brighter) and a few air pockets (darker), with a net
increase in lung intensity.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data_pipeline import write_manifest, write_volume

LUNG_HU = -850.0
SMOKER_SHIFT_HU = 140.0
TISSUE_HU = 40.0
AIR_HU = -1000.0


def generate_phantom(shape: Sequence[int] = (16, 24, 24), smoker: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (HU image float32, label mask int16), both of ``shape`` in (D, H, W) order."""
    rng = rng or np.random.default_rng(0)
    D, H, W = shape
    z, y, x = np.meshgrid(np.linspace(-1, 1, D), np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")

    mask = np.zeros(shape, dtype=np.int16)
    body = (y / 0.92) ** 2 + (x / 0.96) ** 2 <= 1.0
    image = np.full(shape, AIR_HU, dtype=np.float64)
    image[body] = TISSUE_HU + 10.0 * rng.standard_normal(int(body.sum()))

    ry, rx = 0.62 + 0.06 * rng.random(), 0.30 + 0.04 * rng.random()
    for label, cx in ((1, -0.45), (2, 0.45)):
        lung = ((z / 1.1) ** 2 + (y / ry) ** 2 + ((x - cx) / rx) ** 2) <= 1.0
        mask[lung] = label
    airway = ((y + 0.15) ** 2 + x ** 2 <= 0.12 ** 2) & (z > -0.6)
    mask[airway] = 3

    lungs = np.isin(mask, (1, 2))
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=1.0)
    texture /= texture.std() + 1e-12
    lung_hu = LUNG_HU + 30.0 * texture
    if smoker:
        lung_hu = lung_hu + SMOKER_SHIFT_HU
        dots = np.zeros(shape)
        idx = np.argwhere(lungs)
        for sign, count, amp in ((1, 6, 250.0), (-1, 3, 120.0)):
            for p in idx[rng.choice(len(idx), size=min(count, len(idx)), replace=False)]:
                dots[tuple(p)] += sign * amp
        lung_hu = lung_hu + ndimage.gaussian_filter(dots, sigma=0.7) * 8.0
    image[lungs] = lung_hu[lungs]
    image[mask == 3] = AIR_HU
    return image.astype(np.float32), mask


def write_phantom_dataset(out_dir: str | Path, n_subjects: int = 10, shape: Sequence[int] = (16, 24, 24),
                          seed: int = 0, fmt: str = "raw") -> dict:
    """Write a paired cohort: every (gender, age) profile appears once as smoker and once as non-smoker.

    Layout: images/, masks/, clinical.csv, manifest.jsonl. Returns the paths.
    """
    if n_subjects < 2 or n_subjects % 2:
        raise ValueError("n_subjects must be an even number >= 2 (paired cohort)")
    out = Path(out_dir)
    ext = {"raw": ".raw", "nifti": ".nii.gz"}[fmt]
    rng = np.random.default_rng(seed)
    rows, entries = [], []
    for p in range(n_subjects // 2):
        gender = ("male", "female")[p % 2]
        age = int(rng.integers(35, 80))
        for smoker in ("yes", "no"):
            sid = f"ph{len(rows):03d}"
            image, mask = generate_phantom(shape, smoker == "yes", np.random.default_rng(rng.integers(2**63)))
            write_volume(out / "images" / f"{sid}{ext}", image)
            write_volume(out / "masks" / f"{sid}{ext}", mask)
            rows.append({"subject_id": sid, "gender": gender, "age": age, "smoker": smoker, "diagnosis": ""})
            entries.append({"subject_id": sid, "image": f"images/{sid}{ext}", "mask": f"masks/{sid}{ext}",
                            "row_key": sid})
    csv_path = out / "clinical.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    manifest = write_manifest(out / "manifest.jsonl", entries)
    return {"dir": out, "csv": csv_path, "manifest": manifest}
