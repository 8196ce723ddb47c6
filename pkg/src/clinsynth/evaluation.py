"""Patch-wise FID, KID and Inception Score for real vs. synthetic crops.

Feature extractors are pluggable. ``StatsExtractor`` is a closed-form stub
(intensity moments and a histogram) for tests and CI; ``SliceClassifierExtractor``
runs a 2D ImageNet classifier on every axial slice and mean-pools over slices.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data_pipeline import CropSpec, eval_crops, subject_seed
from .errors import SubjectError

FID_EPS = 1e-6


class MetricError(ValueError):
    pass


class ExtractorLoadError(RuntimeError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, F) float64
    extractor_id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.ndim != 2:
            raise MetricError(f"features must be a matrix, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise MetricError("features contain NaN or Inf")

    @property
    def n(self) -> int:
        return self.features.shape[0]


# -- extractors -------------------------------------------------------------

def _uniform(crops: Sequence[np.ndarray]) -> np.ndarray:
    if len(crops) == 0:
        raise MetricError("no crops given")
    shapes = {tuple(np.shape(c)) for c in crops}
    if len(shapes) != 1:
        raise MetricError(f"crops have non-uniform shapes: {sorted(shapes)}")
    return np.stack([np.asarray(c, dtype=np.float64) for c in crops])


class StatsExtractor:
    """Features = [mean, variance, histogram over [-1, 1]]; class probabilities = the histogram."""

    def __init__(self, bins: int = 16, value_range: tuple[float, float] = (-1.0, 1.0)):
        self.bins = bins
        self.value_range = value_range
        self.extractor_id = f"stats-hist{bins}"

    def histogram(self, crop: np.ndarray) -> np.ndarray:
        lo, hi = self.value_range
        x = np.clip(crop.ravel(), lo, hi)
        idx = np.minimum(((x - lo) / (hi - lo) * self.bins).astype(np.int64), self.bins - 1)
        return np.bincount(idx, minlength=self.bins) / x.size

    def features(self, crops: Sequence[np.ndarray]) -> np.ndarray:
        arr = _uniform(crops)
        return np.stack([np.concatenate([[c.mean(), c.var()], self.histogram(c)]) for c in arr])

    def probabilities(self, crops: Sequence[np.ndarray]) -> np.ndarray:
        arr = _uniform(crops)
        return np.stack([self.histogram(c) for c in arr])


class SliceClassifierExtractor:
    """Inception-v3 on each axial slice (resized to 299 x 299, grey replicated to RGB).

    Features are the 2048-d pooled activations and probabilities the softmax
    outputs, both averaged over the slices of a crop. ``weights`` follows
    torchvision: ``"DEFAULT"`` downloads ImageNet weights, ``None`` gives a
    random network (only useful for plumbing tests).
    """

    def __init__(self, weights: str | None = "DEFAULT", weights_path: str | None = None, batch_slices: int = 16):
        self.extractor_id = "inception_v3-slicewise" + ("" if weights or weights_path else "-random")
        self.batch_slices = batch_slices
        try:
            from torchvision.models import inception_v3

            net = inception_v3(weights=weights if not weights_path else None, aux_logits=True, init_weights=False)
            if weights_path:
                net.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        except Exception as exc:
            raise ExtractorLoadError(f"cannot load the slice classifier: {exc}") from exc
        net.eval()
        self.net = net

    @torch.no_grad()
    def _run(self, crop: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        import torch.nn.functional as F

        feats, probs = [], []
        pooled = {}
        hook = self.net.avgpool.register_forward_hook(lambda m, i, o: pooled.__setitem__("x", o.flatten(1)))
        try:
            slices = torch.from_numpy(np.asarray(crop, dtype=np.float32))[:, None]  # D, 1, H, W
            for s in range(0, slices.shape[0], self.batch_slices):
                x = F.interpolate(slices[s:s + self.batch_slices], size=(299, 299), mode="bilinear", align_corners=False)
                logits = self.net(x.repeat(1, 3, 1, 1))
                feats.append(pooled["x"])
                probs.append(torch.softmax(logits, dim=1))
        finally:
            hook.remove()
        return torch.cat(feats).mean(0).double().numpy(), torch.cat(probs).mean(0).double().numpy()

    def features(self, crops):
        return np.stack([self._run(c)[0] for c in _uniform(crops)])

    def probabilities(self, crops):
        return np.stack([self._run(c)[1] for c in _uniform(crops)])


def make_extractor(name: str = "stats"):
    if name == "stats":
        return StatsExtractor()
    if name == "inception":
        return SliceClassifierExtractor()
    if name == "inception-random":
        return SliceClassifierExtractor(weights=None)
    raise MetricError(f"unknown extractor {name!r}; expected stats, inception or inception-random")


def extract_features(crops: Sequence[np.ndarray], extractor) -> FeatureSet:
    return FeatureSet(extractor.features(crops), extractor.extractor_id)


# -- metrics ----------------------------------------------------------------

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """Tr((s1 s2)^(1/2)) computed as Tr((s1^(1/2) s2 s1^(1/2))^(1/2))."""
    r = _sqrtm_psd(s1)
    w = np.linalg.eigvalsh(r @ s2 @ r)
    if np.any(w < -1e-6 * max(1.0, np.abs(w).max())):
        raise np.linalg.LinAlgError("covariance product has significantly negative eigenvalues")
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def fid_from_moments(mu1, sigma1, mu2, sigma2, eps: float = FID_EPS) -> float:
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    diff = mu1 - mu2
    try:
        tr = _trace_sqrt_product(sigma1, sigma2)
    except np.linalg.LinAlgError:
        off = eps * np.eye(sigma1.shape[0])
        try:
            tr = _trace_sqrt_product(sigma1 + off, sigma2 + off)
        except np.linalg.LinAlgError as exc:
            raise MetricError(f"covariance square root failed even with eps={eps}: {exc}") from exc
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * tr)


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussians fitted (unbiased covariance) to two feature sets."""
    if a.features.shape[1] != b.features.shape[1]:
        raise MetricError(f"feature dimensions differ: {a.features.shape[1]} vs {b.features.shape[1]}")
    if a.n < 2 or b.n < 2:
        raise MetricError("FID needs at least 2 samples per set")
    x, y = a.features, b.features
    return fid_from_moments(x.mean(0), np.cov(x, rowvar=False), y.mean(0), np.cov(y, rowvar=False))


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3, coef: float = 1.0) -> np.ndarray:
    return (x @ y.T / x.shape[1] + coef) ** degree


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """U-statistic MMD^2 over paired rows, all i == j terms excluded.

    (1 / m(m-1)) * sum_{i != j} [k(x_i, x_j) + k(y_i, y_j) - k(x_i, y_j) - k(x_j, y_i)]
    """
    m = x.shape[0]
    if y.shape[0] != m:
        raise MetricError("mmd2_unbiased needs equal-size sets")
    if m < 2:
        raise MetricError("subset size must be >= 2")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    off = lambda k: k.sum() - np.trace(k)  # noqa: E731
    return float((off(kxx) + off(kyy) - 2 * off(kxy)) / (m * (m - 1)))


def kid(a: FeatureSet, b: FeatureSet, subsets: int = 100, subset_size: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Mean and (population) std of unbiased MMD^2 over random equal-size subsets.

    When ``subset_size`` equals the set size no resampling happens: every
    subset is the full set in its given order.
    """
    if a.features.shape[1] != b.features.shape[1]:
        raise MetricError("feature dimensions differ")
    if subset_size < 2:
        raise MetricError("subset_size must be >= 2")
    if subset_size > min(a.n, b.n):
        raise MetricError(f"subset_size {subset_size} exceeds set sizes ({a.n}, {b.n})")
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(subsets):
        ia = np.arange(a.n) if subset_size == a.n else rng.choice(a.n, subset_size, replace=False)
        ib = np.arange(b.n) if subset_size == b.n else rng.choice(b.n, subset_size, replace=False)
        vals.append(mmd2_unbiased(a.features[ia], b.features[ib]))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std())


def inception_score(probs: np.ndarray, splits: int = 10) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per fold; returns mean and std over folds."""
    from scipy.special import xlogy

    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise MetricError("probabilities must be a non-empty (n, classes) matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(1) - 1) > 1e-5):
        raise MetricError("rows must be probability vectors (non-negative, summing to 1 within 1e-5)")
    if not 1 <= splits <= p.shape[0]:
        raise MetricError(f"splits must lie in [1, {p.shape[0]}]")
    scores = []
    for part in np.array_split(p, splits):
        py = part.mean(0, keepdims=True)
        kl = (xlogy(part, part) - xlogy(part, py)).sum(1)
        scores.append(math.exp(kl.mean()))
    scores = np.asarray(scores)
    return float(scores.mean()), float(scores.std())


# -- report -----------------------------------------------------------------

@dataclass
class MetricReport:
    fid: float
    kid_mean: float
    kid_std: float
    is_mean: float
    is_std: float
    n_real: int
    n_fake: int
    extractor_id: str
    crops_per_subject: int = 5
    seed: int = 0
    checkpoint: str = ""
    kid_subsets: int = 100
    kid_subset_size: int = 0
    is_splits: int = 10

    def to_text(self) -> str:
        return "".join(f"{f.name}: {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        import ast

        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition(": ")
                kv[key] = ast.literal_eval(value)
        return cls(**kv)

    def csv_row(self) -> dict:
        return asdict(self)

    def write(self, path: str | os.PathLike) -> tuple[Path, Path]:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        csv_path = path.with_suffix(".csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=[f.name for f in fields(self)])
            w.writeheader()
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in self.csv_row().items()})
        return path, csv_path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "MetricReport":
        return cls.from_text(Path(path).read_text("utf-8"))


def evaluate_crops(real: Sequence[np.ndarray], fake: Sequence[np.ndarray], extractor, kid_subsets: int = 100,
                   kid_subset_size: int | None = None, is_splits: int = 10, seed: int = 0, **report_kw) -> MetricReport:
    fr, ff = extract_features(real, extractor), extract_features(fake, extractor)
    m = kid_subset_size or min(fr.n, ff.n)
    n_subsets = kid_subsets if m < min(fr.n, ff.n) else 1
    km, ks = kid(fr, ff, n_subsets, m, seed)
    # each fold keeps at least two samples
    splits = max(1, min(is_splits, len(fake) // 2))
    im, istd = inception_score(extractor.probabilities(fake), splits)
    return MetricReport(fid=fid(fr, ff), kid_mean=km, kid_std=ks, is_mean=im, is_std=istd, n_real=fr.n,
                        n_fake=ff.n, extractor_id=extractor.extractor_id, seed=seed, kid_subsets=n_subsets,
                        kid_subset_size=m, is_splits=splits, **report_kw)


def evaluate_model(synthesizer, samples, spec: CropSpec, extractor, seed: int = 0, crops_per_subject: int = 5,
                   kid_subsets: int = 100, kid_subset_size: int | None = None, is_splits: int = 10,
                   checkpoint: str = "", return_crops: bool = False):
    """Draw ``crops_per_subject`` seeded crops per subject; synthesize each from its mask crop.

    Real and synthetic crops share coordinates. DDPM noise comes from a
    generator seeded per subject, so the report is deterministic given seed.
    """
    real, fake = [], []
    for sample in samples:
        try:
            crops = eval_crops(sample, spec, seed, crops_per_subject)
            mask = torch.from_numpy(np.stack([c.mask for c in crops]))
            emb = synthesizer.embed_records([sample.record] * len(crops))
            gen = torch.Generator().manual_seed(subject_seed(seed, sample.subject_id) % (2 ** 63))
            out = synthesizer.synthesize(mask, emb, gen)[:, 0].numpy()
        except Exception as exc:
            raise SubjectError(sample.subject_id, exc) from exc
        real.extend(c.image for c in crops)
        fake.extend(out)
    report = evaluate_crops(real, fake, extractor, kid_subsets, kid_subset_size, is_splits, seed,
                            crops_per_subject=crops_per_subject, checkpoint=str(checkpoint))
    return (report, real, fake) if return_crops else report
