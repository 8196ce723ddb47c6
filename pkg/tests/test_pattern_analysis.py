import csv

import matplotlib.pyplot as plt
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clinsynth.data_pipeline import CropSpec, read_volume
from clinsynth.errors import ConfigError
from clinsynth.pattern_analysis import (
    CounterfactualSpec,
    analyze,
    counterfactual_pair,
    difference_map,
    heatmap_limit,
    overlay_rgb,
    render_heatmap,
    summarize,
)
from clinsynth.tabular_text import UnknownAttributeError, default_schema
from clinsynth.text_embedding import make_encoder
from clinsynth.training import ModelConfig, Synthesizer, TrainConfig, DiffusionConfig, train

CROP = CropSpec((8, 8, 8))
TINY = ModelConfig(base_channels=4, depth_levels=2, disc_base_channels=4, disc_n_down=2)


def _train(backbone, use_text, out):
    c = TrainConfig(backbone=backbone, use_text=use_text, epochs=3, decay_start_epoch=0, lr=1e-3, crop_size=(8, 8, 8),
                    model=TINY, diffusion=DiffusionConfig(T=10))
    return Synthesizer.from_path(train(c, _train.samples, make_encoder(dimension=16) if use_text else None, out).checkpoint)


@pytest.fixture(scope="module")
def models(phantom_samples, tmp_path_factory):
    _train.samples = phantom_samples
    root = tmp_path_factory.mktemp("models")
    return {name: _train(b, t, root / name) for name, b, t in
            [("pix2pix", "pix2pix", True), ("ddpm", "ddpm", True), ("plain", "unet", False)]}


# -- counterfactual pairs ---------------------------------------------------

@pytest.mark.parametrize("name", ["pix2pix", "ddpm"])
def test_null_counterfactual_is_exactly_zero(models, phantom_samples, name):
    pair = counterfactual_pair(models[name], phantom_samples[0], CounterfactualSpec("smoker", "yes", "yes"), CROP)
    assert np.array_equal(pair.vol_a, pair.vol_b)
    diff = difference_map(pair.vol_a, pair.vol_b, pair.mask)
    assert not diff.delta.any()


@pytest.mark.parametrize("name", ["pix2pix", "ddpm"])
def test_edit_changes_text_only(models, phantom_samples, name):
    spec = CounterfactualSpec("smoker", "yes", "no")
    pair = counterfactual_pair(models[name], phantom_samples[0], spec, CROP)
    assert pair.text_a.endswith("is a smoker.") and pair.text_b.endswith("is a non-smoker.")
    assert pair.text_a.rsplit(". ", 1)[0] == pair.text_b.rsplit(". ", 1)[0]
    again = counterfactual_pair(models[name], phantom_samples[0], spec, CROP)
    assert np.array_equal(pair.vol_a, again.vol_a) and np.array_equal(pair.vol_b, again.vol_b)
    assert pair.vol_a.shape == pair.mask.shape == (8, 8, 8)


def test_antisymmetry(models, phantom_samples):
    fwd = counterfactual_pair(models["pix2pix"], phantom_samples[1], CounterfactualSpec("smoker", "yes", "no"), CROP)
    bwd = counterfactual_pair(models["pix2pix"], phantom_samples[1], CounterfactualSpec("smoker", "no", "yes"), CROP)
    d_f = difference_map(fwd.vol_a, fwd.vol_b, fwd.mask).delta
    d_b = difference_map(bwd.vol_a, bwd.vol_b, bwd.mask).delta
    assert np.array_equal(d_f, -d_b)


def test_non_text_model_rejected(models, phantom_samples):
    with pytest.raises(ConfigError):
        counterfactual_pair(models["plain"], phantom_samples[0], CounterfactualSpec("smoker", "yes", "no"), CROP)


def test_spec_validation():
    schema = default_schema()
    CounterfactualSpec("age", 30, 70).validate(schema)
    with pytest.raises(ConfigError):
        CounterfactualSpec("smoker", "yes", "sometimes").validate(schema)
    with pytest.raises(UnknownAttributeError):
        CounterfactualSpec("height", 1, 2).validate(schema)


# -- difference maps --------------------------------------------------------

def test_identical_volumes_zero_summary():
    v = np.random.default_rng(0).standard_normal((4, 4, 4))
    mask = np.random.default_rng(1).integers(0, 4, (4, 4, 4))
    diff = difference_map(v, v, mask)
    for s in diff.summary.values():
        if s["voxels"]:
            assert s["mean_delta"] == s["mean_abs_delta"] == s["fraction_positive"] == 0.0


def test_constant_shift():
    v = np.zeros((4, 4, 4))
    diff = difference_map(v, v + 0.1, np.ones((4, 4, 4), dtype=int))
    assert diff.summary["all"]["mean_delta"] == pytest.approx(0.1, abs=1e-15)
    assert diff.summary["all"]["fraction_positive"] == 1.0
    assert diff.summary["lung"]["voxels"] == 64
    assert diff.summary["background"]["voxels"] == 0 and np.isnan(diff.summary["background"]["mean_delta"])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_class_means_match_masked_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((8, 8, 8)), rng.standard_normal((8, 8, 8))
    mask = rng.integers(0, 4, (8, 8, 8))
    diff = difference_map(a, b, mask)
    for label, name in enumerate(("background", "right_lung", "left_lung", "airway")):
        vals = [b[i, j, k] - a[i, j, k] for i in range(8) for j in range(8) for k in range(8) if mask[i, j, k] == label]
        if vals:
            assert diff.summary[name]["mean_delta"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
            assert diff.summary[name]["fraction_positive"] == sum(v > 0 for v in vals) / len(vals)
    lung = [b[idx] - a[idx] for idx in zip(*np.nonzero((mask == 1) | (mask == 2)))]
    assert diff.summary["lung"]["mean_delta"] == pytest.approx(sum(lung) / len(lung), abs=1e-12)
    # stored summary is recomputable from the delta
    again = summarize(diff.delta, mask)
    for name, s in diff.summary.items():
        for k, v in s.items():
            assert abs(v - again[name][k]) <= 1e-10


def test_shape_mismatch():
    with pytest.raises(ValueError):
        difference_map(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        difference_map(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# -- heatmaps ---------------------------------------------------------------

def test_heatmap_limit():
    d = np.arange(-50, 51, dtype=float)
    assert heatmap_limit(d) == pytest.approx(np.percentile(np.abs(d), 99))
    assert heatmap_limit(np.zeros(5)) == 1.0


def test_zero_delta_overlay_is_background():
    bg = np.random.default_rng(0).uniform(-1, 1, (6, 6))
    _, comp = overlay_rgb(np.zeros((6, 6)), bg, 1.0)
    np.testing.assert_allclose(comp, np.repeat(((bg + 1) / 2)[..., None], 3, -1))


def test_blob_phantom_colours():
    delta = np.zeros((10, 10))
    delta[1:3, 1:3], delta[7:9, 7:9] = 1.0, -1.0
    colors, comp = overlay_rgb(delta, np.zeros((10, 10)), 1.0)
    pos, neg = comp[2, 2], comp[8, 8]
    assert pos[0] > pos[2] and neg[2] > neg[0]  # red for increases, blue for decreases
    assert np.allclose(comp[5, 5], 0.5)


def test_render_heatmap_files(tmp_path):
    rng = np.random.default_rng(0)
    diff = difference_map(rng.standard_normal((4, 6, 5)), rng.standard_normal((4, 6, 5)), np.zeros((4, 6, 5), int))
    out = render_heatmap(diff, 2, rng.uniform(-1, 1, (4, 6, 5)), tmp_path / "h.png")
    assert plt.imread(out).shape[:2] == (6, 5)
    assert (tmp_path / "h_figure.png").exists()
    for bad in (-1, 4):
        with pytest.raises(IndexError):
            render_heatmap(diff, bad, np.zeros((4, 6, 5)), tmp_path / "x.png")


# -- batch analysis ---------------------------------------------------------

def test_analyze_outputs(models, phantom_samples, tmp_path):
    spec = CounterfactualSpec("smoker", "yes", "no", subjects=[phantom_samples[0].subject_id,
                                                                phantom_samples[1].subject_id])
    rows = analyze(models["pix2pix"], phantom_samples, spec, CROP, tmp_path)
    with open(tmp_path / "aggregate.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == len(rows) == 2 * 6
    assert {r["subject"] for r in table} == set(spec.subjects)
    sid = phantom_samples[0].subject_id
    delta, _ = read_volume(tmp_path / "deltas" / f"{sid}_delta.raw")
    assert delta.shape == (8, 8, 8)
    np.testing.assert_array_equal(read_volume(tmp_path / "deltas" / f"{sid}_absdelta.raw")[0], np.abs(delta))
    assert (tmp_path / "heatmaps" / f"{sid}_z004.png").exists()
    assert (tmp_path / "heatmaps" / f"{sid}_z004_abs.png").exists()


def test_analyze_null_csv_zeros(models, phantom_samples, tmp_path):
    analyze(models["ddpm"], phantom_samples, CounterfactualSpec("smoker", "no", "no"), CROP, tmp_path)
    with open(tmp_path / "aggregate.csv") as fh:
        for r in csv.DictReader(fh):
            if int(r["voxels"]):
                assert float(r["mean_delta"]) == float(r["mean_abs_delta"]) == 0.0
