import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import clinsynth.training as training
from clinsynth.backbones import one_hot_mask
from clinsynth.data_pipeline import VolumeSample
from clinsynth.errors import ConfigError, NumericalError
from clinsynth.tabular_text import ClinicalRecord
from clinsynth.text_embedding import make_encoder
from clinsynth.training import (
    DiffusionConfig,
    ModelConfig,
    Synthesizer,
    TrainConfig,
    load_checkpoint,
    lr_schedule,
    read_loss_history,
    train,
    train_ddpm,
    train_pix2pix,
)

TINY = ModelConfig(base_channels=4, depth_levels=2, disc_base_channels=4, disc_n_down=2)


def cfg(backbone="pix2pix", use_text=False, epochs=2, **kw):
    kw.setdefault("lr", 1e-3)
    return TrainConfig(backbone=backbone, use_text=use_text, epochs=epochs, decay_start_epoch=kw.pop("decay", 0),
                       crop_size=(8, 8, 8), model=kw.pop("model", TINY), **kw)


@pytest.fixture(scope="module")
def fixed_sample(phantom_samples):
    s = phantom_samples[0]
    return VolumeSample(s.image[4:12, 8:16, 2:10].copy(), s.mask[4:12, 8:16, 2:10].copy(), s.record)


def first_and_last(history, term):
    values = [v for _, t, v in history if t == term]
    return values[0], values[-1]


# -- configuration ----------------------------------------------------------

def test_full_scale_defaults():
    gan, ddpm = TrainConfig("pix2pix"), TrainConfig("ddpm")
    assert (gan.lr, gan.adam_betas, gan.batch_size, gan.epochs, gan.decay_start_epoch) == \
        (1e-4, (0.5, 0.999), 2, 1800, 800)
    assert (ddpm.lr, ddpm.adam_betas) == (1e-5, (0.9, 0.999))
    assert (gan.l1_weight, gan.adv_weight) == (100.0, 1.0)
    assert ddpm.diffusion.T == 250
    assert gan.fusion_kind == "cross_attention" and ddpm.fusion_kind == "affine"


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"lr": -1.0}, {"epochs": 5, "decay_start_epoch": 5},
                                {"backbone": "vae"}, {"batch_size": 0}])
def test_config_errors(kw):
    base = {"backbone": "pix2pix", "epochs": 10, "decay_start_epoch": 2}
    with pytest.raises(ConfigError):
        TrainConfig(**{**base, **kw})


def test_config_dict_round_trip():
    c = cfg("ddpm", True, diffusion=DiffusionConfig(T=20, beta_schedule="cosine"))
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_lr_schedule_pinned():
    c = TrainConfig("pix2pix", epochs=1800, decay_start_epoch=800)
    assert lr_schedule(0, c) == 1e-4
    assert lr_schedule(799, c) == 1e-4
    assert lr_schedule(800, c) == 1e-4
    assert lr_schedule(1799, c) == pytest.approx(1e-4 / 1000, rel=1e-12)
    assert lr_schedule(1300, c) == pytest.approx(0.5e-4, rel=1e-12)


@given(epochs=st.integers(2, 3000), data=st.data())
def test_lr_schedule_monotone(epochs, data):
    decay = data.draw(st.integers(0, epochs - 1))
    c = TrainConfig("pix2pix", epochs=epochs, decay_start_epoch=decay)
    lrs = [lr_schedule(e, c) for e in range(0, epochs, max(1, epochs // 50))]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(0 < v <= c.lr for v in lrs)


# -- training runs ----------------------------------------------------------

def test_text_without_encoder(phantom_samples, tmp_path):
    with pytest.raises(ConfigError):
        train(cfg(use_text=True), phantom_samples, None, tmp_path)
    with pytest.raises(ConfigError):
        train(cfg(), [], None, tmp_path)


def test_wrapper_backbone_checks(phantom_samples, tmp_path):
    with pytest.raises(ConfigError):
        train_pix2pix(cfg("ddpm"), phantom_samples, None, tmp_path)
    with pytest.raises(ConfigError):
        train_ddpm(cfg("pix2pix"), phantom_samples, None, tmp_path)


def test_pix2pix_l1_overfit(fixed_sample, tmp_path):
    result = train(cfg(epochs=30, batch_size=1), [fixed_sample], None, tmp_path)
    first, last = first_and_last(result.history, "G_L1")
    assert len([1 for _, t, _ in result.history if t == "G_L1"]) == 30
    assert last < first


def test_ddpm_overfit(fixed_sample, tmp_path):
    c = cfg("ddpm", epochs=200, batch_size=1, lr=1e-3, diffusion=DiffusionConfig(T=250))
    result = train(c, [fixed_sample], None, tmp_path)
    losses = [v for _, t, v in result.history if t == "eps_mse"]
    assert len(losses) == 200
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_seeded_determinism(phantom_samples, tmp_path):
    a = train(cfg(use_text=True), phantom_samples, make_encoder(dimension=16), tmp_path / "a")
    b = train(cfg(use_text=True), phantom_samples, make_encoder(dimension=16), tmp_path / "b")
    assert a.history == b.history
    pa, pb = torch.load(a.checkpoint, weights_only=True), torch.load(b.checkpoint, weights_only=True)
    assert all(torch.equal(pa["params"][k], pb["params"][k]) for k in pa["params"])


@pytest.mark.parametrize("backbone", ["pix2pix", "ddpm"])
def test_resume_matches_unbroken_run(phantom_samples, tmp_path, backbone):
    c = cfg(backbone, use_text=True, epochs=4, decay=2, diffusion=DiffusionConfig(T=20))
    full = train(c, phantom_samples, make_encoder(dimension=16), tmp_path / "full")
    part = train(c, phantom_samples, make_encoder(dimension=16), tmp_path / "part", max_epochs=2)
    resumed = train(c, phantom_samples, make_encoder(dimension=16), tmp_path / "resumed", resume_from=part.checkpoint)
    assert resumed.history == full.history
    pf = torch.load(full.checkpoint, weights_only=True)["params"]
    pr = torch.load(resumed.checkpoint, weights_only=True)["params"]
    assert all(torch.equal(pf[k], pr[k]) for k in pf)


def test_encoder_called_once_per_text(phantom_samples, tmp_path):
    enc = make_encoder(dimension=16)
    result = train(cfg(use_text=True, epochs=3), phantom_samples, enc, tmp_path)
    assert result.encoder_calls == enc.backend_calls == len(phantom_samples)
    assert enc.cache_hits == 2 * len(phantom_samples)


def test_checkpoint_round_trip(phantom_samples, tmp_path):
    c = cfg("ddpm", use_text=True, diffusion=DiffusionConfig(T=20))
    result = train(c, phantom_samples, make_encoder(dimension=16), tmp_path)
    ck = load_checkpoint(result.checkpoint)
    assert ck.config == c
    assert ck.metadata["encoder"]["encoder_id"] == "stub-768" and ck.metadata["seed"] == 0
    assert ck.metadata["epoch"] == 2
    trained = training.build_models(c, 16)
    state = torch.load(result.checkpoint, weights_only=True)["params"]
    trained["model"].load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
    trained["model"].eval()
    g = torch.Generator().manual_seed(0)
    x, t = torch.randn(1, 1, 8, 8, 8, generator=g), torch.tensor([7])
    mask = one_hot_mask(torch.randint(0, 4, (1, 8, 8, 8), generator=g))
    emb = torch.randn(1, 16, generator=g)
    with torch.no_grad():
        assert torch.equal(ck.models["model"](x, mask, t, emb), trained["model"](x, mask, t, emb))


def test_checkpoint_format_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.pt")
    torch.save({"format": "other"}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")


def test_loss_history_and_progress(phantom_samples, tmp_path):
    result = train(cfg(epochs=2), phantom_samples, None, tmp_path)
    assert read_loss_history(tmp_path / "loss_history.csv") == result.history
    assert {t for _, t, _ in result.history} == {"D", "G_adv", "G_L1"}
    lines = (tmp_path / "progress.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_unet_backbone_has_no_discriminator(phantom_samples, tmp_path):
    result = train(cfg("unet"), phantom_samples, None, tmp_path)
    assert {t for _, t, _ in result.history} == {"G_L1"}
    assert set(load_checkpoint(result.checkpoint).models) == {"generator"}


def test_periodic_checkpoints(phantom_samples, tmp_path):
    train(cfg(epochs=3, checkpoint_every=1), phantom_samples, None, tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.pt")) == ["epoch00001.pt", "epoch00002.pt", "final.pt"]


def test_nan_aborts_keeping_last_good(phantom_samples, tmp_path, monkeypatch):
    real_step = training._gan_step
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        out = real_step(*args)
        return {**out, "G_L1": float("nan")} if calls["n"] == 5 else out

    monkeypatch.setattr(training, "_gan_step", flaky)
    with pytest.raises(NumericalError, match="epoch00002.pt"):
        train(cfg(epochs=4, checkpoint_every=1), phantom_samples, None, tmp_path)
    assert (tmp_path / "epoch00002.pt").exists()
    load_checkpoint(tmp_path / "epoch00002.pt")


# -- synthesis --------------------------------------------------------------

@pytest.mark.parametrize("backbone", ["pix2pix", "ddpm"])
def test_synthesizer(phantom_samples, tmp_path, backbone):
    c = cfg(backbone, use_text=True, diffusion=DiffusionConfig(T=10))
    result = train(c, phantom_samples, make_encoder(dimension=16), tmp_path)
    synth = Synthesizer.from_path(result.checkpoint)
    assert synth.uses_text and synth.spatial_factor == 4
    mask = torch.from_numpy(phantom_samples[0].mask[:8, :8, :8][None])
    emb = synth.embed_records([phantom_samples[0].record])
    assert emb.shape == (1, 16)
    a = synth.synthesize(mask, emb, torch.Generator().manual_seed(1))
    b = synth.synthesize(mask, emb, torch.Generator().manual_seed(1))
    assert a.shape == (1, 1, 8, 8, 8) and torch.equal(a, b)


def test_synthesizer_without_text(phantom_samples, tmp_path):
    result = train(cfg("unet"), phantom_samples, None, tmp_path)
    synth = Synthesizer.from_path(result.checkpoint)
    assert not synth.uses_text and synth.embed_records([ClinicalRecord("x", {})]) is None
