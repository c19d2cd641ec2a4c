import copy

import numpy as np
import pytest
import torch

from semiseg3d import data, losses, trainer
from semiseg3d.errors import ConfigurationError, TrainingDivergedError
from semiseg3d.models import DiscriminatorSpec, build_discriminator
from semiseg3d.patches import extract, plan_grid

TINY = dict(batch_size=4, base_width=2, gen_width=2, enc_width=2, noise_dim=4, depth=2, patch_side=16,
            stride=16, epochs=2, patience=2, lr=1e-3, val_patches=4)


def tiny(mode="fm_gan", **kw):
    return trainer.TrainConfig(**{**TINY, "mode": mode, **kw})


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    data.write_cohort(root, 4, shape=48, seed=1, n_test=1)
    return data.Cohort(root)


def batches(seed=0, n=4, side=16):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, side, side, side, 2)).astype(np.float32)
    y = rng.integers(0, 4, size=(n, side, side, side))
    unl = rng.normal(size=(n, side, side, side, 2)).astype(np.float32)
    return (x, y), unl


def test_config_validation_and_round_trip():
    cfg = tiny(seed=3)
    assert trainer.TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        tiny(mode="wgan")
    with pytest.raises(ConfigurationError):
        tiny(patch_side=18)
    with pytest.raises(ConfigurationError):
        trainer.TrainConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ConfigurationError):
        trainer.TrainConfig.from_dict({**cfg.to_dict(), "schema_version": 99})


def test_supervised_step_has_zero_gan_terms():
    state = trainer.TrainState(tiny("supervised"))
    lab, _ = batches()
    rec = trainer.train_step(state, lab)
    assert rec["L_unlabeled"] == rec["L_fake"] == rec["L_generator"] == rec["FM_loss"] == 0.0
    assert state.generator is None and rec["L_labeled"] > 0


def test_gan_step_requires_unlabeled():
    state = trainer.TrainState(tiny("fm_gan"))
    with pytest.raises(ConfigurationError):
        trainer.train_step(state, batches()[0])


@pytest.mark.parametrize("mode", ["normal_gan", "fm_gan", "bad_gan"])
def test_step_bit_identical(mode):
    lab, unl = batches(1)
    recs = []
    for _ in range(2):
        state = trainer.TrainState(tiny(mode))
        recs.append([trainer.train_step(state, lab, unl, state.sample_noise(4)) for _ in range(2)])
    np.testing.assert_equal(recs[0], recs[1])


def test_step_zero_labeled_loss_identical_across_modes():
    lab, unl = batches(2)
    values = set()
    for mode in trainer.MODES:
        state = trainer.TrainState(tiny(mode))
        rec = trainer.train_step(state, lab, unl, state.sample_noise(4))
        values.add(rec["L_labeled"])
    assert len(values) == 1


def test_labeled_loss_decreases_on_fixed_batch():
    state = trainer.TrainState(tiny("supervised", lr=1e-3))
    lab, _ = batches(3)
    first = trainer.train_step(state, lab)["L_labeled"]
    for _ in range(5):
        last = trainer.train_step(state, lab)["L_labeled"]
    assert last < first


def test_bad_gan_without_entropy_matches_fm_gan_discriminator():
    lab, unl = batches(4)
    traces = {}
    for mode in ("fm_gan", "bad_gan"):
        state = trainer.TrainState(tiny(mode, lambda_ent=0.0))
        recs = [trainer.train_step(state, lab, unl, state.sample_noise(4)) for _ in range(3)]
        traces[mode] = [(r["L_labeled"], r["L_unlabeled"], r["L_fake"], r["FM_loss"]) for r in recs]
    np.testing.assert_allclose(traces["fm_gan"], traces["bad_gan"], rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("mode", ["normal_gan", "fm_gan", "bad_gan"])
def test_generator_update_leaves_discriminator_untouched(mode):
    state = trainer.TrainState(tiny(mode))
    _, unl = batches(5)
    before = copy.deepcopy(state.discriminator.state_dict())
    gen_before = copy.deepcopy(state.generator.state_dict())
    trainer._generator_update(state, torch.from_numpy(unl), state.sample_noise(4))
    after = state.discriminator.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert any(not torch.equal(gen_before[k], v) for k, v in state.generator.state_dict().items())
    assert all(p.requires_grad for p in state.discriminator.parameters())


def test_non_finite_loss_raises():
    state = trainer.TrainState(tiny("supervised"))
    (x, y), _ = batches(6)
    x[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        trainer.train_step(state, (x, y))
    assert info.value.snapshot["step"] == 0


class ConstantLogits(torch.nn.Module):
    def __init__(self, values):
        super().__init__()
        self.values = torch.tensor(values, dtype=torch.float32)

    def forward(self, x):
        return self.values.expand(*x.shape[:4], len(self.values)).clone()


def test_predict_single_patch_equals_direct_argmax():
    torch.manual_seed(0)
    d = build_discriminator(DiscriminatorSpec(base_width=2, depth=2))
    vol = np.random.default_rng(0).normal(size=(16, 16, 16, 2)).astype(np.float32)
    probs, labels = trainer.predict_volume(d, vol, patch_side=16, stride=8)
    with torch.no_grad():
        direct = d(torch.from_numpy(vol)[None])[0]
    np.testing.assert_array_equal(labels, direct.argmax(-1).numpy())
    np.testing.assert_allclose(probs, losses.softmax_kplus1(direct.double())[..., :-1].numpy(), atol=1e-12)


def test_predict_constant_logits_gives_class_zero():
    probs, labels = trainer.predict_volume(ConstantLogits([1.0, 1.0, 1.0]), np.zeros((24, 20, 16, 2)), 16, 8)
    assert (labels == 0).all()
    np.testing.assert_allclose(probs, np.e / (3 * np.e + 1), atol=1e-12)


def test_fake_probability_map():
    patch = np.zeros((8, 8, 8, 2))
    np.testing.assert_allclose(trainer.fake_probability_map(ConstantLogits([-40.0] * 3), patch), 1.0, atol=1e-15)
    np.testing.assert_allclose(trainer.fake_probability_map(ConstantLogits([0.0, 0.0]), patch), 1 / 3, atol=1e-12)
    torch.manual_seed(1)
    d = build_discriminator(DiscriminatorSpec(base_width=2, depth=2))
    x = np.random.default_rng(1).normal(size=(16, 16, 16, 2))
    fake = trainer.fake_probability_map(d, x)
    real, _ = trainer.predict_volume(d, x, 16, 16)
    np.testing.assert_allclose(fake + real.sum(-1), 1.0, atol=1e-9)


def test_patch_sampler_epoch_covers_grid_once():
    vol = np.arange(32 ** 3 * 2, dtype=np.float32).reshape(32, 32, 32, 2)
    lab = np.zeros((32, 32, 32), dtype=np.int64)
    sampler = trainer.PatchSampler([(vol, lab)], [vol], 16, 8, np.random.default_rng(0))
    seen = np.concatenate([x for x, _ in sampler.labeled_epoch(5)])
    ref = extract(vol, plan_grid(vol.shape, 16, 8)).patches
    assert len(seen) == len(ref) == 27
    assert sorted(p[0, 0, 0, 0] for p in seen) == sorted(p[0, 0, 0, 0] for p in ref)


def test_fit_smoke_and_checkpoint(cohort, tmp_path):
    cfg = tiny("fm_gan")
    result = trainer.fit(cfg, cohort)
    assert len(result.log.records) == 2 * 7  # 27 patches / batch 4, two epochs
    assert set(result.log.records[0]) == set(trainer.LOG_COLUMNS)
    assert result.best_validation_error <= result.log.records[-1]["validation_error"]
    result.save_checkpoint(tmp_path / "ck.npz", {"cohort_id": cohort.cohort_id})
    from semiseg3d.models import load_checkpoint

    mods, meta = load_checkpoint(tmp_path / "ck.npz")
    assert set(mods) == {"discriminator", "generator"}
    assert meta["extra"]["best_validation_error"] == result.best_validation_error
    trainer.write_log(result.log, tmp_path / "log.csv", tmp_path / "log.json")
    back = trainer.TrainLog.from_csv(tmp_path / "log.csv")
    assert back.records == result.log.records


def test_fit_deterministic_logs(cohort, tmp_path):
    paths = []
    for i in range(2):
        result = trainer.fit(tiny("bad_gan", max_steps=5), cohort)
        paths.append(tmp_path / f"{i}.csv")
        result.log.to_csv(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_fit_needs_unlabeled(tmp_path):
    data.write_cohort(tmp_path, 3, shape=48, seed=2, n_test=1)
    with pytest.raises(ConfigurationError):
        trainer.fit(tiny("fm_gan"), data.Cohort(tmp_path))
    result = trainer.fit(tiny("supervised", max_steps=2), data.Cohort(tmp_path))
    assert len(result.log.records) == 2


def test_log_rejects_non_monotone_steps():
    log = trainer.TrainLog()
    log.append({"step": 1})
    with pytest.raises(ValueError):
        log.append({"step": 1})
