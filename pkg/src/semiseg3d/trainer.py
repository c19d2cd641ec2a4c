"""Semi-supervised training loop, whole-volume prediction and the fake-probability map."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import losses
from .errors import ConfigurationError, TrainingDivergedError
from .models import (
    DiscriminatorSpec,
    EncoderSpec,
    GeneratorSpec,
    build_discriminator,
    build_encoder,
    build_generator,
    sample_noise,
    save_checkpoint,
)
from .patches import extract, plan_grid, stitch

log = logging.getLogger(__name__)

MODES = ("supervised", "normal_gan", "fm_gan", "bad_gan")
LOG_COLUMNS = ("step", "epoch", "L_labeled", "L_unlabeled", "L_fake", "L_generator", "FM_loss", "validation_error")
CONFIG_SCHEMA_VERSION = 1

# Offsets that give every random stream its own seed.
_SEED_DISC, _SEED_GEN, _SEED_ENC, _SEED_NOISE, _SEED_DATA = 1, 2, 3, 4, 5


@dataclass
class TrainConfig:
    mode: str = "fm_gan"
    n_labeled: int = 1
    batch_size: int = 30
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 30
    patch_side: int = 32
    stride: int = 8
    noise_dim: int = 100
    lambda_ent: float = 1.0
    theta: float = 1.0
    seed: int = 0
    patience: int = 10
    base_width: int = 32
    depth: int = 3
    leaky_slope: float = 0.2
    gen_width: int = 16
    enc_width: int = 16
    val_patches: int = 16
    max_steps: int | None = None
    threads: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 1 or self.patience < 1:
            raise ConfigurationError("epochs and patience must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.patch_side % (2 ** self.depth):
            raise ConfigurationError(f"patch_side {self.patch_side} not divisible by 2^depth={2 ** self.depth}")
        if self.theta <= 0:
            raise ConfigurationError("theta must be positive")

    @classmethod
    def desk(cls, **overrides):
        """Small-model budget used for CPU-scale phantom experiments."""
        params = dict(batch_size=8, base_width=8, gen_width=4, enc_width=8, noise_dim=32, epochs=8,
                      patience=8, lr=1e-3)
        params.update(overrides)
        return cls(**params)

    @property
    def uses_generator(self):
        return self.mode != "supervised"

    def to_dict(self):
        return {"schema_version": CONFIG_SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        version = data.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported config schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append(record)

    def column(self, name):
        return [r[name] for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                writer.writerow([r["step"], r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[2:]])

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {c: float(row[c]) for c in LOG_COLUMNS[2:]}
                rec["step"], rec["epoch"] = int(row["step"]), int(row["epoch"])
                out.records.append(rec)
        return out

    def summary(self):
        if not self.records:
            return {"steps": 0}
        last = self.records[-1]
        return {
            "steps": len(self.records),
            "final": {c: last[c] for c in LOG_COLUMNS[2:]},
            "best_validation_error": min(self.column("validation_error")),
            "discriminator_loss_trace": [r["L_labeled"] + r["L_unlabeled"] + r["L_fake"] for r in self.records],
        }


class TrainState:
    """Networks, optimizers and random streams for one run."""

    def __init__(self, config: TrainConfig, in_channels=2, num_classes=4):
        self.config = config
        c = config
        self.disc_spec = DiscriminatorSpec(in_channels, num_classes, c.base_width, c.depth, c.leaky_slope)
        torch.manual_seed(c.seed * 100 + _SEED_DISC)
        self.discriminator = build_discriminator(self.disc_spec)
        self.generator = self.encoder = None
        self.gen_spec = self.enc_spec = None
        if c.uses_generator:
            self.gen_spec = GeneratorSpec(c.noise_dim, in_channels, c.patch_side, c.gen_width)
            torch.manual_seed(c.seed * 100 + _SEED_GEN)
            self.generator = build_generator(self.gen_spec)
        if c.mode == "bad_gan":
            self.enc_spec = EncoderSpec(in_channels, c.noise_dim, 3, c.theta, c.enc_width)
            torch.manual_seed(c.seed * 100 + _SEED_ENC)
            self.encoder = build_encoder(self.enc_spec)
        betas = (c.adam_beta1, c.adam_beta2)
        self.d_opt = torch.optim.Adam(self.discriminator.parameters(), lr=c.lr, betas=betas)
        self.g_opt = None
        if self.generator is not None:
            params = list(self.generator.parameters())
            if self.encoder is not None:
                params += list(self.encoder.parameters())
            self.g_opt = torch.optim.Adam(params, lr=c.lr, betas=betas)
        self.noise_rng = torch.Generator().manual_seed(c.seed * 100 + _SEED_NOISE)
        self.step = 0

    def modules(self):
        mods = {"discriminator": self.discriminator}
        if self.generator is not None:
            mods["generator"] = self.generator
        if self.encoder is not None:
            mods["encoder"] = self.encoder
        return mods

    def specs(self):
        specs = {"discriminator": self.disc_spec}
        if self.gen_spec is not None:
            specs["generator"] = self.gen_spec
        if self.enc_spec is not None:
            specs["encoder"] = self.enc_spec
        return specs

    def sample_noise(self, batch):
        return sample_noise(batch, self.config.noise_dim, self.noise_rng)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.float()
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def _finite_or_raise(step, values):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDivergedError(f"non-finite loss at step {step}: {bad}", {"step": step, **values})


def _finite_logits_or_raise(step, logits):
    if not torch.isfinite(logits).all():
        raise TrainingDivergedError(f"non-finite discriminator output at step {step}", {"step": step})


def train_step(state: TrainState, labeled_batch, unlabeled_batch=None, noise_batch=None):
    """One discriminator update on the three-term loss, then one generator(+encoder) update.

    ``labeled_batch`` is ``(patches, labels)`` with patches (B, s, s, s, M) and
    labels (B, s, s, s). Returns the log record (without validation error).
    """
    cfg = state.config
    disc = state.discriminator
    x_lab, y_lab = _as_tensor(labeled_batch[0]), torch.as_tensor(labeled_batch[1]).long()
    gan = cfg.uses_generator
    if gan and (unlabeled_batch is None or noise_batch is None):
        raise ConfigurationError(f"{cfg.mode} steps need unlabeled and noise batches")

    # discriminator
    disc.train()
    state.d_opt.zero_grad(set_to_none=True)
    if gan:
        x_unl = _as_tensor(unlabeled_batch)
        z = noise_batch
        state.generator.train()
        with torch.no_grad():
            fake = state.generator(z)
        n_lab, n_unl = len(x_lab), len(x_unl)
        logits = disc(torch.cat([x_lab, x_unl, fake]))
        _finite_logits_or_raise(state.step, logits)
        total, parts = losses.discriminator_loss(
            logits[:n_lab], y_lab, logits[n_lab:n_lab + n_unl], logits[n_lab + n_unl:])
    else:
        logits = disc(x_lab)
        _finite_logits_or_raise(state.step, logits)
        total, parts = losses.discriminator_loss(logits, y_lab)
    values = {f"L_{k}": float(v.detach()) for k, v in parts.items()}
    _finite_or_raise(state.step, values)
    total.backward()
    state.d_opt.step()

    # generator (+ encoder); the discriminator is frozen for this update
    g_loss = fm = 0.0
    if gan:
        disc.requires_grad_(False)
        try:
            g_loss, fm = _generator_update(state, x_unl, z)
        finally:
            disc.requires_grad_(True)
        _finite_or_raise(state.step, {"L_generator": g_loss, "FM_loss": fm})

    record = {
        "step": state.step,
        "epoch": 0,
        "L_labeled": values["L_labeled"],
        "L_unlabeled": values["L_unlabeled"],
        "L_fake": values["L_fake"],
        "L_generator": g_loss,
        "FM_loss": fm,
        "validation_error": float("nan"),
    }
    state.step += 1
    return record


def _generator_update(state, x_unl, z):
    cfg, disc = state.config, state.discriminator
    state.g_opt.zero_grad(set_to_none=True)
    with torch.no_grad():
        real_summary = disc.feature_summary(x_unl)
    fake = state.generator(z)
    if cfg.mode == "normal_gan":
        loss = losses.generator_loss("normal", fake_logits=disc(fake))
        with torch.no_grad():
            fm = losses.feature_matching_loss(real_summary, disc.feature_summary(fake))
    else:
        fake_summary = disc.feature_summary(fake)
        fm_t = losses.feature_matching_loss(real_summary, fake_summary)
        fm = fm_t
        if cfg.mode == "fm_gan":
            loss = fm_t
        else:
            state.encoder.train()
            loss = losses.generator_loss("bad_gan", real_summary=real_summary, fake_summary=fake_summary,
                                         z=z, posterior=state.encoder(fake), lambda_ent=cfg.lambda_ent)
    loss.backward()
    state.g_opt.step()
    return float(loss.detach()), float(fm.detach())


# -- data plumbing ------------------------------------------------------------

class PatchSampler:
    """Serves shuffled labeled batches and with-replacement unlabeled batches."""

    def __init__(self, labeled, unlabeled, patch_side, stride, rng):
        self.labeled = labeled  # list of (volume array, label array)
        self.unlabeled = unlabeled  # list of volume arrays
        self.side = patch_side
        self.rng = rng
        self.lab_index = [(i, o) for i, (v, _) in enumerate(labeled)
                          for o in plan_grid(v.shape, patch_side, stride).origins]
        self.unl_index = [(i, o) for i, v in enumerate(unlabeled)
                          for o in plan_grid(v.shape, patch_side, stride).origins]

    def _crop(self, arr, o):
        s = self.side
        return arr[o[0]:o[0] + s, o[1]:o[1] + s, o[2]:o[2] + s]

    def labeled_epoch(self, batch_size):
        order = self.rng.permutation(len(self.lab_index))
        for start in range(0, len(order), batch_size):
            picks = [self.lab_index[j] for j in order[start:start + batch_size]]
            x = np.stack([self._crop(self.labeled[i][0], o) for i, o in picks])
            y = np.stack([self._crop(self.labeled[i][1], o) for i, o in picks])
            yield x.astype(np.float32), y

    def unlabeled_batch(self, n):
        picks = self.rng.integers(0, len(self.unl_index), size=n)
        return np.stack([self._crop(self.unlabeled[i], o) for i, o in (self.unl_index[j] for j in picks)]).astype(
            np.float32)


def _validation_set(volumes, labels, cfg, rng):
    patches, targets = [], []
    for v, y in zip(volumes, labels):
        grid = plan_grid(v.shape, cfg.patch_side, cfg.stride)
        patches.append(extract(v, grid).patches)
        targets.append(extract(y[..., None], grid).patches[..., 0])
    x, y = np.concatenate(patches), np.concatenate(targets)
    pick = np.sort(rng.choice(len(x), size=min(cfg.val_patches, len(x)), replace=False))
    return x[pick].astype(np.float32), y[pick]


@torch.no_grad()
def voxel_error(disc, x, y, batch=8):
    disc.eval()
    wrong = 0
    for i in range(0, len(x), batch):
        pred = disc(_as_tensor(x[i:i + batch])).argmax(dim=-1).numpy()
        wrong += int((pred != y[i:i + batch]).sum())
    return wrong / y.size


@dataclass
class FitResult:
    state: TrainState
    log: TrainLog
    best_epoch: int
    best_validation_error: float
    splits: object
    best_state_dicts: dict

    @property
    def discriminator(self):
        return self.state.discriminator

    def save_checkpoint(self, path, extra=None):
        """Write the validation-selected parameters."""
        modules = {name: copy.deepcopy(m) for name, m in self.state.modules().items()}
        for name, m in modules.items():
            m.load_state_dict(self.best_state_dicts[name])
        meta = {"config": self.state.config.to_dict(), "best_epoch": self.best_epoch,
                "best_validation_error": self.best_validation_error, "splits": self.splits.to_dict()}
        meta.update(extra or {})
        save_checkpoint(path, modules, self.state.specs(), meta)


def fit(config: TrainConfig, cohort, progress=None) -> FitResult:
    """Train on a cohort's split; keep the parameters with lowest validation error.

    An epoch is one pass over the labeled subjects' patch grid. In GAN modes
    every labeled batch is paired with an equal-sized unlabeled batch (drawn
    with replacement from the unlabeled pool's grids) and noise batch.
    """
    cfg = config
    cfg.validate()
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    splits = cohort.splits(cfg.n_labeled, cfg.seed)
    if cfg.uses_generator and not splits.unlabeled:
        raise ConfigurationError(f"mode {cfg.mode} needs unlabeled subjects; split has none")
    lab = [cohort.load(s) for s in splits.labeled_train]
    val = [cohort.load(s) for s in splits.validation]
    unl = [cohort.load(s)[0].intensities for s in splits.unlabeled] if cfg.uses_generator else []
    first = lab[0][0]
    k = lab[0][1].num_classes
    for v, _ in lab + val:
        if v.intensities.shape[-1] != first.intensities.shape[-1]:
            raise ConfigurationError("subjects disagree on modality count")

    data_rng = np.random.default_rng(cfg.seed * 100 + _SEED_DATA)
    state = TrainState(cfg, first.intensities.shape[-1], k)
    sampler = PatchSampler([(v.intensities, y.labels) for v, y in lab], unl, cfg.patch_side, cfg.stride, data_rng)
    val_x, val_y = _validation_set([v.intensities for v, _ in val], [y.labels for _, y in val], cfg,
                                   np.random.default_rng(cfg.seed * 100 + _SEED_DATA + 50))

    train_log = TrainLog()
    best_err = voxel_error(state.discriminator, val_x, val_y)
    best_epoch = -1
    best = {n: copy.deepcopy(m.state_dict()) for n, m in state.modules().items()}
    current_err = best_err
    stale = 0
    done = False
    for epoch in range(cfg.epochs):
        for x, y in sampler.labeled_epoch(cfg.batch_size):
            unl_batch = noise = None
            if cfg.uses_generator:
                unl_batch = sampler.unlabeled_batch(len(x))
                noise = state.sample_noise(len(x))
            record = train_step(state, (x, y), unl_batch, noise)
            record["epoch"] = epoch
            record["validation_error"] = current_err
            train_log.append(record)
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                done = True
                break
        current_err = voxel_error(state.discriminator, val_x, val_y)
        train_log.records[-1]["validation_error"] = current_err
        if progress:
            progress(epoch, train_log.records[-1])
        log.info("epoch %d step %d val_err %.4f", epoch, state.step, current_err)
        if current_err <= best_err:
            best_err, best_epoch, stale = current_err, epoch, 0
            best = {n: copy.deepcopy(m.state_dict()) for n, m in state.modules().items()}
        else:
            stale += 1
        if done or stale >= cfg.patience:
            break
    for name, module in state.modules().items():
        module.load_state_dict(best[name])
    return FitResult(state, train_log, best_epoch, best_err, splits, best)


# -- inference -----------------------------------------------------------------

@torch.no_grad()
def predict_volume(model, volume, patch_side=32, stride=8, batch=8):
    """Patch-wise real-class probabilities stitched over the volume.

    Returns ``(probs (H, W, D, K), labels (H, W, D))``. Probabilities are the
    K real-class entries of the (K+1)-way softmax, so they sum to
    ``1 - p(fake)``; the fake class never enters the argmax.
    """
    arr = np.asarray(getattr(volume, "intensities", volume))
    grid = plan_grid(arr.shape, patch_side, stride)
    patches = extract(arr, grid).patches
    model.eval()
    out = []
    for i in range(0, len(patches), batch):
        logits = model(_as_tensor(patches[i:i + batch])).double()
        out.append(losses.softmax_kplus1(logits)[..., :-1].numpy())
    return stitch(np.concatenate(out), grid)


@torch.no_grad()
def fake_probability_map(model, patch):
    """Per-voxel p(fake) = 1 / (Z + 1) for one patch (s, s, s, M)."""
    model.eval()
    x = _as_tensor(patch)
    if x.ndim == 4:
        x = x[None]
    return losses.fake_probability(model(x).double())[0].numpy()


def write_log(train_log: TrainLog, csv_path, json_path, extra=None):
    train_log.to_csv(csv_path)
    summary = train_log.summary()
    summary.update(extra or {})
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2)
