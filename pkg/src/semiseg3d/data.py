"""Synthetic multi-modal brain phantoms, cohort storage, splits and preprocessing."""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, DegenerateInputError, GeometryError, PreprocessingError

CLASS_NAMES = ("background", "csf", "gm", "wm")
MODALITY_NAMES = ("t1", "t2")
MIN_PHANTOM_SIDE = 48
FORMAT_VERSION = 1

# Per-class mean intensity; T1-like and T2-like contrasts run in opposite order.
_BASE_MEANS = np.array([
    [0.05, 0.25, 0.55, 0.85],  # t1: bg < csf < gm < wm
    [0.05, 0.90, 0.60, 0.35],  # t2: csf > gm > wm
])


@dataclass
class MultiModalVolume:
    intensities: np.ndarray  # (H, W, D, M)
    spacing: tuple = (1.0, 1.0, 1.0)
    subject_id: str = ""
    modality_names: tuple = MODALITY_NAMES

    def __post_init__(self):
        if self.intensities.ndim != 4 or self.intensities.shape[-1] < 1:
            raise GeometryError(f"intensities must be (H, W, D, M), got {self.intensities.shape}")
        if any(s <= 0 for s in self.spacing):
            raise GeometryError("voxel spacing must be positive")

    @property
    def shape(self):
        return self.intensities.shape[:3]


@dataclass
class LabelMap:
    labels: np.ndarray  # (H, W, D) int
    num_classes: int = 4
    class_names: tuple = CLASS_NAMES


@dataclass
class SplitManifest:
    labeled_train: list
    validation: list
    test: list
    unlabeled: list = field(default_factory=list)

    def to_dict(self):
        return {"labeled_train": self.labeled_train, "validation": self.validation,
                "test": self.test, "unlabeled": self.unlabeled}


def _smooth_field(rng, shape, scale):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=scale, mode="wrap")
    return f / f.std()


def generate_phantom(seed, shape=(64, 64, 64), M=2, K=4, deformation_strength=0.15,
                     noise_sigma=0.05, bias_strength=0.2, contrast_jitter=0.04, spacing=(1.0, 1.0, 1.0),
                     subject_id=None):
    """Nested deformed shells (WM core, GM, CSF, background) imaged in M modalities.

    Subject-to-subject variation comes from the shell radii, a smooth radial
    deformation, a folding field on the WM/GM interface, jittered class
    intensities, a multiplicative bias field and Gaussian noise. Fully
    determined by ``seed``.
    """
    if isinstance(shape, int):
        shape = (shape,) * 3
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < MIN_PHANTOM_SIDE:
        raise GeometryError(f"phantom shape {shape} below minimum {MIN_PHANTOM_SIDE}^3")
    if K != 4:
        raise ConfigurationError("phantoms have exactly K=4 classes (bg/csf/gm/wm)")
    if M < 1:
        raise ConfigurationError("need at least one modality")
    rng = np.random.default_rng(seed)

    half = min(shape) / 2.0
    center = np.array(shape) / 2.0 - 0.5 + rng.uniform(-2.0, 2.0, size=3)
    aspect = rng.uniform(0.85, 1.15, size=3)
    axes = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    r = np.sqrt(sum(((a - c) / (half * s)) ** 2 for a, c, s in zip(axes, center, aspect)))

    r = r * (1.0 + deformation_strength * _smooth_field(rng, shape, half / 3.0))
    fold = 0.6 * deformation_strength * _smooth_field(rng, shape, half / 10.0)

    r_csf = rng.uniform(0.78, 0.88)
    r_gm = r_csf - rng.uniform(0.10, 0.16)
    r_wm = r_gm - rng.uniform(0.15, 0.22)
    labels = np.zeros(shape, dtype=np.int64)
    labels[r < r_csf] = 1
    labels[r < r_gm] = 2
    labels[(r + fold) < r_wm] = 3
    labels[r >= r_gm] = np.minimum(labels[r >= r_gm], 1)

    means = np.empty((M, K))
    for m in range(M):
        means[m] = _BASE_MEANS[m] if m < len(_BASE_MEANS) else np.sort(rng.uniform(0.05, 0.95, K))
    means = means + rng.uniform(-contrast_jitter, contrast_jitter, size=means.shape)

    bias = np.exp(bias_strength * _smooth_field(rng, shape, half / 2.0)) if bias_strength else 1.0
    img = np.empty(shape + (M,), dtype=np.float64)
    for m in range(M):
        img[..., m] = means[m][labels] * bias
        if noise_sigma:
            img[..., m] += rng.normal(0.0, noise_sigma, size=shape)
    names = tuple(MODALITY_NAMES[m] if m < len(MODALITY_NAMES) else f"mod{m}" for m in range(M))
    sid = subject_id if subject_id is not None else f"phantom-{seed}"
    volume = MultiModalVolume(img.astype(np.float32), tuple(float(s) for s in spacing), sid, names)
    return volume, LabelMap(labels.astype(np.int64), K, CLASS_NAMES)


def normalize(volume: MultiModalVolume) -> MultiModalVolume:
    """Zero-mean, unit-std per modality over the whole volume."""
    x = np.asarray(volume.intensities, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("volume has non-finite intensities")
    mean = x.mean(axis=(0, 1, 2))
    std = x.std(axis=(0, 1, 2))
    if np.any(std == 0):
        raise DegenerateInputError(f"zero-variance modality in {volume.subject_id or 'volume'}")
    out = (x - mean) / std
    return MultiModalVolume(out, volume.spacing, volume.subject_id, volume.modality_names)


def bias_correct(volume: MultiModalVolume, command: str | None = None) -> MultiModalVolume:
    """Bias-field correction hook; a no-op unless ``command`` is given.

    ``command`` is a shell template with ``{input}`` and ``{output}``
    placeholders naming raw little-endian float32 files of the volume's shape,
    e.g. an N4 wrapper script.
    """
    if command is None:
        return volume
    arr = np.ascontiguousarray(volume.intensities, dtype="<f4")
    with tempfile.TemporaryDirectory() as tmp:
        src, dst = Path(tmp) / "input.f32", Path(tmp) / "output.f32"
        arr.tofile(src)
        cmd = command.format(input=shlex.quote(str(src)), output=shlex.quote(str(dst)))
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        if proc.returncode != 0:
            raise PreprocessingError(f"bias correction failed ({proc.returncode}): {proc.stderr.strip()}")
        if not dst.exists():
            raise PreprocessingError(f"bias correction wrote no output; stdout: {proc.stdout.strip()}")
        out = np.fromfile(dst, dtype="<f4")
    if out.size != arr.size:
        raise PreprocessingError(f"bias correction returned {out.size} values, expected {arr.size}")
    return MultiModalVolume(out.reshape(arr.shape), volume.spacing, volume.subject_id, volume.modality_names)


def make_splits(subject_ids, n_labeled, seed, n_test=7, test_ids=None) -> SplitManifest:
    """Fixed test set plus a seed-rotated labeled/validation choice.

    The test set is ``test_ids`` if given, else the last ``n_test`` ids in
    sorted order, so it never depends on ``seed``. The remaining pool is
    rotated by ``seed``: the first ``n_labeled`` become labeled training
    subjects, the next one validation, the rest the unlabeled pool.
    """
    ids = sorted(subject_ids)
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate subject ids")
    if not 1 <= n_labeled <= 5:
        raise ConfigurationError(f"n_labeled must be in 1..5, got {n_labeled}")
    if test_ids is None:
        if n_test < 1 or n_test > len(ids):
            raise ConfigurationError(f"cannot hold out {n_test} test subjects from {len(ids)}")
        test = ids[-n_test:]
    else:
        test = sorted(test_ids)
        missing = set(test) - set(ids)
        if missing:
            raise ConfigurationError(f"test ids not in cohort: {sorted(missing)}")
    pool = [s for s in ids if s not in set(test)]
    if len(pool) < n_labeled + 1:
        raise ConfigurationError(
            f"{len(ids)} subjects cannot give {n_labeled} labeled + 1 validation + {len(test)} test")
    shift = seed % len(pool)
    pool = pool[shift:] + pool[:shift]
    return SplitManifest(pool[:n_labeled], pool[n_labeled:n_labeled + 1], test, pool[n_labeled + 1:])


# -- on-disk layout ----------------------------------------------------------

def save_subject(directory, volume: MultiModalVolume, labels: LabelMap):
    """One directory per subject: ``image.f32``, ``labels.f32`` and ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(volume.intensities, dtype="<f4").tofile(d / "image.f32")
    np.ascontiguousarray(labels.labels, dtype="<f4").tofile(d / "labels.f32")
    meta = {
        "format_version": FORMAT_VERSION,
        "subject_id": volume.subject_id,
        "shape": list(volume.shape),
        "modalities": list(volume.modality_names),
        "spacing": list(volume.spacing),
        "dtype": "<f4",
        "image": "image.f32",
        "labels": "labels.f32",
        "num_classes": labels.num_classes,
        "label_legend": {str(i): n for i, n in enumerate(labels.class_names)},
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))


def load_subject(directory):
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
        shape = tuple(meta["shape"])
        m = len(meta["modalities"])
        img = np.fromfile(d / meta["image"], dtype="<f4").reshape(shape + (m,))
        lab = np.fromfile(d / meta["labels"], dtype="<f4").reshape(shape)
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"incomplete subject directory {d}: {exc.filename}") from exc
    legend = meta["label_legend"]
    names = tuple(legend[str(i)] for i in range(meta["num_classes"]))
    volume = MultiModalVolume(img, tuple(meta["spacing"]), meta["subject_id"], tuple(meta["modalities"]))
    return volume, LabelMap(lab.astype(np.int64), meta["num_classes"], names)


def write_cohort(out_dir, n_subjects, shape=64, seed=0, n_test=4, **phantom_kwargs):
    """Generate ``n_subjects`` phantoms plus ``manifest.json`` under ``out_dir``."""
    if isinstance(shape, int):
        shape = (shape,) * 3
    if n_test < 1:
        raise ConfigurationError("n_test must be >= 1")
    if n_subjects < n_test + 2:
        raise ConfigurationError(f"{n_subjects} subjects leave no room for {n_test} test + labeled + validation")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_subjects)
    ids = []
    for i, child in enumerate(children):
        sid = f"sub-{i:03d}"
        sub_seed = int(child.generate_state(1)[0])
        volume, labels = generate_phantom(sub_seed, shape, subject_id=sid, **phantom_kwargs)
        save_subject(out / sid, volume, labels)
        ids.append(sid)
    manifest = {
        "format_version": FORMAT_VERSION,
        "cohort_id": f"phantom-seed{seed}-n{n_subjects}-{'x'.join(map(str, shape))}",
        "subjects": ids,
        "test": ids[-n_test:],
        "generator": {"seed": seed, "shape": list(shape), **phantom_kwargs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


class Cohort:
    """A cohort directory: manifest plus lazily loaded, normalised subjects."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no cohort manifest at {path}")
        self.manifest = json.loads(path.read_text())
        self._cache = {}

    @property
    def cohort_id(self):
        return self.manifest["cohort_id"]

    @property
    def subject_ids(self):
        return list(self.manifest["subjects"])

    def splits(self, n_labeled, seed) -> SplitManifest:
        return make_splits(self.subject_ids, n_labeled, seed, test_ids=self.manifest["test"])

    def load(self, subject_id, normalized=True):
        key = (subject_id, normalized)
        if key not in self._cache:
            if subject_id not in self.manifest["subjects"]:
                raise ConfigurationError(f"unknown subject {subject_id!r} in {self.root}")
            volume, labels = load_subject(self.root / subject_id)
            if normalized:
                volume = normalize(bias_correct(volume))
            self._cache[key] = (volume, labels)
        return self._cache[key]


def default_output_root():
    return Path(os.environ.get("SEMISEG3D_OUTPUT_ROOT", "runs"))
