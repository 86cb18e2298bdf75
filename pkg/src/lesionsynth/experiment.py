"""Desk-scale data-augmentation experiment on phantoms.

For each seed a segmenter is trained twice on identical real data, once alone
(ORG) and once with lesion-transplanted synthetic copies (DA), and both are
scored on the same held-out phantoms. The generator is trained once on a
phantom pool disjoint from every segmenter pool.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

from .generator import GeneratorConfig, PatchSet, extract_patches, save_model, train
from .metrics import score_segmentation
from .phantom import PhantomSpec, make_phantom
from .pipeline import prepare_subject
from .segmenter import LabeledImage, SegmenterConfig, segment, train_segmenter
from .transplant import TransplantSpec, transplant
from .volume import Geometry, SpatialTransform

log = logging.getLogger(__name__)

ARMS = ("ORG", "DA")
METRICS = ("dsc", "sensitivity", "precision")

TINY_GENERATOR = GeneratorConfig(patch_size=32, patch_stride=16, base_width=8, max_epochs=80)


def derive_seed(*keys) -> int:
    """Stable 32-bit seed from a tuple of ints/strings."""
    ints = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = PhantomSpec()
    generator: GeneratorConfig = TINY_GENERATOR
    segmenter: SegmenterConfig = SegmenterConfig()
    n_generator_phantoms: int = 4
    n_train_real: int = 1
    augmentations_per_image: int = 2
    n_test: int = 4
    seeds: tuple = (0, 1, 2, 3, 4)
    pool_seed: int = 0
    use_gm_mask: bool = True
    max_rotation_deg: float = 6.0
    max_shift_mm: float = 2.0
    displacement_mm: float = 1.5

    def __post_init__(self):
        if self.n_train_real < 1 or self.n_test < 1 or self.n_generator_phantoms < 1:
            raise ValueError("image counts must be >= 1")
        if self.augmentations_per_image < 0:
            raise ValueError("augmentations_per_image must be >= 0")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        nested = {"phantom": PhantomSpec, "generator": GeneratorConfig, "segmenter": SegmenterConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name in nested:
                v = _build(nested[f.name], v)
            elif isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**kwargs)


def _build(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------

def random_affine(rng, max_rotation_deg=6.0, scale=(0.96, 1.04), max_shift_mm=2.0) -> np.ndarray:
    """Small in-plane rotation, isotropic in-plane scale and shift."""
    theta = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg))
    s = rng.uniform(*scale)
    c, si = np.cos(theta), np.sin(theta)
    a = np.eye(4)
    a[:2, :2] = s * np.array([[c, -si], [si, c]])
    a[:2, 3] = rng.uniform(-max_shift_mm, max_shift_mm, 2)
    return a


def smooth_displacement(rng, geometry: Geometry, amplitude_mm=1.5, smoothness_vox=6.0) -> np.ndarray:
    """Band-limited random in-plane field with peak magnitude ``amplitude_mm``."""
    field_ = np.zeros((*geometry.shape, 3))
    for axis in range(2):
        noise = ndimage.gaussian_filter(rng.standard_normal(geometry.shape),
                                        (smoothness_vox, smoothness_vox, 1.0))
        peak = np.abs(noise).max()
        field_[..., axis] = amplitude_mm * noise / peak if peak > 0 else 0.0
    return field_


def augmentation_transform(config: ExperimentConfig, rng, copy_index: int, target: Geometry):
    """Even copies are affine only, odd copies add a smooth displacement field."""
    affine = random_affine(rng, config.max_rotation_deg, max_shift_mm=config.max_shift_mm)
    if copy_index % 2 == 0:
        return SpatialTransform(affine)
    return SpatialTransform(affine, smooth_displacement(rng, target, config.displacement_mm))


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------

def _prepared(config: ExperimentConfig, seed: int, healthy: bool = False):
    spec = config.phantom.healthy() if healthy else config.phantom
    ph = make_phantom(spec, seed)
    sub = prepare_subject(ph.t1, ph.flair, ph.brain, gm=ph.gm if config.use_gm_mask else None,
                          seed=seed % (2 ** 30))
    return ph, sub


def train_experiment_generator(config: ExperimentConfig):
    """Train the generator on its own phantom pool; returns (model, history, subjects)."""
    subjects = []
    for i in range(config.n_generator_phantoms):
        _, sub = _prepared(config, derive_seed(config.pool_seed, "generator", i))
        subjects.append(sub)
    patches = PatchSet.concat(
        extract_patches(s.t1, s.flair, s.filled_t1, s.filled_flair, s.bank, s.brain, config.generator, i)
        for i, s in enumerate(subjects))
    model, history = train(patches, config.generator)
    return model, history, subjects


def synthetic_copies(config: ExperimentConfig, generator, real_sub, real_lesion, seed: int, index: int):
    """Transplant a real subject's lesions onto a fresh lesion-free phantom."""
    _, target = _prepared(config, derive_seed(seed, "healthy", index), healthy=True)
    rng = np.random.default_rng(derive_seed(seed, "augment", index))
    out = []
    for k in range(config.augmentations_per_image):
        tf = augmentation_transform(config, rng, k, target.brain.geometry)
        spec = TransplantSpec(real_lesion, real_sub.bank, tf)
        syn_t1, syn_fl, lesion = transplant(generator, target.filled_t1, target.filled_flair,
                                            target.bank, spec, target.brain)
        out.append(LabeledImage(syn_t1, syn_fl, lesion & target.brain, target.brain))
    return out


def run_seed(config: ExperimentConfig, generator, seed: int, n_real: int | None = None,
             test_set=None):
    """Both arms for one seed; returns a list of result rows (one per arm)."""
    n_real = config.n_train_real if n_real is None else n_real
    real, synthetic = [], []
    for i in range(n_real):
        ph, sub = _prepared(config, derive_seed(seed, "real", i))
        real.append(LabeledImage(sub.t1, sub.flair, ph.lesion, ph.brain))
        synthetic.extend(synthetic_copies(config, generator, sub, ph.lesion, seed, i))
    if test_set is None:
        test_set = build_test_set(config, seed)
    seg_cfg = replace(config.segmenter, rng_seed=derive_seed(seed, "segmenter") % (2 ** 31))
    rows = []
    for arm, images in (("ORG", real), ("DA", real + synthetic)):
        model, hist = train_segmenter(images, seg_cfg)
        scores = [score_segmentation(segment(model, t.t1, t.flair, t.brain, seg_cfg), t.lesion)
                  for t in test_set]
        row = {"seed": seed, "n_real": n_real, "arm": arm, "n_synthetic": len(images) - len(real),
               "best_epoch": hist.best_epoch, "epochs_run": len(hist.epochs)}
        for m in METRICS:
            vals = [getattr(s, m) for s in scores if getattr(s, m) is not None]
            row[m] = float(np.mean(vals)) if vals else None
        rows.append(row)
        log.info("seed %d n_real %d %s dsc %.4f", seed, n_real, arm, row["dsc"])
    return rows


def build_test_set(config: ExperimentConfig, seed: int):
    out = []
    for j in range(config.n_test):
        ph, sub = _prepared(config, derive_seed(seed, "test", j))
        out.append(LabeledImage(sub.t1, sub.flair, ph.lesion, ph.brain))
    return out


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)
    generator_history: object = None

    @property
    def trained_models(self) -> int:
        return len(self.rows)

    def arm_values(self, arm, metric, n_real=None):
        """Per-seed values of one arm; undefined ratios (None) are dropped."""
        return [r[metric] for r in self.rows if r["arm"] == arm and r[metric] is not None
                and (n_real is None or r["n_real"] == n_real)]

    def paired_deltas(self, metric="dsc", n_real=None):
        """DA minus ORG per (seed, size); pairs with an undefined side are skipped."""
        org = {(r["seed"], r["n_real"]): r[metric] for r in self.rows if r["arm"] == "ORG"}
        out = []
        for r in self.rows:
            if r["arm"] != "DA" or (n_real is not None and r["n_real"] != n_real):
                continue
            base = org[(r["seed"], r["n_real"])]
            if r[metric] is not None and base is not None:
                out.append(r[metric] - base)
        return out

    def summary(self, n_real=None) -> dict:
        out = {}
        for m in METRICS:
            org_by = {(r["seed"], r["n_real"]): r[m] for r in self.rows if r["arm"] == "ORG"}
            pairs = [(r[m], org_by[(r["seed"], r["n_real"])]) for r in self.rows
                     if r["arm"] == "DA" and (n_real is None or r["n_real"] == n_real)
                     and r[m] is not None and org_by[(r["seed"], r["n_real"])] is not None]
            da_p = np.array([p[0] for p in pairs], dtype=float)
            org_p = np.array([p[1] for p in pairs], dtype=float)
            d = da_p - org_p
            org = np.asarray(self.arm_values("ORG", m, n_real), dtype=float)
            da = np.asarray(self.arm_values("DA", m, n_real), dtype=float)
            if len(d) > 1 and np.std(d) > 0:
                t = stats.ttest_rel(da_p, org_p)
                tstat, pval = float(t.statistic), float(t.pvalue)
            else:
                tstat = pval = float("nan")
            nan = float("nan")
            out[m] = {"org_mean": float(org.mean()) if len(org) else nan,
                      "org_std": float(org.std()) if len(org) else nan,
                      "da_mean": float(da.mean()) if len(da) else nan,
                      "da_std": float(da.std()) if len(da) else nan,
                      "delta_mean": float(d.mean()) if len(d) else nan,
                      "delta_std": float(d.std()) if len(d) else nan,
                      "n_positive": int((d > 0).sum()), "n": int(len(d)),
                      "paired_t": tstat, "p_value": pval}
        return out

    def to_csv(self, path=None) -> str:
        cols = ["seed", "n_real", "arm", "n_synthetic", "dsc", "sensitivity", "precision",
                "best_epoch", "epochs_run"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["NA" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in cols])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def curves_csv(self, path=None) -> str:
        """One row per (size, arm, metric, seed)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["size", "arm", "metric", "seed", "value"])
        for r in self.rows:
            for m in METRICS:
                w.writerow([r["n_real"], r["arm"], m, r["seed"], "NA" if r[m] is None else repr(r[m])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _write_outputs(report: ExperimentReport, out_dir, generator=None, sizes=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "runs.csv")
    if report.generator_history is not None:
        report.generator_history.to_csv(out_dir / "generator_history.csv")
    if generator is not None:
        save_model(generator, out_dir / "generator.npz")
    summaries = {str(n): report.summary(n) for n in (sizes or [None])}
    (out_dir / "summary.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")


def run_one_image_experiment(config: ExperimentConfig, generator=None, out_dir=None) -> ExperimentReport:
    history = None
    if generator is None:
        generator, history, _ = train_experiment_generator(config)
    report = ExperimentReport(generator_history=history)
    for seed in config.seeds:
        report.rows.extend(run_seed(config, generator, seed))
    if out_dir is not None:
        _write_outputs(report, out_dir, generator if history is not None else None)
    return report


def sweep_training_size(config: ExperimentConfig, sizes, generator=None, out_dir=None) -> ExperimentReport:
    history = None
    if generator is None:
        generator, history, _ = train_experiment_generator(config)
    report = ExperimentReport(generator_history=history)
    for seed in config.seeds:
        test_set = build_test_set(config, seed)
        for n in sizes:
            report.rows.extend(run_seed(config, generator, seed, n_real=n, test_set=test_set))
    if out_dir is not None:
        _write_outputs(report, out_dir, generator if history is not None else None, list(sizes))
        report.curves_csv(Path(out_dir) / "curves.csv")
        plot_curves(report, Path(out_dir) / "curves.png")
    return report


def plot_curves(report: ExperimentReport, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sizes = sorted({r["n_real"] for r in report.rows})
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.2))
    for ax, m in zip(axes, METRICS):
        for arm, style in (("ORG", "o-"), ("DA", "s--")):
            means = [np.mean([v for v in report.arm_values(arm, m, n) if v is not None]) for n in sizes]
            ax.plot(sizes, means, style, label=arm)
        ax.set_xlabel("training images")
        ax.set_title(m)
        ax.set_ylim(0, 1)
        ax.legend()
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
