"""Command-line front-end: one subcommand per pipeline stage.

Stages exchange files through a subject directory whose ``manifest.json`` maps
roles (``t1``, ``flair_norm``, ``bank``, ``filled_t1`` ...) to relative paths.
Explicit path flags always win over manifest entries. Every run writes
``provenance_<command>.json`` into its output directory.

Failures print one JSON line on stderr, e.g.
``{"error": "geometry-mismatch", "exit_code": 5, "message": "..."}``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, errors

CONFIG_ENV = "LESIONSYNTH_CONFIG"
MANIFEST = "manifest.json"

EXIT_CODES = {
    "usage": 2,
    "missing-input": 3,
    "malformed-image": 4,
    "geometry-mismatch": 5,
    "invalid-config": 6,
    "invalid-transform": 7,
    "empty-input": 8,
    "degenerate-range": 9,
    "insufficient-sample": 10,
    "estimation-failed": 11,
    "fill-failed": 12,
    "training-diverged": 13,
    "degenerate-labels": 14,
    "placement-failed": 15,
    "checkpoint": 16,
    "corrupt-checkpoint": 17,
    "checkpoint-version": 18,
    "config-mismatch": 19,
    "output-conflict": 20,
    "error": 1,
}


class CliError(errors.LesionSynthError):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def parse_gammas(text):
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty gamma list")
    return values


def load_config(args) -> dict:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    path = Path(path)
    if not path.exists():
        raise CliError("missing-input", f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("invalid-config", f"{path}: {exc}")
    if not isinstance(cfg, dict):
        raise CliError("invalid-config", f"{path}: top level must be an object")
    args._config_path = str(path)
    return cfg


def config_section(cfg: dict, name: str) -> dict:
    section = cfg.get(name, {})
    if not isinstance(section, dict):
        raise CliError("invalid-config", f"config section {name!r} must be an object")
    return section


def read_manifest(subject_dir) -> dict:
    if subject_dir is None:
        return {}
    path = Path(subject_dir) / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def update_manifest(subject_dir, entries: dict):
    subject_dir = Path(subject_dir)
    manifest = read_manifest(subject_dir)
    for role, p in entries.items():
        p = Path(p)
        try:
            manifest[role] = str(p.resolve().relative_to(subject_dir.resolve()))
        except ValueError:
            manifest[role] = str(p.resolve())
    (subject_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def resolve(args, role, flag=None, required=True):
    """Path for ``role``: explicit flag first, then the subject manifest."""
    value = getattr(args, flag or role, None)
    if value:
        return Path(value)
    subject = getattr(args, "subject", None)
    manifest = read_manifest(subject)
    if role in manifest:
        return Path(subject) / manifest[role]
    if required:
        raise CliError("missing-input", f"no input for {role!r}: pass --{(flag or role).replace('_', '-')}"
                                        " or a --subject whose manifest provides it")
    return None


def require_existing(*paths):
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise CliError("missing-input", "input not found: " + ", ".join(missing))


def check_outputs(inputs, outputs):
    ins = {Path(p).resolve() for p in inputs if p is not None}
    clash = [str(p) for p in outputs if Path(p).resolve() in ins]
    if clash:
        raise CliError("output-conflict", "refusing to overwrite an input: " + ", ".join(clash))


def out_dir(args) -> Path:
    d = Path(args.out_dir or args.subject or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_provenance(directory, args, config: dict, seeds=None, outputs=()):
    import nibabel
    import scipy
    import torch

    from ._kernels import BACKEND_NAME

    blob = json.dumps(config, sort_keys=True, default=str).encode()
    record = {
        "command": args.command,
        "argv": sys.argv[1:] if getattr(args, "_argv", None) is None else args._argv,
        "config_path": getattr(args, "_config_path", None),
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "config": config,
        "seeds": seeds,
        "outputs": [str(o) for o in outputs],
        "versions": {"lesionsynth": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "nibabel": nibabel.__version__, "torch": torch.__version__,
                     "kernel_backend": BACKEND_NAME},
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path = Path(directory) / f"provenance_{args.command.replace('-', '_')}.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_phantom(args):
    from .nifti import save_mask, save_volume
    from .phantom import PhantomSpec, make_phantom

    cfg = load_config(args)
    fields = config_section(cfg, "phantom")
    spec = PhantomSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in fields.items()})
    if args.healthy:
        spec = spec.healthy()
    root = out_dir(args)
    written = []
    for i in range(args.count):
        seed = args.seed + i
        ph = make_phantom(spec, seed)
        d = root / f"phantom_{seed:03d}"
        d.mkdir(parents=True, exist_ok=True)
        paths = {"t1": save_volume(ph.t1, d / "t1.nii.gz"), "flair": save_volume(ph.flair, d / "flair.nii.gz")}
        for name in ("lesion", "gm", "wm", "brain"):
            paths[name] = save_mask(getattr(ph, name), d / f"{name}.nii.gz")
        update_manifest(d, paths)
        written.append(d)
    write_provenance(root, args, {"phantom": asdict(spec)}, seeds=[args.seed + i for i in range(args.count)],
                     outputs=written)
    return written


def cmd_make_masks(args):
    from .masking import build_bank, estimate_gm_stats, save_bank
    from .nifti import load_mask, load_volume, save_volume
    from .volume import normalize

    cfg = load_config(args)
    t1_p, flair_p, brain_p = resolve(args, "t1"), resolve(args, "flair"), resolve(args, "brain")
    gm_p = resolve(args, "gm", required=False)
    require_existing(t1_p, flair_p, brain_p, gm_p)
    d = out_dir(args)
    outputs = [d / "t1_norm.nii.gz", d / "flair_norm.nii.gz", d / "norm.json", d / "bank"]
    check_outputs([t1_p, flair_p, brain_p, gm_p], outputs)

    section = config_section(cfg, "masks")
    gammas = args.gammas or tuple(section.get("gammas", ())) or None
    p_lo, p_hi = section.get("p_lo", 1.0), section.get("p_hi", 99.0)
    t1, flair, brain = load_volume(t1_p), load_volume(flair_p), load_mask(brain_p)
    gm = load_mask(gm_p) if gm_p else None
    t1n, norm_t1 = normalize(t1, brain, p_lo, p_hi)
    flairn, norm_fl = normalize(flair, brain, p_lo, p_hi)
    stats = estimate_gm_stats(flairn, brain, gm, seed=args.seed)
    bank = build_bank(flairn, stats, brain, gammas) if gammas else build_bank(flairn, stats, brain)
    save_volume(t1n, outputs[0])
    save_volume(flairn, outputs[1])
    outputs[2].write_text(json.dumps({"t1": asdict(norm_t1), "flair": asdict(norm_fl),
                                      "p_lo": p_lo, "p_hi": p_hi}, indent=2) + "\n")
    save_bank(bank, outputs[3])
    inputs = {"t1": t1_p, "flair": flair_p, "brain": brain_p, "gm": gm_p}
    update_manifest(args.subject or d, {**{k: v for k, v in inputs.items() if v is not None},
                                        "t1_norm": outputs[0], "flair_norm": outputs[1],
                                        "norm": outputs[2], "bank": outputs[3]})
    write_provenance(d, args, {"gammas": list(bank.gammas), "p_lo": p_lo, "p_hi": p_hi,
                               "gm_stats": asdict(stats)}, seeds=[args.seed], outputs=outputs)
    return outputs


def cmd_fill(args):
    from .filling import FillConfig, fill_wmh
    from .masking import load_bank
    from .nifti import load_mask, load_volume, save_volume

    cfg = load_config(args)
    t1_p = resolve(args, "t1_norm", "t1")
    flair_p = resolve(args, "flair_norm", "flair")
    bank_p = resolve(args, "bank")
    brain_p = resolve(args, "brain", required=False)
    wm_p = resolve(args, "wm", required=False) if args.use_wm else None
    require_existing(t1_p, flair_p, bank_p, brain_p, wm_p)
    d = out_dir(args)
    outputs = [d / "filled_t1.nii.gz", d / "filled_flair.nii.gz", d / "fill_report.json"]
    check_outputs([t1_p, flair_p, brain_p, wm_p], outputs)

    section = config_section(cfg, "fill")
    rounds = section.get("dilation_rounds", 2)
    sigma = section.get("smoothing_sigma_mm")
    if args.sigma is not None:
        sigma = args.sigma
    bank = load_bank(bank_p)
    brain = load_mask(brain_p) if brain_p else None
    wm = load_mask(wm_p) if wm_p else None
    reports = {}
    for k, (src, dst, seed) in enumerate(((t1_p, outputs[0], 2 * args.seed),
                                         (flair_p, outputs[1], 2 * args.seed + 1))):
        vol = load_volume(src)
        filled, rep = fill_wmh(vol, bank.wmh_mask, FillConfig(rounds, sigma, seed, wm, brain))
        save_volume(filled, dst)
        reports[("t1", "flair")[k]] = rep.to_dict()
    outputs[2].write_text(json.dumps(reports, indent=2) + "\n")
    update_manifest(args.subject or d, {"filled_t1": outputs[0], "filled_flair": outputs[1],
                                        "fill_report": outputs[2]})
    write_provenance(d, args, {"dilation_rounds": rounds, "smoothing_sigma_mm": sigma},
                     seeds=[2 * args.seed, 2 * args.seed + 1], outputs=outputs)
    return outputs


def _generator_config(cfg, args):
    from .generator import GeneratorConfig

    fields = dict(config_section(cfg, "generator"))
    if args.seed is not None:
        fields["rng_seed"] = args.seed
    if getattr(args, "max_epochs", None):
        fields["max_epochs"] = args.max_epochs
    try:
        return GeneratorConfig.from_dict(fields)
    except TypeError as exc:
        raise CliError("invalid-config", str(exc))


def _subject_inputs(subject):
    from .masking import load_bank
    from .nifti import load_mask, load_volume

    m = read_manifest(subject)
    need = ("t1_norm", "flair_norm", "filled_t1", "filled_flair", "bank", "brain")
    missing = [r for r in need if r not in m]
    if missing:
        raise CliError("missing-input", f"{subject}: manifest lacks {missing}")
    p = {r: Path(subject) / m[r] for r in need}
    require_existing(*p.values())
    return (load_volume(p["t1_norm"]), load_volume(p["flair_norm"]), load_volume(p["filled_t1"]),
            load_volume(p["filled_flair"]), load_bank(p["bank"]), load_mask(p["brain"]))


def cmd_train(args):
    from .generator import PatchSet, extract_patches, save_model, train

    cfg = load_config(args)
    gcfg = _generator_config(cfg, args)
    subjects = args.subjects
    require_existing(*subjects)
    d = out_dir(args)
    outputs = [d / "generator.npz", d / "history.csv"]
    sets = []
    for i, s in enumerate(subjects):
        t1, fl, ft1, ffl, bank, brain = _subject_inputs(s)
        sets.append(extract_patches(t1, fl, ft1, ffl, bank, brain, gcfg, subject=i))
    model, history = train(PatchSet.concat(sets), gcfg)
    save_model(model, outputs[0])
    history.to_csv(outputs[1])
    write_provenance(d, args, {"generator": asdict(gcfg), "subjects": [str(s) for s in subjects]},
                     seeds=[gcfg.rng_seed], outputs=outputs)
    return outputs


def _norms(args):
    from .volume import NormalizationParams

    path = resolve(args, "norm", required=False)
    if path is None or args.no_denormalize:
        return None
    require_existing(path)
    meta = json.loads(Path(path).read_text())
    return NormalizationParams(**meta["t1"]), NormalizationParams(**meta["flair"])


def _target_inputs(args):
    from .masking import load_bank
    from .nifti import load_mask, load_volume

    ft1_p, ffl_p = resolve(args, "filled_t1"), resolve(args, "filled_flair")
    bank_p, brain_p = resolve(args, "bank"), resolve(args, "brain")
    require_existing(ft1_p, ffl_p, bank_p, brain_p, args.model)
    return ([ft1_p, ffl_p, bank_p, brain_p],
            load_volume(ft1_p), load_volume(ffl_p), load_bank(bank_p), load_mask(brain_p))


def cmd_synthesize(args):
    from .generator import load_model, synthesize
    from .nifti import save_volume

    cfg = load_config(args)
    ins, ft1, ffl, bank, brain = _target_inputs(args)
    norms = _norms(args)
    model = load_model(args.model)
    d = out_dir(args)
    outputs = [d / "syn_t1.nii.gz", d / "syn_flair.nii.gz"]
    check_outputs(ins, outputs)
    s1, s2 = synthesize(model, ft1, ffl, bank, brain, norms)
    save_volume(s1, outputs[0])
    save_volume(s2, outputs[1])
    write_provenance(d, args, {"model": str(args.model), "generator": asdict(model.config), **cfg},
                     outputs=outputs)
    return outputs


def cmd_transplant(args):
    from .generator import load_model
    from .masking import load_bank
    from .nifti import load_mask, load_transform, save_mask, save_volume
    from .transplant import TransplantSpec, transplant

    cfg = load_config(args)
    ins, ft1, ffl, bank, brain = _target_inputs(args)
    require_existing(args.source_lesion, args.source_bank, args.affine, args.displacement)
    norms = _norms(args)
    d = out_dir(args)
    outputs = [d / "syn_t1.nii.gz", d / "syn_flair.nii.gz", d / "lesion.nii.gz"]
    check_outputs(ins + [args.source_lesion], outputs)
    model = load_model(args.model)
    transform = load_transform(args.affine, args.displacement, brain.geometry)
    spec = TransplantSpec(load_mask(args.source_lesion), load_bank(args.source_bank), transform,
                          args.dilation, args.additive)
    s1, s2, lesion = transplant(model, ft1, ffl, bank, spec, brain, norms)
    save_volume(s1, outputs[0])
    save_volume(s2, outputs[1])
    save_mask(lesion, outputs[2])
    write_provenance(d, args, {"model": str(args.model), "dilation": args.dilation,
                               "additive": args.additive, **cfg}, outputs=outputs)
    return outputs


def cmd_evaluate(args):
    from .metrics import (SSIMParams, non_background_region, score_segmentation, segmentation_rows,
                          similarity, similarity_rows, write_metric_csv)
    from .nifti import load_mask, load_volume

    cfg = load_config(args)
    rows = []
    if args.generated or args.real:
        if not (args.generated and args.real):
            raise CliError("missing-input", "--generated and --real must be given together")
        require_existing(args.generated, args.real, args.brain, args.wmh)
        gen, real = load_volume(args.generated), load_volume(args.real)
        region = non_background_region(real, load_mask(args.brain) if args.brain else None)
        params = SSIMParams(**config_section(cfg, "ssim"))
        rows += similarity_rows(args.image_id, args.modality,
                                similarity(gen, real, region, "non-background", params))
        if args.wmh:
            rows += similarity_rows(args.image_id, args.modality,
                                    similarity(gen, real, load_mask(args.wmh), "wmh-g0.5", params))
    if args.seg or args.gt:
        if not (args.seg and args.gt):
            raise CliError("missing-input", "--seg and --gt must be given together")
        require_existing(args.seg, args.gt)
        score = score_segmentation(load_mask(args.seg), load_mask(args.gt), args.connectivity,
                                   args.min_overlap)
        rows += segmentation_rows(args.image_id, score)
    if not rows:
        raise CliError("missing-input", "nothing to evaluate: give --generated/--real and/or --seg/--gt")
    d = out_dir(args)
    out = d / "metrics.csv"
    write_metric_csv(rows, out)
    write_provenance(d, args, cfg, outputs=[out])
    return [out]


def cmd_experiment(args):
    from .experiment import ExperimentConfig, run_one_image_experiment, sweep_training_size
    from .generator import load_model

    cfg = load_config(args)
    ecfg = ExperimentConfig.from_dict(config_section(cfg, "experiment"))
    if args.seeds:
        ecfg = replace(ecfg, seeds=tuple(args.seeds))
    require_existing(args.generator)
    generator = load_model(args.generator, ecfg.generator) if args.generator else None
    d = out_dir(args)
    if args.sizes:
        report = sweep_training_size(ecfg, args.sizes, generator, d)
    else:
        report = run_one_image_experiment(ecfg, generator, d)
    write_provenance(d, args, ecfg.to_dict(), seeds=list(ecfg.seeds),
                     outputs=sorted(p.name for p in d.iterdir()))
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return [d]


def cmd_render(args):
    from .nifti import load_mask, load_volume
    from .render import render_montage

    require_existing(*args.images, args.overlay)
    vols = [load_volume(p) for p in args.images]
    overlay = load_mask(args.overlay) if args.overlay else None
    labels = args.labels or [Path(p).name.split(".")[0] for p in args.images]
    if len(labels) != len(vols):
        raise CliError("usage", "--labels needs one label per --image")
    out = Path(args.out)
    render_montage(vols, out, labels, overlay, args.slices, args.cmap)
    write_provenance(out.parent, args, {"cmap": args.cmap, "slices": args.slices}, outputs=[out])
    return [out]


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionsynth",
        description="Lesion synthesis pipeline: phantom -> make-masks -> fill -> train -> "
                    "synthesize/transplant -> evaluate.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out-dir", help="output directory (default: the subject directory)")
        return p

    def subject(p):
        p.add_argument("--subject", help="subject directory with a manifest.json")
        return p

    p = common(sub.add_parser("phantom", help="write procedural T1/FLAIR phantoms"))
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--healthy", action="store_true", help="no lesions")
    p.set_defaults(func=cmd_phantom)

    p = subject(common(sub.add_parser("make-masks", help="normalise and build the intensity-level bank")))
    for name in ("t1", "flair", "brain", "gm"):
        p.add_argument(f"--{name}", help=f"{name} NIfTI")
    p.add_argument("--gammas", type=parse_gammas, help="comma-separated gamma grid")
    p.set_defaults(func=cmd_make_masks)

    p = subject(common(sub.add_parser("fill", help="in-paint WMH regions of both modalities")))
    p.add_argument("--t1", help="(normalised) T1 NIfTI")
    p.add_argument("--flair", help="(normalised) FLAIR NIfTI")
    p.add_argument("--bank", help="bank directory")
    p.add_argument("--brain")
    p.add_argument("--wm")
    p.add_argument("--use-wm", action="store_true", help="sample only WM voxels of the first ring")
    p.add_argument("--sigma", type=float, help="in-plane smoothing sigma in mm (0 disables)")
    p.set_defaults(func=cmd_fill)

    p = common(sub.add_parser("train", help="train the generator"), seed_default=None)
    p.add_argument("--subjects", nargs="+", required=True, help="prepared subject directories")
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("synthesize", cmd_synthesize, "regenerate a subject from its bank"),
                                 ("transplant", cmd_transplant, "graft source lesions onto a target")):
        p = subject(common(sub.add_parser(name, help=helptext)))
        p.add_argument("--model", required=True)
        for flag in ("filled-t1", "filled-flair", "bank", "brain", "norm"):
            p.add_argument(f"--{flag}")
        p.add_argument("--no-denormalize", action="store_true")
        if name == "transplant":
            p.add_argument("--source-lesion", required=True)
            p.add_argument("--source-bank", required=True)
            p.add_argument("--affine", help="4x4 source->target world matrix (text)")
            p.add_argument("--displacement", help="displacement field NIfTI on the target grid (mm)")
            p.add_argument("--dilation", type=int, default=1)
            p.add_argument("--additive", action="store_true")
        p.set_defaults(func=func)

    p = common(sub.add_parser("evaluate", help="similarity and segmentation metrics to CSV"))
    p.add_argument("--generated")
    p.add_argument("--real")
    p.add_argument("--brain")
    p.add_argument("--wmh", help="WMH mask for the lesion-region similarity row")
    p.add_argument("--modality", default="flair")
    p.add_argument("--seg")
    p.add_argument("--gt")
    p.add_argument("--connectivity", choices=("3d-26", "2d-8"), default="3d-26")
    p.add_argument("--min-overlap", type=int, default=1)
    p.add_argument("--image-id", default="image")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("experiment", help="ORG vs ORG+DA segmentation experiment"))
    p.add_argument("--generator", help="pretrained generator checkpoint")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--sizes", type=int, nargs="+", help="training-set sizes to sweep")
    p.set_defaults(func=cmd_experiment)

    p = common(sub.add_parser("render", help="jet-colormap slice montage PNG"))
    p.add_argument("--image", dest="images", action="append", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--overlay", help="mask drawn as a contour")
    p.add_argument("--slices", type=int, nargs="+")
    p.add_argument("--cmap", default="jet")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def _code_for(exc) -> str:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, FileNotFoundError):
        return "missing-input"
    if isinstance(exc, errors.LesionSynthError):
        return exc.code
    if isinstance(exc, (TypeError, ValueError)):
        return "invalid-config"
    return "error"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args.func(args)
    except Exception as exc:
        code = _code_for(exc)
        exit_code = EXIT_CODES.get(code, 1)
        print(json.dumps({"error": code, "exit_code": exit_code, "message": str(exc)}), file=sys.stderr)
        return exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
