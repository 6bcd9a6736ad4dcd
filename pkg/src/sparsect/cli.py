"""Batch command-line front end.

Stages write their artifacts plus a ``manifest.json`` (hash-chained to the
producing stages) into an output directory; re-running a stage with the same
configuration and seed reproduces every output byte for byte.  Wall-clock
numbers land in ``timing.json``, which is volatile by design.

Stage order: simulate, labels, train-image, train-sino, reconstruct or
evaluate; export-slices renders any saved volume to 8-bit grayscale images.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import presets
from .analytic import right_inverse
from .errors import SparsectError, ConfigError
from .evaluate import compare_methods, format_report_table, render_report_figures, write_report
from .geometry import build_fan_geometry, load_scanner_config, sparse_angles
from .manifest import load_manifest, manifest_hash, write_manifest, write_timing
from .mbir import MbirConfig, mbir_tv
from .neural.io import load_model, save_model
from .phantom import (
    NoiseModel,
    generate_corpus,
    rasterize,
    save_specs,
    simulate_acquisition,
    split_corpus,
)
from .pipeline import (
    PipelineModels,
    apply_image_model,
    infer,
    train_image_denoiser,
    train_sinogram_denoiser,
)
from .tensorio import load_sinogram, load_volume, save_sinogram, save_volume

_STAGES = ("simulate", "labels", "train-image", "train-sino", "reconstruct", "evaluate", "export-slices")
OUT_ROOT_ENV = "SPARSECT_OUT"


class StageError(SparsectError):
    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _default_out(args, stage: str) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / stage
    raise ConfigError(
        f"--out not given and {OUT_ROOT_ENV} is not set; pass --out DIR"
    )


def _require_file(path, flag: str):
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{flag}: no such file or directory: {p}")
    return p


def _sim_config(sim_dir: Path) -> dict:
    return load_manifest(sim_dir)["config"]


def _geometry_from_sim(cfg: dict):
    return build_fan_geometry(cfg["geometry"])


def _case_names(sim_dir: Path, split: str) -> list:
    with open(sim_dir / "split.json", "r", encoding="utf-8") as fh:
        groups = json.load(fh)
    if split == "all":
        return groups["train"] + groups["val"] + groups["test"]
    if split not in groups:
        raise ConfigError(f"--split must be train, val, test or all, got {split!r}")
    return groups[split]


def _load_measured(sim_dir: Path, names):
    return [load_sinogram(sim_dir / "cases" / f"{n}.meas.ct") for n in names]


# -- stages ---------------------------------------------------------------------


def _cmd_simulate(args) -> int:
    preset = presets.get_preset(args.preset, seed=args.seed)
    geometry = preset.geometry
    if args.geometry is not None:
        cfg_file = load_scanner_config(_require_file(args.geometry, "--geometry"))
        geometry = build_fan_geometry(cfg_file)
    n_simple = args.n_simple if args.n_simple is not None else preset.corpus_simple
    n_bags = args.n_bags if args.n_bags is not None else preset.corpus_bags
    n_slices = args.slices if args.slices is not None else preset.n_slices
    noise_count = None if args.no_noise else (
        args.noise_count if args.noise_count is not None else preset.noise_incident_count
    )
    outdir = _default_out(args, "simulate")
    (outdir / "cases").mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    specs = generate_corpus(n_simple, n_bags, args.seed)
    split = split_corpus(specs, preset.train_counts, preset.val_counts)
    angles = sparse_angles(geometry, preset.n_sparse_views)
    save_specs(outdir / "corpus.json", specs)
    with open(outdir / "split.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "train": [s.name for s in split.train],
                "val": [s.name for s in split.val],
                "test": [s.name for s in split.test],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    outputs = {"corpus": "corpus.json", "split": "split.json"}
    for idx, spec in enumerate(specs):
        truth = rasterize(spec, geometry, n_slices)
        noise = None
        if noise_count is not None:
            noise = NoiseModel(noise_count, seed=args.seed * 1000003 + idx)
        meas = simulate_acquisition(truth, geometry, angles, noise, workers=args.workers)
        meta = {"case": spec.name, "seed": args.seed}
        save_volume(outdir / "cases" / f"{spec.name}.truth.ct", truth, meta)
        save_sinogram(outdir / "cases" / f"{spec.name}.meas.ct", meas, meta)
        outputs[f"{spec.name}.truth"] = f"cases/{spec.name}.truth.ct"
        outputs[f"{spec.name}.meas"] = f"cases/{spec.name}.meas.ct"
    elapsed = time.perf_counter() - t0

    config = {
        "preset": preset.name,
        "seed": args.seed,
        "geometry": geometry.to_dict(),
        "n_sparse_views": preset.n_sparse_views,
        "n_slices": n_slices,
        "n_simple": n_simple,
        "n_bags": n_bags,
        "train_counts": list(preset.train_counts),
        "val_counts": list(preset.val_counts),
        "noise_incident_count": noise_count,
    }
    write_manifest(outdir, "simulate", seed=args.seed, config=config, outputs=outputs)
    write_timing(outdir, {"total_s": elapsed})
    print(f"simulate: {len(specs)} cases ({n_slices} slices each) -> {outdir}")
    return 0


def _mbir_config_from(cfg: dict, args) -> MbirConfig:
    preset = presets.get_preset(cfg["preset"], seed=cfg["seed"])
    base = preset.mbir
    return MbirConfig(
        mu_fid=args.mu_fid if getattr(args, "mu_fid", None) is not None else base.mu_fid,
        max_iters=args.max_iters if getattr(args, "max_iters", None) is not None else base.max_iters,
        inner_iters=base.inner_iters,
        primal_step=base.primal_step,
        dual_step=base.dual_step,
        tol=base.tol,
        nonneg=base.nonneg,
    )


def _cmd_labels(args) -> int:
    sim_dir = _require_file(args.sim, "--sim")
    cfg = _sim_config(sim_dir)
    geometry = _geometry_from_sim(cfg)
    mbir_cfg = _mbir_config_from(cfg, args)
    names = _case_names(sim_dir, "all")
    outdir = _default_out(args, "labels")
    (outdir / "cases").mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    outputs = {}
    for name in names:
        try:
            meas = load_sinogram(sim_dir / "cases" / f"{name}.meas.ct")
            result = mbir_tv(meas, geometry, mbir_cfg, workers=args.workers)
        except SparsectError as exc:
            raise StageError("labels", f"case {name}: {exc}") from exc
        save_volume(
            outdir / "cases" / f"{name}.label.ct",
            result.volume,
            {"case": name, "final_objectives": [
                [float(h[-1]) for h in result.objectives[e]] for e in range(2)
            ]},
        )
        outputs[f"{name}.label"] = f"cases/{name}.label.ct"
    elapsed = time.perf_counter() - t0

    config = {
        "preset": cfg["preset"],
        "mu_fid": mbir_cfg.mu_fid,
        "max_iters": mbir_cfg.max_iters,
        "inner_iters": mbir_cfg.inner_iters,
        "nonneg": mbir_cfg.nonneg,
    }
    write_manifest(
        outdir,
        "labels",
        seed=cfg["seed"],
        config=config,
        inputs={"simulate": manifest_hash(sim_dir)},
        outputs=outputs,
    )
    write_timing(outdir, {"total_s": elapsed})
    print(f"labels: {len(names)} cases reconstructed -> {outdir}")
    return 0


def _cmd_train_image(args) -> int:
    sim_dir = _require_file(args.sim, "--sim")
    labels_dir = _require_file(args.labels, "--labels")
    cfg = _sim_config(sim_dir)
    geometry = _geometry_from_sim(cfg)
    preset = presets.get_preset(cfg["preset"], seed=cfg["seed"])
    train_cfg = preset.train_image.with_seed(args.seed if args.seed is not None else cfg["seed"])
    if args.epochs is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, epochs=args.epochs)
    names = _case_names(sim_dir, "train")
    measured = _load_measured(sim_dir, names)
    labels = [load_volume(labels_dir / "cases" / f"{n}.label.ct") for n in names]
    outdir = _default_out(args, "train-image")
    outdir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    model, history = train_image_denoiser(
        measured, labels, geometry, train_cfg, preset.fbp, workers=args.workers
    )
    elapsed = time.perf_counter() - t0
    save_model(outdir / "qimage.model", model)
    with open(outdir / "history.json", "w", encoding="utf-8") as fh:
        json.dump({"loss": history}, fh, indent=2)
        fh.write("\n")
    write_manifest(
        outdir,
        "train-image",
        seed=train_cfg.seed,
        config={"preset": cfg["preset"], "epochs": train_cfg.epochs,
                "batch_size": train_cfg.batch_size, "base_channels": train_cfg.base_channels,
                "depth": train_cfg.depth, "patch": [train_cfg.patch_h, train_cfg.patch_w],
                "weight_decay": train_cfg.weight_decay,
                "lr": [train_cfg.lr_initial, train_cfg.lr_final]},
        inputs={"simulate": manifest_hash(sim_dir), "labels": manifest_hash(labels_dir)},
        outputs={"model": "qimage.model", "history": "history.json"},
        metrics={"final_loss": history[-1]},
    )
    write_timing(outdir, {"total_s": elapsed})
    print(f"train-image: {train_cfg.epochs} epochs, final loss {history[-1]:.3e} -> {outdir}")
    return 0


def _cmd_train_sino(args) -> int:
    sim_dir = _require_file(args.sim, "--sim")
    image_path = _require_file(args.image_model, "--image-model")
    cfg = _sim_config(sim_dir)
    geometry = _geometry_from_sim(cfg)
    preset = presets.get_preset(cfg["preset"], seed=cfg["seed"])
    train_cfg = preset.train_sino.with_seed(args.seed if args.seed is not None else cfg["seed"])
    if args.epochs is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, epochs=args.epochs)
    names = _case_names(sim_dir, "train")
    measured = _load_measured(sim_dir, names)
    image_model = load_model(image_path)
    outdir = _default_out(args, "train-sino")
    outdir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    model, history = train_sinogram_denoiser(
        measured, image_model, geometry, train_cfg, preset.fbp, workers=args.workers
    )
    elapsed = time.perf_counter() - t0
    save_model(outdir / "qsino.model", model)
    with open(outdir / "history.json", "w", encoding="utf-8") as fh:
        json.dump({"loss": history}, fh, indent=2)
        fh.write("\n")
    write_manifest(
        outdir,
        "train-sino",
        seed=train_cfg.seed,
        config={"preset": cfg["preset"], "epochs": train_cfg.epochs,
                "batch_size": train_cfg.batch_size, "base_channels": train_cfg.base_channels,
                "depth": train_cfg.depth, "patch": [train_cfg.patch_h, train_cfg.patch_w],
                "weight_decay": train_cfg.weight_decay,
                "lr": [train_cfg.lr_initial, train_cfg.lr_final]},
        inputs={
            "simulate": manifest_hash(sim_dir),
            "train-image": manifest_hash(image_path.parent),
        },
        outputs={"model": "qsino.model", "history": "history.json"},
        metrics={"final_loss": history[-1]},
    )
    write_timing(outdir, {"total_s": elapsed})
    print(f"train-sino: {train_cfg.epochs} epochs, final loss {history[-1]:.3e} -> {outdir}")
    return 0


def _pipeline_models(geometry, preset, args) -> PipelineModels:
    image_path = _require_file(args.image_model, "--image-model")
    sino_path = _require_file(args.sino_model, "--sino-model")
    tv_weight = args.tv_weight if args.tv_weight is not None else preset.tv_weight
    return PipelineModels(
        image_model=load_model(image_path),
        sino_model=load_model(sino_path),
        geometry=geometry,
        fbp_config=preset.fbp,
        dense_views=preset.dense_views,
        tv_weight=tv_weight,
    )


def _cmd_reconstruct(args) -> int:
    sim_dir = _require_file(args.sim, "--sim")
    cfg = _sim_config(sim_dir)
    geometry = _geometry_from_sim(cfg)
    preset = presets.get_preset(cfg["preset"], seed=cfg["seed"])
    models = _pipeline_models(geometry, preset, args)
    names = args.cases.split(",") if args.cases else _case_names(sim_dir, args.split)
    outdir = _default_out(args, "reconstruct")
    (outdir / "cases").mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    outputs = {}
    for name in names:
        try:
            meas = load_sinogram(sim_dir / "cases" / f"{name}.meas.ct")
            result = infer(meas, models, workers=args.workers)
        except SparsectError as exc:
            raise StageError("reconstruct", f"case {name}: {exc}") from exc
        save_volume(outdir / "cases" / f"{name}.recon.ct", result.volume, {"case": name})
        outputs[f"{name}.recon"] = f"cases/{name}.recon.ct"
    elapsed = time.perf_counter() - t0
    write_manifest(
        outdir,
        "reconstruct",
        seed=cfg["seed"],
        config={"preset": cfg["preset"], "tv_weight": models.tv_weight,
                "dense_views": models.dense_views, "cases": list(names)},
        inputs={
            "simulate": manifest_hash(sim_dir),
            "train-image": manifest_hash(Path(args.image_model).parent),
            "train-sino": manifest_hash(Path(args.sino_model).parent),
        },
        outputs=outputs,
    )
    write_timing(outdir, {"total_s": elapsed})
    print(f"reconstruct: {len(names)} cases -> {outdir}")
    return 0


def _cmd_evaluate(args) -> int:
    sim_dir = _require_file(args.sim, "--sim")
    labels_dir = _require_file(args.labels, "--labels")
    cfg = _sim_config(sim_dir)
    geometry = _geometry_from_sim(cfg)
    preset = presets.get_preset(cfg["preset"], seed=cfg["seed"])
    models = _pipeline_models(geometry, preset, args)
    names = _case_names(sim_dir, args.split)
    outdir = _default_out(args, "evaluate")
    (outdir / "cases").mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    outputs = {}
    # Materialize every method volume as float32 artifacts, then score the
    # loaded files, so a report regenerated from disk is exactly the live one.
    for name in names:
        try:
            meas = load_sinogram(sim_dir / "cases" / f"{name}.meas.ct")
            vol_fbp = right_inverse(meas, geometry, preset.fbp, workers=args.workers)
            vol_icnn = apply_image_model(models.image_model, vol_fbp)
            vol_ours = infer(meas, models, workers=args.workers).volume
        except SparsectError as exc:
            raise StageError("evaluate", f"case {name}: {exc}") from exc
        label_path = labels_dir / "cases" / f"{name}.label.ct"
        vol_mbir = load_volume(label_path)  # labels stage ran the same solver config
        for method, vol in (
            ("fbp", vol_fbp),
            ("mbir", vol_mbir),
            ("image_cnn", vol_icnn),
            ("dual_domain", vol_ours),
        ):
            path = outdir / "cases" / f"{name}.{method}.ct"
            save_volume(path, vol, {"case": name, "method": method})
            outputs[f"{name}.{method}"] = f"cases/{name}.{method}.ct"
    measured = _load_measured(sim_dir, names)
    recons = {
        m: [load_volume(outdir / "cases" / f"{n}.{m}.ct") for n in names]
        for m in ("fbp", "mbir", "image_cnn", "dual_domain")
    }
    report = compare_methods(
        names,
        measured,
        recons,
        workers=args.workers,
        provenance={"geometry_digest": geometry.digest(), "seed": cfg["seed"],
                    "preset": cfg["preset"], "split": args.split,
                    "mbir_source": "labels stage artifacts"},
    )
    paths = write_report(report, outdir)
    figures = render_report_figures(report, outdir / "figures")
    elapsed = time.perf_counter() - t0
    outputs["report.csv"] = "report.csv"
    outputs["report.json"] = "report.json"
    for p in figures:
        outputs[p.name] = f"figures/{p.name}"
    write_manifest(
        outdir,
        "evaluate",
        seed=cfg["seed"],
        config={"preset": cfg["preset"], "split": args.split, "tv_weight": models.tv_weight},
        inputs={
            "simulate": manifest_hash(sim_dir),
            "labels": manifest_hash(labels_dir),
            "train-image": manifest_hash(Path(args.image_model).parent),
            "train-sino": manifest_hash(Path(args.sino_model).parent),
        },
        outputs=outputs,
        metrics={m: [float(v) for v in report.mean(m)] for m in report.methods},
    )
    write_timing(outdir, {"total_s": elapsed})
    print(format_report_table(report))
    print(f"evaluate: report + figures -> {outdir}")
    return 0


def _cmd_export_slices(args) -> int:
    vol_path = _require_file(args.volume, "--volume")
    volume = load_volume(vol_path)
    outdir = _default_out(args, "export-slices")
    outdir.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    data = np.asarray(volume.data, dtype=np.float64)
    wmin = args.wmin if args.wmin is not None else 0.0
    wmax = args.wmax if args.wmax is not None else float(data.max())
    if not wmax > wmin:
        raise ConfigError(f"window [{wmin}, {wmax}] is empty")
    energies = (0, 1) if args.energy == "both" else (int(args.energy),)
    stem = Path(vol_path).name.split(".")[0]
    count = 0
    for e in energies:
        for z in range(volume.n_z):
            img = (data[e, z] - wmin) / (wmax - wmin)
            img = np.clip(img, 0.0, 1.0)
            # row 0 is the smallest y; flip so +y points up in the image
            arr8 = (img[::-1] * 255.0 + 0.5).astype(np.uint8)
            name = f"{stem}_e{e}_z{z:03d}.{args.format}"
            Image.fromarray(arr8, mode="L").save(outdir / name)
            count += 1
    print(f"export-slices: {count} images ({args.format}, window [{wmin:g}, {wmax:g}]) -> {outdir}")
    return 0


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsect",
        description="Sparse-view dual-energy CT reconstruction pipeline",
        epilog=f"Default output root comes from ${OUT_ROOT_ENV} when --out is omitted.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory (default $%s/<stage>)" % OUT_ROOT_ENV)
        p.add_argument("--workers", type=int, default=None,
                       help="worker threads (default: available cores)")

    p = sub.add_parser("simulate", help="generate a phantom corpus and measured sinograms")
    common(p)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--geometry", help="scanner key=value config overriding the preset geometry")
    p.add_argument("--n-simple", type=int, default=None)
    p.add_argument("--n-bags", type=int, default=None)
    p.add_argument("--slices", type=int, default=None)
    p.add_argument("--noise-count", type=float, default=None,
                   help="incident photon count for the noise model")
    p.add_argument("--no-noise", action="store_true")

    p = sub.add_parser("labels", help="iterative reconstructions used as training labels")
    common(p)
    p.add_argument("--sim", required=True, help="simulate stage directory")
    p.add_argument("--mu-fid", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)

    p = sub.add_parser("train-image", help="train the image-domain denoiser")
    common(p)
    p.add_argument("--sim", required=True)
    p.add_argument("--labels", required=True, help="labels stage directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("train-sino", help="train the sinogram-domain denoiser")
    common(p)
    p.add_argument("--sim", required=True)
    p.add_argument("--image-model", required=True, help="path to qimage.model")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("reconstruct", help="dual-domain reconstruction of selected cases")
    common(p)
    p.add_argument("--sim", required=True)
    p.add_argument("--image-model", required=True)
    p.add_argument("--sino-model", required=True)
    p.add_argument("--cases", help="comma-separated case names (default: --split)")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--tv-weight", type=float, default=None)

    p = sub.add_parser("evaluate", help="score fbp/mbir/image_cnn/dual_domain on a split")
    common(p)
    p.add_argument("--sim", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--image-model", required=True)
    p.add_argument("--sino-model", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--tv-weight", type=float, default=None)

    p = sub.add_parser("export-slices", help="render a saved volume to 8-bit images")
    common(p)
    p.add_argument("--volume", required=True, help="path to a volume tensor file")
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.add_argument("--wmin", type=float, default=None, help="window lower bound (default 0)")
    p.add_argument("--wmax", type=float, default=None, help="window upper bound (default max)")
    p.add_argument("--energy", choices=("0", "1", "both"), default="both")

    return parser


_HANDLERS = {
    "simulate": _cmd_simulate,
    "labels": _cmd_labels,
    "train-image": _cmd_train_image,
    "train-sino": _cmd_train_sino,
    "reconstruct": _cmd_reconstruct,
    "evaluate": _cmd_evaluate,
    "export-slices": _cmd_export_slices,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except SparsectError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI contract: never a bare crash
        print(f"error: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
