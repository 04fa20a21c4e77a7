"""Command-line frontend: simulate, fit, evaluate, render.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure epidemic (more than 10% of foreground pixels stalled).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataio
from .config import ConfigError, ExperimentConfig
from .imaging import STOP_CODES, ParametricMaps, deblur_gaussian, fit_image, region_stats, write_stats_csv
from .kinetics import TimeGrid
from .phantom import (GroundTruth, IfShape, REGION_PARAMS, default_angles, input_function,
                      load_label_image, make_phantom, perturb_if, project_noise_reconstruct,
                      radon, simulate_dynamic)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

STALL_EPIDEMIC_FRACTION = 0.10


def _if_from_config(cfg: ExperimentConfig):
    shape = IfShape(cfg.if_t_peak_min, tuple(cfg.if_fractions), tuple(cfg.if_decay_rates))
    return input_function(cfg.if_aa_mbq, cfg.if_vd_liters, shape)


def _sub_seed(master: int, tag: str, index: int) -> int:
    tag_int = int.from_bytes(tag.encode(), "big") % (2 ** 32)
    ss = np.random.SeedSequence((master, tag_int, index))
    return int(ss.generate_state(1)[0])


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path) -> int:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out_dir}: {exc}", file=sys.stderr)
        return EXIT_IO
    cfgmod.save(out_dir / "config.cfg", cfg)

    labels = (load_label_image(cfg.phantom_label_path) if cfg.phantom_label_path
              else make_phantom(cfg.phantom_side))
    gt = GroundTruth(labels)
    grid = TimeGrid.default()
    true_if = _if_from_config(cfg)
    dyn = simulate_dynamic(gt, true_if, grid, meta={"master_seed": cfg.master_seed})

    angles = default_angles(cfg.n_angles)
    sinos = np.stack([radon(dyn.data[:, :, j], angles).data for j in range(dyn.n_frames)])
    dataio.save_dataset(out_dir / "reference", dyn, true_if, sinograms=sinos,
                        sino_angles=angles)

    for r in range(cfg.replicates):
        noisy = project_noise_reconstruct(dyn, cfg.count_scale,
                                          _sub_seed(cfg.master_seed, "poisson", r),
                                          angles)
        rep_if = perturb_if(true_if, cfg.if_noise, _sub_seed(cfg.master_seed, "if", r))
        noisy.meta.update({"replicate": r, "if_noise": cfg.if_noise})
        dataio.save_dataset(out_dir / f"replicate_{r:03d}", noisy, rep_if)
    print(f"wrote reference + {cfg.replicates} replicate(s) to {out_dir}")
    return EXIT_OK


def fit_one_dataset(dataset_dir: Path, cfg: ExperimentConfig, out_dir: Path) -> dict:
    dyn, input_fn = dataio.load_dataset(dataset_dir)
    if cfg.deblur and dyn.meta.get("count_scale") is not None:
        dyn = deblur_gaussian(dyn, cfg.deblur_sigma, cfg.deblur_window)
    t0 = time.perf_counter()
    maps = fit_image(dyn, input_fn, dyn.v_map, cfg.policy(), cfg.tr,
                     solver=cfg.solver, seed=cfg.master_seed, lm_cfg=cfg.lm)
    elapsed = time.perf_counter() - t0
    n_fg = int(dyn.labels.foreground.sum())
    n_stalled = int((maps.stop_reason == STOP_CODES["stalled"]).sum())
    meta = {
        "dataset": dataset_dir.name,
        "solver": cfg.solver,
        "foreground_pixels": n_fg,
        "stalled_pixels": n_stalled,
        "stop_reason_counts": {name: int((maps.stop_reason == code).sum())
                               for name, code in STOP_CODES.items()},
    }
    dataio.save_maps(out_dir, maps, meta=meta)
    # timing lives only in the summary so the maps themselves stay
    # byte-reproducible run to run
    summary = dict(meta, wall_time_s=round(elapsed, 3),
                   mean_time_per_pixel_ms=round(1e3 * elapsed / max(n_fg, 1), 3))
    with open(out_dir / "fit_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


def _dataset_dirs(path: Path) -> list[Path]:
    if (path / dataio.HEADER_NAME).exists():
        return [path]
    reps = sorted(p for p in path.glob("replicate_*") if p.is_dir())
    if not reps:
        raise FileNotFoundError(f"no datasets under {path}")
    return reps


def cmd_fit(dataset_path: Path, cfg: ExperimentConfig, out_dir: Path,
            threads: int | None = None) -> int:
    # thread count is an execution detail, like wall time: it is never
    # persisted and must not influence any output byte
    threads = cfg.threads if threads is None else threads
    try:
        dirs = _dataset_dirs(dataset_path)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(d, cfg, out_dir / f"maps_{d.name}") for d in dirs]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            summaries = list(ex.map(_fit_job, jobs))
    else:
        summaries = [_fit_job(j) for j in jobs]
    total_fg = sum(s["foreground_pixels"] for s in summaries)
    total_stalled = sum(s["stalled_pixels"] for s in summaries)
    for s in summaries:
        print(f"{s['dataset']}: {s['foreground_pixels']} px, "
              f"{s['mean_time_per_pixel_ms']} ms/px, {s['stalled_pixels']} stalled")
    if total_fg and total_stalled / total_fg > STALL_EPIDEMIC_FRACTION:
        print(f"error: {total_stalled}/{total_fg} pixels stalled", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _fit_job(job):
    dataset_dir, cfg, out = job
    return fit_one_dataset(dataset_dir, cfg, out)


def cmd_evaluate(maps_path: Path, dataset_path: Path, out_dir: Path) -> int:
    try:
        dyn, _ = dataio.load_dataset(_dataset_dirs(dataset_path)[0])
        map_dirs = sorted(p for p in maps_path.glob("maps_*") if p.is_dir())
        if not map_dirs:
            map_dirs = [maps_path]
        maps = [dataio.load_maps(d) for d in map_dirs]
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if maps[0].k_maps.shape[1:] != dyn.labels.labels.shape:
        print("error: map and label shapes disagree", file=sys.stderr)
        return EXIT_IO
    out_dir.mkdir(parents=True, exist_ok=True)
    records = region_stats(maps, dyn.labels)
    for rec in records:
        region = rec["region"]
        pidx = int(rec["parameter"][1]) - 1
        truth = REGION_PARAMS[region].k[pidx]
        rec["truth"] = float(truth)
        rec["rel_error"] = abs(rec["mean"] - truth) / truth
    write_stats_csv(out_dir / "region_stats.csv", records)
    lines = [f"pooled over {len(maps)} map(s)"]
    for rec in records:
        lines.append(f"region {rec['region']} {rec['parameter']}: "
                     f"mean={rec['mean']:.5f} std={rec['std']:.5f} "
                     f"truth={rec['truth']:.5f} rel_err={rec['rel_error']:.3%} n={rec['n']}")
    report = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


def _to_png(path: Path, img: np.ndarray, vmin: float, vmax: float) -> None:
    from PIL import Image

    span = vmax - vmin if vmax > vmin else 1.0
    arr = np.clip((img - vmin) / span, 0.0, 1.0)
    Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(path)


def cmd_render(maps_path: Path, out_dir: Path, last_frame_of: Path | None = None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar = {}
    try:
        if last_frame_of is not None:
            dyn, _ = dataio.load_dataset(last_frame_of)
            frame = dyn.data[:, :, -1]
            vmin, vmax = float(frame.min()), float(frame.max())
            _to_png(out_dir / "last_frame.png", frame, vmin, vmax)
            sidecar["last_frame"] = {"min": vmin, "max": vmax}
        else:
            maps = dataio.load_maps(maps_path)
            for p in range(4):
                img = maps.k_maps[p]
                vmin, vmax = 0.0, float(img.max()) if img.max() > 0 else 1.0
                _to_png(out_dir / f"k{p + 1}.png", img, vmin, vmax)
                sidecar[f"k{p + 1}"] = {"min": vmin, "max": vmax}
    except (FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    with open(out_dir / "render_scales.json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    return EXIT_OK


def _build_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    if getattr(args, "solver", None):
        cfg.solver = args.solver
    if getattr(args, "side", None) is not None:
        cfg.phantom_side = args.side
    if getattr(args, "if_noise", None) is not None:
        cfg.if_noise = args.if_noise
    if getattr(args, "replicates", None) is not None:
        cfg.replicates = args.replicates
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="petkin",
                                     description="Parametric PET phantom experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_sim_flags=False):
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        if with_sim_flags:
            p.add_argument("--side", type=int, default=None)
            p.add_argument("--if-noise", dest="if_noise", type=float, default=None)
            p.add_argument("--replicates", type=int, default=None)

    p_sim = sub.add_parser("simulate", help="generate phantom datasets")
    common(p_sim, with_sim_flags=True)

    p_fit = sub.add_parser("fit", help="fit parametric maps")
    common(p_fit)
    p_fit.add_argument("--dataset", type=Path, required=True)
    p_fit.add_argument("--solver", choices=["reg-as-tr", "projected-lm"], default=None)

    p_eval = sub.add_parser("evaluate", help="region statistics vs ground truth")
    p_eval.add_argument("--maps", type=Path, required=True)
    p_eval.add_argument("--dataset", type=Path, required=True)
    p_eval.add_argument("--out", type=Path, required=True)

    p_rend = sub.add_parser("render", help="render maps or a last frame to PNG")
    p_rend.add_argument("--maps", type=Path, default=None)
    p_rend.add_argument("--dataset", type=Path, default=None)
    p_rend.add_argument("--out", type=Path, required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(_build_config(args), args.out)
        if args.command == "fit":
            return cmd_fit(args.dataset, _build_config(args), args.out,
                           threads=args.threads)
        if args.command == "evaluate":
            return cmd_evaluate(args.maps, args.dataset, args.out)
        if args.command == "render":
            if args.maps is None and args.dataset is None:
                print("error: render needs --maps or --dataset", file=sys.stderr)
                return EXIT_CONFIG
            return cmd_render(args.maps or Path("."), args.out, last_frame_of=args.dataset)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
