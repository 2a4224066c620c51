"""Command-line entry point: ``fmcrecon simulate | reconstruct | evaluate | compare | scenarios``.

Exit codes: 0 success, 1 numerical failure (solver instability), 2 usage or input error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .acquisition import FmcDataset
from .fwi import MisfitRecord
from .metrics import ExclusionRegion, comparison_table, evaluate, load_metrics, thresholded, write_comparison
from .model import ScenarioError, ScenarioSpec, builtin_scenarios, load_scenario, rasterize_ground_truth, \
    save_scenario, scenario_to_dict
from .tfm import ImageGrid, TfmConfig, tfm_image
from .wavesim import SolverInstability

log = logging.getLogger("fmcrecon")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class InputError(Exception):
    """Bad paths, arguments or files; maps to exit code 2."""


# ---------------------------------------------------------------------------
# helpers

def resolve_scenario(arg: str) -> ScenarioSpec:
    """A scenario file path, or the name of a built-in scenario."""
    path = Path(arg)
    if path.exists():
        return load_scenario(path)
    lib = builtin_scenarios()
    if arg in lib:
        return lib[arg]
    raise InputError(f"scenario file not found: {arg}")


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file not found: {path}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be a mapping")
    return data


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(out: Path, *, command: str, scenario: ScenarioSpec, method: str, config: dict,
                   inputs: list, outputs: list, elapsed: float) -> Path:
    """``<out>.manifest.json``; the hash covers scenario, method and config only."""
    payload = {"command": command, "scenario": scenario_to_dict(scenario), "method": method, "config": config}
    manifest = {
        "scenario": scenario.name,
        "method": method,
        "config_hash": config_hash(payload),
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "elapsed_seconds": round(elapsed, 3),
        "version": __version__,
    }
    path = Path(str(out) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def _mm(v):
    return None if v is None else float(v) * 1e-3


def simulation_config(spec: ScenarioSpec, section: dict):
    from .pipeline import SimulationConfig
    section = dict(section or {})
    for key in ("t_end_us", "dt_ns"):
        if key in section:
            section[key.rsplit("_", 1)[0]] = float(section.pop(key)) * (1e-6 if key == "t_end_us" else 1e-9)
    if "sponge_width_mm" in section:
        section["sponge_width"] = _mm(section.pop("sponge_width_mm"))
    known = {f.name for f in fields(SimulationConfig)}
    unknown = set(section) - known
    if unknown:
        raise InputError(f"unknown simulation settings: {', '.join(sorted(unknown))}")
    return SimulationConfig.from_scenario(spec, **section)


def image_grid(spec: ScenarioSpec, spacing_mm: float):
    if not spacing_mm > 0:
        raise InputError("pixel spacing must be positive")
    return spec.roi_grid(spacing_mm * 1e-3)


def save_image(image: ImageGrid, out: Path, png: bool) -> list[Path]:
    image.save(out)
    written = [out]
    if png:
        p = out.with_suffix(".png")
        image.save_png(p)
        written.append(p)
    return written


def write_history(records: list[MisfitRecord], path: Path) -> None:
    with path.open("w") as fh:
        fh.write("stage,iteration,chi,grad_norm,step,accepted\n")
        for r in records:
            fh.write(f"{r.stage},{r.iteration},{r.chi!r},{r.grad_norm!r},{r.step!r},{int(r.accepted)}\n")


# ---------------------------------------------------------------------------
# commands

def cmd_scenarios(args) -> int:
    lib = builtin_scenarios()
    if args.export:
        out = Path(args.export)
        out.mkdir(parents=True, exist_ok=True)
        for name, spec in lib.items():
            save_scenario(spec, out / f"{name}.yaml")
    for name, spec in lib.items():
        flag = " (approximate geometry)" if spec.approximate else ""
        print(f"{name}: {spec.domain_width * 1e3:g} x {spec.domain_height * 1e3:g} mm, "
              f"{spec.array.n_elements} elements, {len(spec.defects)} defect(s){flag}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .pipeline import inversion_setup, synthesize
    t0 = time.perf_counter()
    spec = resolve_scenario(args.scenario)
    cfg_all = read_config(args.config)
    sim_cfg = simulation_config(spec, cfg_all.get("simulation", {}))
    out = Path(args.out)
    fmc = synthesize(spec, sim_cfg, reference=args.reference_resolution, workers=args.threads,
                     defect_density_factor=args.defect_density_factor)
    fmc.save(out)
    setup = inversion_setup(spec, sim_cfg)
    config = {"simulation": asdict(sim_cfg), "reference_resolution": args.reference_resolution,
              "defect_density_factor": args.defect_density_factor}
    write_manifest(out, command="simulate", scenario=spec, method="sem", config=config,
                   inputs=[args.scenario], outputs=[out, Path(str(out) + ".json")],
                   elapsed=time.perf_counter() - t0)
    print(f"wrote {out}: {fmc.n}x{fmc.n} traces, {fmc.n_t} samples at dt={fmc.dt:.4e} s "
          f"(mesh {setup.mesh.nex}x{setup.mesh.ney}, p={setup.mesh.p})")
    return EXIT_OK


def _load_fmc(path: str) -> FmcDataset:
    if not Path(path).exists():
        raise InputError(f"FMC file not found: {path}")
    return FmcDataset.load(path)


def cmd_reconstruct(args) -> int:
    from . import pipeline as P
    t0 = time.perf_counter()
    spec = resolve_scenario(args.scenario)
    fmc = _load_fmc(args.fmc)
    try:
        P.check_geometry(spec, fmc)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    cfg_all = read_config(args.config)
    method_cfg = dict(cfg_all.get(args.method, {}) or {})
    spacing_mm = float(method_cfg.pop("pixel_spacing_mm", args.pixel_spacing))
    grid = image_grid(spec, spacing_mm)
    out = Path(args.out)
    outputs: list[Path] = []
    config: dict = {"pixel_spacing_mm": spacing_mm}

    if args.method == "tfm":
        c = float(method_cfg.pop("c", args.velocity or spec.background.vp))
        interp = method_cfg.pop("interpolation", "linear")
        offset_us = method_cfg.pop("time_offset_us", None)
        if offset_us is None:
            offset = P.excitation_delay(spec, simulation_config(spec, cfg_all.get("simulation", {})))
        else:
            offset = float(offset_us) * 1e-6
        config.update(c=c, interpolation=interp, time_offset=offset)
        image = tfm_image(fmc, TfmConfig(grid, c, interp, offset))
        outputs += save_image(image, out, args.png)

    elif args.method == "rtm":
        setup = P.setup_for_data(spec, fmc, simulation_config(spec, cfg_all.get("simulation", {})))
        kernel = method_cfg.pop("kernel", "density")
        sigma = float(method_cfg.pop("sigma", 3.0))
        dec = method_cfg.pop("decimation", None)
        config.update(kernel=kernel, sigma=sigma, decimation=dec)
        run = P.run_rtm(setup, fmc, grid, kernel, sigma, None if dec is None else int(dec))
        run.image.save(out)
        outputs += [out, Path(str(out) + ".meta.json")]
        if args.png:
            run.image.image.save_png(out.with_suffix(".png"))
        if args.dump_kernel:
            np.save(Path(str(out) + ".kernel.npy"), run.nodal)
            outputs.append(Path(str(out) + ".kernel.npy"))

    else:  # fwi
        setup = P.setup_for_data(spec, fmc, simulation_config(spec, cfg_all.get("simulation", {})))
        fcfg = fwi_config(method_cfg, args.threads)
        fcfg.grid_spacing = fcfg.spacing(setup)  # record the resolved value in the manifest
        config.update(fwi=fcfg.to_dict())
        problem = P.fwi_problem(setup, fmc, fcfg)
        if args.dump_kernel:
            # iteration-0 gradient kernel with one supershot per transmitter and full signals
            from .fwi import stack_sources
            _, _, kernel = problem.gradient(problem.param.background(), stack_sources(problem.fmc, 1))
            np.save(Path(str(out) + ".kernel.npy"), kernel)
            outputs.append(Path(str(out) + ".kernel.npy"))
        from .fwi import two_stage_inversion
        s1, s2 = fcfg.stages(setup)
        result = two_stage_inversion(problem, s1, s2, grid)
        outputs += save_image(result.image, out, args.png)
        hist = Path(str(out) + ".history.csv")
        write_history(result.history, hist)
        outputs.append(hist)

    if method_cfg:
        raise InputError(f"unknown {args.method} settings: {', '.join(sorted(method_cfg))}")
    write_manifest(out, command="reconstruct", scenario=spec, method=args.method, config=config,
                   inputs=[args.fmc, args.scenario], outputs=outputs, elapsed=time.perf_counter() - t0)
    print(f"wrote {out} ({args.method}, {grid.nx}x{grid.ny} pixels)")
    return EXIT_OK


def fwi_config(section: dict, threads: int):
    from .pipeline import FwiConfig
    # keys are popped so that leftovers can be reported as unknown
    cfg = FwiConfig(workers=threads)
    if "grid_spacing_mm" in section:
        cfg.grid_spacing = float(section.pop("grid_spacing_mm")) * 1e-3
    if "bounds" in section:
        lo, hi = section.pop("bounds")
        cfg.bounds = (float(lo), float(hi))
    for key in ("stage1_iters", "stage1_group", "stage2_iters", "stage2_group"):
        if key in section:
            setattr(cfg, key, int(section.pop(key)))
    for key in ("reset_threshold", "bottom_band"):
        if key in section:
            setattr(cfg, key, float(section.pop(key)))
    if "backwall_exclusion" in section:
        cfg.backwall_exclusion = bool(section.pop("backwall_exclusion"))
    return cfg


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    spec = resolve_scenario(args.scenario)
    if not Path(args.image).exists():
        raise InputError(f"image file not found: {args.image}")
    image = ImageGrid.load(args.image)
    truth = rasterize_ground_truth(spec, image.grid)
    method = args.method or _method_from_manifest(args.image)
    try:
        report = evaluate(image, truth, ExclusionRegion(args.exclude_bottom), scenario=spec.name, method=method)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    prefix = Path(args.out) if args.out else Path(args.image).with_suffix("")
    outputs = report.save(prefix)
    if not args.no_png:
        outputs += _overlay_pngs(image, truth.mask, report, prefix)
    write_manifest(Path(str(prefix) + "_metrics.csv"), command="evaluate", scenario=spec, method=method,
                   config={"exclude_bottom": args.exclude_bottom}, inputs=[args.image, args.scenario],
                   outputs=outputs, elapsed=time.perf_counter() - t0)
    m = report.metrics()
    print(f"{spec.name}/{method}: F1={m['f1_max']:.4f} AUROC={m['auroc']:.4f} AUPRC={m['auprc']:.4f}")
    return EXIT_OK


def _method_from_manifest(image_path: str) -> str:
    man = Path(str(image_path) + ".manifest.json")
    if man.exists():
        return json.loads(man.read_text()).get("method", "unknown")
    return "unknown"


def _overlay_pngs(image: ImageGrid, mask: np.ndarray, report, prefix: Path) -> list[Path]:
    """Thresholded images at tau_PRC, tau_ROC and tau_F1: defect hits white, misses and
    false alarms in mid grays, ground-truth outline marked by the gray levels."""
    from PIL import Image
    written = []
    for name, tau in (("prc", report.tau_prc), ("roc", report.tau_roc), ("f1", report.tau_f1)):
        pred = thresholded(image, tau)
        rgb = np.zeros(mask.shape + (3,), np.uint8)
        rgb[pred & mask] = (255, 255, 255)
        rgb[pred & ~mask] = (230, 60, 60)
        rgb[~pred & mask] = (60, 120, 230)
        p = Path(f"{prefix}_tau_{name}.png")
        Image.fromarray(rgb, mode="RGB").save(p)
        written.append(p)
    return written


def cmd_compare(args) -> int:
    reports = []
    for p in args.reports:
        if not Path(p).exists():
            raise InputError(f"report not found: {p}")
        try:
            reports.append(load_metrics(p))
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    rows = comparison_table(reports)
    write_comparison(rows, args.out)
    for row in rows:
        print(",".join(row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fmcrecon", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenarios", help="list built-in scenarios")
    p.add_argument("--export", metavar="DIR", help="write every built-in scenario as YAML into DIR")
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("simulate", help="synthesize an FMC dataset for a scenario")
    p.add_argument("scenario", help="scenario YAML file or built-in scenario name")
    p.add_argument("out", help="output FMC file")
    p.add_argument("--reference-resolution", action="store_true",
                   help="use a 2x finer mesh and at least 2x smaller dt than the inversion (anti-inverse-crime)")
    p.add_argument("--defect-density-factor", type=float, default=0.01,
                   help="density of defect pixels relative to background (default 0.01)")
    p.add_argument("--config", help="YAML config with a 'simulation' section")
    p.add_argument("--threads", type=int, default=1, help="worker threads for transmitters")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="image an FMC dataset with TFM, RTM or FWI")
    p.add_argument("method", choices=["tfm", "rtm", "fwi"])
    p.add_argument("fmc", help="FMC file")
    p.add_argument("scenario", help="scenario YAML file or built-in name (background, array, ROI)")
    p.add_argument("out", help="output image grid file")
    p.add_argument("--config", help="YAML config with 'tfm', 'rtm', 'fwi' and 'simulation' sections")
    p.add_argument("--pixel-spacing", type=float, default=0.1, help="image pixel size in mm (default 0.1)")
    p.add_argument("--velocity", type=float, help="TFM p-wave speed override in m/s")
    p.add_argument("--dump-kernel", action="store_true",
                   help="also save the shot-summed nodal density kernel (rtm: pre-abs, pre-blur; "
                        "fwi: iteration-0 gradient)")
    p.add_argument("--png", action="store_true", help="also write a grayscale PNG")
    p.add_argument("--threads", type=int, default=1, help="worker threads for supershots")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score an image against the scenario ground truth")
    p.add_argument("image", help="image grid file")
    p.add_argument("scenario", help="scenario YAML file or built-in name")
    p.add_argument("--exclude-bottom", type=float, default=0.1,
                   help="fraction of image depth excluded at the bottom (default 0.1)")
    p.add_argument("--method", help="method label (default: from the image manifest)")
    p.add_argument("--out", help="output prefix (default: image path without suffix)")
    p.add_argument("--no-png", action="store_true", help="skip the thresholded overlay PNGs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="tabulate metrics of several reports")
    p.add_argument("reports", nargs="+", help="metrics CSV files written by 'evaluate'")
    p.add_argument("--out", required=True, help="comparison CSV")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except SolverInstability as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ScenarioError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
