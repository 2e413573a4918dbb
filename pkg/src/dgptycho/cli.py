"""
Command-line pipeline: ``simulate``, ``pretrain``, ``recon``, ``metrics``, ``export``.

Every command accepts ``--config`` (YAML document), repeated
``--set key.path=value`` overrides, ``--out`` (output directory) and
``--seed``. Exit codes: 0 success, 2 configuration error, 3 data or file
error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import engine
from .config import RunConfig, apply_overrides, load_config, save_config
from .dgp import load_dgp, save_dgp
from .errors import ConfigurationError, ContainerError, ContractError, DataError, DivergenceError
from .export import plot_curves, plot_power_spectrum, plot_radial_profile, write_png, write_raw
from .io import read_dataset, write_dataset
from .metrics import info_limit, phase_ssim, power_spectrum, radial_profile
from .physics import ScanGeometry, make_ideal_probe
from .simdata import make_bilayer_phantom, make_lattice_phantom, make_nanoparticle_phantom, simulate_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

DATASET_FILE = "dataset.p4ds"
OBJECT_DGP_FILE = "object_dgp.p4ds"
PROBE_DGP_FILE = "probe_dgp.p4ds"
FINAL_FILE = "final.p4ds"


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def resolve_config(args, seed_target: str = "recon") -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"{seed_target}.seed={int(args.seed)}")
    return apply_overrides(cfg, overrides)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- simulate ----------------------------------------------------------------------


def build_phantom(sim):
    if sim.phantom == "nanoparticle":
        return make_nanoparticle_phantom(
            sim.size, sim.sampling, radius=sim.radius, roughness=sim.roughness, seed=sim.seed, peak_phase=sim.peak_phase
        )
    if sim.phantom == "bilayer":
        return make_bilayer_phantom(sim.size, sim.sampling, sim.layer_spacing, sim.twist, sim.num_slices, sim.slice_thickness)
    return make_lattice_phantom(sim.size, sim.sampling, sim.lattice_spacing)


def simulate_from_config(sim):
    """Phantom, probe, raster scan and data for a :class:`SimulationConfig`."""
    phantom = build_phantom(sim)
    probe = make_ideal_probe(sim.energy, sim.aperture, tuple(sim.detector), sim.sampling, sim.defocus, sim.c3)
    if sim.scan_step is None:
        # spread the scan over the field of view, keeping every window inside
        span = np.array(sim.size) - np.array(sim.detector)
        step = span / np.maximum(np.array(sim.scan_shape) - 1, 1) - 1e-3
    else:
        step = sim.scan_step
    geo = ScanGeometry.raster(sim.scan_shape, step, sim.size, sim.sampling, sim.detector, sim.energy)
    dose = np.inf if sim.dose is None else sim.dose
    return simulate_dataset(phantom, probe, geo, dose=dose, seed=sim.seed)


def cmd_simulate(args) -> int:
    cfg = resolve_config(args, "simulation")
    out = _outdir(args)
    ds = simulate_from_config(cfg.simulation)
    path = out / DATASET_FILE
    write_dataset(ds, path, cfg.provenance())
    save_config(cfg, out / "config.yaml")
    _log(f"wrote {path} ({ds.num_positions} patterns of {ds.detector_shape[0]}x{ds.detector_shape[1]})")
    return EXIT_OK


# -- pretrain / recon --------------------------------------------------------------


def _object_shape(ds):
    shape = ds.metadata.get("object_shape")
    return None if shape is None else tuple(shape)


def _load_data(args):
    if not args.data:
        raise DataError("--data is required")
    return read_dataset(args.data)


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = _outdir(args)
    ds = _load_data(args)
    rc = cfg.recon
    odgp, pdgp, src = engine.pretrain_generators(rc, ds, object_shape=_object_shape(ds))
    prov = dict(cfg.provenance(), pretrain_iterations=src.iteration)
    save_dgp(odgp, out / OBJECT_DGP_FILE, prov)
    save_dgp(pdgp, out / PROBE_DGP_FILE, prov)
    engine.snapshot(src, out / "pretrain_source.p4ds", provenance=cfg.provenance())
    save_config(cfg, out / "config.yaml")
    _log(f"wrote generator checkpoints to {out}")
    return EXIT_OK


def _render_phase(state, path, export_cfg):
    write_png(state.projected_phase(), path, percentile=(export_cfg.percentile_low, export_cfg.percentile_high))


def cmd_recon(args) -> int:
    overrides = list(args.set or [])
    if args.mode:
        overrides.append(f"recon.mode={args.mode}")
    args.set = overrides
    cfg = resolve_config(args)
    out = _outdir(args)
    ds = _load_data(args)
    rc = cfg.recon
    prov = cfg.provenance()
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)
    kw = {"object_shape": _object_shape(ds)}
    state = None
    if args.resume:
        state = engine.restore(args.resume)
        rc = state.config
    elif rc.mode == "dgp":
        odir = Path(args.checkpoints) if args.checkpoints else None
        if odir is not None and (odir / OBJECT_DGP_FILE).exists() and (odir / PROBE_DGP_FILE).exists():
            kw["object_dgp"] = load_dgp(odir / OBJECT_DGP_FILE)
            kw["probe_dgp"] = load_dgp(odir / PROBE_DGP_FILE)
            pre = 0
        else:
            _log("no generator checkpoints given; pre-training first")
            odgp, pdgp, src = engine.pretrain_generators(rc, ds, object_shape=kw["object_shape"])
            save_dgp(odgp, out / OBJECT_DGP_FILE, prov)
            save_dgp(pdgp, out / PROBE_DGP_FILE, prov)
            kw["object_dgp"], kw["probe_dgp"] = odgp, pdgp
            pre = src.iteration
    rec = engine.Reconstructor(rc, ds, state, **({} if state is not None else kw))
    if state is None and rc.mode == "dgp":
        rec.state.pretrain_iterations = pre

    def on_iteration(st):
        if st.iteration % rc.snapshot_every == 0 or st.iteration == rc.total_iterations:
            tag = f"{st.iteration:06d}"
            engine.snapshot(st, snapdir / f"iter_{tag}.p4ds", provenance=prov)
            _render_phase(st, snapdir / f"phase_{tag}.png", cfg.export)
            engine.write_history_csv(st, out / "history.csv")
            _log(f"iteration {st.iteration}: train loss {st.history[-1]['train_loss']:.6g}")

    try:
        state = rec.run(callback=on_iteration)
    except DivergenceError as exc:
        st = getattr(exc, "state", None)
        if st is not None:
            engine.snapshot(st, out / "diverged_last_good.p4ds", provenance=prov)
            engine.write_history_csv(st, out / "history.csv")
        raise
    engine.snapshot(state, out / FINAL_FILE, provenance=prov)
    engine.write_history_csv(state, out / "history.csv")
    _render_phase(state, out / "phase_final.png", cfg.export)
    if state.best is not None:
        write_png(
            state.projected_phase(best=True),
            out / "phase_best.png",
            percentile=(cfg.export.percentile_low, cfg.export.percentile_high),
        )
    save_config(cfg, out / "config.yaml")
    _log(f"finished {state.iteration} iterations; wrote {out / FINAL_FILE}")
    return EXIT_OK


# -- metrics -----------------------------------------------------------------------


def scan_roi(ds) -> tuple[slice, slice]:
    """Region spanned by the probe centres."""
    pos = ds.geometry.positions_px
    lo = np.ceil(pos.min(axis=0)).astype(int)
    hi = np.floor(pos.max(axis=0)).astype(int) + 1
    return slice(int(lo[0]), int(hi[0])), slice(int(lo[1]), int(hi[1]))


def _truth_phase(ds):
    return None if ds.ground_truth is None else ds.ground_truth.projected_phase(ds.energy)


def cmd_metrics(args) -> int:
    cfg = resolve_config(args)
    out = _outdir(args)
    if not args.recon:
        raise DataError("--recon (a reconstruction output directory) is required")
    rdir = Path(args.recon)
    ds = _load_data(args) if args.data else None
    truth = None if ds is None else _truth_phase(ds)
    roi = None if ds is None else scan_roi(ds)
    snaps = sorted((rdir / "snapshots").glob("iter_*.p4ds"))
    final = rdir / FINAL_FILE
    if not final.exists():
        raise DataError(f"{final} not found")
    rows = []
    for path in snaps:
        st = engine.restore(path)
        row = {"iteration": st.iteration, "train_loss": st.history[-1]["train_loss"] if st.history else ""}
        if truth is not None:
            row["ssim"] = phase_ssim(st.projected_phase(), truth, roi)
        rows.append(row)
    state = engine.restore(final)
    phase = state.projected_phase()
    img = phase if roi is None else phase[roi]
    spec = power_spectrum(img)
    prof = radial_profile(spec, state.sampling)
    lim = info_limit(spec, state.sampling)
    summary = {
        "iteration": state.iteration,
        "info_limit_angstrom": lim.resolution if lim.resolved else None,
        "ssim": None if truth is None else phase_ssim(phase, truth, roi),
        "provenance": cfg.provenance(),
    }
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "train_loss", "ssim"], extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    plot_power_spectrum(spec, state.sampling[0], out / "power_spectrum.png", lim)
    plot_radial_profile(prof, out / "radial_profile.png", lim)
    if truth is not None and rows:
        it = [r["iteration"] for r in rows]
        plot_curves({"SSIM": (it, [r["ssim"] for r in rows])}, out / "ssim.png")
    msg = "unresolved" if not lim.resolved else f"{lim.resolution:.3f} A"
    _log(f"information limit {msg}" + ("" if truth is None else f", SSIM {summary['ssim']:.4f}"))
    return EXIT_OK


# -- export ------------------------------------------------------------------------


def _pair(text: str | None, what: str):
    if text is None:
        return None
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigurationError(f"{what} must be two comma-separated numbers") from exc
    return a, b


def cmd_export(args) -> int:
    cfg = resolve_config(args)
    out = _outdir(args)
    if not args.snapshot:
        raise DataError("--snapshot is required")
    state = engine.restore(args.snapshot)
    image = state.projected_phase(best=args.best)
    contrast = _pair(args.contrast, "--contrast")
    pct = _pair(args.percentile, "--percentile")
    if contrast is None and pct is None:
        pct = (cfg.export.percentile_low, cfg.export.percentile_high)
    if contrast is not None and pct is not None:
        raise ConfigurationError("give either --contrast or --percentile")
    stem = f"phase_{state.iteration:06d}" + ("_best" if args.best else "")
    if args.format in ("png", "both"):
        info = write_png(image, out / f"{stem}.png", contrast=contrast, percentile=pct)
        # limits also go into the file name so renderings are self-describing
        named = out / f"{stem}_min{info['min']:.4g}_max{info['max']:.4g}.png"
        named.write_bytes((out / f"{stem}.png").read_bytes())
        _log(f"wrote {out / stem}.png with limits [{info['min']:.4g}, {info['max']:.4g}]")
    if args.format in ("raw", "both"):
        write_raw(image, out / f"{stem}.f32")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgptycho", description="Multislice ptychography with deep generative priors.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML configuration document")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration value")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="random seed (simulation seed for 'simulate', else reconstruction seed)")

    sp = sub.add_parser("simulate", help="simulate a 4D dataset from a phantom")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("pretrain", help="fit generator checkpoints to a short pixelated reconstruction")
    common(sp)
    sp.add_argument("--data", help="dataset container")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("recon", help="run a reconstruction")
    common(sp)
    sp.add_argument("--data", help="dataset container")
    sp.add_argument("--mode", choices=["pixelated", "dgp"])
    sp.add_argument("--checkpoints", help="directory holding generator checkpoints from 'pretrain'")
    sp.add_argument("--resume", help="snapshot to continue from")
    sp.set_defaults(func=cmd_recon)

    sp = sub.add_parser("metrics", help="SSIM, power spectrum and information limit of a reconstruction")
    common(sp)
    sp.add_argument("--data", help="dataset container (for ground truth and scan region)")
    sp.add_argument("--recon", help="reconstruction output directory")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("export", help="render a snapshot's projected phase")
    common(sp)
    sp.add_argument("--snapshot", help="snapshot container")
    sp.add_argument("--best", action="store_true", help="use the minimum-validation checkpoint")
    sp.add_argument("--contrast", help="explicit limits 'min,max'")
    sp.add_argument("--percentile", help="percentile limits 'low,high'")
    sp.add_argument("--format", choices=["png", "raw", "both"], default="png")
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _log(f"configuration error: {exc}")
        return EXIT_CONFIG
    except DivergenceError as exc:
        _log(f"numerical divergence: {exc}")
        return EXIT_DIVERGED
    except (ContainerError, DataError, ContractError, OSError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
