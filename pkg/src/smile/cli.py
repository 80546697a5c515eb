"""Command line entry point: ``smile <subcommand> [options]``.

Every subcommand resolves its configuration (defaults, then ``--config``,
then flags), prints it, writes it to ``<out>/config.ini`` and writes all
artifacts atomically. Re-running with ``--config <out>/config.ini``
reproduces every output file byte for byte. Timings go to the console
only.

Exit codes: 0 success, 1 experiment failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as X
from . import io as sio
from . import metrics, model, sampling
from .model import CoilMapSet, KSpaceData, SliceStack

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    pass


# flag -> (section, key)
_FLAG_KEYS = {
    "seed": ("experiment", "seed"),
    "mb": ("phantom", "mb"),
    "nx": ("phantom", "nx"),
    "ny": ("phantom", "ny"),
    "style": ("phantom", "style"),
    "ncoils": ("coils", "ncoils"),
    "similarity": ("coils", "similarity"),
    "n": ("acquisition", "n"),
    "R": ("acquisition", "R"),
    "mask": ("acquisition", "mask"),
    "noise": ("acquisition", "noise"),
}


def _common(p: argparse.ArgumentParser, needs_input: bool = False):
    p.add_argument("--config", type=Path, help="INI configuration file")
    p.add_argument("--out", type=Path, help="output directory (default: ./out/<subcommand>)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration key; repeatable")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--mb", type=int, help="multiband factor")
    p.add_argument("--nx", type=int, help="readout size")
    p.add_argument("--ny", type=int, help="phase-encoding size per slice")
    p.add_argument("--style", choices=["ellipses", "ring-and-disks"], help="phantom style")
    p.add_argument("--ncoils", type=int, help="number of coils")
    p.add_argument("--similarity", type=float, help="inter-slice coil-map similarity in [0, 1]")
    p.add_argument("--n", type=int, help="FOV extension factor")
    p.add_argument("-R", "--R", type=float, dest="R", help="net acceleration")
    p.add_argument("--mask", choices=["cava", "poisson", "random", "uniform"],
                   help="SMILE sampling mask generator")
    p.add_argument("--noise", type=float, help="noise level relative to the peak coil image")
    if needs_input:
        p.add_argument("--input", type=Path, required=True,
                       help="directory written by the previous pipeline step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smile", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("theory-sweep", "kernel-existence sweep over coils, support and kernel size"),
        ("sampling-study", "mask families, PSFs, g-factor maps and GA-optimised masks"),
        ("compare", "SMILE CG-SENSE versus CAIPI slice-GRAPPA at a matched line budget"),
        ("phantom", "generate and save the phantom and coil maps"),
    ]:
        _common(sub.add_parser(name, help=helptext))
    _common(sub.add_parser("simulate", help="simulate SMILE and CAIPI acquisitions from a "
                                            "phantom directory"), needs_input=True)
    _common(sub.add_parser("recon", help="reconstruct and score a simulate directory"),
            needs_input=True)
    return parser


def _resolve_config(args, fallback: Path = None) -> X.ExperimentConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        path = fallback
    try:
        cfg = X.ExperimentConfig.from_file(path) if path is not None else X.ExperimentConfig()
        for flag, (sec, key) in _FLAG_KEYS.items():
            value = getattr(args, flag, None)
            if value is not None:
                cfg.set(sec, key, value)
        for item in args.set:
            lhs, sep, value = item.partition("=")
            sec, dot, key = lhs.strip().partition(".")
            if not sep or not dot:
                raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            cfg.set(sec, key, value.strip())
        cfg.validate()
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _csv(rows, header) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6e}"
    return str(v)


# --------------------------------------------------------------------------
# theory-sweep
# --------------------------------------------------------------------------

def cmd_theory_sweep(cfg, out: Path) -> int:
    sw = cfg["sweep"]
    rows = X.theory_sweep(sw["ncoils"], sw["support"], sw["kernel_max"], sw["grid"],
                          sw["threshold"], seed=cfg.seed)
    keys = ["ncoils", "cx", "cy", "ex", "ey", "inequality", "min_ratio", "kernel_found",
            "violation"]
    sio.atomic_write_text(out / "sweep.csv", _csv([[_fmt(r[k]) for k in keys] for r in rows], keys))
    violations = sum(r["violation"] for r in rows)
    holds = sum(r["inequality"] for r in rows)
    extra = sum(r["kernel_found"] and not r["inequality"] for r in rows)
    e1, en = X.kernel_scaling(n=cfg.get("acquisition", "n"), seed=cfg.seed)
    summary = (f"rows = {len(rows)}\n"
               f"inequality_holds = {holds}\n"
               f"violations = {violations}\n"
               f"kernel_without_inequality = {extra}\n"
               f"minimal_ey_single = {e1}\n"
               f"minimal_ey_extended = {en}\n")
    sio.atomic_write_text(out / "summary.txt", summary)
    print(summary, end="")
    return 0 if violations == 0 else 1


# --------------------------------------------------------------------------
# sampling-study
# --------------------------------------------------------------------------

def _gmap_stats(values):
    v = values[~np.isnan(values)]
    if v.size == 0:
        return math.nan, math.nan
    return float(np.mean(v)), float(np.max(v))


def cmd_sampling_study(cfg, out: Path) -> int:
    s = cfg["sampling"]
    scene = X.make_scene(cfg)
    n = cfg.get("acquisition", "n")
    n_pe = n * scene.slices.shape[0]
    gfac = X.scene_gfactor(cfg, scene, s["ga_columns"])
    fitness = X.GAFitness(gfac, s["ga_trials"], cfg.seed)
    summary_rows, psf_rows, trace_rows = [], [], []
    status = 0
    for R in s["R_list"]:
        t0 = time.time()
        masks = X.mask_family(n_pe, R, seed=cfg.seed, center_slope=s["center_slope"])
        try:
            ga, _ = X.run_ga(cfg, gfac, n_pe, R)
        except (RuntimeError, ValueError) as exc:
            _log(f"R={R:g}: GA failed: {exc}")
            status = 1
        else:
            masks["ga"] = ga.best
            trace_rows += [[f"{R:g}", str(i), _fmt(f)] for i, f in enumerate(ga.trace)]
        for name, mask in masks.items():
            tag = f"R{R:g}_{name}"
            sampling.write_mask(out / "masks" / f"{tag}.txt", mask)
            psf = sampling.mask_psf(mask)
            peaks = sampling.psf_peaks(psf)
            mag = np.abs(psf) / np.abs(psf).max()
            psf_rows += [[f"{R:g}", name, str(i), f"{m:.6e}"] for i, m in enumerate(mag)]
            gmap = X.full_gfactor_map(cfg, scene, mask, s["trials"])
            g_mean, g_max = _gmap_stats(gmap)
            sio.write_array(out / "gfactor" / f"{tag}.smle", np.nan_to_num(gmap, nan=0.0,
                                                                           posinf=0.0))
            finite = gmap[np.isfinite(gmap)]
            hi = float(finite.max()) if finite.size else 1.0
            sio.export_magnitude(np.nan_to_num(gmap, nan=0.0, posinf=hi), out / "gfactor" /
                                 f"{tag}.pgm", window=(0.0, hi))
            summary_rows.append([f"{R:g}", name, str(mask.count), f"{mask.actual_R:.6f}",
                                 str(len(peaks)),
                                 f"{max((a for _, a in peaks), default=0.0):.6f}",
                                 _fmt(fitness(mask)), _fmt(g_mean), _fmt(g_max)])
        _log(f"R={R:g}: {len(masks)} masks in {time.time() - t0:.1f} s")
    sio.atomic_write_text(out / "summary.csv", _csv(summary_rows, [
        "R", "generator", "lines", "actual_R", "psf_sidelobes_10pct", "max_sidelobe",
        "fitness", "g_mean", "g_max"]))
    sio.atomic_write_text(out / "psf.csv", _csv(psf_rows, ["R", "generator", "index", "psf"]))
    sio.atomic_write_text(out / "ga_trace.csv", _csv(trace_rows, ["R", "generation", "best"]))
    print(_csv(summary_rows, ["R", "generator", "lines", "actual_R", "sidelobes",
                              "max_sidelobe", "fitness", "g_mean", "g_max"]), end="")
    return status


# --------------------------------------------------------------------------
# compare and the file pipeline
# --------------------------------------------------------------------------

def _write_comparison(cfg, scene, smile_k, caipi_k, calibs, out: Path) -> int:
    t0 = time.time()
    res = X.compare_methods(cfg, scene, smile_k, caipi_k, calibs)
    sampling.write_mask(out / "smile_mask.txt", sampling.SamplingMask(
        smile_k.mask, float(cfg.get("acquisition", "R")), cfg.get("acquisition", "mask")))
    sampling.write_mask(out / "caipi_mask.txt", sampling.SamplingMask(
        caipi_k.mask, float(caipi_k.mask.size / caipi_k.mask.sum()), "uniform"))
    ref = scene.slices.data
    peak = float(np.abs(ref).max())
    sio.export_magnitude(ref, out / "reference.pgm", window=(0.0, peak))
    csv_text, summary = "", [f"pe_line_budget = {res['budget']}\n"]
    leak_rows = []
    status = 0
    for key in ("smile", "caipi"):
        m = res[key]
        if m.error is not None:
            summary.append(f"[{m.name}]\nfailed = {m.error}\n")
            status = 1
            continue
        csv_text += m.report.to_csv(header=not csv_text)
        summary.append(m.report.summary())
        img = m.result.slices.data
        sio.write_array(out / f"recon_{key}.smle", img)
        sio.export_magnitude(img, out / f"recon_{key}.pgm", window=(0.0, peak))
        err, meta = metrics.error_map(ref, img, scale=5.0)
        sio.export_magnitude(err, out / f"error_{key}.pgm", window=(0.0, peak),
                             scale=meta["scale"])
        _log(f"{m.name}: SER {m.report.ser_total:.2f} dB, {m.result.wall_time:.1f} s")
    if status == 0:
        gap = res["smile"].report.ser_total - res["caipi"].report.ser_total
        summary.append(f"ser_gap_db = {gap:.4f}\n")
    leaks = {"smile_full": res["leakage"].get("smile_full")}
    for key in ("smile", "caipi"):
        if res[key].report is not None:
            leaks[res[key].name] = res[key].report.leakage
    for name, L in leaks.items():
        if L is None:
            continue
        for s, row in enumerate(L):
            leak_rows.append([name, str(s)] + [f"{v:.6e}" for v in row])
        off = L[~np.eye(len(L), dtype=bool)]
        summary.append(f"max_offdiag_leakage[{name}] = {off.max():.6e}\n")
    mb = scene.slices.mb
    sio.atomic_write_text(out / "metrics.csv", csv_text)
    sio.atomic_write_text(out / "leakage.csv", _csv(leak_rows, ["pipeline", "source"] +
                                                    [f"slice{t}" for t in range(mb)]))
    text = "".join(s if s.endswith("\n") else s + "\n" for s in summary)
    sio.atomic_write_text(out / "summary.txt", text)
    print(text, end="")
    _log(f"compare finished in {time.time() - t0:.1f} s")
    return status


def cmd_compare(cfg, out: Path) -> int:
    scene = X.make_scene(cfg)
    smile_k = X.simulate_smile(cfg, scene)
    caipi_k, calibs = X.simulate_caipi(cfg, scene)
    return _write_comparison(cfg, scene, smile_k, caipi_k, calibs, out)


def cmd_phantom(cfg, out: Path) -> int:
    scene = X.make_scene(cfg)
    sio.write_array(out / "phantom.smle", scene.slices.data)
    sio.write_array(out / "maps.smle", scene.maps.maps)
    sio.export_magnitude(scene.slices.data, out / "phantom.pgm")
    return 0


def _read(path: Path):
    if not path.exists():
        raise UsageError(f"missing input file: {path}")
    return sio.read_array(path).astype(np.complex128)


def _load_scene(cfg, src: Path):
    slices = SliceStack(_read(src / "phantom.smle"))
    c = cfg["coils"]
    maps = CoilMapSet(_read(src / "maps.smle"), (c["support_x"], c["support_y"]))
    if slices.mb != cfg.get("phantom", "mb") or slices.shape != (cfg.get("phantom", "ny"),
                                                                 cfg.get("phantom", "nx")):
        raise UsageError("phantom files do not match the configured geometry")
    return X.scene_from_arrays(slices, maps)


def cmd_simulate(cfg, out: Path, src: Path) -> int:
    scene = _load_scene(cfg, src)
    smile_k = X.simulate_smile(cfg, scene)
    caipi_k, calibs = X.simulate_caipi(cfg, scene)
    sio.write_array(out / "phantom.smle", scene.slices.data)
    sio.write_array(out / "maps.smle", scene.maps.maps)
    sio.write_array(out / "smile_kspace.smle", smile_k.data)
    sio.write_array(out / "caipi_kspace.smle", caipi_k.data)
    sio.write_array(out / "calibration.smle", np.stack([c.data for c in calibs]))
    sampling.write_mask(out / "smile_mask.txt", sampling.SamplingMask(
        smile_k.mask, float(cfg.get("acquisition", "R")), cfg.get("acquisition", "mask")))
    sampling.write_mask(out / "caipi_mask.txt", sampling.SamplingMask(
        caipi_k.mask, float(caipi_k.mask.size / caipi_k.mask.sum()), "uniform"))
    return 0


def _read_mask(path: Path):
    if not path.exists():
        raise UsageError(f"missing input file: {path}")
    return sampling.read_mask(path).keep


def cmd_recon(cfg, out: Path, src: Path) -> int:
    scene = _load_scene(cfg, src)
    mb = scene.slices.mb
    ny = scene.slices.shape[0]
    n = cfg.get("acquisition", "n")
    smile_k = KSpaceData(_read(src / "smile_kspace.smle"), grid="extended", extension=n,
                         offsets=tuple(model.uniform_offsets(mb, ny)),
                         mask=_read_mask(src / "smile_mask.txt"))
    caipi_k = KSpaceData(_read(src / "caipi_kspace.smle"), phases=model.caipi_phases(ny, mb),
                         mask=_read_mask(src / "caipi_mask.txt"))
    calibs = [KSpaceData(c) for c in _read(src / "calibration.smle")]
    return _write_comparison(cfg, scene, smile_k, caipi_k, calibs, out)


_COMMANDS = {
    "theory-sweep": cmd_theory_sweep,
    "sampling-study": cmd_sampling_study,
    "compare": cmd_compare,
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "recon": cmd_recon,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        src = getattr(args, "input", None)
        if src is not None and not src.is_dir():
            raise UsageError(f"input directory not found: {src}")
        cfg = _resolve_config(args, None if src is None else src / "config.ini")
        out = args.out if args.out is not None else Path("out") / args.command
        text = cfg.to_ini()
        print(text, end="")
        sio.atomic_write_text(out / "config.ini", text)
        fn = _COMMANDS[args.command]
        t0 = time.time()
        status = fn(cfg, out, src) if src is not None else fn(cfg, out)
        _log(f"{args.command}: exit {status} after {time.time() - t0:.1f} s")
        return status
    except UsageError as exc:
        print(f"smile {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (sio.CorruptFileError, sio.UnsupportedFormatError) as exc:
        print(f"smile {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"smile {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
