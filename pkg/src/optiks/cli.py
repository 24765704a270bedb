"""Command-line front end: ``optiks design|analyze|fit-atf|gen``.

Exit codes: 0 success, 1 infeasible design or failed check, 2 bad input.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import formats
from .analysis import (AnalysisError, fit_atf, gen_probe_waveforms, kspace_fidelity,
                       power_spectrum, psf_simulate, verify_limits)
from .geometry import (CepiParams, GeometryError, HardwareLimits, RosetteParams, SpiralParams,
                       arclength_reparam, gen_trajectory)
from .losses import LossError, LossWeights
from .solver import DesignSpec, DesignSpecError, SolverConfig, SolverError, run_design

EXIT_OK, EXIT_FAIL, EXIT_BAD_INPUT = 0, 1, 2


class InputError(Exception):
    pass


@dataclass
class CommandOutcome:
    code: int
    artifacts: list = field(default_factory=list)
    summary: str = ""


# ---------------------------------------------------------------------------
# config


SCHEMA = {
    "hardware": {"g_max": float, "s_max": float, "gamma_bar": float, "dt": float},
    "objective": {
        "lambda_time": float, "lambda_bound_time": float, "lambda_slew": float,
        "lambda_pns": float, "lambda_band": float, "lambda_acoustic": float,
        "p_max": float, "t_max": float,
    },
    "barriers": {"delta_slew": float, "delta_pns": float, "delta_time": float},
    "solver": {
        "init_derate": float, "step_size": float, "beta1": float, "beta2": float,
        "eps": float, "max_iters": int, "terminal": str, "seed": int, "tol": float,
        "window": int, "control_spacing": float, "time_limit": float, "arc_samples": int,
    },
    "files": {"trajectory": str, "pns_model": str, "bands": str, "atf": str},
    "trajectory": {
        "kind": str, "fov": float, "res": float, "interleaves": int, "r_center": float,
        "r_edge": float, "petals": int, "r_y": float, "max_step": float, "max_turn": float,
    },
}


def read_config(path) -> dict:
    """Parse an INI config into typed per-section dicts; unknown keys are errors."""
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise InputError(f"cannot parse config {path}: {exc}") from exc
    out: dict = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise InputError(f"unknown config section [{sec}]")
        out[sec] = {}
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise InputError(f"unknown key '{key}' in [{sec}]")
            try:
                out[sec][key] = SCHEMA[sec][key](raw.strip())
            except ValueError as exc:
                raise InputError(f"[{sec}] {key}: {exc}") from exc
    out["_dir"] = path.parent
    return out


def _resolve(cfg: dict, name: str) -> Optional[Path]:
    rel = cfg.get("files", {}).get(name)
    if rel is None:
        return None
    p = Path(rel)
    return p if p.is_absolute() else cfg["_dir"] / p


def hardware_from(cfg: dict) -> HardwareLimits:
    hw = dict(cfg.get("hardware", {}))
    for k in ("g_max", "s_max"):
        if k not in hw:
            raise InputError(f"missing key '{k}' in [hardware]")
    return HardwareLimits(**hw)


def spec_from(cfg: dict, seed: Optional[int] = None) -> DesignSpec:
    hw = hardware_from(cfg)
    obj = dict(cfg.get("objective", {}))
    p_max = obj.pop("p_max", None)
    t_max = obj.pop("t_max", None)
    weights = LossWeights(**obj)
    sol = dict(cfg.get("solver", {}))
    sol.pop("arc_samples", None)
    if seed is not None:
        sol["seed"] = seed
    solver = SolverConfig(**sol)
    pns_model = bands = atf = None
    if weights.lambda_pns > 0 or p_max is not None:
        path = _resolve(cfg, "pns_model")
        if path is None:
            if weights.lambda_pns > 0:
                raise InputError("lambda_pns > 0 needs key 'pns_model' in [files]")
        else:
            pns_model = formats.read_pns_model(path)
    if weights.lambda_pns > 0 and p_max is None:
        raise InputError("lambda_pns > 0 needs key 'p_max' in [objective]")
    if weights.lambda_bound_time > 0 and t_max is None:
        raise InputError("lambda_bound_time > 0 needs key 't_max' in [objective]")
    if weights.lambda_band > 0:
        path = _resolve(cfg, "bands")
        if path is None:
            raise InputError("lambda_band > 0 needs key 'bands' in [files]")
        bands = formats.read_bands(path)
    if weights.lambda_acoustic > 0:
        path = _resolve(cfg, "atf")
        if path is None:
            raise InputError("lambda_acoustic > 0 needs key 'atf' in [files]")
        atf = formats.read_atf(path)
    bar = cfg.get("barriers", {})
    return DesignSpec(hw, weights, bar.get("delta_slew", 2e-4), bar.get("delta_pns", 5e-5),
                      bar.get("delta_time"), p_max, t_max, bands, atf, pns_model, solver)


_PARAMS = {"spiral": SpiralParams, "rosette": RosetteParams, "cepi": CepiParams}


def trajectory_from(cfg: dict, override: Optional[str]):
    if override is not None:
        return formats.read_trajectory(override)
    path = _resolve(cfg, "trajectory")
    if path is not None:
        return formats.read_trajectory(path)
    tr = dict(cfg.get("trajectory", {}))
    kind = tr.pop("kind", None)
    if kind is None:
        raise InputError("no trajectory: give --trajectory, [files] trajectory or [trajectory] kind")
    if kind not in _PARAMS:
        raise InputError(f"unsupported-kind: {kind}")
    try:
        return gen_trajectory(kind, _PARAMS[kind](**tr))
    except TypeError as exc:
        raise InputError(f"[trajectory] {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_design(config: str, trajectory: Optional[str], out: str,
               seed: Optional[int] = None) -> CommandOutcome:
    cfg = read_config(config)
    spec = spec_from(cfg, seed)
    curve = trajectory_from(cfg, trajectory)
    arc = arclength_reparam(curve, cfg.get("solver", {}).get("arc_samples"), spec.hw)
    res = run_design(arc, spec)
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    arts = [
        formats.write_waveform(outdir / "waveform.txt", res.waveform),
        formats.write_waveform_bin(outdir / "waveform.bin", res.waveform),
        formats.write_columns(outdir / "speed.txt", "s v xi", arc.s_grid, res.v, res.xi),
        formats.write_columns(outdir / "loss.txt", "iteration loss best",
                              np.arange(1, res.loss_trace.size + 1), res.loss_trace, res.best_trace),
    ]
    report = res.report.table()
    (outdir / "report.txt").write_text(report + "\n")
    arts.append(outdir / "report.txt")
    status = "feasible" if res.feasible else "INFEASIBLE: " + ", ".join(res.report.failures())
    summary = (f"duration {res.duration * 1e3:.6f} ms after {res.iterations} iterations ({status})\n"
               + report)
    return CommandOutcome(EXIT_OK if res.feasible else EXIT_FAIL, arts, summary)


CHECKS = ("limits", "spectrum", "fidelity", "psf")


def cmd_analyze(waveform: str, checks: list, out: Optional[str] = None,
                config: Optional[str] = None, g_max: Optional[float] = None,
                s_max: Optional[float] = None, pns_model: Optional[str] = None,
                p_max: Optional[float] = None, bands: Optional[str] = None,
                trajectory: Optional[str] = None, t2star: float = np.inf,
                off_res: float = 0.0) -> CommandOutcome:
    w = formats.load_waveform(waveform)
    cfg = read_config(config) if config else {"_dir": Path(".")}
    hwd = dict(cfg.get("hardware", {}))
    if g_max is not None:
        hwd["g_max"] = g_max
    if s_max is not None:
        hwd["s_max"] = s_max
    hwd.setdefault("dt", w.dt)
    model = formats.read_pns_model(pns_model) if pns_model else None
    if model is None and _resolve(cfg, "pns_model") is not None:
        model = formats.read_pns_model(_resolve(cfg, "pns_model"))
    if p_max is None:
        p_max = cfg.get("objective", {}).get("p_max")
    band_set = formats.read_bands(bands) if bands else None
    if band_set is None and _resolve(cfg, "bands") is not None:
        band_set = formats.read_bands(_resolve(cfg, "bands"))
    outdir = Path(out) if out else None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)
    code, arts, lines = EXIT_OK, [], []
    for check in checks:
        if check not in CHECKS:
            raise InputError(f"unknown check {check!r}; choose from {CHECKS}")
        if check == "limits":
            if "g_max" not in hwd or "s_max" not in hwd:
                raise InputError("limits check needs g_max and s_max (flags or [hardware])")
            rep = verify_limits(w, HardwareLimits(**hwd), model, p_max)
            lines.append(rep.table())
            if outdir:
                (outdir / "limits.txt").write_text(rep.table() + "\n")
                arts.append(outdir / "limits.txt")
            if not rep.passed:
                code = EXIT_FAIL
        elif check == "spectrum":
            sp = power_spectrum(w, band_set)
            lines.append(f"total_power {formats.fmt(sp.total_power)}")
            for (lo, hi), pw in zip(sp.bands, sp.band_power):
                lines.append(f"band {formats.fmt(lo)} {formats.fmt(hi)} {formats.fmt(pw)}")
            if outdir:
                arts.append(formats.write_columns(outdir / "spectrum.txt", "freq magnitude_per_axis",
                                                  sp.freqs, sp.magnitude))
                if sp.bands:
                    arts.append(formats.write_columns(
                        outdir / "band_power.txt", "f_lo f_hi power",
                        np.array([b[0] for b in sp.bands]), np.array([b[1] for b in sp.bands]),
                        np.array(sp.band_power)))
        elif check in ("fidelity", "psf"):
            gamma = hwd.get("gamma_bar", HardwareLimits(1, 1).gamma_bar)
            if check == "psf":
                res = psf_simulate(w, gamma, t2star, off_res)
                lines.append(f"fwhm_x_m {formats.fmt(res.fwhm[0])}\nfwhm_y_m {formats.fmt(res.fwhm[1])}")
                if outdir:
                    c = res.image.shape[0] // 2
                    arts.append(formats.write_columns(outdir / "psf_profile.txt", "x_m abs_x abs_y",
                                                      res.coords, np.abs(res.image[:, c]),
                                                      np.abs(res.image[c, :])))
                continue
            traj = trajectory or (str(_resolve(cfg, "trajectory")) if _resolve(cfg, "trajectory") else None)
            if traj is None:
                raise InputError("fidelity check needs --trajectory")
            curve = formats.read_trajectory(traj)
            arc = arclength_reparam(curve, hw=HardwareLimits(**hwd) if "s_max" in hwd and "g_max" in hwd else None)
            mx, rms = kspace_fidelity(w, arc, gamma)
            tol = 1e-3 * arc.k_max
            ok = mx <= tol
            lines.append(f"fidelity max {formats.fmt(mx)} rms {formats.fmt(rms)} tol {formats.fmt(tol)} "
                         + ("pass" if ok else "FAIL"))
            if not ok:
                code = EXIT_FAIL
    if outdir:
        (outdir / "analysis.txt").write_text("\n".join(lines) + "\n")
        arts.append(outdir / "analysis.txt")
    return CommandOutcome(code, arts, "\n".join(lines))


def read_manifest(path) -> tuple:
    """ATF manifest: ``[atf] axes, ref_hz`` and one ``[axis.N]`` per axis.

    Each axis section lists ``pairs = in.txt out.txt, in2.txt out2.txt`` and
    optionally ``ref_scale`` (measured magnitude at ``ref_hz``).
    """
    path = Path(path)
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with path.open() as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise InputError(f"cannot parse manifest {path}: {exc}") from exc
    if "atf" not in cp:
        raise InputError("manifest needs an [atf] section")
    extra = set(cp["atf"]) - {"axes", "ref_hz"}
    if extra:
        raise InputError(f"unknown keys in [atf]: {sorted(extra)}")
    try:
        axes = int(cp["atf"]["axes"])
        ref_hz = float(cp["atf"].get("ref_hz", "1000"))
    except (KeyError, ValueError) as exc:
        raise InputError(f"[atf] needs integer 'axes': {exc}") from exc
    if axes < 1:
        raise InputError("[atf] axes must be >= 1")
    freqs, pairs, scales = None, [], []
    for i in range(axes):
        sec = f"axis.{i}"
        if sec not in cp:
            raise InputError(f"manifest misses [{sec}]")
        extra = set(cp[sec]) - {"pairs", "ref_scale"}
        if extra:
            raise InputError(f"unknown keys in [{sec}]: {sorted(extra)}")
        items = [p.split() for p in cp[sec].get("pairs", "").split(",") if p.strip()]
        if not items or any(len(p) != 2 for p in items):
            raise InputError(f"[{sec}] pairs must list 'input output' file pairs")
        axis_pairs = []
        for fin, fout in items:
            fi, I = formats.read_spectrum(path.parent / fin)
            fo, O = formats.read_spectrum(path.parent / fout)
            if freqs is None:
                freqs = fi
            if fi.shape != freqs.shape or np.any(fi != freqs) or np.any(fo != freqs):
                raise InputError("all spectra must share one frequency grid")
            axis_pairs.append((I, O))
        pairs.append(axis_pairs)
        rs = cp[sec].get("ref_scale")
        scales.append(float(rs) if rs is not None else None)
    return freqs, pairs, ref_hz, scales


def cmd_fit_atf(manifest: str, out: str) -> CommandOutcome:
    freqs, pairs, ref_hz, scales = read_manifest(manifest)
    fit = fit_atf(freqs, pairs, ref_hz, scales if any(s is not None for s in scales) else None)
    usable = np.sum(np.isfinite(fit.atf.mags), axis=0)
    path = formats.write_atf(out, fit.atf)
    summary = " ".join(f"axis{i}:{int(n)}bins" for i, n in enumerate(usable))
    code = EXIT_FAIL if np.any(usable == 0) else EXIT_OK
    return CommandOutcome(code, [path], summary)


def cmd_gen(kind: str, out: str, args) -> CommandOutcome:
    outp = Path(out)
    if kind == "probes":
        outp.mkdir(parents=True, exist_ok=True)
        ws = gen_probe_waveforms(args.axis, args.axes, args.f_lo, args.f_hi, args.step,
                                 args.dur, args.amplitude, args.dt)
        arts = [formats.write_waveform_bin(outp / f"probe_{i:04d}.bin", w) for i, w in enumerate(ws)]
        return CommandOutcome(EXIT_OK, arts, f"{len(ws)} probe waveforms")
    fields = {"spiral": ("fov", "res", "interleaves", "r_center", "r_edge"),
              "rosette": ("res", "petals"), "cepi": ("fov", "res", "r_y")}[kind]
    params = {k: getattr(args, k) for k in fields if getattr(args, k) is not None}
    curve = gen_trajectory(kind, params)
    path = formats.write_trajectory(outp, curve)
    return CommandOutcome(EXIT_OK, [path], f"{kind}: {curve.points.shape[0]} points, k_max {curve.k_max:.6g}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optiks", description="Trajectory-constrained gradient waveform design")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", help="optimize a waveform for a trajectory")
    d.add_argument("--config", required=True)
    d.add_argument("--trajectory")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int)

    a = sub.add_parser("analyze", help="check limits, spectra, fidelity or PSF of a waveform")
    a.add_argument("waveform")
    a.add_argument("--check", action="append", required=True, choices=CHECKS)
    a.add_argument("--out")
    a.add_argument("--config")
    a.add_argument("--g-max", type=float)
    a.add_argument("--s-max", type=float)
    a.add_argument("--pns-model")
    a.add_argument("--p-max", type=float)
    a.add_argument("--bands")
    a.add_argument("--trajectory")
    a.add_argument("--t2star", type=float, default=np.inf)
    a.add_argument("--off-res", type=float, default=0.0)

    f = sub.add_parser("fit-atf", help="fit an acoustic transfer function")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True)

    g = sub.add_parser("gen", help="generate a trajectory or probe waveforms")
    g.add_argument("kind", choices=("spiral", "rosette", "cepi", "probes"))
    g.add_argument("--out", required=True)
    for name in ("fov", "res", "r_center", "r_edge", "r_y"):
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    g.add_argument("--interleaves", type=int)
    g.add_argument("--petals", type=int)
    g.add_argument("--axis", type=int, default=0)
    g.add_argument("--axes", type=int, default=3)
    g.add_argument("--f-lo", type=float, default=50.0)
    g.add_argument("--f-hi", type=float, default=2000.0)
    g.add_argument("--step", type=float, default=10.0)
    g.add_argument("--dur", type=float, default=0.12)
    g.add_argument("--amplitude", type=float, default=0.005)
    g.add_argument("--dt", type=float, default=4e-6)
    return ap


def run(argv=None) -> CommandOutcome:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "design":
            return cmd_design(args.config, args.trajectory, args.out, args.seed)
        if args.command == "analyze":
            return cmd_analyze(args.waveform, args.check, args.out, args.config, args.g_max,
                               args.s_max, args.pns_model, args.p_max, args.bands, args.trajectory,
                               args.t2star, args.off_res)
        if args.command == "fit-atf":
            return cmd_fit_atf(args.manifest, args.out)
        return cmd_gen(args.kind, args.out, args)
    except (InputError, formats.FormatError, GeometryError, LossError, DesignSpecError,
            AnalysisError, TypeError, ValueError, OSError) as exc:
        return CommandOutcome(EXIT_BAD_INPUT, [], f"error: {exc}")
    except SolverError as exc:
        return CommandOutcome(EXIT_FAIL, [], f"design failed: {exc}")


def main(argv=None) -> int:
    try:
        outcome = run(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_BAD_INPUT if exc.code else EXIT_OK
    stream = sys.stderr if outcome.code == EXIT_BAD_INPUT else sys.stdout
    print(outcome.summary, file=stream)
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())
