"""Command-line front end.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage error, or a device that violates the hysteresis-free condition
    3  a required input file is missing
    4  malformed config or input file
    5  manifest digest mismatch or batch provenance failure
    6  noise calibration could not reach the target
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, aes, cpa, device, harness, plotting, power, reports

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_MALFORMED = 4
EXIT_DIGEST = 5
EXIT_UNACHIEVABLE = 6

OUT_DIR_ENV = "NCFET_CPA_OUT_DIR"

log = logging.getLogger("ncfet_cpa")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    path = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "ncfet_cpa_out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: str | Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"missing input: {path}", EXIT_MISSING)
    return path


def _fmt(value: float) -> str:
    return repr(float(f"{value:.12g}"))


# --- config resolution --------------------------------------------------------


def _resolve_config(args, *, default_preset: str = "desk"):
    overrides = {}
    if getattr(args, "config", None):
        config, overrides, _ = reports.load_config(_require(args.config))
    else:
        config = harness.preset(args.preset or default_preset)
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if getattr(args, "profiles", None):
        changes["profiles"] = tuple(p.strip() for p in args.profiles.split(",") if p.strip())
    if getattr(args, "noise_sigma", None) is not None:
        changes["noise"] = power.NoiseConfig(args.noise_sigma, config.noise.scale_with_profile, config.noise.seed_slot)
    config = dataclasses.replace(config, **changes).validate()
    for name in config.profiles:
        power.get_profile(name, overrides)
    return config, overrides


# --- device -----------------------------------------------------------------


def cmd_device(args) -> int:
    if args.device_cmd in ("series-cap", "gain"):
        pair = device.CapacitancePair(args.c_ferro, args.c_int)
        if args.device_cmd == "series-cap":
            print(f"C_NCFET = {_fmt(device.series_capacitance(pair))} F")
        else:
            print(f"A_V = {_fmt(device.voltage_gain(pair))}")
        return EXIT_OK
    curve = device.load_gain_curve(_require(args.curve))
    if args.device_cmd == "avg-gain":
        print(f"A_avg = {_fmt(device.average_gain(curve))}")
    else:
        print("v_gate,a_v")
        for vg, av in device.differential_gain(curve):
            print(f"{vg!r},{av!r}")
    return EXIT_OK


# --- profiles -----------------------------------------------------------------


def cmd_profiles(args) -> int:
    profiles = power.builtin_profiles()
    if args.export:
        out = _out_dir(args) / "profiles"
        out.mkdir(exist_ok=True)
        for p in profiles:
            power.save_profile(p, out / f"{p.name}.json")
        print(f"wrote {len(profiles)} profiles to {out}")
        return EXIT_OK
    print("name,t01_total,t10_total,t_clk,p_static,asymmetry,derived")
    for p in profiles:
        print(f"{p.name},{p.t01_total:.4e},{p.t10_total:.4e},{p.t_clk:.4e},{p.p_static:.4e},{p.asymmetry:.4f},{p.derived}")
    return EXIT_OK


# --- simulate / attack --------------------------------------------------------


def cmd_simulate(args) -> int:
    config, overrides = _resolve_config(args)
    out = _out_dir(args)
    t0 = time.perf_counter()
    if args.key:
        keys = [bytes.fromhex(args.key)]
    else:
        keys = harness.generate_keys(config.master_seed, config.key_count)
    texts = harness.texts_array(harness.generate_texts(config.master_seed, config.text_count))
    files, trace_index = [], {}
    for name in config.profiles:
        prof = power.get_profile(name, overrides)
        (out / "traces" / name).mkdir(parents=True, exist_ok=True)
        for k, key in enumerate(keys):
            ts = power.simulate_trace_set(key, texts, prof, config.noise, harness.noise_seed(config.master_seed, k))
            path = out / "traces" / name / f"key{k:02d}.csv"
            power.write_trace_csv(ts, path)
            files.append(path)
            trace_index[path.relative_to(out).as_posix()] = {
                "profile": name,
                "key": key.hex(),
                "round10_key": aes.expand_key(key)[aes.ROUNDS].tobytes().hex(),
                "clamped": ts.clamped,
            }
    reports.write_manifest(
        out, files, config=config, timings={"simulate": time.perf_counter() - t0}, extra={"traces": trace_index}
    )
    print(f"wrote {len(files)} trace files to {out / 'traces'}")
    return EXIT_OK


def _parse_indices(spec: str, n: int) -> np.ndarray:
    if spec == "all":
        return np.arange(n)
    if spec.startswith("first:"):
        return np.arange(min(int(spec.split(":", 1)[1]), n))
    if Path(spec).exists():
        spec = Path(spec).read_text().replace("\n", ",")
    return np.array([int(x) for x in spec.split(",") if x.strip()], dtype=np.intp)


def _find_manifest_entry(trace_path: Path, manifest_path: str | None):
    candidates = [Path(manifest_path)] if manifest_path else [
        d / reports.MANIFEST_NAME for d in trace_path.resolve().parents
    ]
    for m in candidates:
        if m.exists():
            doc = json.loads(m.read_text())
            try:
                rel = trace_path.resolve().relative_to(m.parent.resolve()).as_posix()
            except ValueError:
                continue
            entry = doc.get("traces", {}).get(rel)
            if entry:
                recorded = doc.get("files", {}).get(rel)
                if recorded and recorded != harness.file_digest(trace_path):
                    raise CliError(f"{trace_path} does not match the digest recorded in {m}", EXIT_DIGEST)
                return entry
    return None


def cmd_attack(args) -> int:
    trace_path = _require(args.traces)
    try:
        traces = power.read_trace_csv(trace_path)
        indices = _parse_indices(args.indices, len(traces))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_MALFORMED) from None
    result = cpa.attack(traces, indices)
    entry = _find_manifest_entry(trace_path, args.manifest)
    extra = {"traces_file": trace_path.name}
    if entry:
        extra["expected_master_key"] = entry["key"]
        extra["success"] = result.master_key.hex() == entry["key"]
    out_path = Path(args.out) if args.out else _out_dir(args) / "cpa_result.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cpa.write_result_json(result, out_path, top=args.top, extra=extra)
    print(f"traces used:   {result.trace_count}")
    print(f"round-10 key:  {result.recovered_key.hex()}")
    print(f"master key:    {result.master_key.hex()}")
    if entry:
        print(f"matches manifest key: {'yes' if extra['success'] else 'no'}")
    return EXIT_OK


# --- batches / experiment / calibrate ----------------------------------------


def _write_batches(config, out: Path) -> list[Path]:
    (out / "batches").mkdir(parents=True, exist_ok=True)
    paths = []
    for batch in harness.generate_batches(config.master_seed, config):
        path = out / "batches" / harness.batch_filename(batch.batch_id)
        harness.write_batch(batch, path)
        paths.append(path)
    return paths


def cmd_batches(args) -> int:
    config, _ = _resolve_config(args)
    out = _out_dir(args)
    paths = _write_batches(config, out)
    reports.write_manifest(out, paths, config=config)
    print(f"wrote {len(paths)} batch files to {out / 'batches'}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config, overrides = _resolve_config(args)
    out = _out_dir(args)
    timings = {}
    t0 = time.perf_counter()
    if args.batches_dir:
        batch_dir = _require(args.batches_dir)
        batch_files = [_require(batch_dir / harness.batch_filename(t)) for t in range(config.trial_count)]
    else:
        batch_files = _write_batches(config, out)
        batch_dir = out / "batches"
    timings["batches"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    result = harness.run_experiment(config, workers=args.workers, batch_dir=batch_dir, profile_overrides=overrides)
    timings["attacks"] = time.perf_counter() - t0
    written = reports.write_experiment(result, out)
    files = list(written.values())
    if not args.no_plots:
        files.append(plotting.plot_success_curves(result.curves(), out / "figures" / "success_curves.png", config.thresholds))
        files.append(plotting.plot_crossings(result.threshold_stats(), out / "figures" / "traces_to_success.png"))
    if not args.batches_dir:
        files += batch_files
    digests = {str(p): harness.file_digest(p) for p in batch_files}
    reports.write_manifest(
        out, files, config=config, timings=timings,
        extra={
            "batches_used": {name: sorted(digests.values()) for name in config.profiles},
            "clamped": result.clamped,
        },
    )
    _print_summary(result)
    return EXIT_OK


def _print_summary(result: harness.ExperimentResult) -> None:
    print("profile,threshold,avg_traces,std_traces,not_reached")
    for r in result.threshold_stats():
        if r.trial == "pooled":
            avg = "NA" if r.avg_traces is None else f"{r.avg_traces:.1f}"
            std = "NA" if r.std_traces is None else f"{r.std_traces:.1f}"
            print(f"{r.profile},{r.threshold:g},{avg},{std},{r.not_reached}")


def cmd_calibrate(args) -> int:
    config, overrides = _resolve_config(args)
    prof = power.get_profile(args.profile, overrides)
    try:
        cal = harness.calibrate_noise(
            prof, args.target, args.threshold, config,
            sigma_bounds=(0.0, args.sigma_max), tolerance=args.tolerance, workers=args.workers,
        )
    except harness.Unachievable as exc:
        raise CliError(str(exc), EXIT_UNACHIEVABLE) from None
    out = _out_dir(args)
    path = out / "calibration.json"
    path.write_text(json.dumps(cal.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"sigma = {cal.sigma!r} W  (mean crossing {cal.achieved:.1f} traces at {args.threshold:g}, target {args.target:g})")
    if not cal.monotone:
        print("warning: crossing was not monotone in sigma along the bisection", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    out = _require(args.out_dir or os.environ.get(OUT_DIR_ENV) or "ncfet_cpa_out")
    curve_dir = _require(out / "curves")
    curves = {p.stem: reports.read_curve_csv(p) for p in sorted(curve_dir.glob("*.csv"))}
    rows = reports.read_table_csv(_require(out / "traces_to_success.csv"))
    thresholds = sorted({r.threshold for r in rows})
    a = plotting.plot_success_curves(curves, out / "figures" / "success_curves.png", thresholds)
    b = plotting.plot_crossings(rows, out / "figures" / "traces_to_success.png")
    print(f"wrote {a} and {b}")
    return EXIT_OK


def cmd_verify(args) -> int:
    out = _require(args.out_dir or os.environ.get(OUT_DIR_ENV) or "ncfet_cpa_out")
    problems = reports.verify_manifest(out)
    for p in problems:
        print(p)
    if problems:
        return EXIT_DIGEST
    print("all files match the manifest")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *, profiles: bool = True, noise: bool = True) -> None:
    p.add_argument("--preset", choices=sorted(harness.PRESETS), help="experiment preset (default: desk)")
    p.add_argument("--config", help="JSON config file (overrides --preset)")
    p.add_argument("--seed", type=int, help="master seed")
    if profiles:
        p.add_argument("--profiles", help="comma-separated profile names, e.g. finfet,tfe4")
    if noise:
        p.add_argument("--noise-sigma", type=float, help="Gaussian noise sigma in W at the FinFET baseline")
    p.add_argument("--out-dir", help=f"output directory (env {OUT_DIR_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncfet-cpa", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("device", help="NCFET capacitance and gain arithmetic")
    dsub = p.add_subparsers(dest="device_cmd", required=True)
    for name in ("series-cap", "gain"):
        q = dsub.add_parser(name)
        q.add_argument("--c-ferro", type=float, required=True, help="ferroelectric capacitance (F, negative)")
        q.add_argument("--c-int", type=float, required=True, help="internal MOS capacitance (F)")
    for name in ("diff-gain", "avg-gain"):
        q = dsub.add_parser(name)
        q.add_argument("--curve", required=True, help="CSV with v_gate,v_internal columns")
    p.set_defaults(func=cmd_device)

    p = sub.add_parser("profiles", help="list or export the built-in technology profiles")
    p.add_argument("--export", action="store_true", help="write profile JSON files to OUT_DIR/profiles")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_profiles)

    p = sub.add_parser("simulate", help="write peak-power trace CSVs per key and profile")
    _add_common(p)
    p.add_argument("--key", help="attack this single key (hex) instead of the seeded key list")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="run CPA on a trace CSV")
    p.add_argument("--traces", required=True)
    p.add_argument("--indices", default="all", help="'all', 'first:N', comma list, or a file of indices")
    p.add_argument("--manifest", help="manifest holding the true key (default: search parent directories)")
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out", help="result JSON path (default OUT_DIR/cpa_result.json)")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("batches", help="generate permutation batch files")
    _add_common(p, profiles=False, noise=False)
    p.set_defaults(func=cmd_batches)

    p = sub.add_parser("experiment", help="success-rate experiment across profiles")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--batches-dir", help="reuse batch files from this directory")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("calibrate", help="fit the noise sigma to a traces-to-success target")
    _add_common(p, profiles=False)
    p.add_argument("--profile", default="finfet")
    p.add_argument("--target", type=float, required=True, help="target mean crossing in traces")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--tolerance", type=float, default=0.10)
    p.add_argument("--sigma-max", type=float, default=1e-4)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="re-render figures from an experiment directory")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="check output files against the manifest")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_verify)
    return parser


_NUMERIC_FLAGS = ("--c-ferro", "--c-int", "--noise-sigma")


def _attach_numeric_values(argv: list[str]) -> list[str]:
    # argparse reads "-2e-15" as an option flag, so glue values to their flags.
    out, i = [], 0
    while i < len(argv):
        if argv[i] in _NUMERIC_FLAGS and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_attach_numeric_values(sys.argv[1:] if argv is None else list(argv)))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except device.HysteresisViolation as exc:
        print(f"error: hysteresis violation: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (device.DeviceModelError, power.ProfileError, harness.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except (harness.ProvenanceError, reports.ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIGEST


if __name__ == "__main__":
    sys.exit(main())
