"""Command-line harness: simulate, build-db, fit-aps, train-mc, run, eval.

Outputs go to ``--out``, else ``$FPFUSE_OUT``, else ``./fpfuse-out``.  Every
command writes ``manifest-<command>[...].json``; each output file names its
manifest (CSV comment line, JSON ``manifest`` key, trace ``meta.manifest``).
Files are written atomically, and identical manifests give identical bytes.

Exit status: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from fpfuse.benchmark import crowdsource_maps, simulate_scenario
from fpfuse.config import Config
from fpfuse.crowdsourcing import smooth_segment
from fpfuse.eval import (
    RunManifest,
    compare_strategies,
    fixes_csv,
    read_column,
    read_csv_table,
    read_fixes,
    summary_csv,
)
from fpfuse.fai import STRATEGIES, train_mc
from fpfuse.fingerprinting import NoCandidatesError
from fpfuse.fusion import MODES, FaiEvaluator, fingerprint_wifi, run_pipeline
from fpfuse.mapping import FingerprintDatabase, MapSample, atomic_write_text, fit_aps
from fpfuse.traceio import GroundTruth, SensorTrace

log = logging.getLogger("fpfuse")

DEFAULT_OUT = "fpfuse-out"


class CliError(RuntimeError):
    """Runtime failure reported with exit status 1."""


def output_dir(arg: str | None) -> str:
    return arg or os.environ.get("FPFUSE_OUT") or DEFAULT_OUT


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _trace_files(paths: list[str]) -> list[str]:
    out = []
    for p in paths:
        _require(p, "trace path")
        if os.path.isdir(p):
            out += sorted(glob.glob(os.path.join(p, "*.jsonl")))
        else:
            out.append(p)
    if not out:
        raise CliError(f"no trace files in {', '.join(paths)}")
    return out


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _truth_for(trace_path: str) -> GroundTruth | None:
    p = os.path.join(os.path.dirname(trace_path), _stem(trace_path) + ".truth.csv")
    return GroundTruth.load_csv(p) if os.path.exists(p) else None


def _load_db(path: str, what: str) -> FingerprintDatabase:
    _require(path, what)
    try:
        return FingerprintDatabase.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read {what} {path}: {exc}") from None


def _manifest(args, cfg: Config, command: str, inputs: list[str], out: str, strategies=(), **options) -> RunManifest:
    return RunManifest(command, cfg.hash(), args.seed, list(strategies), list(inputs), out,
                       config=cfg.to_dict(), options=options)


def _write_manifest(m: RunManifest, out: str, name: str) -> str:
    m.save(os.path.join(out, name))
    return m.reference(name)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: Config) -> None:
    out = output_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    man = _manifest(args, cfg, "simulate", [], out)
    ref = _write_manifest(man, out, "manifest-simulate.json")
    sc = simulate_scenario(seed, cfg)
    w = sc.world
    world = {
        "manifest": ref,
        "seed": seed,
        "aps": [asdict(a) for a in w.aps],
        "dipoles": [asdict(d) for d in w.dipoles],
        "base_field": list(w.cfg.base_field),
        "area": [w.cfg.width, w.cfg.height],
    }
    atomic_write_text(os.path.join(out, "world.json"), json.dumps(world, indent=1, sort_keys=True) + "\n")
    for sub, items in (("survey", sc.survey), ("test", sc.tests)):
        d = os.path.join(out, sub)
        for tr, gt in items:
            tr.meta = {**tr.meta, "manifest": ref}
            tr.save(os.path.join(d, tr.trace_id + ".jsonl"))
            gt.save_csv(os.path.join(d, tr.trace_id + ".truth.csv"), ref)
    print(f"wrote {len(sc.survey)} survey and {len(sc.tests)} test traces to {out}")


def _sample_record(s: MapSample) -> str:
    return json.dumps({"p": list(s.p), "sigma": s.sigma, "features": s.features}, sort_keys=True,
                      separators=(",", ":"))


def cmd_build_db(args, cfg: Config) -> None:
    out = output_dir(args.out)
    files = _trace_files(args.traces)
    traces = [SensorTrace.load(f) for f in files]
    man = _manifest(args, cfg, "build-db", files, out)
    ref = _write_manifest(man, out, "manifest-build-db.json")
    maps = crowdsource_maps(traces, cfg)
    if not maps.selected:
        raise CliError("no survey segment passed selection; databases would be empty")
    maps.wifi.aps = {}  # AP parameters come from fit-aps
    maps.wifi.save(os.path.join(out, "db_wifi.json"), ref)
    maps.magnetic.save(os.path.join(out, "db_mag.json"), ref)
    atomic_write_text(os.path.join(out, "samples_wifi.jsonl"),
                      "".join(_sample_record(s) + "\n" for s in maps.wifi_samples))
    lines = [f"# manifest: {ref}\n", "trace,forward_end_error,backward_end_error,selected\n"]
    track_lines = [f"# manifest: {ref}\n", "trace,t,x,y,sigma\n"]
    for c in maps.candidates:
        ef, eb = c.end_errors()
        keep = c.trace_id in maps.selected
        lines.append(f"{c.trace_id},{float(ef)!r},{float(eb)!r},{int(keep)}\n")
        if keep:
            sm = smooth_segment(c)
            for k in range(len(sm)):
                vals = (sm.t[k], sm.p_sm[k, 0], sm.p_sm[k, 1], sm.sigma_sm[k])
                track_lines.append(",".join([c.trace_id, *(repr(float(v)) for v in vals)]) + "\n")
    atomic_write_text(os.path.join(out, "segments.csv"), "".join(lines))
    atomic_write_text(os.path.join(out, "tracks.csv"), "".join(track_lines))
    print(f"{len(maps.selected)}/{len(maps.candidates)} segments kept; "
          f"{len(maps.wifi)} WiFi and {len(maps.magnetic)} magnetic fingerprints")


def cmd_fit_aps(args, cfg: Config) -> None:
    out = output_dir(args.out)
    db = _load_db(args.db, "WiFi database")
    _require(args.samples, "sample file")
    samples = []
    with open(args.samples, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                samples.append(MapSample(tuple(r["p"]), float(r["sigma"]), {k: float(v) for k, v in r["features"].items()}))
    man = _manifest(args, cfg, "fit-aps", [args.db, args.samples], out)
    ref = _write_manifest(man, out, "manifest-fit-aps.json")
    db.aps = fit_aps(samples, sigma=cfg.mapping.ap_sigma, min_obs=cfg.mapping.ap_min_obs)
    db.save(os.path.join(out, "db_wifi.json"), ref)
    rows = [f"# manifest: {ref}\n", "ap,x,y,beta1,beta2,sigma_x,sigma_y,n_obs,rms_residual\n"]
    for k, a in sorted(db.aps.items()):
        sx, sy = (float(np.sqrt(a.covariance[i, i])) for i in (0, 1))
        vals = (a.x, a.y, a.beta1, a.beta2, sx, sy)
        rows.append(",".join([k, *(repr(float(v)) for v in vals), str(int(a.n_obs)), repr(float(a.rms_residual))]) + "\n")
    atomic_write_text(os.path.join(out, "aps.csv"), "".join(rows))
    print(f"fitted {len(db.aps)} access points")


def _read_tracks(path: str) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    header, rows = read_csv_table(_require(path, "track file"))
    tracks: dict[str, list] = {}
    for r in rows:
        tracks.setdefault(r[0], []).append([float(v) for v in r[1:4]])
    return {k: (np.array(v)[:, 0], np.array(v)[:, 1:3]) for k, v in tracks.items()}


def cmd_train_mc(args, cfg: Config) -> None:
    out = output_dir(args.out)
    db = _load_db(args.db_wifi, "WiFi database")
    tracks = _read_tracks(args.tracks)
    files = _trace_files(args.traces)
    man = _manifest(args, cfg, "train-mc", [args.db_wifi, args.tracks, *files], out)
    ref = _write_manifest(man, out, "manifest-train-mc.json")
    fcfg = cfg.fusion_config()
    ev = FaiEvaluator(db, cfg.strategy_for("ct"), fcfg)
    cols = {k: [] for k in ("ss", "sd", "wd", "error")}
    for f in files:
        tr = SensorTrace.load(f)
        if tr.trace_id not in tracks:
            continue
        tt, pp = tracks[tr.trace_id]
        for obs in tr.rss:
            k = int(np.argmin(np.abs(tt - obs.t)))
            if abs(tt[k] - obs.t) > 0.1:
                continue
            try:
                m, fai = fingerprint_wifi(obs, db, ev, fcfg)
            except NoCandidatesError:
                continue
            for s in ("ss", "sd", "wd"):
                cols[s].append(fai[s])
            cols["error"].append(float(np.linalg.norm(m.position - pp[k])))
    try:
        rho = train_mc(cols["ss"], cols["sd"], cols["wd"], cols["error"])
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise CliError(f"cannot train MC coefficients: {exc}") from None
    trained = cfg.with_rho(rho)
    res = {"manifest": ref, "rho": list(rho), "n_epochs": len(cols["error"]), "modality": "wifi"}
    atomic_write_text(os.path.join(out, "mc.json"), json.dumps(res, indent=1, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(out, "config-trained.json"), trained.dumps())
    print("rho_ss=%.4f rho_sd=%.4f rho_wd=%.4f from %d fixes" % (*rho, len(cols["error"])))


def cmd_run(args, cfg: Config) -> None:
    out = output_dir(args.out)
    mode = args.mode
    dbw = _load_db(args.db_wifi, "WiFi database")
    dbm = _load_db(args.db_mag, "magnetic database") if mode in ("dm", "dwm") else None
    files = _trace_files(args.traces)
    inputs = [args.db_wifi] + ([args.db_mag] if dbm is not None else [])
    man = _manifest(args, cfg, "run", inputs + files, out, [args.strategy], mode=mode)
    name = f"manifest-run-{mode}-{args.strategy}.json"
    ref = _write_manifest(man, out, name)
    runs = os.path.join(out, "runs")
    strat = cfg.strategy_for(args.strategy)
    for f in files:
        tr = SensorTrace.load(f)
        truth = _truth_for(f)
        res = run_pipeline(tr, dbw, dbm, strat, mode, cfg.fusion_config(), cfg.env, cfg.imu_noise, cfg.dr, truth)
        tag = f"{tr.trace_id}-{mode}-{args.strategy}"
        atomic_write_text(os.path.join(runs, f"epochs-{tag}.csv"), res.to_csv(ref))
        atomic_write_text(os.path.join(runs, f"fixes-{tag}.csv"), fixes_csv(res.fixes, ref))
        atomic_write_text(os.path.join(runs, f"summary-{tag}.csv"), summary_csv(res, tr.trace_id, ref))
        if res.error is not None:
            st = res.stats()
            print(f"{tr.trace_id} {mode}-{args.strategy}: rms {st.rms_m:.2f} m, max {st.max_m:.2f} m")
        else:
            print(f"{tr.trace_id} {mode}-{args.strategy}: {len(res.t)} epochs")


def cmd_eval(args, cfg: Config) -> None:
    out = output_dir(args.out)
    runs = args.runs or os.path.join(out, "runs")
    _require(runs, "run directory")
    mode = args.mode
    errors: dict[str, list] = {}
    files_used = []
    for s in STRATEGIES:
        paths = sorted(glob.glob(os.path.join(runs, f"epochs-*-{mode}-{s}.csv")))
        if not paths:
            continue
        traces = [os.path.basename(p)[len("epochs-"):-len(f"-{mode}-{s}.csv")] for p in paths]
        errors[s] = (traces, [read_column(p, "err") for p in paths])
        files_used += paths
    if not errors:
        raise CliError(f"no {mode} run outputs in {runs}")
    ref_traces = next(iter(errors.values()))[0]
    for s, (traces, _) in errors.items():
        if traces != ref_traces:
            raise CliError(f"strategy {s} was run on traces {traces}, expected {ref_traces}")
    series = {s: np.concatenate(v) for s, (_, v) in errors.items()}
    reference = "ct" if "ct" in series else next(iter(series))
    fixes = {}
    fix_paths = [os.path.join(runs, f"fixes-{t}-{mode}-{reference}.csv") for t in ref_traces]
    tabs = [read_fixes(p) for p in fix_paths if os.path.exists(p)]
    for mod in ("wifi", "magnetic"):
        parts = [t[mod] for t in tabs if mod in t]
        if parts:
            fixes[mod] = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    try:
        cmp = compare_strategies(series, fixes=fixes, reference=reference)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    man = _manifest(args, cfg, "eval", sorted(files_used), out, list(series), mode=mode)
    ref = _write_manifest(man, out, f"manifest-eval-{mode}.json")
    atomic_write_text(os.path.join(out, f"eval-{mode}-stats.csv"), cmp.stats_csv(ref))
    atomic_write_text(os.path.join(out, f"eval-{mode}-correlation.csv"), cmp.correlation_csv(ref))
    print(cmp.stats_csv(), end="")
    print(cmp.correlation_csv(), end="")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; missing keys take their defaults")
    common.add_argument("--out", help="output directory (default $FPFUSE_OUT or ./fpfuse-out)")
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fpfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic world with survey and test walks")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("build-db", parents=[common], help="crowdsource WiFi and magnetic databases")
    s.add_argument("--traces", nargs="+", required=True, help="survey trace files or directories")
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("fit-aps", parents=[common], help="estimate AP locations and path-loss parameters")
    s.add_argument("--db", required=True, help="WiFi database to extend")
    s.add_argument("--samples", required=True, help="samples_wifi.jsonl written by build-db")
    s.set_defaults(func=cmd_fit_aps)

    s = sub.add_parser("train-mc", parents=[common], help="fit MC coefficients on crowdsourced segments")
    s.add_argument("--db-wifi", required=True)
    s.add_argument("--tracks", required=True, help="tracks.csv written by build-db")
    s.add_argument("--traces", nargs="+", required=True, help="survey trace files or directories")
    s.set_defaults(func=cmd_train_mc)

    s = sub.add_parser("run", parents=[common], help="fuse test traces with one strategy")
    s.add_argument("--strategy", choices=STRATEGIES, required=True)
    s.add_argument("--mode", choices=MODES, required=True)
    s.add_argument("--traces", nargs="+", required=True, help="trace files or directories")
    s.add_argument("--db-wifi", default=None)
    s.add_argument("--db-mag", default=None)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("eval", parents=[common], help="compare strategies from run outputs")
    s.add_argument("--runs", default=None, help="directory of run outputs (default <out>/runs)")
    s.add_argument("--mode", choices=MODES, default="dwm")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run":
        # every mode initializes from a WiFi fix, so the WiFi database is always needed
        need = ["--db-wifi"] + (["--db-mag"] if args.mode != "dw" else [])
        given = {"--db-wifi": args.db_wifi, "--db-mag": args.db_mag}
        missing = [n for n in need if given[n] is None]
        if missing:
            print(f"fpfuse run: error: --mode {args.mode} requires {' and '.join(missing)}", file=sys.stderr)
            return 2
    try:
        cfg = Config.load(_require(args.config, "config file") if args.config else None)
        args.func(args, cfg)
    except CliError as exc:
        print(f"fpfuse: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"fpfuse: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
