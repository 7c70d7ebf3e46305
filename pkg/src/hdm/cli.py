"""Command-line front end: ``hdm simulate | decompose | features | eval | report``.

Every command accepts ``--config FILE.json`` whose keys are the long flag
names (dashes or underscores); explicit flags override file values. Every
output embeds the effective configuration and the tool version so a run
can be repeated from any of its outputs.

Exit codes: 0 success, 2 usage, 3 parse/ingest, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .decomposer import DecomposerConfig, Decomposition, FitError, decompose
from .features import HdmFeatureSpec, WindowSpec, window_hdm, window_raw, window_tfd
from .harness import (
    SCENARIO_A,
    SCENARIO_B,
    EvalConfig,
    InsufficientDataError,
    ParseError,
    Recording,
    confusion_table,
    decompose_channels,
    dumps_report,
    fold_table,
    load_recording,
    load_signals,
    performance_table,
    run_scenario,
    save_recording,
)
from .kernel import BaseKernel
from .ml import ModelSpec, standard_models
from .signal_model import hdm_forward, reconstruct
from .synthetic import AtomRateBenchmark, simulate_glm, simulate_hdm

logger = logging.getLogger("hdm")

EXIT_OK, EXIT_USAGE, EXIT_INGEST, EXIT_NUMERIC = 0, 2, 3, 4
# keys never echoed: they only locate the config itself
_NOT_ECHOED = {"config", "func", "verbose"}


class UsageError(Exception):
    pass


def _echo(args: argparse.Namespace) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_ECHOED}
    return {"tool": "hdm", "version": __version__, "config": cfg}


def _header(args) -> str:
    return json.dumps(_echo(args), sort_keys=True)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _channels(spec: str | None, available) -> list[str]:
    if spec is None or spec == "all":
        return list(available)
    if spec == "A":
        return list(SCENARIO_A)
    if spec == "B":
        return list(SCENARIO_B)
    return _csv_list(spec)


def _decomposer_config(args) -> DecomposerConfig:
    return DecomposerConfig(
        xi=args.xi, xi_rel=args.xi_rel, L=args.L, max_seeds=args.max_seeds,
        n_starts=args.n_starts, center=args.center, seed_order=args.seed_order,
    )


def _window(args) -> WindowSpec:
    return WindowSpec(history=args.history, horizon=args.horizon, step=args.step, fs=args.fs)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    out = Path(args.out_dir)
    base = BaseKernel()
    truth: dict = {"model": args.model}
    if args.model == "hdm":
        atoms, y, noise = simulate_hdm(
            args.seed, K=args.atoms, duration=args.duration, fs=args.fs,
            snr_db=None if args.sigma2 is not None else args.snr_db,
            theta_eps=args.theta, sigma2=args.sigma2)
        rec = Recording({args.channel: y}, [], "sim")
        # noise-free model output, lagged-output term included
        clean = hdm_forward(atoms, replace(noise, sigma2=0.0), y, 0, base)
        truth.update(atoms=[a.to_dict() for a in atoms], noise=asdict(noise), base=base.to_dict(),
                     atom_sum=reconstruct(atoms, base, y).samples.tolist(), reconstruction=clean.samples.tolist())
    elif args.model == "glm":
        train, y = simulate_glm(args.seed, n_events=args.events, duration=args.duration, fs=args.fs,
                                rho=args.rho, sigma2=0.01 if args.sigma2 is None else args.sigma2)
        rec = Recording({args.channel: y}, [], "sim")
        truth.update(events=[list(e) for e in train.events], rho=args.rho)
    else:
        bench = AtomRateBenchmark(n_rounds=args.rounds, fs=args.fs)
        names = _channels(args.channels, [args.channel])
        signals, markers, atoms = bench.generate(args.seed, names)
        rec = Recording(signals, markers, "sim")
        truth.update(benchmark=asdict(bench), atoms={ch: [a.to_dict() for a in v] for ch, v in atoms.items()})
    head = _header(args)
    out.mkdir(parents=True, exist_ok=True)
    save_recording(rec, out / "signals.csv", out / "markers.csv", comment=head)
    truth["run"] = _echo(args)
    _write(out / "truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s", out)
    return EXIT_OK


def cmd_decompose(args) -> int:
    signals = load_signals(args.signals)
    names = _channels(args.channels, signals)
    missing = [n for n in names if n not in signals]
    if missing:
        raise ParseError(args.signals, None, f"missing channel(s): {', '.join(missing)}")
    decs = decompose_channels({n: signals[n] for n in names}, _decomposer_config(args), args.threads)
    out = Path(args.out_dir)
    echo = _echo(args)
    for name, dec in decs.items():
        body = dec.to_dict()
        body.update(channel=name, run=echo)
        _write(out / f"{name}.decomposition.json", json.dumps(body, indent=2, sort_keys=True) + "\n")
        lines = [f"# {_header(args)}", "iteration,residual_sse"]
        lines += [f"{i},{v!r}" for i, v in enumerate(dec.residual_curve)]
        _write(out / f"{name}.residual.csv", "\n".join(lines) + "\n")
        logger.info("%s: %d atoms, converged=%s", name, len(dec.atoms), dec.converged)
    return EXIT_OK


def cmd_features(args) -> int:
    rec = load_recording(args.signals, args.markers)
    names = _channels(args.channels, rec.channels)
    signals = rec.select(names)
    spec = _window(args)
    if args.scheme == "raw":
        fm = window_raw(signals, spec, rec.markers)
    elif args.scheme == "tfd":
        fm = window_tfd(signals, spec, markers=rec.markers)
    else:
        if args.decompositions:
            decs = {n: Decomposition.from_dict(json.loads((Path(args.decompositions) / f"{n}.decomposition.json").read_text()))
                    for n in names}
        else:
            decs = decompose_channels(signals, _decomposer_config(args), args.threads)
        fm = window_hdm(decs, signals, spec, HdmFeatureSpec(args.k_max, args.causal), rec.markers)
    _write(Path(args.out), fm.to_csv(comment=_header(args)))
    return EXIT_OK


def _models(args) -> list[ModelSpec]:
    specs = standard_models(args.seed)
    if args.models == "all":
        return specs
    wanted = _csv_list(args.models)
    by_label = {s.label: s for s in specs}
    unknown = [w for w in wanted if w not in by_label]
    if unknown:
        raise UsageError(f"unknown model(s) {unknown}; choose from {list(by_label)}")
    return [by_label[w] for w in wanted]


def _recordings(args) -> list[Recording]:
    recs = []
    if args.data_dir:
        d = Path(args.data_dir)
        for sig in sorted(d.glob("*.signals.csv")):
            subject = sig.name[: -len(".signals.csv")]
            recs.append(load_recording(sig, d / f"{subject}.markers.csv", subject))
    for pair in args.recording or []:
        sig, mk = pair
        recs.append(load_recording(sig, mk))
    if not recs:
        raise UsageError("no recordings given (use --recording SIGNALS MARKERS or --data-dir)")
    return recs


def cmd_eval(args) -> int:
    recs = _recordings(args)
    schemes = tuple(_csv_list(args.features))
    bad = [s for s in schemes if s not in ("raw", "tfd", "hdm")]
    if bad:
        raise UsageError(f"unknown feature scheme(s) {bad}")
    cfg = EvalConfig(
        channels=tuple(_channels(args.channels, recs[0].channels)), schemes=schemes, models=_models(args),
        window=_window(args), seed=args.seed, min_train_rows=args.min_train_rows, trailing=args.trailing,
        refit_every=args.refit_every, fold_rows=args.fold_rows, decomposer=_decomposer_config(args),
        hdm=HdmFeatureSpec(args.k_max, args.causal), threads=args.threads)
    report = run_scenario(recs, cfg)
    report["run"] = _echo(args)
    out = Path(args.out_dir)
    head = f"# {_header(args)}\n"
    _write(out / "report.json", dumps_report(report) + "\n")
    _write(out / "table.txt", head + performance_table(report))
    _write(out / "confusion.csv", head + confusion_table(report))
    _write(out / "folds.csv", head + fold_table(report))
    for s in report["subjects"]:
        _write(out / f"confusion_{s['subject']}.csv", head + confusion_table(report, s["subject"]))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ParseError(args.report, None, str(err)) from None
    if report.get("format") != "hdm-scenario-report":
        raise ParseError(args.report, None, "not a scenario report")
    scope = args.scope
    text = performance_table(report, scope) if args.kind == "table" else confusion_table(report, scope)
    text = f"# {_header(args)}\n" + text
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_decomposer(p):
    g = p.add_argument_group("decomposer")
    g.add_argument("--xi", type=float, default=None, help="absolute convergence radius (overrides --xi-rel)")
    g.add_argument("--xi-rel", type=float, default=0.02, help="radius as a fraction of the centred energy")
    g.add_argument("--L", type=int, default=50, help="maximum number of atoms")
    g.add_argument("--max-seeds", type=int, default=5)
    g.add_argument("--n-starts", type=int, default=3)
    g.add_argument("--center", choices=("median", "mean", "none"), default="median")
    g.add_argument("--seed-order", choices=("amplitude", "chronological"), default="amplitude")


def _add_window(p):
    g = p.add_argument_group("windows")
    g.add_argument("--history", type=float, default=60.0)
    g.add_argument("--horizon", type=float, default=2.0)
    g.add_argument("--step", type=float, default=2.0)
    g.add_argument("--fs", type=float, default=10.0)
    g.add_argument("--k-max", type=int, default=8)
    g.add_argument("--causal", action="store_true", help="drop atoms whose fit window reaches the horizon")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdm", description="Hemodynamic decomposition toolkit")
    p.add_argument("--version", action="version", version=f"hdm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic recording and its ground truth")
    s.add_argument("--config")
    s.add_argument("--model", choices=("hdm", "glm", "benchmark"), default="hdm")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--atoms", type=int, default=5)
    s.add_argument("--duration", type=float, default=120.0)
    s.add_argument("--fs", type=float, default=10.0)
    s.add_argument("--snr-db", type=float, default=15.0)
    s.add_argument("--sigma2", type=float, default=None, help="noise variance (overrides --snr-db)")
    s.add_argument("--theta", type=float, default=0.3, help="lagged-output coefficient (hdm)")
    s.add_argument("--rho", type=float, default=0.5, help="AR(1) noise coefficient (glm)")
    s.add_argument("--events", type=int, default=6, help="stimulus events (glm)")
    s.add_argument("--rounds", type=int, default=3, help="block rounds (benchmark)")
    s.add_argument("--channel", default="AFpz")
    s.add_argument("--channels", default=None, help="benchmark channels: A, B or a comma list")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("decompose", help="decompose every selected channel of a signal file")
    d.add_argument("--config")
    d.add_argument("--signals", required=True)
    d.add_argument("--channels", default="all")
    d.add_argument("--out-dir", required=True)
    d.add_argument("--threads", type=int, default=1)
    _add_decomposer(d)
    d.set_defaults(func=cmd_decompose)

    f = sub.add_parser("features", help="build a labelled feature matrix")
    f.add_argument("--config")
    f.add_argument("--signals", required=True)
    f.add_argument("--markers", required=True)
    f.add_argument("--scheme", choices=("raw", "tfd", "hdm"), required=True)
    f.add_argument("--channels", default="all")
    f.add_argument("--decompositions", default=None, help="directory of saved decompositions (hdm)")
    f.add_argument("--out", required=True)
    f.add_argument("--threads", type=int, default=1)
    _add_window(f)
    _add_decomposer(f)
    f.set_defaults(func=cmd_features)

    e = sub.add_parser("eval", help="sliding-window evaluation over recordings")
    e.add_argument("--config")
    e.add_argument("--recording", nargs=2, action="append", metavar=("SIGNALS", "MARKERS"))
    e.add_argument("--data-dir", default=None, help="directory of <subject>.signals.csv / .markers.csv pairs")
    e.add_argument("--channels", default="B", help="A, B, all or a comma list")
    e.add_argument("--features", default="raw,tfd,hdm")
    e.add_argument("--models", default="all", help="comma list of model labels or 'all'")
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--min-train-rows", type=int, default=30)
    e.add_argument("--trailing", type=int, default=None)
    e.add_argument("--refit-every", type=int, default=1)
    e.add_argument("--fold-rows", type=int, default=30)
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--out-dir", required=True)
    _add_window(e)
    _add_decomposer(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render a saved scenario report")
    r.add_argument("--config")
    r.add_argument("--report", required=True)
    r.add_argument("--kind", choices=("table", "confusion"), default="table")
    r.add_argument("--scope", default="aggregate", help="'aggregate' or a subject id")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices[name]


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    sub = _subparser(parser, known.command) if known.command in _subcommands(parser) else None
    if known.config and sub is not None:
        try:
            cfg = json.loads(Path(known.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            parser.error(f"cannot read config {known.config}: {err}")
        # accept a whole output file, a bare echo, or a plain mapping
        if isinstance(cfg, dict) and "run" in cfg:
            cfg = cfg["run"]
        if isinstance(cfg, dict) and cfg.get("tool") == "hdm":
            cfg = cfg["config"]
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        if cfg.get("command", known.command) != known.command:
            parser.error(f"config is for '{cfg['command']}', not '{known.command}'")
        values = {k.replace("-", "_"): v for k, v in cfg.items() if k != "command"}
        unknown = sorted(set(values) - {a.dest for a in sub._actions})
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        for a in sub._actions:
            if a.dest in values:
                a.required = False
        if isinstance(values.get("recording"), list):
            values["recording"] = [list(p) for p in values["recording"]]
        sub.set_defaults(**values)
    return parser.parse_args(argv)


def _subcommands(parser: argparse.ArgumentParser):
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as err:
        if isinstance(err, (ParseError, InsufficientDataError)):
            print(f"hdm: {err}", file=sys.stderr)
            return EXIT_INGEST
        print(f"hdm: usage: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, OSError) as err:
        print(f"hdm: input: {err}", file=sys.stderr)
        return EXIT_INGEST
    except (FitError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as err:
        print(f"hdm: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
