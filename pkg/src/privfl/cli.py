"""Command-line entry point.

Subcommands:
    run              train the configured methods and write metrics CSVs
    chart            turn a metrics directory into the two SVG charts
    accountant       print the cumulative privacy spend per round as CSV
    keygen-demo      run the key ceremony and show where key material lands
    secure-agg-demo  encrypted average of random vectors vs the plaintext one

Log level comes from the PRIVFL_LOG_LEVEL environment variable (DEBUG, INFO,
WARNING, ...; default WARNING).
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import accountant as acct
from . import bfv, charts, config as config_mod, metrics, orchestrator, secure_agg
from .errors import ConfigError, ProtocolError
from .model_core import ModelParams
from .orchestrator import METHODS, SECURE_MODES, TRANSPORTS
from .transport import close_network, loopback_network, tcp_network

log = logging.getLogger("privfl")

RUN_INFO_NAME = "run_info.ini"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privfl",
        description="Federated training with record-level DP and encrypted aggregation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train per the config file and write metrics")
    p_run.add_argument("--config", required=True, help="experiment INI file")
    p_run.add_argument("--seed", type=int, help="run only this seed")
    p_run.add_argument("--method", choices=METHODS, help="run only this method")
    p_run.add_argument("--out", help="output directory (overrides the config)")
    p_run.add_argument("--transport", choices=TRANSPORTS, help="override the transport")
    p_run.add_argument("--secure", choices=SECURE_MODES, help="override the aggregation mode")

    p_chart = sub.add_parser("chart", help="render SVG charts from metrics CSVs")
    p_chart.add_argument("--out", default="results", help="directory with metrics_*.csv")

    p_acct = sub.add_parser("accountant", help="cumulative epsilon per round, as CSV")
    p_acct.add_argument("--q", type=float, required=True, help="Poisson sampling probability")
    p_acct.add_argument("--sigma", type=float, required=True, help="noise multiplier")
    p_acct.add_argument("--delta", type=float, default=1e-4)
    p_acct.add_argument("--rounds", type=int, required=True)
    p_acct.add_argument("--out", help="write the table here instead of stdout")

    p_key = sub.add_parser("keygen-demo", help="key ceremony and key placement audit")
    p_key.add_argument("--hospitals", type=int, default=3)
    p_key.add_argument("--seed", type=int, default=0)
    p_key.add_argument("--transport", choices=TRANSPORTS, default="loopback")

    p_agg = sub.add_parser("secure-agg-demo", help="encrypted vs plaintext averaging")
    p_agg.add_argument("--hospitals", type=int, default=3)
    p_agg.add_argument("--length", type=int, default=10_000)
    p_agg.add_argument("--seed", type=int, default=0)
    p_agg.add_argument("--transport", choices=TRANSPORTS, default="loopback")
    return parser


def _cmd_run(args) -> int:
    try:
        cfg = config_mod.load_experiment(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    methods = (args.method,) if args.method else cfg.methods
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    out_dir = Path(args.out if args.out else cfg.out)
    shards, test_set = config_mod.build_datasets(cfg)
    log.info("dataset: %d shards of %d, %d test records",
             len(shards), len(shards[0]), len(test_set))

    all_records: list[metrics.MetricsRecord] = []
    failure: ProtocolError | None = None
    for method in methods:
        run_cfg = cfg.run_config(method)
        if args.transport:
            run_cfg = replace(run_cfg, transport=args.transport)
        if args.secure:
            run_cfg = replace(run_cfg, secure=args.secure)
        method_records: list[metrics.MetricsRecord] = []
        try:
            for seed in seeds:
                result = orchestrator.run(run_cfg, shards, test_set, seed)
                method_records.extend(metrics.records_from_run(result))
                last = result.records[-1] if result.records else None
                log.info(
                    "%s seed %d: %d rounds (%s)%s", method, seed,
                    len(result.records), result.stop_reason,
                    f", accuracy {last.test_accuracy:.3f}" if last else "",
                )
        except ProtocolError as exc:
            failure = exc
            log.error("%s failed mid-run: %s", method, exc)
        if method_records:
            metrics.write_metrics_csv(out_dir / f"metrics_{method}.csv", method_records)
            all_records.extend(method_records)
        if failure is not None:
            break
    if all_records:
        metrics.write_summary_csv(out_dir / "summary.csv", metrics.summarize(all_records))
        metrics.write_timings_csv(out_dir / "timings.csv", all_records)
        _write_run_info(out_dir, cfg, methods)
    if failure is not None:
        print(f"error: aggregation protocol failure: {failure}", file=sys.stderr)
        return 1
    return 0


def _write_run_info(out_dir: Path, cfg, methods) -> None:
    """Caption metadata for `chart`: which delta the DP methods used."""
    deltas = sorted({cfg.run_config(m).dp.delta for m in methods if m != "c"})
    info = configparser.ConfigParser()
    info["run"] = {
        "methods": " ".join(methods),
        "hospitals": str(cfg.hospitals),
        "delta": " ".join(repr(d) for d in deltas),
    }
    with open(out_dir / RUN_INFO_NAME, "w") as fh:
        info.write(fh)


def _read_run_delta(out_dir: Path) -> float | None:
    info_path = out_dir / RUN_INFO_NAME
    if not info_path.is_file():
        return None
    info = configparser.ConfigParser()
    info.read(info_path)
    raw = info.get("run", "delta", fallback="").split()
    return float(raw[0]) if raw else None


def _cmd_chart(args) -> int:
    out_dir = Path(args.out)
    files = sorted(
        out_dir.glob("metrics_*.csv"),
        key=lambda p: (METHODS.index(p.stem[8:]) if p.stem[8:] in METHODS else 99, p.name),
    )
    if not files:
        print(f"error: no metrics_*.csv files in {out_dir}", file=sys.stderr)
        return 1
    records: list[metrics.MetricsRecord] = []
    for f in files:
        records.extend(metrics.read_metrics_csv(f))
    rows = metrics.summarize(records)
    delta = _read_run_delta(out_dir)
    charts.chart_accuracy(rows, out_dir / "accuracy_vs_epoch.svg", delta)
    print(f"wrote {out_dir / 'accuracy_vs_epoch.svg'}")
    try:
        charts.chart_privacy(rows, out_dir / "privacy_vs_epoch.svg", delta)
        print(f"wrote {out_dir / 'privacy_vs_epoch.svg'}")
    except ValueError:
        log.info("no DP methods in the metrics; skipping the privacy chart")
    return 0


def _cmd_accountant(args) -> int:
    try:
        schedule = acct.epsilon_schedule(args.q, args.sigma, args.delta, args.rounds)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    lines = ["round,epsilon_hat"]
    lines += [f"{t},{repr(float(e))}" for t, e in enumerate(schedule, start=1)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _make_network(transport: str, hospitals: int):
    return (tcp_network if transport == "tcp" else loopback_network)(hospitals)


def _cmd_keygen_demo(args) -> int:
    if args.hospitals < 1:
        print("error: need at least one hospital", file=sys.stderr)
        return 2
    endpoints = _make_network(args.transport, args.hospitals)
    try:
        session = secure_agg.SecureAggregationSession.create(
            endpoints, bfv.EncryptionParams(), seed=args.seed
        )
        print(f"key ceremony over {args.transport} with {args.hospitals} hospitals")
        server = session.server
        print(f"  server:     public key {'present' if server.public_key else 'MISSING'}, "
              "secret key absent by construction")
        secure_agg.assert_no_secret_material(server)
        print("  server state audited: no secret key material found")
        for node in session.hospitals:
            print(f"  hospital {node.hospital_id}: public key "
                  f"{'present' if node.public_key else 'MISSING'}, secret key "
                  f"{'present' if node.secret_key else 'MISSING'}")
    finally:
        close_network(endpoints)
    return 0


def _cmd_secure_agg_demo(args) -> int:
    if args.hospitals < 1 or args.length < 1:
        print("error: hospitals and length must be >= 1", file=sys.stderr)
        return 2
    endpoints = _make_network(args.transport, args.hospitals)
    try:
        session = secure_agg.SecureAggregationSession.create(
            endpoints, bfv.EncryptionParams(), seed=args.seed
        )
        rng = np.random.default_rng(args.seed)
        shapes = (("values", (args.length,)),)
        models = [
            ModelParams(values=rng.uniform(-2.0, 2.0, args.length), shapes=shapes)
            for _ in range(args.hospitals)
        ]
        aggregated = session.aggregate(models)
        plain = np.mean([m.values for m in models], axis=0)
        gap = float(np.max(np.abs(aggregated.values - plain)))
        bound = 5e-4
        print(f"averaged {args.hospitals} vectors of length {args.length} "
              f"over {args.transport}")
        print(f"  max |encrypted - plaintext| = {gap:.3e} (bound {bound:.0e})")
        if gap > bound:
            print("error: quantization bound violated", file=sys.stderr)
            return 1
    finally:
        close_network(endpoints)
    return 0


def main(argv=None) -> int:
    level = os.environ.get("PRIVFL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "chart": _cmd_chart,
        "accountant": _cmd_accountant,
        "keygen-demo": _cmd_keygen_demo,
        "secure-agg-demo": _cmd_secure_agg_demo,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
