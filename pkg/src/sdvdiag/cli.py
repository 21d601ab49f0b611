"""``sdvdiag`` command line.

Every command works on an output directory (``--out``, default
``./sdvdiag-out``) holding the persistent telemetry store
(``store.sdvt``) and the artifacts of earlier stages. Intermediate
artifacts are reused only while they match the current store contents.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .anomaly import (
    Anomaly,
    LabeledDataset,
    evaluate_detector,
    evaluate_policy,
    make_labeled_corpus,
    suggest_labels,
    train_selector,
)
from .anomaly.detectors import POOL_ORDER
from .causal import CausalModel
from .config import EngineConfig
from .exceptions import InsufficientHistory, MalformedRecord, SDVDiagError
from .pipeline import DiagnosisEngine
from .simulator import DEFAULT_START_MS, FaultSpec, Topology, simulate
from .telemetry import SeriesKey, read_records, record_sort_key, write_records

log = logging.getLogger("sdvdiag")

STORE_FILE = "store.sdvt"
ANOMALIES_FILE = "anomalies.json"
CAUSAL_TSV = "causal_edges.tsv"
CAUSAL_META = "causal_model.json"


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


class Workspace:
    def __init__(self, out: Path, config: EngineConfig):
        self.out = Path(out)
        self.config = config

    def path(self, name) -> Path:
        return self.out / name

    def engine(self, config=None) -> DiagnosisEngine:
        engine = DiagnosisEngine(config or self.config)
        store = self.path(STORE_FILE)
        if store.exists():
            engine.ingest(read_records(store))
        return engine

    def save_store(self, engine):
        self.out.mkdir(parents=True, exist_ok=True)
        write_records(self.path(STORE_FILE), engine.store.records())

    def write(self, name, text) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return p

    # -- cached stages ---------------------------------------------------
    def detect(self, engine, store_hash) -> list:
        found = engine.detect()
        doc = {
            "store_hash": store_hash,
            "detectors": {k.label: {"detector": n, "params": p}
                          for k, (n, p) in sorted(engine.detector_choice.items())},
            "anomalies": [a.to_dict() for a in sorted(
                found, key=lambda a: (a.timestamp, a.series_key, a.detector))],
        }
        self.write(ANOMALIES_FILE, _json(doc))
        return found

    def ensure_anomalies(self, engine, store_hash):
        p = self.path(ANOMALIES_FILE)
        if p.exists():
            doc = json.loads(p.read_text(encoding="utf-8"))
            if doc.get("store_hash") == store_hash:
                engine.anomalies.add(Anomaly.from_dict(d) for d in doc["anomalies"])
                return
        self.detect(engine, store_hash)

    def discover(self, engine, store_hash) -> CausalModel:
        model = engine.discover()
        self.write(CAUSAL_TSV, model.to_edge_list())
        meta = {
            "store_hash": store_hash,
            "method": model.method,
            "params": dict(model.params),
            "fitted_on_version": model.fitted_on_version,
            "version": model.version,
        }
        self.write(CAUSAL_META, _json(meta))
        return model

    def ensure_causal(self, engine, store_hash) -> CausalModel:
        tsv, meta = self.path(CAUSAL_TSV), self.path(CAUSAL_META)
        if tsv.exists() and meta.exists():
            m = json.loads(meta.read_text(encoding="utf-8"))
            if m.get("store_hash") == store_hash:
                engine.causal_model = CausalModel.from_edge_list(
                    tsv.read_text(encoding="utf-8"), method=m["method"], params=m["params"],
                    fitted_on_version=m["fitted_on_version"], version=m["version"])
                return engine.causal_model
        return self.discover(engine, store_hash)

    def fused(self, engine):
        store_hash = engine.store.state_hash()
        engine.build_graph()
        self.ensure_causal(engine, store_hash)
        return engine.fuse(), store_hash


# --------------------------------------------------------------------------
# commands

def cmd_simulate(args, ws: Workspace):
    sc = ws.config.simulation
    topo = Topology(sc.workers, sc.stations_per_worker, sc.vehicles)
    horizon = args.horizon if args.horizon is not None else sc.horizon_s
    seed = args.seed if args.seed is not None else sc.seed
    rate = args.rate if args.rate is not None else sc.request_rate
    fault_text = args.fault or sc.fault
    fault = None
    if fault_text:
        onset = args.onset if args.onset is not None else sc.onset_s
        magnitude = args.magnitude if args.magnitude is not None else sc.magnitude
        fault = FaultSpec.parse(
            fault_text, magnitude=magnitude,
            onset_ms=None if onset is None else DEFAULT_START_MS + int(onset) * 1000)
    sim = simulate(topo, horizon, rate, seed, fault)
    paths = sim.write(ws.out)
    print(f"simulated {len(sim.spans)} spans and {len(sim.metrics)} metric samples")
    for p in paths.values():
        print(p)


def _read_all(files):
    """Records from every file; on a malformed line, returns what came before it."""
    records = []
    for f in files:
        try:
            for rec in read_records(f):
                records.append(rec)
        except MalformedRecord as exc:
            return records, MalformedRecord(f"{f}: {exc}")
    return records, None


def cmd_replay(args, ws: Workspace):
    missing = [f for f in args.files if not Path(f).is_file()]
    if missing:
        raise FileNotFoundError(f"no such file: {missing[0]}")
    engine = ws.engine()
    records, error = _read_all(args.files)
    records.sort(key=record_sort_key)
    prev = None
    n = 0
    for rec in records:
        if args.speed > 0 and prev is not None:
            gap = rec.timestamp - prev
            if gap > 0:
                time.sleep(gap / 1000.0 / args.speed)
        prev = rec.timestamp
        n += bool(engine.ingest([rec]))
    ws.save_store(engine)
    print(f"ingested {n} records; store holds {len(engine.store)}")
    if error is not None:
        raise error


def cmd_graph_build(args, ws: Workspace):
    engine = ws.engine()
    graph = engine.build_graph()
    ws.write("dependency.dot", graph.to_dot())
    ws.write("dependency.json", _json(graph.to_dict()))
    print(f"dependency graph v{graph.version}: {len(graph.nodes)} nodes, {len(graph.edges)} edges")


def cmd_detect(args, ws: Workspace):
    config = ws.config.with_overrides(anomaly={"detector": args.detector, "policy": args.policy})
    engine = ws.engine(config)
    found = ws.detect(engine, engine.store.state_hash())
    print(f"{len(found)} anomalies in {len({a.series_key for a in found})} series")


def cmd_discover(args, ws: Workspace):
    config = ws.config.with_overrides(causal={
        "max_lag": args.max_lag, "weight_threshold": args.threshold, "window_ms": args.window_ms})
    engine = ws.engine(config)
    engine.build_graph()
    model = ws.discover(engine, engine.store.state_hash())
    print(f"{len(model.edges)} causal edges")


def cmd_fuse(args, ws: Workspace):
    engine = ws.engine()
    graph, _ = ws.fused(engine)
    ws.write("extended.dot", graph.to_dot())
    ws.write("extended.json", _json(graph.to_dict()))
    print(f"extended graph: {len(graph.owners)} metric nodes, {len(graph.causal_edges)} causal edges "
          f"({graph.dropped} pruned)")


def cmd_analyze(args, ws: Workspace):
    config = ws.config.with_overrides(walk={
        "seed": args.seed, "order": args.order, "walks": args.walks, "steps": args.steps})
    engine = ws.engine(config)
    graph, store_hash = ws.fused(engine)
    ws.ensure_anomalies(engine, store_hash)
    trigger = "manual"
    if args.at is None:
        t = engine.now
    elif args.at == "auto":
        t = engine.auto_trigger()
        if t is None:
            print("no anomaly exceeds the automatic trigger threshold")
            return 0
        trigger = "automatic"
    else:
        t = int(args.at)
    result = engine.analyze(t, trigger=trigger, out_dir=ws.path("incidents"), n_jobs=args.jobs,
                            mode=args.mode, anomaly=args.anomaly, top_k=args.top_k,
                            incident_id=args.incident_id, timeframe_ms=args.timeframe_ms)
    if result.note:
        print(result.note)
    for i, c in enumerate(result.ranking, start=1):
        if i > 10:
            break
        print(f"{i:2d}. {c.node}  count={c.count}  score={c.score:.4f}")
    print(result.paths["ranking"].parent)


def cmd_train_selector(args, ws: Workspace):
    if args.corpus:
        corpus = LabeledDataset.load(args.corpus)
    else:
        corpus = make_labeled_corpus(n_per_class=args.synthetic, seed=args.seed)
    policy = train_selector(corpus, ws.config.anomaly.thresholds())
    out = Path(args.output) if args.output else ws.path("selector_policy.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    policy.save(out)
    sel = float(evaluate_policy(corpus, policy).mean())
    fixed = {n: float(evaluate_detector(corpus, n).mean()) for n in POOL_ORDER}
    best = max(POOL_ORDER, key=lambda n: fixed[n])
    print(f"selector mean F1 {sel:.4f}; best fixed detector {best} {fixed[best]:.4f}")
    for bucket in sorted(policy.mapping):
        print(f"  {bucket}: {policy.mapping[bucket]} {policy.params.get(bucket, {})}")
    print(out)


def cmd_suggest_labels(args, ws: Workspace):
    engine = ws.engine()
    wanted = {SeriesKey.parse(s) for s in args.series} if args.series else None
    ds = LabeledDataset(name="suggested")
    for series in engine.store.all_series():
        if wanted is not None and series.key not in wanted:
            continue
        try:
            intervals = suggest_labels(series, min_votes=args.min_votes)
        except InsufficientHistory as exc:
            log.info("skipping %s: %s", series.key.label, exc)
            continue
        ds.add(series, intervals, "suggested")
    out = Path(args.output) if args.output else ws.path("suggested_labels")
    ds.save(out)
    n = sum(len(e.intervals) for e in ds)
    print(f"{n} suggested intervals over {len(ds)} series")
    print(out)


def cmd_export_graph(args, ws: Workspace):
    engine = ws.engine()
    if args.graph == "dependency":
        graph = engine.build_graph()
    else:
        graph, _ = ws.fused(engine)
    text = graph.to_dot() if args.format == "dot" else _json(graph.to_dict())
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# parser

def _fault(text):
    try:
        FaultSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return text


def _at(text):
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("--at takes a timestamp in ms or 'auto'") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand from resetting values given before it
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="YAML config file (default: $SDVDIAG_CONFIG)")
    common.add_argument("--out", default=argparse.SUPPRESS,
                        help="artifact directory (default: ./sdvdiag-out)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="sdvdiag", parents=[common],
                                description="Root-cause diagnosis for microservice telemetry.")
    p.add_argument("--version", action="version", version=f"sdvdiag {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", parents=[common], help="generate fleet telemetry")
    s.add_argument("--seed", type=int)
    s.add_argument("--fault", type=_fault, help="e.g. cpu:B1@worker1")
    s.add_argument("--horizon", type=int, help="seconds of simulated time")
    s.add_argument("--rate", type=float, help="mean requests per second")
    s.add_argument("--magnitude", type=float)
    s.add_argument("--onset", type=int, help="fault onset in seconds from the start")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("replay", parents=[common], help="ingest .sdvt files into the store")
    s.add_argument("files", nargs="+")
    s.add_argument("--speed", type=float, default=0.0, help="0 replays as fast as possible")
    s.set_defaults(func=cmd_replay)

    g = sub.add_parser("graph", help="dependency graph commands")
    gsub = g.add_subparsers(dest="graph_command", required=True, metavar="ACTION")
    s = gsub.add_parser("build", parents=[common], help="build the dependency graph")
    s.set_defaults(func=cmd_graph_build)

    s = sub.add_parser("detect", parents=[common], help="run anomaly detection")
    s.add_argument("--detector", choices=POOL_ORDER)
    s.add_argument("--policy", help="trained selector policy JSON")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("discover", parents=[common], help="discover causal edges")
    s.add_argument("--max-lag", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--window-ms", type=int)
    s.set_defaults(func=cmd_discover)

    s = sub.add_parser("fuse", parents=[common], help="build the extended causal graph")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("analyze", parents=[common], help="rank root causes of an incident")
    s.add_argument("--at", type=_at, help="incident time in ms, or 'auto'")
    s.add_argument("--mode", choices=("all-anomalies", "single"))
    s.add_argument("--anomaly", help="series label for single mode")
    s.add_argument("--order", choices=("first", "second"))
    s.add_argument("--seed", type=int)
    s.add_argument("--walks", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--top-k", type=int)
    s.add_argument("--timeframe-ms", type=int)
    s.add_argument("--incident-id")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("train-selector", parents=[common], help="train the detector selector")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--corpus", help="labeled dataset directory")
    src.add_argument("--synthetic", type=int, default=14, help="series per class in a synthetic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output")
    s.set_defaults(func=cmd_train_selector)

    s = sub.add_parser("suggest-labels", parents=[common], help="propose anomaly labels")
    s.add_argument("--series", action="append", help="series label (repeatable); default all")
    s.add_argument("--min-votes", type=int, default=2)
    s.add_argument("--output")
    s.set_defaults(func=cmd_suggest_labels)

    s = sub.add_parser("export-graph", parents=[common], help="export a graph")
    s.add_argument("--format", choices=("dot", "json"), default="dot")
    s.add_argument("--graph", choices=("extended", "dependency"), default="extended")
    s.add_argument("--output")
    s.set_defaults(func=cmd_export_graph)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = EngineConfig.resolve(getattr(args, "config", None))
        ws = Workspace(Path(getattr(args, "out", None) or config.out), config)
        return int(args.func(args, ws) or 0)
    except (SDVDiagError, FileNotFoundError, ValueError) as exc:
        print(f"sdvdiag: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
