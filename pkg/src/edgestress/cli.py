"""Command-line entry point: check, plan, run, report, cloud."""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import time
from pathlib import Path

from . import metrics, orchestrator, testcloud
from .dsl import parse
from .errors import EdgeStressError, SpecError
from .planner import default_seed, emit_manifest, load_manifest, resolve
from .runtime import load_node_result
from .validator import exit_code, has_errors, validate

EX_USAGE = 64
EX_FAILURE = 3
CLOUD_LEDGER_FILE = "cloud-ledger.json"

log = logging.getLogger("edgestress")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _color(text: str, code: str, stream) -> str:
    if os.environ.get("NO_COLOR") or not stream.isatty():
        return text
    return f"\033[{code}m{text}\033[0m"


def _host_port(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return host or "127.0.0.1", int(port)


def _endpoint(value: str) -> tuple[str, str]:
    cloud, sep, target = value.partition("=")
    if not sep or not cloud or not target:
        raise argparse.ArgumentTypeError(f"expected CLOUD=HOST:PORT, got {value!r}")
    return cloud, target


def _read_spec(path: str):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def cmd_check(args) -> int:
    worst = 0
    for path in args.specs:
        try:
            ast = _read_spec(path)
        except SpecError as exc:
            print(f"{path}:{exc.span.line}:{exc.span.column}: {_color('error', '31', sys.stderr)}: {exc.message}",
                  file=sys.stderr)
            worst = 2
            continue
        diags = validate(ast)
        for d in diags:
            line = d.format(path)
            print(_color(line, "31" if d.is_error else "33", sys.stderr), file=sys.stderr)
        worst = max(worst, exit_code(diags))
        if not args.quiet and not diags:
            print(f"{path}: ok")
    return worst


def cmd_plan(args) -> int:
    try:
        ast = _read_spec(args.spec)
    except SpecError as exc:
        print(f"{args.spec}:{exc.span.line}:{exc.span.column}: error: {exc.message}", file=sys.stderr)
        return 2
    diags = validate(ast)
    for d in diags:
        print(d.format(args.spec), file=sys.stderr)
    if has_errors(diags):
        return 2
    seed = args.seed if args.seed is not None else default_seed()
    if args.seed is None:
        print(f"seed: {seed}", file=sys.stderr)
    plan = resolve(ast, seed, dict(args.endpoint or ()))
    text = emit_manifest(plan)
    if args.output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text, encoding="utf-8")
        print(f"{args.output}: {plan.run_id}, {len(plan.nodes)} nodes, {sum(1 for _ in plan.edges())} edge devices",
              file=sys.stderr)
    return 0


def _cloud_ledger(target):
    host, port = target
    return testcloud.query(host, port, "RECORDS")


def cmd_run(args) -> int:
    plan = load_manifest(Path(args.manifest).read_text(encoding="utf-8"))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.cloud:
        reply = testcloud.query(*args.cloud, "RESET")
        if reply != "OK":
            print(f"cloud control did not accept RESET: {reply}", file=sys.stderr)
            return EX_FAILURE
    opts = orchestrator.LaunchOptions(
        image=args.image,
        full_logs=not args.counters_only,
        kill_grace_s=args.grace,
    )
    handles = []
    # SIGTERM takes the same cleanup path as Ctrl-C
    signal.signal(signal.SIGTERM, lambda *_: (_ for _ in ()).throw(KeyboardInterrupt()))
    try:
        handles = orchestrator.launch_all(plan, out, opts)
        print(f"{plan.run_id}: {len(handles)} nodes released", file=sys.stderr)
        orchestrator.await_and_terminate(handles)
    except KeyboardInterrupt:
        orchestrator.abort(handles, "interrupted by operator")
        print("interrupted; all nodes stopped and removed", file=sys.stderr)
        return 130
    except BaseException:
        orchestrator.abort(handles, "run failed")
        raise
    try:
        results = orchestrator.collect_and_cleanup(handles)
    except EdgeStressError as exc:
        results = getattr(exc, "results", [])
        print(str(exc), file=sys.stderr)
    if args.cloud:
        time.sleep(plan.step_ms / 1000)  # let in-flight packets land
        (out / CLOUD_LEDGER_FILE).write_text(json.dumps(_cloud_ledger(args.cloud)), encoding="utf-8")
    gaps = [r for r in results if isinstance(r, orchestrator.NodeGap)]
    for h in handles:
        print(f"{h.node_id}: {h.state.value}" + (f" ({h.error})" if h.error else ""), file=sys.stderr)
    return EX_FAILURE if gaps else 0


def load_results(directory) -> list:
    files = sorted(Path(directory).glob("result-*.json"))
    if not files:
        raise EdgeStressError(f"no result files in {directory}")
    return [load_node_result(f) for f in files]


def cmd_report(args) -> int:
    results = load_results(args.results)
    cloud = None
    if args.cloud:
        cloud = _cloud_ledger(args.cloud)
    elif (Path(args.results) / CLOUD_LEDGER_FILE).exists():
        cloud = json.loads((Path(args.results) / CLOUD_LEDGER_FILE).read_text(encoding="utf-8"))
    report = metrics.compute(results, cloud, label=args.label or "", method=args.method)
    sys.stdout.write(metrics.render(report, args.format))
    return 0


def cmd_cloud(args) -> int:
    kw = dict(host=args.host, ctrl_port=args.ctrl_port, throttle_pps=args.throttle)
    if args.mode == "mqtt-sink":
        server = testcloud.MqttSink(args.port, args.topic or ["pub"], echo_topic=args.echo_topic, **kw)
    else:
        if args.echo_topic:
            print("--echo-topic only applies to mqtt-sink", file=sys.stderr)
            return EX_USAGE
        server = testcloud.EchoCloud("UDP" if args.mode == "udp-echo" else "TCP", args.port, **kw)
    server.start()
    print(f"{server.mode} on {args.host}:{server.port}, control on {args.host}:{server.ctrl_port}", flush=True)
    signal.signal(signal.SIGTERM, lambda *_: (_ for _ in ()).throw(KeyboardInterrupt()))
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgestress", description="Specify, run and measure edge-to-cloud stress simulations.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    c = sub.add_parser("check", help="parse and validate specs (exit 0 clean, 1 warnings, 2 errors)")
    c.add_argument("specs", nargs="+", metavar="SPEC")
    c.add_argument("-q", "--quiet", action="store_true", help="print nothing for clean specs")
    c.set_defaults(func=cmd_check)

    c = sub.add_parser("plan", help="resolve a spec into a run manifest")
    c.add_argument("spec", metavar="SPEC")
    c.add_argument("--seed", type=int, help="offset seed (default: random, printed to stderr)")
    c.add_argument("-o", "--output", help="manifest path (default: stdout)")
    c.add_argument("--endpoint", action="append", type=_endpoint, metavar="CLOUD=HOST:PORT",
                   help="redirect a cloud, e.g. C1=127.0.0.1:9000 (repeatable)")
    c.set_defaults(func=cmd_plan)

    c = sub.add_parser("run", help="launch all nodes of a manifest and collect their results")
    c.add_argument("manifest", metavar="MANIFEST")
    c.add_argument("-o", "--output", required=True, help="results directory")
    c.add_argument("--cloud", type=_host_port, metavar="HOST:CTRLPORT",
                   help="bundled cloud control endpoint: reset before, save its ledger after")
    c.add_argument("--image", default=os.environ.get("EDGESTRESS_DOCKER_IMAGE", orchestrator.DEFAULT_IMAGE),
                   help="node image for Docker platforms (env EDGESTRESS_DOCKER_IMAGE)")
    c.add_argument("--counters-only", action="store_true", help="omit per-packet logs from result files")
    c.add_argument("--grace", type=float, default=orchestrator.KILL_GRACE_S,
                   help="seconds added to the kill deadline (default %(default)s)")
    c.set_defaults(func=cmd_run)

    c = sub.add_parser("report", help="compute SimDrop, CloudDrop and TransTime for a results directory")
    c.add_argument("results", metavar="RESULTS_DIR")
    c.add_argument("--cloud", type=_host_port, metavar="HOST:CTRLPORT", help="read the ledger from a live cloud")
    c.add_argument("--format", choices=("table", "json"), default="table")
    c.add_argument("--label", help="configuration label for the table")
    c.add_argument("--method", choices=("auto", "same-host", "rtt"), default="auto",
                   help="TransTime measurement method")
    c.set_defaults(func=cmd_report)

    c = sub.add_parser("cloud", help="serve a bundled test cloud until interrupted")
    c.add_argument("--mode", choices=("udp-echo", "tcp-echo", "mqtt-sink"), required=True)
    c.add_argument("--port", type=int, required=True)
    c.add_argument("--host", default="127.0.0.1")
    c.add_argument("--ctrl-port", type=int, help="control port (default: port+1)")
    c.add_argument("--throttle", type=float, metavar="PPS", help="admit at most PPS packets per second")
    c.add_argument("--topic", action="append", help="accepted publish topic for mqtt-sink (repeatable)")
    c.add_argument("--echo-topic", help="mqtt-sink: re-publish accepted messages on this topic")
    c.set_defaults(func=cmd_cloud)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (EdgeStressError, OSError, ValueError) as exc:
        print(f"edgestress {args.verb}: {exc}", file=sys.stderr)
        return EX_FAILURE


if __name__ == "__main__":
    sys.exit(main())
