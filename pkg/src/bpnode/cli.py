"""Command-line entry points: the ``bpnoded`` daemon and the ``bpcat`` client."""

from __future__ import annotations

import argparse
import base64
import json
import logging
import signal
import sys
import threading
import urllib.error
import urllib.parse
import urllib.request

from . import config
from .errors import StoreError
from .store import fsck_path

log = logging.getLogger("bpnode")


def _daemon_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", help="diagnostic log level (default INFO)")
    parser = argparse.ArgumentParser(prog="bpnoded", description="Bundle protocol node daemon.")
    sub = parser.add_subparsers(dest="command")
    run = sub.add_parser("run", parents=[common], help="run the node until interrupted (default)")
    run.add_argument("--config", "-c", help="TOML configuration file")
    config.add_flags(run)
    fsck = sub.add_parser("fsck", parents=[common], help="check a store directory for consistency")
    fsck.add_argument("--store", required=True, help="store directory")
    sub.add_parser("example-config", parents=[common], help="print a commented configuration file")
    return parser


def daemon_main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    commands = ("run", "fsck", "example-config", "-h", "--help")
    if not argv or argv[0] not in commands:
        argv.insert(0, "run")
    args = _daemon_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "example-config":
        sys.stdout.write(config.EXAMPLE)
        return 0
    if args.command == "fsck":
        try:
            problems = fsck_path(args.store)
        except (StoreError, OSError) as exc:
            print(f"bpnoded: fsck: {exc}", file=sys.stderr)
            return 2
        for p in problems:
            print(p)
        print(f"{args.store}: {'clean' if not problems else f'{len(problems)} problem(s)'}", file=sys.stderr)
        return 0 if not problems else 1
    return _run(args)


def _run(args) -> int:
    from .core import run_node

    try:
        cfg = config.from_args(args)
    except (OSError, ValueError) as exc:
        print(f"bpnoded: config: {exc}", file=sys.stderr)
        return 2
    try:
        node, agent = run_node(cfg)
    except StoreError as exc:
        print(f"bpnoded: store: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"bpnoded: {exc.strerror or exc}", file=sys.stderr)
        return 1
    done = threading.Event()

    def on_signal(signum, frame):
        done.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    log.info("node %s up: cla %s, agent %s", cfg.node_id, node.listener.descriptor, agent.url if agent else "off")
    done.wait()
    log.info("shutting down")
    if agent:
        agent.stop()
    node.stop()
    return 0


class ClientError(Exception):
    pass


def request_json(method: str, url: str, body: dict | None = None, timeout: float = 60.0):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(url, data=data, method=method, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        try:
            message = json.loads(exc.read()).get("error", exc.reason)
        except ValueError:
            message = exc.reason
        raise ClientError(f"{exc.code}: {message}") from None
    except urllib.error.URLError as exc:
        raise ClientError(f"cannot reach {url}: {exc.reason}") from None


def client_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bpcat", description="Send and fetch bundle payloads through a node's HTTP agent.")
    sub = parser.add_subparsers(dest="command", required=True)
    send = sub.add_parser("send", help="send standard input as one bundle")
    send.add_argument("url", help="agent base URL, e.g. http://localhost:8080")
    send.add_argument("destination", help="destination EID")
    send.add_argument("--lifetime", type=int, help="lifetime in seconds")
    send.add_argument("--hop-limit", type=int)
    send.add_argument("--report", action="append", default=[], choices=["reception", "forwarding", "delivery", "deletion"],
                      help="request a status report (repeatable)")
    fetch = sub.add_parser("fetch", help="write queued payloads to standard output")
    fetch.add_argument("url")
    fetch.add_argument("--endpoint", help="only this endpoint (default: all registered)")
    reg = sub.add_parser("register", help="register an endpoint for local delivery")
    reg.add_argument("url")
    reg.add_argument("endpoint")
    args = parser.parse_args(argv)
    base = args.url.rstrip("/")
    try:
        if args.command == "send":
            payload = sys.stdin.buffer.read()
            body = {"destination": args.destination, "payload_b64": base64.b64encode(payload).decode("ascii")}
            if args.lifetime is not None:
                body["lifetime"] = args.lifetime
            if args.hop_limit is not None:
                body["hop_limit"] = args.hop_limit
            if args.report:
                body["reports"] = args.report
            print(request_json("POST", base + "/send", body)["id"])
        elif args.command == "fetch":
            query = "" if args.endpoint is None else "?" + urllib.parse.urlencode({"endpoint": args.endpoint})
            out = sys.stdout.buffer
            for entry in request_json("GET", base + "/fetch" + query):
                payload = base64.b64decode(entry["payload_b64"])
                print(f"{entry['id']} {entry['source']} -> {entry['destination']} {len(payload)} bytes", file=sys.stderr)
                out.write(payload)
            out.flush()
        else:
            print(request_json("POST", base + "/register", {"endpoint": args.endpoint})["endpoint"])
    except ClientError as exc:
        print(f"bpcat: {exc}", file=sys.stderr)
        return 1
    return 0


def _exit(main):
    def entry():
        sys.exit(main())
    return entry


daemon = _exit(daemon_main)
client = _exit(client_main)
