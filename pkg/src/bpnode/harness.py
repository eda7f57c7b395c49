"""Loopback testbed and chain-topology latency experiments.

Each node is a separate ``bpnoded`` process with its own store, MTCP port and
HTTP agent. Peering is static. Timing comes from the nodes' JSON event logs,
which share the host clock.
"""

from __future__ import annotations

import argparse
import base64
import csv
import itertools
import json
import logging
import os
import random
import shutil
import signal
import socket
import statistics
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from .cli import ClientError, request_json

log = logging.getLogger(__name__)

_SRC = str(Path(__file__).resolve().parents[1])


class HarnessError(RuntimeError):
    pass


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def seeded_payload(size: int, seed: int) -> bytes:
    return random.Random(seed).randbytes(size)


class EventReader:
    """Incrementally tails one JSON-lines event log."""

    def __init__(self, path: Path):
        self.path = path
        self.records: list[dict] = []
        self._offset = 0
        self._partial = b""

    def poll(self) -> list[dict]:
        try:
            with open(self.path, "rb") as f:
                f.seek(self._offset)
                chunk = f.read()
        except FileNotFoundError:
            return self.records
        self._offset += len(chunk)
        lines = (self._partial + chunk).split(b"\n")
        self._partial = lines.pop()
        for line in lines:
            if line.strip():
                self.records.append(json.loads(line))
        return self.records

    def find(self, event: str, bundle: str | None = None) -> list[dict]:
        return [r for r in self.poll() if r["event"] == event and (bundle is None or r.get("bundle") == bundle)]


@dataclass
class NodeProcess:
    index: int
    workdir: Path
    cla_port: int = field(default_factory=free_port)
    agent_port: int = field(default_factory=free_port)
    peers: list["NodeProcess"] = field(default_factory=list, repr=False)
    extra_args: list[str] = field(default_factory=list)
    proc: subprocess.Popen | None = field(default=None, repr=False)

    def __post_init__(self):
        self.events = EventReader(self.event_path)

    @property
    def node_id(self) -> str:
        return f"dtn:n{self.index}"

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.agent_port}"

    @property
    def cla(self) -> str:
        return f"mtcp://127.0.0.1:{self.cla_port}"

    @property
    def store_path(self) -> Path:
        return self.workdir / f"n{self.index}.store"

    @property
    def event_path(self) -> Path:
        return self.workdir / f"n{self.index}.events.jsonl"

    @property
    def stderr_path(self) -> Path:
        return self.workdir / f"n{self.index}.stderr"

    def command(self) -> list[str]:
        cmd = [
            sys.executable, "-m", "bpnode", "run",
            "--log-level", "WARNING",
            "--node-id", self.node_id,
            "--store-path", str(self.store_path),
            "--cla-port", str(self.cla_port),
            "--agent-port", str(self.agent_port),
            "--log-events", str(self.event_path),
        ]
        for peer in self.peers:
            cmd += ["--peers-static", f"{peer.node_id}={peer.cla}"]
        return cmd + self.extra_args

    def start(self) -> None:
        env = dict(os.environ)
        env["PYTHONPATH"] = _SRC + os.pathsep + env.get("PYTHONPATH", "")
        with open(self.stderr_path, "ab") as err:
            self.proc = subprocess.Popen(self.command(), stdout=subprocess.DEVNULL, stderr=err, env=env)

    def wait_ready(self, timeout: float = 15.0) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.proc.poll() is not None:
                raise HarnessError(f"{self.node_id} exited with {self.proc.returncode}: {self.stderr_tail()}")
            try:
                if request_json("GET", self.url + "/status", timeout=1.0).get("ready"):
                    return
            except (ClientError, OSError, ValueError):
                pass
            time.sleep(0.05)
        raise HarnessError(f"{self.node_id} not ready after {timeout}s: {self.stderr_tail()}")

    def stderr_tail(self, n: int = 2000) -> str:
        try:
            return self.stderr_path.read_text(errors="replace")[-n:]
        except OSError:
            return ""

    def status(self) -> dict:
        return request_json("GET", self.url + "/status", timeout=2.0)

    def stop(self, timeout: float = 10.0) -> int | None:
        if self.proc is None or self.proc.poll() is not None:
            return None if self.proc is None else self.proc.returncode
        self.proc.send_signal(signal.SIGTERM)
        try:
            return self.proc.wait(timeout)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            return self.proc.wait()

    def kill(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()

    # agent shortcuts

    def send(self, destination: str, payload: bytes, **options) -> str:
        body = {"destination": destination, "payload_b64": base64.b64encode(payload).decode("ascii"), **options}
        return request_json("POST", self.url + "/send", body)["id"]

    def fetch(self, endpoint: str | None = None) -> list[dict]:
        query = "" if endpoint is None else f"?endpoint={endpoint}"
        return request_json("GET", self.url + "/fetch" + query)


class Testbed:
    """A set of node processes on loopback with static links.

    ``links`` holds undirected index pairs; nodes are numbered from 1.
    """

    def __init__(self, size: int, links: list[tuple[int, int]], workdir: Path | None = None,
                 extra_args: list[str] | None = None, keep: bool = False):
        if size < 1:
            raise ValueError("a testbed needs at least one node")
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.mkdtemp(prefix="bpnode-testbed-")
            workdir = Path(self._tmp)
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.keep = keep
        self.nodes = [NodeProcess(i + 1, self.workdir, extra_args=list(extra_args or [])) for i in range(size)]
        for a, b in links:
            self[a].peers.append(self[b])
            self[b].peers.append(self[a])

    @classmethod
    def chain(cls, length: int, **kw) -> "Testbed":
        return cls(length, [(i, i + 1) for i in range(1, length)], **kw)

    @classmethod
    def mesh(cls, size: int, **kw) -> "Testbed":
        return cls(size, list(itertools.combinations(range(1, size + 1), 2)), **kw)

    def __getitem__(self, index: int) -> NodeProcess:
        return self.nodes[index - 1]

    def start(self) -> "Testbed":
        try:
            for node in self.nodes:
                node.start()
            for node in self.nodes:
                node.wait_ready()
        except Exception:
            self.stop()
            raise
        return self

    def stop(self) -> None:
        for node in self.nodes:
            node.stop()
        if self._tmp and not self.keep:
            shutil.rmtree(self._tmp, ignore_errors=True)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def events(self, event: str, bundle: str | None = None) -> list[dict]:
        return sorted((r for n in self.nodes for r in n.events.find(event, bundle)), key=lambda r: r["ts"])

    def wait_for(self, predicate, timeout: float, interval: float = 0.01):
        deadline = time.monotonic() + timeout
        while True:
            result = predicate()
            if result or time.monotonic() >= deadline:
                return result
            time.sleep(interval)


class Sampler:
    """Polls every node's counters once per ``period`` seconds."""

    def __init__(self, bed: Testbed, period: float = 1.0):
        self.bed = bed
        self.period = period
        self.rows: list[dict] = []
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name="sampler", daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()

    def _run(self) -> None:
        while not self._stop.is_set():
            t = time.time()
            for node in self.bed.nodes:
                try:
                    st = node.status()
                except (ClientError, OSError, ValueError):
                    continue
                self.rows.append({
                    "ts": round(t, 3), "node": node.node_id, "bytes_in": st["bytes_in"], "bytes_out": st["bytes_out"],
                    "cpu_time": round(st["cpu_time"], 4), "stored": st["stored"],
                })
            self._stop.wait(self.period)


@dataclass
class ExperimentSpec:
    chain_length: int
    payload_bytes: int
    repetitions: int = 10
    bandwidth_limit: float | None = None
    seed: int = 1
    hop_limit: int | None = None
    timeout: float = 120.0

    def __post_init__(self):
        if self.chain_length < 2:
            raise ValueError("chain_length must be at least 2")
        if self.payload_bytes < 0 or self.repetitions < 1:
            raise ValueError("payload_bytes must be >= 0 and repetitions >= 1")
        if self.bandwidth_limit is not None and self.bandwidth_limit <= 0:
            self.bandwidth_limit = None


RESULT_FIELDS = [
    "chain_length", "payload_bytes", "bandwidth_limit", "seed", "hop_limit", "repetition", "bundle",
    "delivered", "latency_ms", "hop_times_ms", "hop_counts", "previous_nodes", "payload_ok", "deleted_reason",
]


def _delivery(bed: Testbed, bid: str, sink: NodeProcess, timeout: float):
    def done():
        hit = sink.events.find("delivered", bid)
        if hit:
            return hit[0]
        gone = bed.events("deleted", bid)
        return gone[0] if gone else None

    return bed.wait_for(done, timeout)


def run_repetition(bed: Testbed, spec: ExperimentSpec, repetition: int, payload: bytes) -> dict:
    first, sink = bed.nodes[0], bed.nodes[-1]
    options = {} if spec.hop_limit is None else {"hop_limit": spec.hop_limit}
    t0 = time.time()
    bid = first.send(sink.node_id, payload, **options)
    outcome = _delivery(bed, bid, sink, spec.timeout)
    row = {k: getattr(spec, k) for k in ("chain_length", "payload_bytes", "bandwidth_limit", "seed", "hop_limit")}
    row.update(repetition=repetition, bundle=bid, delivered=False, latency_ms="", payload_ok="", deleted_reason="")
    received = []
    for node in bed.nodes[1:]:
        hit = node.events.find("received", bid)
        received.append(hit[0] if hit else None)
    row["hop_times_ms"] = json.dumps([None if r is None else round((r["ts"] - t0) * 1000, 3) for r in received])
    row["hop_counts"] = json.dumps([None if r is None else r.get("hop_count", [None, None])[1] for r in received])
    row["previous_nodes"] = json.dumps([None if r is None else r.get("previous_node") for r in received])
    if outcome and outcome["event"] == "delivered":
        row["delivered"] = True
        row["latency_ms"] = round((outcome["ts"] - t0) * 1000, 3)
        got = [e for e in sink.fetch(sink.node_id) if e["id"] == bid]
        row["payload_ok"] = len(got) == 1 and base64.b64decode(got[0]["payload_b64"]) == payload
    elif outcome:
        row["deleted_reason"] = outcome.get("reason", "")
    return row


def run_experiment(spec: ExperimentSpec, workdir: Path | None = None, samples: list | None = None) -> list[dict]:
    """Run all repetitions of ``spec`` on one chain; returns one row per repetition."""
    extra = [] if spec.bandwidth_limit is None else ["--cla-bandwidth-limit", str(spec.bandwidth_limit)]
    payload = seeded_payload(spec.payload_bytes, spec.seed)
    rows = []
    with Testbed.chain(spec.chain_length, workdir=workdir, extra_args=extra) as bed:
        with Sampler(bed) as sampler:
            for rep in range(spec.repetitions):
                try:
                    rows.append(run_repetition(bed, spec, rep, payload))
                except ClientError as exc:
                    log.error("repetition %d failed: %s", rep, exc)
                    rows.append({**{k: getattr(spec, k) for k in ("chain_length", "payload_bytes", "bandwidth_limit", "seed", "hop_limit")},
                                 "repetition": rep, "delivered": False})
        if samples is not None:
            samples.extend(sampler.rows)
    return rows


def summarize(rows: list[dict]) -> dict:
    latencies = [float(r["latency_ms"]) for r in rows if r.get("delivered") in (True, "True")]
    return {
        "delivered": len(latencies),
        "total": len(rows),
        "median_ms": statistics.median(latencies) if latencies else None,
        "mean_ms": statistics.fmean(latencies) if latencies else None,
        "stdev_ms": statistics.stdev(latencies) if len(latencies) > 1 else 0.0 if latencies else None,
    }


def write_csv(path: Path | str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def load_specs(path: Path | str) -> list[ExperimentSpec]:
    """Expand a TOML spec file; list-valued keys in ``[sweep]`` form a cartesian product.

    ``[[experiment]]`` tables are taken as-is.
    """
    from .config import tomllib

    with open(path, "rb") as f:
        doc = tomllib.load(f)
    names = {f.name for f in fields(ExperimentSpec)}
    specs = []
    for table in doc.get("experiment", []):
        unknown = set(table) - names
        if unknown:
            raise ValueError(f"unknown experiment keys {sorted(unknown)}")
        specs.append(ExperimentSpec(**table))
    if "sweep" in doc:
        sweep = doc["sweep"]
        unknown = set(sweep) - names
        if unknown:
            raise ValueError(f"unknown sweep keys {sorted(unknown)}")
        keys = list(sweep)
        axes = [v if isinstance(v, list) else [v] for v in sweep.values()]
        for combo in itertools.product(*axes):
            specs.append(ExperimentSpec(**dict(zip(keys, combo))))
    if not specs:
        raise ValueError(f"{path} defines no experiments")
    return specs


def plot(results: Path | str, output: Path | str) -> None:
    """Latency against payload size, one line per chain length, with a one-sigma band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(results, newline="") as f:
        rows = [r for r in csv.DictReader(f) if r["delivered"] == "True"]
    groups: dict[int, dict[int, list[float]]] = {}
    for r in rows:
        groups.setdefault(int(r["chain_length"]), {}).setdefault(int(r["payload_bytes"]), []).append(float(r["latency_ms"]) / 1000)
    fig, ax = plt.subplots(figsize=(6, 4))
    for chain in sorted(groups):
        sizes = sorted(groups[chain])
        means = [statistics.fmean(groups[chain][s]) for s in sizes]
        devs = [statistics.stdev(groups[chain][s]) if len(groups[chain][s]) > 1 else 0.0 for s in sizes]
        ax.plot(sizes, means, marker="o", label=f"{chain} nodes")
        ax.fill_between(sizes, [m - d for m, d in zip(means, devs)], [m + d for m, d in zip(means, devs)], alpha=0.2)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("payload size [bytes]")
    ax.set_ylabel("transmission time [s]")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(output)
    plt.close(fig)


DEFAULT_SWEEP = dict(chain_length=[2, 8, 16], payload_bytes=[64 * 1024, 2**20, 5 * 2**20], repetitions=10)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bpnode-eval", description="Chain-topology latency experiments on loopback.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment, a spec file, or the default sweep")
    run.add_argument("--spec", help="TOML experiment spec file")
    run.add_argument("--chain", type=int, help="chain length (nodes)")
    run.add_argument("--payload", type=int, help="payload size in bytes")
    run.add_argument("--reps", type=int, default=10)
    run.add_argument("--bandwidth", type=float, help="pace links to this many bits/s")
    run.add_argument("--seed", type=int, default=1)
    run.add_argument("--hop-limit", type=int)
    run.add_argument("--timeout", type=float, default=120.0)
    run.add_argument("--out", default="results.csv")
    run.add_argument("--samples", default="samples.csv", help="1 Hz counter samples CSV")
    run.add_argument("--keep", help="keep node stores and logs under this directory")
    pl = sub.add_parser("plot", help="render latency against payload size")
    pl.add_argument("results")
    pl.add_argument("-o", "--output", default="latency.png")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    if args.command == "plot":
        plot(args.results, args.output)
        return 0
    if args.spec:
        specs = load_specs(args.spec)
    elif args.chain or args.payload:
        specs = [ExperimentSpec(args.chain or 2, args.payload if args.payload is not None else 64 * 1024, args.reps,
                                args.bandwidth, args.seed, args.hop_limit, args.timeout)]
    else:
        specs = [ExperimentSpec(c, p, DEFAULT_SWEEP["repetitions"], args.bandwidth, args.seed)
                 for c in DEFAULT_SWEEP["chain_length"] for p in DEFAULT_SWEEP["payload_bytes"]]
    rows, samples = [], []
    for i, spec in enumerate(specs):
        workdir = None if not args.keep else Path(args.keep) / f"exp{i}"
        try:
            result = run_experiment(spec, workdir, samples)
        except HarnessError as exc:
            print(f"bpnode-eval: {exc}", file=sys.stderr)
            return 1
        rows.extend(result)
        s = summarize(result)
        median = "n/a" if s["median_ms"] is None else f"{s['median_ms']:.1f}"
        stdev = "n/a" if s["stdev_ms"] is None else f"{s['stdev_ms']:.1f}"
        log.info("chain=%d payload=%d: %d/%d delivered, median %s ms, stdev %s ms",
                 spec.chain_length, spec.payload_bytes, s["delivered"], s["total"], median, stdev)
    write_csv(args.out, rows, RESULT_FIELDS)
    write_csv(args.samples, samples, ["ts", "node", "bytes_in", "bytes_out", "cpu_time", "stored"])
    return 0
