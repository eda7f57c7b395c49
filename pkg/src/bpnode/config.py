"""Node configuration: a flat TOML file whose keys mirror NodeConfig.

Dotted keys may be written either literally (``agent.port = 8080``) or as
tables (``[agent]`` then ``port = 8080``); both flatten to the same key.
Every key also has a command-line flag, ``agent.port`` -> ``--agent-port``.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import NodeConfig


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _str_list(value) -> list[str]:
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValueError("expected a list of strings")
    return [part.strip() for v in value for part in v.split(",") if part.strip()]


def _opt_float(value):
    if value in (None, "", 0, "0", "none"):
        return None
    return float(value)


def _opt_int(value):
    if value in (None, "", "none"):
        return None
    return int(value)


def _seconds_to_us(value) -> int:
    seconds = float(value)
    if seconds <= 0:
        raise ValueError("lifetime must be positive")
    return int(seconds * 1_000_000)


@dataclass(frozen=True)
class Key:
    name: str
    attr: str
    convert: Callable[[Any], Any]
    help: str
    repeatable: bool = False

    @property
    def flag(self) -> str:
        return "--" + self.name.replace(".", "-").replace("_", "-")


KEYS = [
    Key("node_id", "node_id", str, "node EID, e.g. dtn:n1 (required)"),
    Key("endpoints", "endpoints", _str_list, "extra endpoints registered for local delivery", True),
    Key("store.path", "store_path", Path, "store directory, created if missing"),
    Key("store.fsync", "fsync", _bool, "fsync bundle files before indexing them"),
    Key("cla.host", "listen_host", str, "MTCP listen address"),
    Key("cla.port", "listen_port", int, "MTCP listen port"),
    Key("cla.advertise_host", "advertise_host", str, "address announced to peers instead of cla.host"),
    Key("cla.bandwidth_limit", "bandwidth_limit", _opt_float, "pace MTCP writes to this many bits/s (0 disables)"),
    Key("peers.static", "static_peers", _str_list, "static peer as node-eid=mtcp://host:port", True),
    Key("discovery.enabled", "discovery_enabled", _bool, "announce and listen for UDP beacons"),
    Key("discovery.interval", "discovery_interval", float, "seconds between beacons"),
    Key("discovery.port", "discovery_port", int, "UDP beacon port"),
    Key("discovery.group", "discovery_group", str, "IPv4 multicast group for beacons"),
    Key("discovery.interface", "discovery_interface", str, "local interface address for multicast"),
    Key("routing.algorithm", "routing", str, "epidemic or flood"),
    Key("core.retry_interval", "retry_interval", float, "seconds between forwarding retries"),
    Key("core.gc_interval", "gc_interval", float, "seconds between expiry sweeps"),
    Key("core.send_workers", "send_workers", int, "parallel CLA transmissions"),
    Key("bundle.hop_limit", "hop_limit", int, "hop limit for locally created bundles"),
    Key("bundle.lifetime", "lifetime", _seconds_to_us, "lifetime in seconds for locally created bundles"),
    Key("bundle.clock", "has_clock", _bool, "stamp creation times (false gives dtn_time 0 plus bundle age)"),
    Key("agent.host", "agent_host", str, "HTTP agent address"),
    Key("agent.port", "agent_port", _opt_int, "HTTP agent port (none disables the agent)"),
    Key("log.events", "event_log", str, "JSON-lines event log path, '-' for stdout"),
]
BY_NAME = {k.name: k for k in KEYS}


def flatten(table: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def load_file(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as f:
        return flatten(tomllib.load(f))


def build_config(values: dict[str, Any], base_dir: Path | None = None) -> NodeConfig:
    """Turn flat key/value pairs into a NodeConfig, rejecting unknown keys."""
    kwargs = {}
    for name, raw in values.items():
        key = BY_NAME.get(name)
        if key is None:
            raise ValueError(f"unknown config key {name!r}")
        try:
            kwargs[key.attr] = key.convert(raw)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"config key {name}: {exc}") from None
    if "node_id" not in kwargs:
        raise ValueError("config key node_id is required")
    if base_dir is not None and "store_path" in kwargs and not kwargs["store_path"].is_absolute():
        kwargs["store_path"] = base_dir / kwargs["store_path"]
    return NodeConfig(**kwargs)


def add_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("configuration overrides")
    for key in KEYS:
        group.add_argument(key.flag, dest=key.name, metavar="VALUE", help=key.help,
                           action="append" if key.repeatable else "store", default=None)


def from_args(args: argparse.Namespace) -> NodeConfig:
    """Config file (if any) overlaid with the flags that were given."""
    values: dict[str, Any] = {}
    base_dir = None
    if getattr(args, "config", None):
        values.update(load_file(args.config))
        base_dir = Path(args.config).resolve().parent
    for key in KEYS:
        given = getattr(args, key.name, None)
        if given is not None:
            values[key.name] = given
    return build_config(values, base_dir)


EXAMPLE = """\
# bpnoded configuration; every key can be overridden with --<key>, dots as dashes
node_id = "dtn:n1"
endpoints = ["dtn:sink/lux"]

[store]
path = "store"
fsync = true

[cla]
host = "0.0.0.0"
port = 4556
# bandwidth_limit = 54000000

[peers]
static = []          # e.g. ["dtn:n2=mtcp://192.168.1.2:4556"]

[discovery]
enabled = true
interval = 2.0
port = 35039

[routing]
algorithm = "epidemic"

[core]
retry_interval = 5.0

[bundle]
hop_limit = 64
lifetime = 86400     # seconds

[agent]
host = "127.0.0.1"
port = 8080

[log]
events = "-"
"""
