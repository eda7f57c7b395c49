import argparse
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from bpnode import config
from bpnode.cli import daemon_main
from bpnode.harness import NodeProcess, free_port
from bpnode.store import fsck_path

SRC = str(Path(__file__).resolve().parents[1] / "src")


def run(args, stdin=b"", timeout=30):
    env = dict(os.environ, PYTHONPATH=SRC)
    return subprocess.run([sys.executable, "-c", "import sys; from bpnode.cli import client_main; sys.exit(client_main())", *args],
                          input=stdin, capture_output=True, timeout=timeout, env=env)


def test_flatten_tables_and_dotted():
    assert config.flatten({"a": 1, "agent": {"port": 2, "x": {"y": 3}}}) == {"a": 1, "agent.port": 2, "agent.x.y": 3}


def test_example_config_loads(tmp_path):
    path = tmp_path / "node.toml"
    path.write_text(config.EXAMPLE)
    cfg = config.build_config(config.load_file(path), tmp_path)
    assert str(cfg.node_id) == "dtn:n1"
    assert cfg.store_path == tmp_path / "store"
    assert cfg.lifetime == 86400 * 1_000_000
    assert cfg.discovery_enabled and cfg.discovery_port == 35039


def test_dotted_keys_equivalent(tmp_path):
    (tmp_path / "a.toml").write_text('node_id = "dtn:x"\nagent.port = 9000\n')
    (tmp_path / "b.toml").write_text('node_id = "dtn:x"\n[agent]\nport = 9000\n')
    assert config.load_file(tmp_path / "a.toml") == config.load_file(tmp_path / "b.toml")


def test_unknown_and_missing_keys():
    with pytest.raises(ValueError, match="unknown config key"):
        config.build_config({"node_id": "dtn:x", "agent.prot": 1})
    with pytest.raises(ValueError, match="node_id"):
        config.build_config({})
    with pytest.raises(ValueError, match="cla.port"):
        config.build_config({"node_id": "dtn:x", "cla.port": "many"})


def test_every_key_has_a_flag(tmp_path):
    parser = argparse.ArgumentParser()
    parser.add_argument("--config")
    config.add_flags(parser)
    (tmp_path / "n.toml").write_text('node_id = "dtn:file"\n[agent]\nport = 1\n')
    args = parser.parse_args(["--config", str(tmp_path / "n.toml"), "--agent-port", "2", "--peers-static", "dtn:p=mtcp://h:1",
                              "--peers-static", "dtn:q=mtcp://h:2", "--bundle-clock", "false", "--cla-bandwidth-limit", "0"])
    cfg = config.from_args(args)
    assert str(cfg.node_id) == "dtn:file" and cfg.agent_port == 2
    assert [str(e) for e, _ in cfg.static_peers] == ["dtn:p", "dtn:q"]
    assert cfg.has_clock is False and cfg.bandwidth_limit is None
    flags = {a.option_strings[0] for a in parser._actions if a.option_strings}
    assert {k.flag for k in config.KEYS} <= flags


def test_example_config_command(capsys):
    assert daemon_main(["example-config"]) == 0
    assert "node_id" in capsys.readouterr().out


def test_daemon_bad_config(tmp_path, capsys):
    (tmp_path / "n.toml").write_text("node_id = ")
    assert daemon_main(["--config", str(tmp_path / "n.toml")]) == 2
    assert "config" in capsys.readouterr().err


@pytest.fixture
def daemon(tmp_path):
    node = NodeProcess(1, tmp_path)
    cfg = tmp_path / "node.toml"
    cfg.write_text(
        f'node_id = "dtn:s2"\n[store]\npath = "deep/new/store"\n[cla]\nport = {node.cla_port}\n'
        f'[agent]\nport = {node.agent_port}\n[log]\nevents = "{node.event_path}"\n'
    )
    node.command = lambda: [sys.executable, "-m", "bpnode", "--config", str(cfg), "--log-level", "WARNING"]
    node.start()
    node.wait_ready()
    node.cfg_path = cfg
    yield node
    node.stop()


def test_daemon_config_file_and_store_created(daemon, tmp_path):
    assert (tmp_path / "deep/new/store/index.log").exists()
    assert daemon.status()["node_id"] == "dtn:s2"


def test_duplicate_instance_refused(daemon, tmp_path):
    other = subprocess.run([sys.executable, "-m", "bpnode", "--config", str(daemon.cfg_path),
                            "--cla-port", str(free_port()), "--agent-port", str(free_port())],
                           capture_output=True, timeout=30, env=dict(os.environ, PYTHONPATH=SRC))
    assert other.returncode != 0
    assert b"in use by another process" in other.stderr


def test_port_conflict_refused(daemon, tmp_path):
    other = subprocess.run([sys.executable, "-m", "bpnode", "--node-id", "dtn:z", "--store-path", str(tmp_path / "z"),
                            "--cla-port", str(daemon.cla_port), "--agent-port", str(free_port())],
                           capture_output=True, timeout=30, env=dict(os.environ, PYTHONPATH=SRC))
    assert other.returncode != 0
    assert b"mtcp-cla" in other.stderr


def test_client_listing_examples(daemon):
    sent = run(["send", daemon.url, "dtn:s2"], stdin=b"3782 lx")
    assert sent.returncode == 0 and sent.stdout.decode().startswith("dtn:s2-")
    deadline = time.monotonic() + 5
    while not daemon.events.find("delivered") and time.monotonic() < deadline:
        time.sleep(0.02)
    got = run(["fetch", daemon.url])
    assert got.returncode == 0 and got.stdout == b"3782 lx"
    assert sent.stdout.decode().strip() in got.stderr.decode()
    empty = run(["fetch", daemon.url])
    assert empty.returncode == 0 and empty.stdout == b""


def test_client_errors(daemon):
    bad = run(["send", daemon.url, "bogus"], stdin=b"x")
    assert bad.returncode == 1 and b"invalid destination" in bad.stderr
    missing = run(["fetch", daemon.url, "--endpoint", "dtn:nobody"])
    assert missing.returncode == 1 and b"404" in missing.stderr
    refused = run(["fetch", f"http://127.0.0.1:{free_port()}"])
    assert refused.returncode == 1 and b"cannot reach" in refused.stderr


def test_client_register(daemon):
    reg = run(["register", daemon.url, "dtn:sink/lux"])
    assert reg.returncode == 0 and reg.stdout.strip() == b"dtn:sink/lux"


def test_sigterm_clean_exit_and_fsck(daemon, tmp_path):
    for i in range(5):
        daemon.send("dtn:far", os.urandom(100_000))
    daemon.proc.send_signal(signal.SIGTERM)
    assert daemon.proc.wait(15) == 0
    store = tmp_path / "deep/new/store"
    assert fsck_path(store) == []
    check = subprocess.run([sys.executable, "-m", "bpnode", "fsck", "--store", str(store)], capture_output=True,
                           env=dict(os.environ, PYTHONPATH=SRC), timeout=30)
    assert check.returncode == 0 and b"clean" in check.stderr
