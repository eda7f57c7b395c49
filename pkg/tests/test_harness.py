import csv
import json

import pytest

from bpnode.harness import (
    RESULT_FIELDS,
    EventReader,
    ExperimentSpec,
    load_specs,
    main,
    plot,
    run_experiment,
    seeded_payload,
    summarize,
)


def test_seeded_payload_deterministic():
    assert seeded_payload(4096, 7) == seeded_payload(4096, 7)
    assert seeded_payload(4096, 7) != seeded_payload(4096, 8)
    assert len(seeded_payload(0, 1)) == 0


def test_event_reader_partial_lines(tmp_path):
    path = tmp_path / "e.jsonl"
    reader = EventReader(path)
    assert reader.poll() == []
    with open(path, "w") as f:
        f.write('{"event": "a", "ts": 1}\n{"event": "b",')
    assert [r["event"] for r in reader.poll()] == ["a"]
    with open(path, "a") as f:
        f.write(' "ts": 2, "bundle": "x"}\n')
    assert reader.find("b", "x") == [{"event": "b", "ts": 2, "bundle": "x"}]


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec(1, 100)
    with pytest.raises(ValueError):
        ExperimentSpec(2, 100, repetitions=0)
    assert ExperimentSpec(2, 1, bandwidth_limit=0).bandwidth_limit is None


def test_load_specs_sweep_and_list(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text(
        "[sweep]\nchain_length = [2, 8]\npayload_bytes = [1, 2, 3]\nrepetitions = 4\n\n"
        "[[experiment]]\nchain_length = 5\npayload_bytes = 9\nhop_limit = 3\n"
    )
    specs = load_specs(path)
    assert len(specs) == 7
    assert specs[0] == ExperimentSpec(5, 9, hop_limit=3)
    assert {(s.chain_length, s.payload_bytes) for s in specs[1:]} == {(c, p) for c in (2, 8) for p in (1, 2, 3)}
    assert all(s.repetitions == 4 for s in specs[1:])
    path.write_text("[sweep]\nchain = [2]\n")
    with pytest.raises(ValueError):
        load_specs(path)


def test_summarize():
    rows = [{"delivered": True, "latency_ms": x} for x in (10.0, 30.0, 20.0)] + [{"delivered": False, "latency_ms": ""}]
    s = summarize(rows)
    assert s["delivered"] == 3 and s["total"] == 4 and s["median_ms"] == 20.0 and s["stdev_ms"] == pytest.approx(10.0)


def test_small_chain_rows(tmp_path):
    samples = []
    rows = run_experiment(ExperimentSpec(3, 20_000, repetitions=2, seed=3), tmp_path / "w", samples)
    assert [r["repetition"] for r in rows] == [0, 1]
    for r in rows:
        assert r["delivered"] and r["payload_ok"]
        times = json.loads(r["hop_times_ms"])
        assert times == sorted(times) and len(times) == 2
        assert json.loads(r["hop_counts"]) == [1, 2]
        assert json.loads(r["previous_nodes"]) == ["dtn:n1", "dtn:n2"]
    assert samples and {"ts", "node", "bytes_in", "bytes_out", "cpu_time", "stored"} <= set(samples[0])


def test_hop_limited_chain_not_delivered(tmp_path):
    rows = run_experiment(ExperimentSpec(5, 1000, repetitions=1, hop_limit=2, timeout=5), tmp_path / "w")
    assert rows[0]["delivered"] is False
    assert rows[0]["deleted_reason"] == "hop limit exceeded"


def test_cli_run_and_plot(tmp_path):
    out, samples, png = tmp_path / "r.csv", tmp_path / "s.csv", tmp_path / "p.png"
    assert main(["run", "--chain", "2", "--payload", "1000", "--reps", "2", "--out", str(out), "--samples", str(samples)]) == 0
    with open(out, newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == RESULT_FIELDS
    assert [r["delivered"] for r in rows] == ["True", "True"]
    pytest.importorskip("matplotlib")
    plot(out, png)
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
