"""Config parsing, command wiring, outputs and manifests."""

import json
import os

import pytest

from flowrep.cli import Config, ConfigError, main, parse_quantity


def test_parse_quantities():
    assert parse_quantity("200ms") == (0.2, "ms")
    assert parse_quantity("400us")[0] == pytest.approx(4e-4)
    assert parse_quantity("100KB") == (100_000, "kb")
    assert parse_quantity("1Gbps") == (1e9, "gbps")
    assert parse_quantity("2000pkt") == (2000, "pkt")
    assert parse_quantity("0.5") == (0.5, None)


def test_parse_rejects_junk():
    with pytest.raises(ConfigError):
        parse_quantity("fast")
    with pytest.raises(ConfigError):
        parse_quantity("10 parsecs")


def write_cfg(tmp_path, text):
    path = tmp_path / "scenario.cfg"
    path.write_text(text)
    return path


def test_config_load_and_accessors(tmp_path):
    path = write_cfg(tmp_path, """
# comment
backend = sim
loads = 0.1 0.5
seeds = 1, 2
probes = 500
probe_interval = 400us
""")
    cfg = Config.load(path)
    assert cfg.get("backend") == "sim"
    assert cfg.list_of("loads", conv=float) == [0.1, 0.5]
    assert cfg.seeds() == [1, 2]
    assert cfg.seeds(7) == [7]
    assert cfg.integer("probes") == 500
    assert cfg.seconds("probe_interval") == pytest.approx(4e-4)
    assert len(cfg.sha256()) == 64


def test_config_rejects_bad_lines(tmp_path):
    path = write_cfg(tmp_path, "this is not a config\n")
    with pytest.raises(ConfigError):
        Config.load(path)


def test_missing_config_file_is_exit_1(tmp_path, capsys):
    rc = main(["probe", "--config", str(tmp_path / "nope.cfg"),
               "--out", str(tmp_path / "out")])
    assert rc == 1
    assert "config error" in capsys.readouterr().err


def test_probe_command_writes_outputs(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "probes = 300\nprobe_interval = 400us\nseed = 1\n")
    out = tmp_path / "out"
    rc = main(["probe", "--config", str(cfg), "--out", str(out),
               "--scheme", "plain", "--seed", "2"])
    assert rc == 0
    assert (out / "rtt_plain.csv").exists()
    assert (out / "manifest.json").exists()
    summary = json.loads((out / "probe_summary.json").read_text())
    assert "plain" in summary and summary["plain"]["n"] == 300
    header = (out / "rtt_plain.csv").read_text().splitlines()[0]
    assert header == "t_us,rtt_us,scheme"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "probe"
    assert manifest["seeds"] == [2]
    assert len(manifest["config_sha256"]) == 64


def test_sweep_command_small_run(tmp_path):
    cfg = write_cfg(tmp_path, "loads = 0.3\nschemes = plain repflow\n"
                              "seeds = 1\nmice_flows = 120\n")
    out = tmp_path / "sweep"
    rc = main(["sweep", "--config", str(cfg), "--out", str(out),
               "--workers", "1"])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"plain", "repflow"}
    assert "0.3" in summary["plain"]
    assert summary["plain"]["0.3"]["n"] >= 120
    csvs = list(out.glob("flows_*.csv"))
    assert len(csvs) == 2


def test_sweep_idempotent_same_seed(tmp_path):
    cfg = write_cfg(tmp_path, "loads = 0.3\nschemes = plain\nseeds = 3\n"
                              "mice_flows = 80\n")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["sweep", "--config", str(cfg), "--out", str(out1),
                 "--workers", "1"]) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(out2),
                 "--workers", "1"]) == 0
    csv1 = (out1 / "flows_plain_0.3_3.csv").read_text()
    csv2 = (out2 / "flows_plain_0.3_3.csv").read_text()
    assert csv1 == csv2


def test_sort_command_small(tmp_path):
    cfg = write_cfg(tmp_path, "jobs = 3\nsort_values = 800\nseed = 5\n")
    out = tmp_path / "sort"
    rc = main(["sort", "--config", str(cfg), "--out", str(out),
               "--scheme", "repflow"])
    assert rc == 0
    summary = json.loads((out / "sort_summary.json").read_text())
    assert summary["repflow"]["n"] == 3
    assert summary["repflow"]["all_correct"] is True
    lines = (out / "jct_repflow.csv").read_text().splitlines()
    assert lines[0] == "job,jct_us,correct"
    assert len(lines) == 4


def test_outputs_stay_inside_out_dir(tmp_path):
    cfg = write_cfg(tmp_path, "probes = 50\nseed = 1\n")
    out = tmp_path / "only_here"
    before = set(os.listdir(tmp_path))
    rc = main(["probe", "--config", str(cfg), "--out", str(out),
               "--scheme", "repsyn"])
    assert rc == 0
    after = set(os.listdir(tmp_path))
    assert after - before == {"only_here"}
