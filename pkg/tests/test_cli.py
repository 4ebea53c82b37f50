import os

import numpy as np
import pytest

from remfl import cli
from remfl import data as dat
from remfl import federation as fed

TINY_TRAIN = ["--rounds", "2", "--epochs", "1", "--sync-period", "1"]
TINY_NET = "hidden1=8\nhidden2=8\nlatent=16\nhead_hidden=4\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Map + heavy partition small enough for end-to-end CLI runs."""
    root = tmp_path_factory.mktemp("cliws")
    mappath = str(root / "map.remg")
    partdir = str(root / "part")
    assert cli.main(["gen-data", "--size", "24", "--bs", "2",
                     "--features", "5", "--seed", "3", "-o", mappath]) == 0
    assert cli.main(["partition", mappath, "--scenario", "heavy",
                     "--clients", "2x2", "--seed", "1", "-o", partdir]) == 0
    cfg = root / "net.cfg"
    cfg.write_text(TINY_NET)
    return {"root": root, "map": mappath, "part": partdir, "cfg": str(cfg)}


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_writes_loadable_grid(workspace):
    grid = dat.load_grid(workspace["map"])
    assert (grid.width, grid.height, grid.n_bs, grid.n_features) == (24, 24, 2, 5)


def test_gen_data_deterministic(workspace, tmp_path):
    again = tmp_path / "again.remg"
    assert cli.main(["gen-data", "--size", "24", "--bs", "2",
                     "--features", "5", "--seed", "3", "-o", str(again)]) == 0
    assert again.read_bytes() == open(workspace["map"], "rb").read()


def test_gen_data_rejects_zero_size(tmp_path, capsys):
    rc = cli.main(["gen-data", "--size", "0", "-o", str(tmp_path / "x.remg")])
    assert rc == 1
    assert "usage error" in capsys.readouterr().err


def test_gen_data_bad_tx_is_data_error(tmp_path, capsys):
    rc = cli.main(["gen-data", "--size", "10", "--bs", "1",
                   "--tx", "99,99", "-o", str(tmp_path / "x.remg")])
    assert rc == 2
    assert "data error" in capsys.readouterr().err


def test_gen_data_desk_preset_size(tmp_path):
    out = tmp_path / "desk.remg"
    assert cli.main(["gen-data", "--preset", "desk", "--features", "5",
                     "-o", str(out)]) == 0
    grid = dat.load_grid(out)
    assert grid.width == grid.height == 64


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------

def test_partition_layout(workspace):
    part = workspace["part"]
    dirs = sorted(d for d in os.listdir(part) if d.startswith("client_"))
    assert dirs == [f"client_{i:03d}" for i in range(4)]
    for d in dirs:
        for name in ("train.csv", "test.csv", "stats.txt"):
            assert os.path.exists(os.path.join(part, d, name))
    assert os.path.exists(os.path.join(part, "partition.txt"))


def test_partition_scenarios_disjoint(workspace, tmp_path):
    cells = {}
    for scen in dat.SCENARIOS:
        out = tmp_path / scen
        assert cli.main(["partition", workspace["map"], "--scenario", scen,
                         "--clients", "2x2", "-o", str(out)]) == 0
        part = dat.load_partition(out)
        cells[scen] = {tuple(rc) for c in part.clients
                       for rc in np.vstack([c.rc_train, c.rc_test]).astype(int)}
    assert not cells["light"] & cells["medium"]
    assert not cells["light"] & cells["heavy"]
    assert not cells["medium"] & cells["heavy"]
    assert sum(map(len, cells.values())) == 24 * 24


def test_partition_missing_map_is_data_error(tmp_path, capsys):
    rc = cli.main(["partition", str(tmp_path / "nope.remg"),
                   "--scenario", "light", "-o", str(tmp_path / "out")])
    assert rc == 2
    assert "data error" in capsys.readouterr().err


def test_partition_bad_clients_spec(workspace, tmp_path):
    rc = cli.main(["partition", workspace["map"], "--scenario", "light",
                   "--clients", "abc", "-o", str(tmp_path / "out")])
    assert rc == 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_print_config(capsys):
    assert cli.main(["train", "--print-config", "--rounds", "7",
                     "--mode", "fedavg"]) == 0
    got = dict(line.split("=", 1)
               for line in capsys.readouterr().out.strip().split("\n"))
    assert got["rounds"] == "7"
    assert got["mode"] == "fedavg"
    assert got["sparsity"] == "0.01"
    assert got["sync_period"] == "5"
    assert got["ema"] == "true"


def test_train_epfl_alias_normalizes(capsys):
    assert cli.main(["train", "--print-config", "--mode", "epfl"]) == 0
    got = dict(line.split("=", 1)
               for line in capsys.readouterr().out.strip().split("\n"))
    assert got["mode"] == "pfl"


def test_train_full_run_outputs(workspace, tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["train", "--partition", workspace["part"],
                   "--config", workspace["cfg"], *TINY_TRAIN,
                   "-o", str(out)])
    assert rc == 0
    for name in ("roundlog.csv", "manifest.txt", "backbone.npz", "heads.npz"):
        assert (out / name).exists()
    stdout = capsys.readouterr().out
    assert "rmse_macro=" in stdout
    header, rows = fed.read_roundlog(out / "roundlog.csv")
    assert len(rows) == 3  # initial snapshot + 2 rounds
    manifest = (out / "manifest.txt").read_text()
    assert "config_sha256=" in manifest
    assert "scenario=heavy" in manifest
    heads = np.load(out / "heads.npz")
    assert len(heads.files) == 4  # one personalized head per client


def test_train_unknown_config_key_names_it(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("rounds=2\nlearning_rate=0.1\n")
    rc = cli.main(["train", "--partition", workspace["part"],
                   "--config", str(bad), "-o", str(tmp_path / "r")])
    assert rc == 1
    assert "learning_rate" in capsys.readouterr().err


def test_train_invalid_value_is_usage_error(workspace, tmp_path):
    rc = cli.main(["train", "--partition", workspace["part"],
                   "--sync-period", "0", "-o", str(tmp_path / "r")])
    assert rc == 1


def test_train_missing_partition_dir(tmp_path):
    rc = cli.main(["train", "--partition", str(tmp_path / "nope"),
                   "-o", str(tmp_path / "r")])
    assert rc == 2


def test_train_ablation_flags(capsys):
    assert cli.main(["train", "--print-config",
                     "--ablate", "no-topk", "--ablate", "no-ema"]) == 0
    got = dict(line.split("=", 1)
               for line in capsys.readouterr().out.strip().split("\n"))
    assert got["topk"] == "false" and got["ema"] == "false"
    assert cli.main(["train", "--print-config", "--ablate", "bogus"]) == 1


def test_cli_rejects_unknown_command():
    assert cli.main(["frobnicate"]) == 1


# ---------------------------------------------------------------------------
# sweep and report
# ---------------------------------------------------------------------------

def test_sweep_single_cell(workspace, tmp_path, capsys):
    out = tmp_path / "sweep"
    rc = cli.main(["sweep", "--partition", workspace["part"],
                   "--config", workspace["cfg"], *TINY_TRAIN,
                   "--rho-grid", "0.05", "--period-grid", "1",
                   "--quant-grid", "on", "-o", str(out)])
    assert rc == 0
    pareto = (out / "pareto.csv").read_text().strip().split("\n")
    assert pareto[0] == "label,rmse_macro,uplink_mb,on_frontier"
    assert len(pareto) == 2  # a single cell is trivially on the frontier
    assert pareto[1].startswith("rho0.05_R1_qon,")
    assert pareto[1].endswith(",1")
    assert (out / "rho0.05_R1_qon" / "roundlog.csv").exists()


def test_report_table(workspace, tmp_path, capsys):
    run = tmp_path / "run"
    assert cli.main(["train", "--partition", workspace["part"],
                     "--config", workspace["cfg"], *TINY_TRAIN,
                     "-o", str(run)]) == 0
    csv_out = tmp_path / "summary.csv"
    capsys.readouterr()
    rc = cli.main(["report", str(run), "-o", str(csv_out)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "heavy" in out and "pfl" in out
    lines = csv_out.read_text().strip().split("\n")
    assert lines[0] == "scenario,mode,rmse_micro,rmse_macro,mae_macro,cum_uplink_mb"
    assert len(lines) == 2


def test_report_missing_column_is_data_error(tmp_path, capsys):
    run = tmp_path / "broken"
    run.mkdir()
    (run / "roundlog.csv").write_text(
        "round,scenario,mode,rmse_micro\n0,heavy,pfl,1.0\n")
    assert cli.main(["report", str(run)]) == 2
    assert "missing column" in capsys.readouterr().err


def test_report_no_runs_is_data_error(tmp_path):
    assert cli.main(["report", str(tmp_path / "none")]) == 2
