import json
import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from bidomain import __version__
from bidomain.cli import dispatch, main
from bidomain.config import DEFAULTS, ConfigError, load_config, parse_config

SMALL = """
[geometry]
kind = "inclusion"
resolution = 4
eps = 0.5

[time]
dt = 0.01
T = 0.05

[study]
eps = [1.0, 0.5]
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return str(p)


def test_minimal_laminate_gets_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, '[geometry]\nkind = "laminate"\n'))
    assert cfg["time"]["dt"] == DEFAULTS["time"]["dt"]
    assert cfg["solver"]["tol"] == 1e-10
    assert cfg.geometry.kind == "laminate"


def test_all_errors_reported(tmp_path):
    text = """
    [geometry]
    kind = "laminate"
    thickness = 0.3
    resolution = 8
    colour = "red"
    [study]
    eps = [0.3]
    [time]
    dt = -1
    [extras]
    """
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, text))
    msgs = err.value.errors
    assert any(m.startswith("geometry.thickness") for m in msgs)
    assert any("eps must be 1/N" in m for m in msgs)
    assert any(m.startswith("time.dt") for m in msgs)
    assert any("geometry.colour" in m for m in msgs)
    assert any("[extras]" in m for m in msgs)


def test_syntax_error_has_line_number(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_config(write(tmp_path, "[time]\ndt = 0.01\nT = = 2\n"))
    assert "line 3" in str(err.value)


def test_hash_ignores_formatting(tmp_path):
    a = parse_config(write(tmp_path, SMALL, "a.toml"))
    reformatted = "# comment\n[study]\neps=[1,0.5]\n[time]\nT=0.05\n  dt = 0.01\n" \
                  "[geometry]\neps=0.5\nresolution=4\nkind='inclusion'\n"
    b = parse_config(write(tmp_path, reformatted, "b.toml"))
    assert a.hash == b.hash
    c = load_config({"geometry": {"resolution": 4, "eps": 0.5}, "time": {"dt": 0.01, "T": 0.1}})
    assert c.hash != a.hash


def test_sigma_validation():
    with pytest.raises(ConfigError, match="sigma.e"):
        load_config({"sigma": {"e": [[1.0, 2.0], [2.0, 1.0]]}})
    with pytest.raises(ConfigError, match="sigma.i"):
        load_config({"sigma": {"i": [[1.0, 0.0, 0.0]]}})


def test_pulse_sources_are_compatible():
    cfg = load_config({})
    s_i, s_e = cfg.sources
    m = (np.arange(64) + 0.5) / 64
    x = np.stack(np.meshgrid(m, m), axis=-1).reshape(-1, 2)
    cell = cfg.cell
    total = cell.volume_i * s_i(0.0, x).mean() + cell.volume_e * s_e(0.0, x).mean()
    assert abs(total) < 1e-12
    assert not s_i(0.2, x).any()


@pytest.mark.parametrize("sub", ["cell-tensor", "micro", "macro", "converge", "unfold-check"])
def test_subcommands_embed_hash(tmp_path, sub, capsys):
    cfg = parse_config(write(tmp_path, SMALL))
    out = tmp_path / "out"
    assert dispatch(sub, cfg, str(out), serial=True) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["config_hash"] == cfg.hash and summary["files"]
    for f in summary["files"]:
        if f.endswith(".npz"):
            assert str(np.load(f)["meta_config_hash"]) == cfg.hash
        else:
            head = open(f).read(4096)
            assert cfg.hash in head
    if sub == "unfold-check":
        assert summary["identities_passed"] is True


def test_exit_codes(tmp_path, capsys):
    assert main(["converge", "--config", write(tmp_path, "[study]\neps = []\n"), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and err["exit_code"] == 2
    assert main(["micro", "--config", str(tmp_path / "missing.toml")]) == 2
    unstable = SMALL.replace("dt = 0.01", "dt = 0.05").replace("T = 0.05", "T = 0.05")
    with pytest.warns(UserWarning):
        assert main(["micro", "--config", write(tmp_path, unstable, "u.toml"), "--out", str(tmp_path / "u")]) == 0
    blowup = SMALL + '\n[membrane]\npreset = "custom"\ni1 = [0.0, 0.0, 0.0, -50.0]\n[sources]\nv0 = 3.0\n'
    assert main(["micro", "--config", write(tmp_path, blowup.replace("T = 0.05", "T = 1.0"), "b.toml"),
                 "--out", str(tmp_path / "b")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "numerical"


def test_console_entry_point(tmp_path):
    env = dict(os.environ, BIDOMAIN_THREADS="1")
    proc = subprocess.run([sys.executable, "-m", "bidomain.cli", "unfold-check", "--config", write(tmp_path, SMALL),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["version"] == __version__
    proc = subprocess.run([sys.executable, "-m", "bidomain.cli", "frobnicate", "--config", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "usage"
