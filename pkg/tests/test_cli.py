import json
import subprocess
import sys

import numpy as np
import pytest

from robustcomm import cli
from robustcomm.occupancy import occupancy_from_policy

TINY = {
    "environment": {"kind": "custom", "slip": 0.1,
                    "grid": {"width": 3, "height": 1, "starts": [[0, 0], [2, 0]],
                             "targets": [[1, 0], [2, 0]], "name": "tiny"}},
    "synthesis": {"max_iters": 4, "warmup_iters": 2},
    "evaluation": {"n_rollouts": 300, "q_grid": [0.0, 0.5, 1.0]},
}

SOLO = {
    "environment": {"kind": "custom", "slip": 0.0,
                    "grid": {"width": 2, "height": 1, "starts": [[0, 0]], "targets": [[1, 0]]}},
    "synthesis": {"max_iters": 3, "warmup_iters": 1},
    "evaluation": {"n_rollouts": 200, "q_grid": [0.0, 0.5]},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _run(tmp_path, cfg, *args, out="out"):
    d = tmp_path / out
    return cli.main([*args, "--config", _write(tmp_path, cfg), "--out", str(d)]), d


def test_verify_command(tmp_path):
    code = cli.main(["verify", "--out", str(tmp_path)])
    assert code == 0
    rep = json.loads((tmp_path / "verify.json").read_text())
    assert rep["all_satisfied"]
    names = [f["name"] for f in rep["fixtures"]]
    assert names[:4] == ["coin1", "coin2", "two_line", "slip_line_go"]
    coin1 = rep["fixtures"][0]
    assert coin1["C"] == pytest.approx(np.log(2))


def test_single_agent_grid_end_to_end(tmp_path):
    code, d = _run(tmp_path, SOLO, "synth")
    assert code == 0
    summ = json.loads((d / "summary.json").read_text())
    for p in summ["policies"]:
        assert p["v_full"] == pytest.approx(1.0, abs=1e-8)
        assert p["C_bar"] == pytest.approx(0.0, abs=1e-9)
    code, _ = _run(tmp_path, SOLO, "eval")
    assert code == 0
    ev = json.loads((d / "eval_md.json").read_text())
    assert ev["rollouts"]["none"]["rate"] == 1.0
    assert all(c["satisfied"] for c in ev["bound_checks"])


def test_synth_eval_artifacts(tmp_path):
    code, d = _run(tmp_path, TINY, "synth")
    assert code == 0
    for f in ("base_policy.csv", "md_policy.csv", "base_occupancy.csv", "md_occupancy.csv",
              "heatmap_base.csv", "heatmap_md.csv", "trace.csv", "summary.json", "config.json"):
        assert (d / f).exists(), f
    game = cli.build_environment(cli.resolve_config(path=tmp_path / "cfg.json"))
    pi = cli.read_policy_csv(d / "md_policy.csv", game)
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    x = occupancy_from_policy(game, pi)
    summ = json.loads((d / "summary.json").read_text())
    assert summ["config_hash"] == json.loads((d / "config.json").read_text())["config_hash"]
    md = [p for p in summ["policies"] if p["policy"] == "md"][0]
    assert md["l_full"] == pytest.approx(x[:game.n_states].sum(), rel=1e-6)
    assert _run(tmp_path, TINY, "eval")[0] == 0
    ev = json.loads((d / "eval_base.json").read_text())
    assert [r["q"] for r in ev["sweep"]] == [0.0, 0.5, 1.0]
    assert ev["sweep"][0]["rate"] == ev["rollouts"]["full"]["rate"]
    assert ev["sweep"][-1]["rate"] == ev["rollouts"]["none"]["rate"]
    assert _run(tmp_path, TINY, "sweep", "--policy", "md")[0] == 0
    assert _run(tmp_path, TINY, "heatmap")[0] == 0


def test_identical_config_and_seed_give_identical_csvs(tmp_path):
    dirs = []
    for k in range(2):
        out = f"run{k}"
        for cmd in ("synth", "eval"):
            assert _run(tmp_path, TINY, cmd, "--seed", "5", out=out)[0] == 0
        dirs.append(tmp_path / out)
    csvs = sorted(p.name for p in dirs[0].glob("*.csv"))
    assert "sweep_md.csv" in csvs and "md_policy.csv" in csvs
    for name in csvs:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
    a = json.loads((dirs[0] / "eval_md.json").read_text())
    b = json.loads((dirs[1] / "eval_md.json").read_text())
    assert a["rollouts"] == b["rollouts"]


def test_seed_changes_rollouts(tmp_path):
    rates = []
    for seed in ("1", "2"):
        out = f"s{seed}"
        _run(tmp_path, TINY, "synth", "--policy", "base", out=out)
        _run(tmp_path, TINY, "sweep", "--policy", "base", "--seed", seed, out=out)
        rates.append((tmp_path / out / "sweep_base.csv").read_bytes())
    assert rates[0] != rates[1]


def test_missing_artifacts_exit_2(tmp_path):
    for cmd in ("eval", "sweep", "heatmap"):
        code, _ = _run(tmp_path, TINY, cmd, out=f"empty_{cmd}")
        assert code == 2


@pytest.mark.parametrize("bad", [
    {"environment": {"colour": "red"}},
    {"evaluation": {"q_grid": [0.5, 1.5]}},
    {"evaluation": {"n_rollouts": 0}},
    {"evaluation": {"backend": "fortran"}},
    {"environment": {"kind": "custom"}},
    {"environment": {"kind": "moon"}},
])
def test_config_errors_exit_2(tmp_path, bad, capsys):
    code, _ = _run(tmp_path, bad, "synth")
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_unknown_preset_rejected():
    with pytest.raises(SystemExit):
        cli.main(["synth", "--preset", "nine-agent"])
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(preset="nine-agent")


def test_presets_and_hash():
    c2 = cli.resolve_config("paper-2agent")
    c3 = cli.resolve_config("paper-3agent")
    assert c2["synthesis"]["max_iters"] == 100 and c3["synthesis"]["max_iters"] == 50
    assert c3["environment"]["kind"] == "three_agent"
    assert cli.config_hash(c2) != cli.config_hash(c3)
    assert cli.config_hash(c2) == cli.config_hash(cli.resolve_config("paper-2agent"))
    assert cli.config_hash(cli.resolve_config(seed=1)) != cli.config_hash(cli.resolve_config(seed=2))


def test_global_flags_before_or_after_subcommand(tmp_path):
    cfg = _write(tmp_path, SOLO)
    cli.main(["--seed", "7", "heatmap", "--config", cfg, "--out", str(tmp_path / "a")])
    cli.main(["heatmap", "--seed", "7", "--config", cfg, "--out", str(tmp_path / "b")])
    for d in ("a", "b"):
        assert json.loads((tmp_path / d / "config.json").read_text())["config"]["seed"] == 7


def test_default_output_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = _write(tmp_path, SOLO)
    cli.main(["heatmap", "--config", cfg])
    h = cli.config_hash(cli.resolve_config(path=cfg))
    assert (tmp_path / "runs" / h / "config.json").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "robustcomm", "--help"], capture_output=True,
                         text=True, check=True)
    for cmd in ("synth", "eval", "sweep", "heatmap", "verify"):
        assert cmd in out.stdout
