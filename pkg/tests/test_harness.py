import subprocess
import sys

import numpy as np
import pytest

from compositeq.harness import cli, config, experiments


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


TABULAR = """
run_id = tab
env = deterministic
K = 10
learner = composite
update_budget = 20000
checkpoint_every = 1000
seeds = 0,1
"""

DEEP = """
run_id = dp
agent = composite_td3
total_steps = 300
start_steps = 100
eval_every = 100
eval_episodes = 2
critic_hidden = 8
actor_hidden = 8,8
batch_size = 16
reward_noise = 0.4
"""


# -- config ------------------------------------------------------------------------


def test_parse_text_comments_and_duplicates():
    assert config.parse_text("a = 1  # note\n\n# only comment\nb=x") == {"a": "1", "b": "x"}
    with pytest.raises(config.ConfigError, match="duplicate"):
        config.parse_text("a = 1\na = 2")
    with pytest.raises(config.ConfigError):
        config.parse_text("no equals sign")


@pytest.mark.parametrize("kind,raw,match", [
    ("tabular", {"bogus": "1"}, "unknown key"),
    ("tabular", {"K": "ten"}, "K"),
    ("tabular", {"learner": "sarsa"}, "learner"),
    ("tabular", {"K": "3"}, "K >= 6"),
    ("tabular", {"gamma": "1.5"}, "gamma"),
    ("tabular", {"seeds": ""}, "seeds"),
    ("deep", {"agent": "ddpg"}, "agent"),
    ("deep", {"K": "10"}, "unknown key"),
    ("sweep", {"base": "tabular"}, "grid_"),
    ("sweep", {"base": "bandit", "grid_n": "1"}, "base"),
    ("report", {"baseline": "a.csv"}, "same number"),
])
def test_config_rejections(kind, raw, match):
    with pytest.raises(config.ConfigError, match=match):
        config.build(kind, raw)


def test_defaults_and_lists():
    cfg = config.build("deep", {"actor_hidden": "64, 64", "stop_return": "-6.8"})
    assert cfg["actor_hidden"] == [64, 64] and cfg["stop_return"] == -6.8
    assert cfg["run_id"] == "deep" and cfg["seeds"] == [0]
    assert config.build("sweep", {"grid_n": "1,2"})["base"] == "tabular"


def test_output_precedence(tmp_path, monkeypatch):
    path = write(tmp_path, "c.cfg", "output_dir = from_file\n")
    monkeypatch.delenv("CQ_OUT", raising=False)
    assert config.load("oracle", path)["output_dir"] == "from_file"
    monkeypatch.setenv("CQ_OUT", "from_env")
    assert config.load("oracle", path)["output_dir"] == "from_env"
    assert config.load("oracle", path, out="from_flag")["output_dir"] == "from_flag"
    assert config.load("oracle", path, seed=7)["seeds"] == [7]


# -- CLI exit codes ----------------------------------------------------------------------


def test_exit_code_config_errors(tmp_path):
    bad = write(tmp_path, "bad.cfg", "K = 10\nbogus = 1\n")
    assert cli.main(["tabular", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["tabular", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert cli.main(["fly", "--config", str(bad)]) == 2
    assert cli.main(["tabular"]) == 2


def test_exit_code_divergence(tmp_path):
    cfg = write(tmp_path, "d.cfg", DEEP.replace("reward_noise = 0.4", "optimizer = sgd\nalpha_q = 1e6"))
    with pytest.warns(RuntimeWarning):
        assert cli.main(["deep", "--config", str(cfg), "--out", str(tmp_path)]) == 3


def test_console_script_entry_point(tmp_path):
    cfg = write(tmp_path, "o.cfg", "env = probe\nn = 2\n")
    proc = subprocess.run([sys.executable, "-m", "compositeq.harness.cli", "oracle", "--config",
                           str(cfg), "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "oracle.csv").exists()


# -- outputs -----------------------------------------------------------------------------


def _run_twice(tmp_path, kind, text, name):
    cfg = write(tmp_path, f"{kind}.cfg", text)
    out = []
    for d in ("a", "b"):
        assert cli.main([kind, "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
        out.append((tmp_path / d / name).read_bytes())
    assert out[0] == out[1]
    return out[0]


def test_oracle_output(tmp_path):
    data = _run_twice(tmp_path, "oracle", "run_id = or\nenv = deterministic\nK = 10\nn = 4\nwrite_mdp = true\n",
                      "or.csv")
    assert b"\r" not in data
    rows = data.decode().splitlines()
    assert rows[0] == "run_id,seed,step,metric,value"
    metrics = experiments.read_metrics(tmp_path / "a" / "or.csv")[("or", 0)]
    assert metrics["q_star_s0_a0"][1][0] == -10.0
    assert metrics["trunc_4_s0_a"][1][0] == -4.0
    assert metrics["identity_residual"][1][0] < 1e-8
    assert (tmp_path / "a" / "or_tables.csv").read_text().startswith("table,s,a,value\n")
    assert (tmp_path / "a" / "or.mdp").exists()


def test_tabular_output_deterministic(tmp_path):
    data = _run_twice(tmp_path, "tabular", TABULAR, "tab.csv")
    metrics = experiments.read_metrics(tmp_path / "a" / "tab.csv")
    assert set(metrics) == {("tab", 0), ("tab", 1)}
    steps, values = metrics[("tab", 0)]["greedy_optimal"]
    assert steps[0] == 1000 and steps[-1] == 20000 and set(values) <= {0.0, 1.0}
    assert data.endswith(b"\n") and b"\r" not in data


def test_seed_flag_restricts_run(tmp_path):
    cfg = write(tmp_path, "t.cfg", TABULAR)
    assert cli.main(["tabular", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path)]) == 0
    assert set(experiments.read_metrics(tmp_path / "tab.csv")) == {("tab", 5)}


def test_cq_out_environment(tmp_path, monkeypatch):
    cfg = write(tmp_path, "o.cfg", "run_id = env\nenv = probe\n")
    monkeypatch.setenv("CQ_OUT", str(tmp_path / "envdir"))
    assert cli.main(["oracle", "--config", str(cfg)]) == 0
    assert (tmp_path / "envdir" / "env.csv").exists()


def test_deep_output_deterministic(tmp_path):
    _run_twice(tmp_path, "deep", DEEP, "dp.csv")
    series = experiments.read_metrics(tmp_path / "a" / "dp.csv")[("dp", 0)]
    assert list(series["eval_return"][0]) == [0, 100, 200, 300]
    assert "critic_loss" in series and "entropy" in series


def test_sweep_single_cell(tmp_path):
    text = TABULAR.replace("run_id = tab", "run_id = sw") + "grid_alpha_sh = 0.01\n"
    _run_twice(tmp_path, "sweep", text, "sw_auc.csv")
    summary = experiments.read_metrics(tmp_path / "a" / "sw_auc.csv")
    assert list(summary) == [("sw_alpha_sh=0.01", -1)]
    cell = experiments.read_metrics(tmp_path / "a" / "sw_alpha_sh=0.01.csv")
    per_seed = [experiments.auc(*s["greedy_optimal"]) for s in cell.values()]
    assert summary[("sw_alpha_sh=0.01", -1)]["auc"][1][0] == pytest.approx(np.mean(per_seed))


def test_sweep_grid_product():
    cfg = config.build("sweep", {"grid_n": "1,2", "grid_alpha_tr": "0.1,0.2,0.3"})
    cells = experiments.grid_cells(cfg)
    assert len(cells) == 6 and cells[0] == {"n": 1, "alpha_tr": 0.1}


def test_sweep_rejects_deep_axes_on_tabular(tmp_path):
    cfg = write(tmp_path, "s.cfg", TABULAR + "grid_beta_tr = 0.1\n")
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def _fake_run(path, run_id, seed, steps, flags):
    with experiments.MetricWriter(path) as w:
        w.write(run_id, seed, [(s, "greedy_optimal", f) for s, f in zip(steps, flags)])


def test_report_speedup_with_unconverged(tmp_path):
    base, cand, never = tmp_path / "b.csv", tmp_path / "c.csv", tmp_path / "n.csv"
    _fake_run(base, "b", 0, [100, 200, 300, 400], [0, 0, 0, 1])
    _fake_run(cand, "c", 0, [100, 200, 300, 400], [0, 1, 1, 1])
    _fake_run(never, "n", 0, [100, 200, 300, 400], [0, 1, 0, 0])
    rows = experiments.report_speedup([base, base], [cand, never], ["k", "bad"])
    assert rows[0].per_seed == [pytest.approx(0.5)]
    assert rows[1].mean is None
    text = experiments.format_speedup(rows)
    assert "k\t50.0%\t50.0%" in text and "bad\tn/c\tn/c" in text

    cfg = write(tmp_path, "r.cfg", f"run_id = rep\nbaseline = {base},{base}\ncandidate = {cand},{never}\nlabels = k,bad\n")
    with pytest.warns(UserWarning, match="n/c"):
        assert cli.main(["report", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "rep.txt").read_text() == text


def test_report_missing_metric_is_config_error(tmp_path):
    path = tmp_path / "x.csv"
    with experiments.MetricWriter(path) as w:
        w.write("x", 0, [(0, "other", 1.0)])
    cfg = write(tmp_path, "r.cfg", f"baseline = {path}\ncandidate = {path}\n")
    assert cli.main(["report", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_report_auc(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    with experiments.MetricWriter(a) as w:
        w.write("a", 0, [(0, "eval_return", -10.0), (10, "eval_return", -2.0)])
    with experiments.MetricWriter(b) as w:
        w.write("b", 0, [(0, "eval_return", -10.0), (10, "eval_return", -10.0)])
    text = experiments.report_auc([a], [b], ["x"])
    assert text == "label\tbaseline_auc\tcandidate_auc\twelch_p\nx\t-6\t-10\tnan\n"


def test_welch_test():
    from compositeq.runs import welch_test

    t, p = welch_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert t == 0.0 and p == 1.0
    t, p = welch_test([0.0, 0.1, -0.1, 0.05], [5.0, 5.2, 4.9, 5.1])
    assert t < 0 and p < 1e-4
    assert np.isnan(welch_test([1.0], [2.0, 3.0])[1])


def test_metric_writer_flushes_each_write(tmp_path):
    path = tmp_path / "m.csv"
    w = experiments.MetricWriter(path)
    w.write("r", 0, [(1, "m", 0.1)])
    assert path.read_text() == "run_id,seed,step,metric,value\nr,0,1,m,0.1\n"
    w.close()
