import csv
import json

import pytest

from fading_stab.cli import main, parse_grid, InputError


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def example1(lam=1.49, policy=True):
    cfg = {"plant": {"eigenvalues": [lam]}, "channel": {"gains": [1.0, 0.5], "noise_var": 1.0, "block_len": 20},
           "fading": {"iid": [0.5, 0.5]}}
    if policy:
        cfg["policy"] = {"per_state": [5.0, 4.7]}
    return cfg


def test_check_exit_codes(tmp_path, capsys):
    assert main(["check", "--config", write(tmp_path, example1(1.49))]) == 0
    out = capsys.readouterr().out
    assert "stabilizable" in out and "iid_scalar" in out
    margin = float(out.split("margin:")[1])
    assert margin > 0
    assert main(["check", "--config", write(tmp_path, example1(1.51))]) == 1


def test_check_input_errors(tmp_path, capsys):
    bad = example1()
    bad["fading"] = {"markov": [[0.5, 0.6], [0.5, 0.5]]}
    assert main(["check", "--config", write(tmp_path, bad)]) == 2
    assert main(["check", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["check", "--config", write(tmp_path, example1(policy=False))]) == 2
    assert main(["bogus"]) == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["check", "--config", str(tmp_path / "junk.json")]) == 2


def test_lambda_max(tmp_path, capsys):
    assert main(["lambda-max", "--config", write(tmp_path, example1())]) == 0
    lam = float(capsys.readouterr().out.split(":")[1])
    assert abs(lam - 1.5007) <= 1e-3
    one = {"plant": {"eigenvalues": [1.5]}, "channel": {"gains": [1.0], "noise_var": 1.0, "block_len": 10},
           "fading": {"iid": [1.0]}, "policy": {"per_state": [3.0]}}
    main(["lambda-max", "--config", write(tmp_path, one)])
    assert float(capsys.readouterr().out.split(":")[1]) == pytest.approx(2.0, rel=1e-10)
    one["policy"] = {"per_state": [0.0]}
    main(["lambda-max", "--config", write(tmp_path, one)])
    assert float(capsys.readouterr().out.split(":")[1]) == 1.0


def _p_star(out):
    return float(out.split("P*:")[1].split()[0])


@pytest.mark.parametrize("pi1,expected", [(1.0, 1.25), (0.0, 5.0)])
def test_min_power_endpoints(tmp_path, capsys, pi1, expected):
    cfg = example1(1.5, policy=False)
    cfg["fading"] = {"iid": [pi1, 1 - pi1]}
    path = write(tmp_path, cfg)
    assert main(["min-power", "--config", path]) == 0
    assert _p_star(capsys.readouterr().out) == pytest.approx(expected, abs=1e-6)
    assert main(["min-power", "--config", path, "--uniform"]) == 0
    assert _p_star(capsys.readouterr().out) == pytest.approx(expected, abs=1e-6)


def test_min_power_interior_and_csv(tmp_path, capsys):
    path = write(tmp_path, example1(1.5, policy=False))
    out_csv = tmp_path / "policy.csv"
    assert main(["min-power", "--config", path, "--out", str(out_csv)]) == 0
    adapted = _p_star(capsys.readouterr().out)
    main(["min-power", "--config", path, "--uniform"])
    uniform = _p_star(capsys.readouterr().out)
    assert adapted < uniform and adapted < 4.85
    lines = out_csv.read_text().splitlines()
    assert lines[0].startswith("# config_sha256=") and lines[1] == "state,power_slot_0"


def test_min_power_convergence_failure(tmp_path, capsys, monkeypatch):
    from fading_stab import ConvergenceError, cli

    def boom(*a, **k):
        raise ConvergenceError("stalled", incumbent=None)

    monkeypatch.setattr(cli, "min_power", boom)
    assert main(["min-power", "--config", write(tmp_path, example1(policy=False))]) == 3


def _read_sweep(path):
    lines = open(path).read().splitlines()
    assert lines[0].startswith("# config_sha256=")
    return list(csv.DictReader(lines[1:]))


def test_sweep_pi(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    svg = tmp_path / "sweep.svg"
    code = main(["sweep", "--config", write(tmp_path, example1(1.5, policy=False)), "--sweep-var", "pi_1",
                 "--grid", "0:1:0.05", "--out", str(out), "--svg", str(svg)])
    assert code == 0
    rows = _read_sweep(out)
    assert len(rows) == 21
    for r in rows:
        assert float(r["adapted_p_star"]) <= float(r["uniform_p_star"]) + 1e-9
    for r in rows[1:-1]:
        assert float(r["adapted_p_star"]) < float(r["uniform_p_star"])
    assert float(rows[0]["adapted_p_star"]) == pytest.approx(5.0, abs=1e-6)
    assert float(rows[-1]["adapted_p_star"]) == pytest.approx(1.25, abs=1e-6)
    assert "adapted <= uniform everywhere: True" in capsys.readouterr().out
    text = svg.read_text()
    assert text.startswith("<svg") and text.count("<polyline") == 2 and "uniform" in text


def test_sweep_single_point_and_flags_override(tmp_path, capsys):
    cfg = example1(1.5, policy=False)
    cfg.update({"sweep_var": "noise", "grid": "0:1:0.5"})
    out = tmp_path / "one.csv"
    assert main(["sweep", "--config", write(tmp_path, cfg), "--sweep-var", "pi_1", "--grid", "0.5:0.5:1",
                 "--out", str(out)]) == 0
    rows = _read_sweep(out)
    assert len(rows) == 1 and list(rows[0])[0] == "pi_1"


def test_sweep_lambda_growth(tmp_path):
    out = tmp_path / "lam.csv"
    main(["sweep", "--config", write(tmp_path, example1(1.5, policy=False)), "--sweep-var", "lambda",
          "--grid", "1.1:2.5:0.2", "--out", str(out)])
    vals = [float(r["adapted_p_star"]) for r in _read_sweep(out)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 10 * vals[0]


def test_sweep_bad_inputs(tmp_path):
    path = write(tmp_path, example1(1.5, policy=False))
    assert main(["sweep", "--config", path, "--grid", "1:0:0.1"]) == 2
    assert main(["sweep", "--config", path]) == 2
    assert main(["sweep", "--config", path, "--sweep-var", "gain", "--grid", "0:1:1"]) == 2


def test_sweep_marks_failed_points(tmp_path):
    out = tmp_path / "n.csv"
    # n = 3 and 5 are fine for a scalar plant; a 1-dimensional grid value of n = 1 is invalid
    code = main(["sweep", "--config", write(tmp_path, example1(1.5, policy=False)), "--sweep-var", "n",
                 "--grid", "1:5:2", "--out", str(out)])
    rows = _read_sweep(out)
    assert [r["status"] for r in rows] == ["ValidationError", "ok", "ok"]
    assert code == 3


def test_grid_parsing():
    assert list(parse_grid("0:1:0.25")) == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert len(parse_grid("0:1:0.05")) == 21
    with pytest.raises(InputError):
        parse_grid("0:1")
    with pytest.raises(InputError):
        parse_grid("0:1:0")


def test_simulate(tmp_path, capsys):
    cfg = example1(1.45)
    out = tmp_path / "trace.csv"
    assert main(["simulate", "--config", write(tmp_path, cfg), "--trials", "10000", "--blocks", "20",
                 "--seed", "1", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "summary: stabilized" in text and "max alpha deviation" in text
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    assert lines[1] == "block_index,state,alpha_analytic,alpha_empirical,mean_square_state,realized_power"
    assert len(lines) == 22


def test_simulate_few_trials(tmp_path, capsys):
    out = tmp_path / "trace.csv"
    assert main(["simulate", "--config", write(tmp_path, example1(1.45)), "--trials", "10", "--blocks", "3",
                 "--out", str(out)]) == 0
    assert "at least 1000" in capsys.readouterr().out
    assert out.exists()


def test_simulate_mismatch_exit(tmp_path, capsys, monkeypatch):
    from fading_stab import sim

    real = sim.empirical_vs_analytic

    def broken(trace):
        rep = real(trace)
        return type(rep)(**{**rep.__dict__, "alpha_within_bands": False})

    monkeypatch.setattr(sim, "empirical_vs_analytic", broken)
    assert main(["simulate", "--config", write(tmp_path, example1(1.45)), "--trials", "1000",
                 "--blocks", "2"]) == 4


def test_config_hash_changes_with_flags(tmp_path):
    path = write(tmp_path, example1(1.5, policy=False))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["sweep", "--config", path, "--grid", "0:1:0.5", "--out", str(a)])
    main(["sweep", "--config", path, "--grid", "0:1:0.5", "--out", str(b), "--tol", "1e-10"])
    assert a.read_text().splitlines()[0] != b.read_text().splitlines()[0]
