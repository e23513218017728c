import csv
import json
import textwrap

import numpy as np
import pytest

from conftest import SCENARIOS, RATES3
from dssl.cli import CSV_COLUMNS, EXIT_INFEASIBLE, EXIT_LIVELOCK, EXIT_OK, EXIT_USAGE, main
from dssl.scenario import ScenarioError, load_scenario, parse_scenario

GE = """\
version: 1
users: 2
channels: 3
channel_bank:
  kind: gilbert_elliott
  p01: [0.1, 0.5, 0.3]
  p10: [0.2, 0.1, 0.4]
  r1: [[1.0, 0.9, 0.8], [0.7, 1.1, 0.95]]
  r0: 0.1
learner:
  exploration_floor: 5
run:
  horizon: 3000
  runs: 3
  seed: 4
"""

RATES3_YAML = """\
version: 1
users: 3
channels: 3
channel_bank:
  kind: scaled
  transition: [[0.6, 0.4], [0.3, 0.7]]
  levels: [0.5, 2.0]
  means: [[45, 70, 35], [30, 90, 60], [65, 10, 50]]
learner:
  L: {L}
  epsilon: {eps}
  delta_lb: 10
run:
  horizon: 1000
"""


def write(tmp_path, text, name="s.yaml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


# ---- parsing


def test_shipped_scenarios_load():
    for name in ("banded", "gilbert_elliott", "rates3"):
        sc = load_scenario(SCENARIOS / f"{name}.yaml")
        assert sc.name == name


def test_banded_means(scenario_banded):
    U = scenario_banded.rates.entries
    np.testing.assert_allclose(U[:, :3], RATES3 * [[1, 1, 1], [0.9167, 1, 1], [1, 1, 1]], rtol=1e-3)
    assert scenario_banded.stable.assignment.tolist() == [2, 1, 0]
    assert scenario_banded.channels[0][0].n_states == 6


def test_gilbert_elliott_bank(scenario_ge):
    assert (scenario_ge.M, scenario_ge.K) == (2, 6)
    ch = scenario_ge.channels[0][5]
    assert ch.transition[0, 1] == pytest.approx(0.7)
    assert ch.transition[1, 0] == pytest.approx(0.08)
    assert scenario_ge.params.floor == pytest.approx(20.0)


def test_gilbert_elliott_per_pair(tmp_path):
    sc = load_scenario(write(tmp_path, GE))
    assert sc.channels[1][1].states.tolist() == [0.1, 1.1]
    assert sc.channels[0][2].transition[1, 0] == pytest.approx(0.4)
    assert sc.horizon == 3000 and sc.runs == 3 and sc.seed == 4 and sc.policy == "dssl"


def test_explicit_bank_and_fractions(tmp_path):
    text = """\
    version: 1
    users: 1
    channels: 2
    channel_bank:
      kind: explicit
      bank:
        - - {states: [0, 1], transition: [["2/3", "1/3"], ["1/4", "3/4"]]}
          - {states: [0.2, 3], transition: [[0.5, 0.5], [0.5, 0.5]]}
    """
    sc = load_scenario(write(tmp_path, text))
    assert sc.channels[0][0].transition[0, 0] == 2 / 3
    assert sc.rates.entries[0, 1] == pytest.approx(1.6)
    assert sc.params.delta_lb == pytest.approx(sc.rates.delta_min)
    assert sc.params.epsilon == pytest.approx(0.25 * sc.rates.delta_min**2)


def test_scaled_rayleigh_levels(tmp_path):
    text = """\
    version: 1
    users: 1
    channels: 2
    channel_bank:
      kind: scaled
      transition: [[0.7, 0.3, 0.0], [0.2, 0.6, 0.2], [0.0, 0.3, 0.7]]
      levels: {fading: rayleigh, scale: 1.0}
      means: [[2.0, 5.0]]
    """
    sc = load_scenario(write(tmp_path, text))
    np.testing.assert_allclose(sc.rates.entries, [[2.0, 5.0]])
    s = sc.channels[0][0].states
    assert np.all(np.diff(s) > 0)


def test_fading_bank(tmp_path):
    text = """\
    version: 1
    users: 1
    channels: 2
    channel_bank:
      kind: fading
      family: rayleigh
      scale: [1.0, 2.0]
      states: 3
      correlation: 0.8
      trace_length: 20000
      seed: 3
    """
    sc = load_scenario(write(tmp_path, text))
    assert sc.channels[0][1].n_states == 3
    assert sc.rates.entries[0, 1] == pytest.approx(2 * sc.rates.entries[0, 0], rel=0.1)


@pytest.mark.parametrize(
    "old,new,field,line",
    [
        ("users: 2", "users: two", "users", 2),
        ("  p01: [0.1, 0.5, 0.3]", "  p01: [0.1, 0.5]", "channel_bank.p01", 6),
        ("  p10: [0.2, 0.1, 0.4]", "  p10: [0.2, 1.5, 0.4]", "channel_bank.p01", 6),
        ("  horizon: 3000", "  horizon: 0", "run.horizon", 13),
        ("  seed: 4", "  seed: 4\n  policy: greedy", "run.policy", 16),
        ("  exploration_floor: 5", "  exploration_floor: 5\n  L: 3", "learner.exploration_floor", 11),
    ],
)
def test_errors_name_field_and_line(tmp_path, old, new, field, line):
    text = GE.replace(old, new)
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text, "bad.yaml")
    msg = str(err.value)
    assert f"field '{field}'" in msg
    assert f"(line {line})" in msg


def test_negative_probability_reported(tmp_path):
    with pytest.raises(ScenarioError, match="channel_bank.p01"):
        parse_scenario(GE.replace("p01: [0.1, 0.5, 0.3]", "p01: [0.1, -0.5, 0.3]"))


def test_version_mismatch():
    with pytest.raises(ScenarioError, match="unsupported version 2"):
        parse_scenario(GE.replace("version: 1", "version: 2"))


def test_unknown_top_level_field():
    with pytest.raises(ScenarioError, match="field 'lerner'"):
        parse_scenario(GE + "lerner: {}\n")


def test_missing_field():
    with pytest.raises(ScenarioError, match="field 'channels'.*missing"):
        parse_scenario(GE.replace("channels: 3\n", ""))


def test_yaml_syntax_error():
    with pytest.raises(ScenarioError, match="line"):
        parse_scenario("version: 1\nusers: [1, 2\n")


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "nope.yaml")


# ---- cli


def test_cli_run_deterministic(tmp_path):
    sc = write(tmp_path, GE)
    outs = []
    for n in range(2):
        out = tmp_path / f"r{n}.csv"
        assert main(["run", "--scenario", str(sc), "--out", str(out)]) == EXIT_OK
        outs.append((out.read_bytes(), out.with_suffix(".events.jsonl").read_bytes()))
    assert outs[0] == outs[1]


def test_cli_run_csv_schema(tmp_path):
    sc = write(tmp_path, GE)
    out = tmp_path / "r.csv"
    ev = tmp_path / "ev.jsonl"
    assert main(["run", "--scenario", str(sc), "--out", str(out), "--events", str(ev), "--horizon", "1000"]) == EXIT_OK
    rows = list(csv.reader(out.open()))
    assert tuple(rows[0]) == CSV_COLUMNS
    ts = [int(r[0]) for r in rows[1:]]
    assert ts == [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1000]
    for r in rows[1:]:
        assert float(r[3]) + float(r[4]) + float(r[5]) == pytest.approx(int(r[0]))
    records = [json.loads(line) for line in ev.read_text().splitlines()]
    assert records[0]["event"] == "initialize"
    assert any(r["event"] == "allocation" for r in records)


def test_cli_run_overrides(tmp_path):
    sc = write(tmp_path, GE)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["run", "--scenario", str(sc), "--out", str(a), "--seed", "1", "--runs", "1", "--policy", "oracle-stable"])
    main(["run", "--scenario", str(sc), "--out", str(b), "--seed", "2", "--runs", "1", "--policy", "oracle-stable"])
    assert a.read_bytes() != b.read_bytes()
    assert list(csv.reader(a.open()))[1][2] == "nan"


def test_cli_malformed_field_exit(tmp_path, capsys):
    sc = write(tmp_path, GE.replace("runs: 3", "runs: many"))
    assert main(["run", "--scenario", str(sc), "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE
    assert "run.runs" in capsys.readouterr().err


def test_cli_livelock_exit(tmp_path, capsys):
    sc = write(tmp_path, GE.replace("  seed: 4", "  seed: 4\n  livelock_budget: 10"))
    assert main(["run", "--scenario", str(sc), "--out", str(tmp_path / "x.csv"), "--runs", "1"]) == EXIT_LIVELOCK
    assert "livelock" in capsys.readouterr().err


def test_cli_tables_reference(tmp_path, capsys):
    sc = write(tmp_path, RATES3_YAML.format(L=10000, eps=1.0))
    assert main(["tables", "--scenario", str(sc)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    rows = [[float(x) for x in line.split()] for line in lines[2:5]]
    D = np.array([r[:3] for r in rows])
    B = np.array([r[3:] for r in rows])
    assert np.all(np.abs(np.round(D) - [[400, 100, 400], [45, 100, 45], [178, 25, 178]]) <= 1)
    assert np.all(B == 1600.0)


def test_cli_tables_scale_with_L(tmp_path, capsys):
    def table(L):
        main(["tables", "--scenario", str(write(tmp_path, RATES3_YAML.format(L=L, eps=1.0), f"t{L}.yaml"))])
        return np.array([[float(x) for x in line.split()] for line in capsys.readouterr().out.splitlines()[2:5]])

    np.testing.assert_allclose(table(20000), 2 * table(10000), atol=0.11)


def test_cli_tables_single_user(tmp_path, capsys):
    text = RATES3_YAML.format(L=10000, eps=1.0).replace("users: 3", "users: 1").replace(
        "means: [[45, 70, 35], [30, 90, 60], [65, 10, 50]]", "means: [[45, 70, 35]]"
    )
    assert main(["tables", "--scenario", str(write(tmp_path, text))]) == EXIT_OK
    row = [float(x) for x in capsys.readouterr().out.splitlines()[2].split()][:3]
    # row terms only; channels outside the best set are measured against its last member (70)
    assert row == pytest.approx([4e4 / 625, 4e4 / 625, 4e4 / 1225], abs=0.05)


def test_cli_bound_increasing(tmp_path):
    out = tmp_path / "b.csv"
    sc = str(SCENARIOS / "gilbert_elliott.yaml")
    assert main(["bound", "--scenario", sc, "--t", "1000", "10000", "100000", "--out", str(out)]) == EXIT_OK
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["t", "bound"]
    vals = [float(r[1]) for r in rows[1:]]
    assert [r[0] for r in rows[1:]] == ["1000", "10000", "100000"]
    assert vals[0] < vals[1] < vals[2]


def test_cli_bound_infeasible(tmp_path, capsys):
    sc = write(tmp_path, RATES3_YAML.format(L=10000, eps=60.0))
    assert main(["bound", "--scenario", str(sc), "--t", "1000"]) == EXIT_INFEASIBLE
    err = capsys.readouterr().err
    assert "epsilon" in err and "denominator" in err


def test_cli_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["run"])
    assert e.value.code == 2
