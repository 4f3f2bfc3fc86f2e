from __future__ import annotations

import json

import pytest

from lqmart.__main__ import main
from lqmart.errors import AssertionFailed, ConfigInvalid, HashMismatch
from lqmart.harness import (KINDS, THREADS_ENV, Report, baseline_update, compare_to_baseline, config_hash, csv_text,
                            run, run_config, validate_config)

BR22 = {"kind": "br-equivalence", "name": "br", "exponents": [[2, 2], [3, 1.5]], "n_instances": 4,
        "solver": {"subgradient_iters": 20, "polish_iters": 60, "smoothing_rounds": 2}}

SMALL = {
    "br-equivalence": BR22,
    "rosenthal": {"kind": "rosenthal", "exponents": [[2, 2]], "n_instances": 3, "n_steps": 2},
    "decoupling": {"kind": "decoupling", "exponents": [[3, 1.5]], "n_instances": 3, "max_steps": 2},
    "novikov": {"kind": "novikov", "rate": 2.0, "p_values": [2], "n_paths": 2000, "grid_n": 64},
    "random-measure-equivalence": {"kind": "random-measure-equivalence", "exponents": [[2, 2]], "n_instances": 2},
    "main-si": {"kind": "main-si", "family": "accessible", "exponents": [[2, 2]], "n_instances": 2},
    "duality-suite": {"kind": "duality-suite", "exponents": [[2, 2]], "n_instances": 2, "max_steps": 1,
                      "max_dim": 2, "reverse_doob_p": [0.5], "reverse_doob_instances": 5},
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def quiet(_):
    pass


def fake(rows, key_seed=1, h="abc", name="exp"):
    rep = Report(name, "br-equivalence", "claim", 3.0, 1.5, "1<q<2<=p", key_seed, h)
    for i, r in enumerate(rows):
        rep.add_row(i, r, 1.0)
    return rep


# -- run and exit codes ------------------------------------------------------------------

def test_empty_experiment_list(tmp_path):
    out = tmp_path / "out"
    assert run(write(tmp_path, {"experiments": []}), out, log=quiet) == 0
    assert json.loads((out / "run_summary.json").read_text())["reports"] == []


def test_br_hilbert_ratios_one(tmp_path):
    reps = run_config({"seed": 3, "experiments": [BR22]})
    r22 = [r for r in reps if r.p == 2][0]
    assert len(r22.rows) == 4 and all(abs(r["ratio"] - 1) < 1e-9 for r in r22.rows)
    assert run(write(tmp_path, {"seed": 3, "experiments": [BR22]}), tmp_path / "o", log=quiet) == 0


def test_novikov_quartic_value():
    e = {"kind": "novikov", "rate": 2.0, "p_values": [4], "n_paths": 200_000, "grid_n": 256,
         "expected": {"4": 14.0}, "tolerance": {"relative": 0.05}}
    rep = run_config({"seed": 0, "experiments": [e]})[0]
    assert rep.ok and abs(rep.rows[0]["lhs"] - 14) / 14 < 0.05
    assert rep.q is None and rep.regime == "scalar"


def test_every_kind_runs(tmp_path):
    assert set(SMALL) == set(KINDS)
    cfg = {"seed": 5, "experiments": list(SMALL.values())}
    logs = []
    assert run(write(tmp_path, cfg), tmp_path / "o", log=logs.append) == 0
    assert logs and all(line.startswith("PASS") for line in logs)


@pytest.mark.parametrize("cfg", [
    {"experiments": [{"kind": "unknown"}]},
    {"experiments": [{"kind": "br-equivalence", "exponents": [[1.0, 2.0]]}]},
    {"experiments": [{"kind": "br-equivalence"}]},
    {"experiments": [{"kind": "novikov", "p_values": [2]}]},
    {"experiments": [{"kind": "duality-suite", "exponents": [[2, 2]], "reverse_doob_p": [1.5]}]},
    {"experiments": [BR22, BR22]},
    {"seed": "x", "experiments": []},
])
def test_bad_configs_exit_2(tmp_path, cfg):
    with pytest.raises(ConfigInvalid):
        validate_config(json.loads(json.dumps(cfg)))
    assert run(write(tmp_path, cfg), tmp_path / "o", log=quiet) == 2


def test_unreadable_config_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(bad, tmp_path / "o", log=quiet) == 2
    assert run(tmp_path / "missing.json", tmp_path / "o", log=quiet) == 2


def test_failed_assertion_exit_1(tmp_path):
    e = {"kind": "novikov", "rate": 2.0, "p_values": [4], "n_paths": 1000, "grid_n": 64, "expected": {"4": 100.0}}
    logs = []
    assert run(write(tmp_path, {"experiments": [e]}), tmp_path / "o", log=logs.append) == 1
    assert any(line.startswith("FAIL") for line in logs)


# -- determinism and output ------------------------------------------------------------------

def body(text):
    return "\n".join(line for line in text.split("\n") if not line.startswith("# generated"))


def test_csv_bodies_deterministic(tmp_path):
    path = write(tmp_path, {"seed": 11, "experiments": [SMALL["decoupling"], SMALL["br-equivalence"]]})
    run(path, tmp_path / "a", log=quiet)
    run(path, tmp_path / "b", log=quiet)
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert files
    for name in files:
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert b"\r" not in a
        assert body(a.decode()) == body(b.decode())
        assert a.decode().split("\n")[2] == "instance_id,lhs,rhs,ratio"


def test_threads_do_not_change_results(monkeypatch):
    cfg = {"seed": 2, "experiments": [SMALL["decoupling"]]}
    serial = csv_text(run_config(json.loads(json.dumps(cfg)))[0])
    monkeypatch.setenv(THREADS_ENV, "3")
    assert csv_text(run_config(json.loads(json.dumps(cfg)))[0]) == serial


def test_seed_changes_rows_not_hash():
    a = run_config({"experiments": [SMALL["decoupling"]]}, seed=1)[0]
    b = run_config({"experiments": [SMALL["decoupling"]]}, seed=2)[0]
    assert a.config_hash == b.config_hash == config_hash(dict(SMALL["decoupling"], name="decoupling-0"))
    assert a.rows != b.rows


# -- baselines ---------------------------------------------------------------------------------

def test_baseline_first_and_identical():
    rep = fake([1.0, 1.2])
    store = baseline_update([rep], {"entries": {}})
    entry = store["entries"][rep.key]
    assert (entry["min"], entry["max"]) == (1.0, 1.2)
    assert baseline_update([rep], store) == store


def test_baseline_small_widening_accepted():
    store = baseline_update([fake([1.0, 1.2])], {"entries": {}})
    new = baseline_update([fake([1.0, 1.3], key_seed=2)], store)
    assert new["entries"][fake([]).key]["max"] == 1.3


def test_baseline_large_widening_needs_force():
    store = baseline_update([fake([1.0, 1.2])], {"entries": {}})
    with pytest.raises(AssertionFailed):
        baseline_update([fake([1.0, 1.5])], store)
    assert baseline_update([fake([1.0, 1.5])], store, force=True)["entries"][fake([]).key]["max"] == 1.5


def test_baseline_hash_mismatch():
    store = baseline_update([fake([1.0, 1.2])], {"entries": {}})
    with pytest.raises(HashMismatch):
        baseline_update([fake([1.0, 1.2], h="changed")], store)
    forced = baseline_update([fake([1.0, 1.2], h="changed")], store, force=True)
    assert forced["entries"][fake([]).key]["config_hash"] == "changed"


def test_compare_to_baseline():
    store = baseline_update([fake([1.0, 1.2])], {"entries": {}})
    assert compare_to_baseline([fake([1.05, 1.3])], store).ok
    empty = compare_to_baseline([fake([1.0])], {"entries": {}})
    assert empty.ok and empty.warnings
    bad = compare_to_baseline([fake([1.0, 2.0])], store)
    assert not bad.ok
    assert bad.diffs == [{"key": fake([]).key, "instance_id": 1, "ratio": 2.0, "band": [1.0 / 1.1, 1.2 * 1.1]}]


def test_run_with_baseline(tmp_path):
    cfg = {"seed": 4, "experiments": [SMALL["decoupling"]]}
    path, store = write(tmp_path, cfg), tmp_path / "base.json"
    assert run(path, tmp_path / "o", baseline=store, update_baseline=True, log=quiet) == 0
    assert run(path, tmp_path / "o", baseline=store, log=quiet) == 0
    changed = dict(SMALL["decoupling"], n_points=3)
    path2 = write(tmp_path, {"seed": 4, "experiments": [changed]}, "cfg2.json")
    assert run(path2, tmp_path / "o", baseline=store, update_baseline=True, log=quiet) == 1
    assert run(path2, tmp_path / "o", baseline=store, update_baseline=True, force=True, log=quiet) == 0


# -- command line -------------------------------------------------------------------------------

def test_cli(tmp_path, capsys):
    path = write(tmp_path, {"seed": 1, "experiments": [SMALL["rosenthal"]]})
    assert main(["run", str(path), "--out", str(tmp_path / "o"), "--seed", "7"]) == 0
    assert "PASS" in capsys.readouterr().out
    summary = json.loads((tmp_path / "o" / "run_summary.json").read_text())
    assert summary["reports"][0]["summary"]["seed"] == 7
    with pytest.raises(SystemExit):
        main(["run", str(path), "--force"])
    with pytest.raises(SystemExit):
        main(["run", str(path), "--update-baseline"])
