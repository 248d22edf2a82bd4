import json

import pytest

from spectralflow import cli


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


TFI6 = {"version": 1, "chain": {"n_sites": 6}, "path": {"kind": "tfi", "params": {"h0": 2.0, "h1": 2.0}}}


def test_filter_table_run_and_summary(tmp_path, capsys):
    cfg = _write(tmp_path, {"version": 1, "command": "filter-table", "table": {"t_points": 21, "k_points": 11}})
    out = tmp_path / "out"
    assert cli.main(["filter-table", "--config", str(cfg), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    d = manifest["derived"]
    assert 1 - d["normalization_tol"] <= d["normalization_integral"] <= 1
    assert {"a1", "c", "gamma"} <= d.keys()
    assert (out / "omega_time.csv").exists() and (out / "omega_fourier.csv").exists()
    text, code = cli.summarize(out)
    assert code == 0 and "PASS normalization_lower" in text


def test_flow_run_constant_path(tmp_path):
    doc = {**TFI6, "command": "flow-run", "chain": {"n_sites": 4}, "flow": {"s_steps": 6}}
    out = tmp_path / "flow"
    assert cli.run(_write(tmp_path, doc), out) == 0
    rows = (out / "flow.csv").read_text().splitlines()[1:]
    assert all(abs(float(r.split(",")[1]) - 1) < 1e-9 for r in rows)
    text, _ = cli.summarize(out)
    assert "min_fidelity" in text
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["derived"]["s_steps"] == 6 and manifest["derived"]["gap"] > 0


def test_lemma_checks_report(tmp_path):
    doc = {**TFI6, "command": "lemma-checks", "chain": {"n_sites": 5}, "lemma": {"samples": 3}}
    out = tmp_path / "lemma"
    assert cli.run(_write(tmp_path, doc), out, seed=4) == 0
    text, _ = cli.summarize(out)
    assert "key_lemma_residual" in text and "decoupling_residual" in text
    assert json.loads((out / "manifest.json").read_text())["config"]["seed"] == 4


def test_lr_and_locality_scans(tmp_path):
    lr = {**TFI6, "command": "lr-scan", "lr": {"t_grid": [0.0, 0.5, 1.0]}}
    assert cli.run(_write(tmp_path, lr, "lr.json"), tmp_path / "lr") == 0
    assert (tmp_path / "lr" / "lr_profile.csv").read_text().startswith("t,distance,norm")
    fit = json.loads((tmp_path / "lr" / "lr_fit.json").read_text())
    assert set(fit) == {"C", "v", "r_squared"}
    loc = {**TFI6, "command": "locality-scan", "path": {"kind": "tfi", "params": {"h0": 3.0, "h1": 1.5}}, "locality": {"s_steps": 6}}
    assert cli.run(_write(tmp_path, loc, "loc.json"), tmp_path / "loc") == 0
    assert (tmp_path / "loc" / "alpha_locality.csv").exists()


def test_validate_diagnostics(tmp_path):
    good = {**TFI6, "command": "lemma-checks"}
    assert cli.validate(good) == []
    big = {**good, "filter": {"gamma": {"policy": "fraction-of-gap", "value": 1.2}}}
    diags = cli.validate(big)
    assert diags and diags[0].code == "gap-assumption" and "spectral-gap assumption" in diags[0].message
    grid = {**TFI6, "command": "locality-scan", "locality": {"n_grid": [0, 9]}}
    assert any(d.code == "n-grid" for d in cli.validate(grid))
    assert cli.validate({"version": 1, "command": "nope"})[0].code == "schema"
    assert cli.validate({"command": "flow-run"})[0].code == "schema"


def test_precondition_failure_exit_code(tmp_path):
    doc = {**TFI6, "command": "flow-run", "filter": {"gamma": {"policy": "fixed", "value": 5.0}}}
    assert cli.run(_write(tmp_path, doc), tmp_path / "x") == cli.EXIT_PRECONDITION
    assert not (tmp_path / "x" / "manifest.json").exists()


def test_malformed_config_and_command_mismatch(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["flow-run", "--config", str(bad)]) == cli.EXIT_PRECONDITION
    cfg = _write(tmp_path, {**TFI6, "command": "lr-scan"})
    assert cli.main(["flow-run", "--config", str(cfg)]) == cli.EXIT_PRECONDITION


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = _write(tmp_path, {"version": 1, "command": "filter-table"})
    assert cli.run(cfg, blocker / "sub") == cli.EXIT_PRECONDITION


def test_summarize_missing_manifest(tmp_path):
    text, code = cli.summarize(tmp_path)
    assert code == 1 and "manifest" in text
    assert cli.main(["summarize", str(tmp_path)]) == 1


def test_unknown_command_rejected_by_parser():
    with pytest.raises(SystemExit):
        cli.main(["bogus", "--config", "x.json"])
