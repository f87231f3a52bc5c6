import json
import shutil
import subprocess
import sys
from importlib import resources

import pytest

from nclab.cli import config_hash, main


def packaged(name):
    return json.loads(resources.files("nclab").joinpath("configs", name).read_text())


def write_cfg(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run_cli(sub, cfg_path, out, *extra):
    return main([sub, "--config", cfg_path, "--out", str(out), *extra])


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_simulate_two_state(tmp_path):
    cfg = write_cfg(tmp_path, "s.json", packaged("two_state_simulate.json"))
    assert run_cli("simulate", cfg, tmp_path / "o") == 0
    m = manifest(tmp_path / "o")
    assert m["files"] == ["manifest.json", "mixing.json", "trajectory.csv"]
    assert m["status"] == {"simulate": "ok"}
    lines = (tmp_path / "o" / "trajectory.csv").read_text().splitlines()
    assert len(lines) >= 5000


def test_simulate_bernoulli(tmp_path):
    cfg = write_cfg(tmp_path, "b.json", {"seed": 1, "n_steps": 300, "r_list": [0, 1, 2],
                                         "model": {"kind": "bernoulli", "weights": [1.0, 0.5, 0.25], "alphabet": [0, 1]}})
    assert run_cli("simulate", cfg, tmp_path / "o") == 0
    assert "beta" in (tmp_path / "o" / "mixing.json").read_text()


def test_spectra_unit_radius_at_zero(tmp_path):
    cfg = packaged("golden_tower.json")
    cfg["tower"]["depth"] = 6
    cfg["rpf"] = {"n": 8, "step": 2}
    assert run_cli("spectra", write_cfg(tmp_path, "t.json", cfg), tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "spectra.json").read_text())
    assert abs(doc["entries"][0]["radius"] - 1.0) <= 1e-8
    assert doc["entries"][0]["t"] == 0.0
    assert {"density.csv", "rpf.json"} <= set(manifest(tmp_path / "o")["files"])


def test_cones_small_budget(tmp_path):
    cfg = packaged("golden_cones.json")
    cfg["tower"]["depth"] = 4
    cfg.update(battery=20, k_max=4, z_grid=[0.01])
    assert run_cli("cones", write_cfg(tmp_path, "c.json", cfg), tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "certificates.json").read_text())
    assert doc["h_member"] is True
    # a failed certificate is reported in the status, not through the exit code
    assert manifest(tmp_path / "o")["status"]["certificates"] in ("pass", "fail")


def _small_llt(tmp_path):
    cfg = packaged("golden_lattice.json")
    cfg["horizons"] = [16, 32, 64, 128]
    cfg["samples"]["M"] = 4000
    cfg["llt"]["lclt_horizons"] = [16, 128]
    return write_cfg(tmp_path, "l.json", cfg)


def test_llt_bit_identical_rerun(tmp_path):
    cfg = _small_llt(tmp_path)
    assert run_cli("llt", cfg, tmp_path / "a") == 0
    assert run_cli("llt", cfg, tmp_path / "b", "--threads", "2") == 0
    ma, mb = manifest(tmp_path / "a"), manifest(tmp_path / "b")
    assert {"charfn.csv", "decrate.json", "lclt.csv", "clt.csv"} <= set(ma["files"])
    assert ma["artifacts"] == mb["artifacts"]
    assert ma["config_hash"] == mb["config_hash"]


def test_seed_override_changes_output(tmp_path):
    cfg = _small_llt(tmp_path)
    assert run_cli("llt", cfg, tmp_path / "a") == 0
    assert run_cli("llt", cfg, tmp_path / "b", "--seed-override", "5") == 0
    assert manifest(tmp_path / "b")["seed"] == 5
    assert manifest(tmp_path / "a")["artifacts"]["charfn.csv"] != manifest(tmp_path / "b")["artifacts"]["charfn.csv"]


def test_report_aggregates(tmp_path):
    cfg = write_cfg(tmp_path, "s.json", packaged("two_state_simulate.json"))
    assert run_cli("simulate", cfg, tmp_path / "sim") == 0
    rep = write_cfg(tmp_path, "r.json", {"inputs": ["sim"]})
    assert run_cli("report", rep, tmp_path / "rep") == 0
    doc = json.loads((tmp_path / "rep" / "report.json").read_text())
    (key,) = doc
    assert key.startswith("simulate:") and "mixing.json" in doc[key]["outputs"]
    assert (tmp_path / "rep" / "report.csv").read_text().startswith("source,task,status")


def test_report_missing_manifest(tmp_path, capsys):
    rep = write_cfg(tmp_path, "r.json", {"inputs": ["nowhere"]})
    assert run_cli("report", rep, tmp_path / "rep") == 1
    assert json.loads(capsys.readouterr().err)["kind"] == "validation"


@pytest.mark.parametrize("cfg", [
    {"seed": 1, "model": {"kind": "two_state"}},
    {"seed": "x", "model": {"kind": "iid"}, "n_steps": 3},
    [1, 2, 3],
])
def test_bad_config_exits_one(tmp_path, capsys, cfg):
    assert run_cli("simulate", write_cfg(tmp_path, "bad.json", cfg), tmp_path / "o") == 1
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 1
    assert not (tmp_path / "o" / "manifest.json").exists()


def test_missing_file_and_bad_threads(tmp_path, capsys):
    assert run_cli("simulate", str(tmp_path / "none.json"), tmp_path / "o") == 1
    cfg = write_cfg(tmp_path, "s.json", packaged("two_state_simulate.json"))
    assert run_cli("simulate", cfg, tmp_path / "o", "--threads", "0") == 1


def test_ell_mismatch_is_validation_error(tmp_path):
    cfg = json.loads(open(_small_llt(tmp_path)).read())
    cfg["observable"] = {"kind": "product", "ell": 3}
    assert run_cli("llt", write_cfg(tmp_path, "m.json", cfg), tmp_path / "o") == 1


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})


def test_console_script(tmp_path):
    exe = shutil.which("nclab")
    cmd = [exe] if exe else [sys.executable, "-m", "nclab.cli"]
    cfg = write_cfg(tmp_path, "s.json", packaged("two_state_simulate.json"))
    res = subprocess.run(cmd + ["simulate", "--config", cfg, "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr


def test_cones_failed_certificate_still_exits_zero(tmp_path):
    cfg = packaged("golden_cones.json")
    cfg["tower"]["depth"] = 4
    cfg.update(battery=20, k_max=4, z_grid=[3.0])
    assert run_cli("cones", write_cfg(tmp_path, "c.json", cfg), tmp_path / "o") == 0
    cert = json.loads((tmp_path / "o" / "certificates.json").read_text())["certificates"][0]
    assert cert["delta"] >= 1 and cert["passed"] is False
    assert manifest(tmp_path / "o")["status"]["certificates"] == "fail"


def test_manifest_lists_every_file(tmp_path):
    cfg = _small_llt(tmp_path)
    out = tmp_path / "o"
    assert run_cli("llt", cfg, out) == 0
    assert sorted(p.name for p in out.iterdir()) == manifest(out)["files"]
