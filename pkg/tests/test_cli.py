import csv
import json

import pytest

from groupdest import cli
from groupdest.estimator import SingularHessianError

SMALL = ["--n-zones", "40", "--n-cliques", "25", "--n-situations", "60"]


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.run(["generate", "--seed", "7", "--out", str(d), *SMALL]) == 0
    return d


def test_generate_writes_dataset(data_dir):
    assert {"zones.csv", "cliques.csv", "situations.csv", "manifest.json", "run_config.json"} <= set(_files(data_dir))
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert "zones.csv" in manifest["files"]


def test_estimate_is_byte_identical(tmp_path, data_dir):
    args = ["estimate", "--data", str(data_dir), "--impedance", "mean", "--replicates", "4", "--k", "8",
            "--folds", "3", "--seed", "1"]
    assert cli.run([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.run([*args, "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b
    assert {"coefficients.csv", "fit.csv", "validation.csv", "elasticities.csv", "curves.csv", "curves.svg",
            "results.json", "manifest.json"} <= set(a)


def test_five_model_tables(tmp_path, data_dir):
    out = tmp_path / "all"
    assert cli.run(["estimate", "--data", str(data_dir), "--impedance", "all", "--replicates", "3", "--k", "8",
                    "--folds", "3", "--out", str(out)]) == 0
    coef = _rows(out / "coefficients.csv")
    assert coef[0] == ["variable", "max", "min", "mean", "median", "ego"]
    assert [r[0] for r in coef[1:]] == ["major_station", "ln_restaurants", "cost"]
    val = {r[0]: r[1:] for r in _rows(out / "validation.csv")[1:]}
    assert val["increase against individual model: fitting_factor"][-1] == ""
    fit = {r[0]: r[1:] for r in _rows(out / "fit.csv")[1:]}
    assert fit["n_obs"] == ["60"] * 5
    sig = _rows(out / "significance.csv")
    assert len(sig) == 1 + 3 * 4 and all(r[-1] in ("0", "1") for r in sig[1:] if r[1] == "significant_10")


def test_unknown_flag_is_usage_error(capsys):
    assert cli.run(["estimate", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_data_is_data_error(tmp_path):
    assert cli.run(["estimate", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 2


def test_dangling_zone_is_data_error(tmp_path, data_dir):
    bad = tmp_path / "bad"
    bad.mkdir()
    for name in ("zones.csv", "cliques.csv"):
        (bad / name).write_bytes((data_dir / name).read_bytes())
    rows = _rows(data_dir / "situations.csv")
    rows[1][rows[0].index("chosen_zone")] = "99999"
    with open(bad / "situations.csv", "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerows(rows)
    assert cli.run(["estimate", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_numerical_failure_exit_code(tmp_path, data_dir, monkeypatch):
    def broken(*args, **kwargs):
        raise SingularHessianError("singular")

    monkeypatch.setattr(cli, "estimate", broken)
    assert cli.run(["curves", "--data", str(data_dir), "--out", str(tmp_path / "o"), "--k", "8"]) == 3


def test_empty_segment_is_noted(tmp_path, data_dir):
    same = tmp_path / "same"
    same.mkdir()
    for name in ("zones.csv", "cliques.csv"):
        (same / name).write_bytes((data_dir / name).read_bytes())
    rows = _rows(data_dir / "situations.csv")
    col = rows[0].index("day")
    for r in rows[1:]:
        r[col] = "weekend"
    with open(same / "situations.csv", "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerows(rows)
    out = tmp_path / "seg"
    assert cli.run(["segment", "--data", str(same), "--segment", "day", "--replicates", "2", "--k", "8",
                    "--out", str(out)]) == 0
    assert not list(out.glob("segment_day*"))
    notes = json.loads((out / "manifest.json").read_text())["notes"]
    assert any("segment day omitted" in n for n in notes)


def test_unknown_segment(tmp_path, data_dir):
    assert cli.run(["segment", "--data", str(data_dir), "--segment", "zodiac", "--out", str(tmp_path)]) == 1


def test_curves_from_beta_only(tmp_path):
    out = tmp_path / "c"
    assert cli.run(["curves", "--beta", "0.0093,0.5590,-0.2943", "--out", str(out), "--curve-max", "30"]) == 0
    rows = _rows(out / "curves.csv")
    assert len(rows) == 32
    probs = [float(r[1]) for r in rows[1:]]
    assert all(a > b for a, b in zip(probs, probs[1:]))
    assert probs[15] == pytest.approx(1 / 21, abs=1e-12)


def test_config_file_precedence(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# defaults for the run\nreplicates = 5\nimpedance=ego\nk=10\n", encoding="utf-8")
    cfg = cli.parse_args(["estimate", "--config", str(cfg_file), "--k", "12", "--data", "d"])
    assert (cfg.replicates, cfg.impedance, cfg.k) == (5, "ego", 12)


def test_bad_config_value(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("replicates = many\n", encoding="utf-8")
    assert cli.run(["estimate", "--config", str(cfg_file)]) == 1


def test_mode_model(tmp_path, data_dir):
    mm = tmp_path / "mm"
    assert cli.run(["mode-model", "--data", str(data_dir), "--out", str(mm), "--folds", "3"]) == 0
    assert (mm / "mode_model.json").exists()


def test_validate_subcommand(tmp_path, data_dir):
    out = tmp_path / "v"
    assert cli.run(["validate", "--data", str(data_dir), "--impedance", "mean", "--folds", "3", "--k", "8",
                    "--out", str(out)]) == 0
    assert json.loads((out / "dataset_report.json").read_text())["violations"] == []
    assert (out / "validation.csv").exists()
