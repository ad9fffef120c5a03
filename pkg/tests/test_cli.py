import csv
import json
import math

import pytest

from liouville.cli import (LEDGER_COLUMNS, build_parser, emit_plotdata, main, parse_flat,
                           resolve_config, to_flat)
from liouville.errors import ConfigError
from liouville.experiments import EXPERIMENTS, default_config, wlsq


def _resolve(argv, env=None):
    return resolve_config(build_parser().parse_args(argv), env or {})


def test_upsilon_check_passes(tmp_path, capsys):
    assert main(["run", "upsilon-check", "--gamma", "1.0", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3 and "FAIL" not in out
    assert "upsilon(Q/2) = 1" in out
    for suffix in (".csv", ".json", ".config.txt", ".config.json"):
        assert (tmp_path / f"upsilon-check{suffix}").exists()


def test_csv_format(tmp_path):
    main(["upsilon-check", "--gamma", "1.0", "--out", str(tmp_path)])
    raw = (tmp_path / "upsilon-check.csv").read_bytes()
    assert b"\r\n" not in raw
    rows = list(csv.reader(raw.decode("utf-8").splitlines()))
    assert rows[0][:3] == ["experiment", "digest", "seed_base"]
    z = rows[1][rows[0].index("z")]
    assert z == format(0.1, ".17g")
    record = json.loads((tmp_path / "upsilon-check.json").read_text())
    assert record["digest"] == rows[1][1]


def test_config_roundtrip(tmp_path):
    cfg = _resolve(["ratio-32", "--t", "4,6", "--r", "0.5", "--n", "300", "--seed", "9",
                    "--threshold", "lo=1.1"])
    path = tmp_path / "c.txt"
    path.write_text(to_flat(cfg))
    back = _resolve(["ratio-32", "--config", str(path)])
    assert back.resolved() == cfg.resolved()
    assert back.digest() == cfg.digest()
    assert parse_flat(to_flat(cfg))["t"] == (4.0, 6.0)


def test_precedence_and_env_seed():
    cfg = _resolve(["green-decay", "--seed", "3"], env={"LIOUVILLE_SEED": "17"})
    assert cfg.seed == 17
    assert _resolve(["green-decay", "--seed", "3"]).seed == 3
    assert _resolve(["green-decay"]).t == (2.0, 3.0, 4.0, 5.0)


def test_digest_ignores_output_location_and_workers():
    a = _resolve(["green-decay", "--out", "a"])
    b = _resolve(["green-decay", "--out", "b", "--workers", "2"])
    assert a.digest() == b.digest()
    assert a.digest() != _resolve(["green-decay", "--seed", "1"]).digest()


def test_config_errors(tmp_path, capsys):
    with pytest.raises(ConfigError):
        default_config("nonexistent")
    with pytest.raises(ConfigError):
        _resolve(["green-decay", "--threshold", "bogus=1"])
    with pytest.raises(ConfigError):
        _resolve(["green-decay", "--gamma", "2.5"])
    with pytest.raises(ConfigError):
        parse_flat("no equals sign here")
    with pytest.raises(ConfigError):
        parse_flat("colour = blue")
    assert main(["nonexistent", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["green-decay", "--config", str(tmp_path / "missing.txt")]) == 2


def test_list(capsys):
    assert main(["list"]) == 0
    assert capsys.readouterr().out.split() == list(EXPERIMENTS)


def test_non_standard_flag_and_exit_status(tmp_path, capsys):
    assert main(["green-decay", "--out", str(tmp_path), "--threshold", "slope_tol=0.2"]) == 0
    line = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("PASS")][0]
    assert line.endswith("[NON-STANDARD]")
    # an impossible target must fail and set the exit status
    assert main(["green-decay", "--out", str(tmp_path), "--threshold", "slope=-5"]) == 1
    assert "FAIL green kernel decay slope" in capsys.readouterr().out


def test_plotdata_empty_ledger(tmp_path):
    assert main(["plotdata", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "plotdata" / "plotdata.csv").read_text()
    assert text == "experiment,kind,t,abscissa,mean,stderr\n"


def _write_ledger(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, LEDGER_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LEDGER_COLUMNS})


def test_plotdata_slope_theorem_columns(tmp_path):
    ledger = tmp_path / "ledger.csv"
    _write_ledger(ledger, [{"experiment": "slope-theorem", "kind": "OnePointTorus", "t": t,
                            "mean": m, "std_error": 0.1 * m}
                           for t, m in ((4, 0.05), (6, 0.03), (8, 0.02))])
    emit_plotdata(ledger, tmp_path / "p")
    rows = list(csv.DictReader(open(tmp_path / "p" / "plot_slope-theorem.csv")))
    assert list(rows[0]) == ["t", "log_t", "log_corr", "stderr_log"]
    assert float(rows[1]["log_corr"]) == pytest.approx(math.log(0.03))
    assert float(rows[1]["stderr_log"]) == pytest.approx(0.1)


def test_plotdata_green_decay_fit_by_hand(tmp_path):
    pts = [(2.0, 0.02), (3.0, 0.003), (4.0, 0.0004)]
    ledger = tmp_path / "ledger.csv"
    _write_ledger(ledger, [{"experiment": "green-decay", "kind": "green_sup_diff", "t": t,
                            "mean": d, "std_error": 0} for t, d in pts])
    emit_plotdata(ledger, tmp_path / "p")
    rows = list(csv.DictReader(open(tmp_path / "p" / "plot_green-decay.csv")))
    assert list(rows[0]) == ["t", "sup_diff", "log_sup_diff"]
    fit = json.loads((tmp_path / "p" / "plot_green-decay.fit.json").read_text())
    # ordinary least squares on equally spaced t: slope = (y3 - y1) / (t3 - t1)
    ys = [math.log(d) for _, d in pts]
    assert fit["slope"] == pytest.approx((ys[2] - ys[0]) / 2.0, rel=1e-12)
    assert fit["intercept"] == pytest.approx(sum(ys) / 3 - fit["slope"] * 3.0, rel=1e-12)


def test_wlsq_weighted():
    fit = wlsq([1, 2, 3], [1.0, 3.0, 5.0], [0.1, 0.2, 0.3])
    assert fit["slope"] == pytest.approx(2.0) and fit["intercept"] == pytest.approx(-1.0)


def test_mc_experiment_byte_identical(tmp_path):
    args = ["ratio-32", "--t", "2", "--n", "400", "--batch", "200", "--n-theta", "16"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    main(args + ["--out", str(tmp_path / "c"), "--workers", "2"])
    a = (tmp_path / "a" / "ratio-32.csv").read_bytes()
    assert a == (tmp_path / "b" / "ratio-32.csv").read_bytes()
    assert a == (tmp_path / "c" / "ratio-32.csv").read_bytes()
