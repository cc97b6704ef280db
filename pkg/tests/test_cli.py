import json
import math

import numpy as np
import pytest
from filelock import FileLock

from robopvar import __version__
from robopvar.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, LOCK_NAME, ConfigError, DataError,
                          build_parser, ingest, main, resolve_config)
from robopvar.gpd_model import GpdParams, sample


def write_losses(path, values, extra=None):
    cols = ["loss_amount"] + list(extra or {})
    lines = [",".join(cols)]
    for i, v in enumerate(values):
        lines.append(",".join([repr(float(v))] + [str(extra[c][i]) for c in extra or {}]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def clean_csv(tmp_path_factory):
    x = sample(GpdParams(0.0, 0.7, 1.0), 2000, seed=2026).values
    return write_losses(tmp_path_factory.mktemp("data") / "losses.csv", x)


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    if capsys is not None:
        return code, capsys.readouterr()
    return code


class TestIngest:
    def test_three_rows(self, tmp_path):
        s, rep = ingest(write_losses(tmp_path / "a.csv", [1.5, 2.0, 7.25]))
        assert len(s.values) == 3 and rep.kept == 3 and not rep.rejected

    def test_negative_row_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "a.csv"
        path.write_text("loss_amount,region\n1.5,EU\n-5,EU\nabc,US\n2.0,US\n", encoding="utf-8")
        s, rep = ingest(path)
        np.testing.assert_array_equal(s.values, [1.5, 2.0])
        assert [ln for ln, _ in rep.rejected] == [3, 4]
        assert list(s.meta["region"]) == ["EU", "US"]

    def test_rejected_row_still_exit_ok(self, tmp_path, capsys):
        x = list(sample(GpdParams(0.0, 0.7, 1.0), 200, seed=1).values) + [-5.0]
        path = write_losses(tmp_path / "a.csv", x)
        code, io = run(["fit", "--input", path, "--threshold", 0, "--estimator", "medkmad", "--out", tmp_path / "o"],
                       capsys)
        assert code == EXIT_OK
        assert ":202: rejected" in io.err

    def test_cell_counts_and_filtering(self, tmp_path):
        bl = ["Retail"] * 5 + ["Trading"] * 3 + ["Retail"] * 2
        et = ["Fraud"] * 4 + ["Damage"] + ["Fraud"] * 3 + ["Damage"] * 2
        path = write_losses(tmp_path / "c.csv", np.arange(1, 11), {"business_line": bl, "event_type": et})
        _, rep = ingest(path)
        assert rep.cells == {"Retail|Damage": 3, "Retail|Fraud": 4, "Trading|Fraud": 3}
        s, rep = ingest(path, business_line="Retail", event_type="Fraud")
        np.testing.assert_array_equal(s.values, [1, 2, 3, 4])
        assert rep.filtered_out == 6
        s, _ = ingest(path, business_line="Retail")
        assert len(s.values) == 7

    def test_no_valid_rows(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("loss_amount\n-1\n0\n", encoding="utf-8")
        with pytest.raises(DataError):
            ingest(path)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("amount\n1\n", encoding="utf-8")
        with pytest.raises(DataError):
            ingest(path)


class TestFit:
    def test_rmxe_recovers_shape(self, clean_csv, tmp_path):
        assert run(["fit", "--input", clean_csv, "--threshold", 0, "--out", tmp_path]) == EXIT_OK
        doc = json.loads((tmp_path / "fit.json").read_text())
        assert doc["fit"]["estimator"].upper().startswith("RMXE") or doc["fit"]["influence"]["kind"] == "RMXE"
        assert abs(doc["fit"]["xi"] - 0.7) <= 0.05
        assert doc["fit"]["converged"]

    def test_byte_identical_reruns(self, clean_csv, tmp_path):
        args = ["fit", "--input", clean_csv, "--threshold", 0, "--seed", 3]
        for d in ("a", "b"):
            assert run(args + ["--out", tmp_path / d]) == EXIT_OK
        assert (tmp_path / "a" / "fit.json").read_bytes() == (tmp_path / "b" / "fit.json").read_bytes()

    def test_header(self, clean_csv, tmp_path):
        run(["fit", "--input", clean_csv, "--threshold", 0, "--estimator", "mle", "--seed", 9, "--out", tmp_path])
        header = json.loads((tmp_path / "fit.json").read_text())["header"]
        assert header["tool"] == "robopvar" and header["version"] == __version__ and header["seed"] == 9
        assert len(header["config_sha256"]) == 16


class TestOpvar:
    def test_closed_form_999(self, tmp_path):
        code = run(["opvar", "--xi", 1, "--beta", 1, "--threshold", 0, "--lambda", 1, "--alpha", 0.999,
                    "--out", tmp_path])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "opvar.json").read_text())
        assert doc["opvar"]["alpha_prime"] == pytest.approx(0.001, rel=1e-12)
        assert doc["opvar"]["value"] == pytest.approx(999.0, rel=1e-10)

    def test_fitted_pipeline(self, clean_csv, tmp_path):
        code = run(["opvar", "--input", clean_csv, "--threshold", 0, "--institutions", 100, "--years", 2,
                    "--out", tmp_path])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "opvar.json").read_text())
        assert doc["frequency"]["lambda"] == 10.0
        fit = doc["fit"]
        expect = fit["beta"] / fit["xi"] * math.expm1(-fit["xi"] * math.log(1e-3 / 10))
        assert doc["opvar"]["value"] == pytest.approx(expect, rel=1e-12)

    def test_quantile_below_threshold_is_numeric_failure(self, tmp_path):
        code = run(["opvar", "--xi", 1, "--beta", 1, "--lambda", 1e-4, "--out", tmp_path])
        assert code == EXIT_NUMERIC
        assert json.loads((tmp_path / "error.json").read_text())["error"] == "numerical"


class TestExitCodes:
    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["fit", "--estimator", "bogus"])
        assert exc.value.code == EXIT_CONFIG

    def test_missing_input_file(self, tmp_path):
        assert run(["fit", "--input", tmp_path / "none.csv", "--threshold", 0, "--out", tmp_path]) == EXIT_CONFIG

    def test_config_errors(self, clean_csv, tmp_path):
        assert run(["fit", "--input", clean_csv, "--out", tmp_path]) == EXIT_CONFIG
        assert run(["fit", "--input", clean_csv, "--threshold", 0, "--estimator", "omse", "--out", tmp_path]) \
            == EXIT_CONFIG
        assert run(["opvar", "--xi", 1, "--out", tmp_path, "--lambda", 1]) == EXIT_CONFIG
        assert json.loads((tmp_path / "error.json").read_text())["exit_code"] == EXIT_CONFIG

    def test_data_errors(self, tmp_path):
        path = write_losses(tmp_path / "few.csv", [1.0, 2.0, 3.0])
        assert run(["fit", "--input", path, "--threshold", 0, "--out", tmp_path]) == EXIT_DATA
        bad = tmp_path / "bad.csv"
        bad.write_text("loss_amount\n-3\n", encoding="utf-8")
        assert run(["fit", "--input", bad, "--threshold", 0, "--out", tmp_path]) == EXIT_DATA

    def test_success_clears_stale_error(self, tmp_path):
        assert run(["opvar", "--xi", 1, "--beta", 1, "--lambda", 1e-4, "--out", tmp_path]) == EXIT_NUMERIC
        assert run(["opvar", "--xi", 1, "--beta", 1, "--lambda", 1, "--out", tmp_path]) == EXIT_OK
        assert not (tmp_path / "error.json").exists()

    def test_locked_output_directory(self, tmp_path):
        with FileLock(str(tmp_path / LOCK_NAME)):
            code = run(["opvar", "--xi", 1, "--beta", 1, "--lambda", 1, "--out", tmp_path])
        assert code == EXIT_CONFIG
        assert not (tmp_path / "opvar.json").exists()


class TestConfig:
    def parse(self, argv):
        return resolve_config(build_parser().parse_args([str(a) for a in argv]))

    def test_defaults(self, clean_csv):
        cfg = self.parse(["fit", "--input", clean_csv, "--threshold", 0])
        assert (cfg.estimator, cfg.k, cfg.alpha, cfg.format) == ("rmxe", 10.0, 0.999, "csv")

    def test_flags_beat_file(self, clean_csv, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"input": str(clean_csv), "threshold": 0.5, "estimator": "mle", "lambda": 3}))
        cfg = self.parse(["fit", "--config", conf, "--estimator", "medkmad"])
        assert (cfg.threshold, cfg.estimator, cfg.lam) == (0.5, "medkmad", 3)

    def test_bad_file(self, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"colour": "red"}))
        with pytest.raises(ConfigError):
            self.parse(["fit", "--config", conf])
        conf.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            self.parse(["fit", "--config", conf])

    def test_digest_ignores_output_directory(self, clean_csv):
        a = self.parse(["fit", "--input", clean_csv, "--threshold", 0, "--out", "x"])
        b = self.parse(["fit", "--input", clean_csv, "--threshold", 0, "--out", "y"])
        c = self.parse(["fit", "--input", clean_csv, "--threshold", 0, "--seed", 1])
        assert a.digest() == b.digest() != c.digest()


class TestDiagnoseAndStudy:
    def test_diagnose_tables(self, clean_csv, tmp_path):
        assert run(["diagnose", "--input", clean_csv, "--threshold", 0, "--out", tmp_path]) == EXIT_OK
        for name in ("influence.csv", "outlying.csv", "qqband.csv"):
            lines = (tmp_path / name).read_text().splitlines()
            assert lines[0] == "# tool=robopvar" and lines[1] == f"# version={__version__}"
            assert lines[2].startswith("# config_sha256=") and lines[3] == "# seed=0"
        assert json.loads((tmp_path / "diagnose.json").read_text())["bands"]["simultaneous"]["kind"]

    def test_json_format(self, clean_csv, tmp_path):
        assert run(["diagnose", "--input", clean_csv, "--threshold", 0, "--format", "json", "--out", tmp_path]) \
            == EXIT_OK
        assert json.loads((tmp_path / "influence.json").read_text())["header"]["tool"] == "robopvar"

    def test_study(self, tmp_path):
        code = run(["study", "--xi", 0.7, "--beta", 1, "--n", 200, "--reps", 5, "--estimators", "MLE,medkmad",
                    "--out", tmp_path])
        assert code == EXIT_OK
        lines = (tmp_path / "study.csv").read_text().splitlines()
        assert lines[4].startswith("estimator,") and [ln.split(",")[0] for ln in lines[5:]] == ["MLE", "MedkMAD"]

    def test_study_rejects_unknown_estimator(self, tmp_path):
        assert run(["study", "--xi", 0.7, "--beta", 1, "--estimators", "LSE", "--out", tmp_path]) == EXIT_CONFIG

    def test_build_grid(self, tmp_path):
        code = run(["build-grid", "--label", "MBRE", "--xi-min", 0.5, "--xi-max", 0.6, "--out", tmp_path])
        assert code == EXIT_OK
        text = (tmp_path / "grid_MBRE.txt").read_text()
        assert "# tool=robopvar" in text
