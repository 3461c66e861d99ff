import json
import os

import pytest

from smdmeta.cli import RESULTS_HEADER, main

TOY_PRECOMP = """study_id,n_t,n_c,g,var_g
s1,10,10,0,1
s2,10,10,2,1
"""

TOY_RAW = """study_id,n_t,n_c,mean_t,sd_t,mean_c,sd_c
s1,10,10,1.0,1.0,0.0,1.0
s2,10,10,2.5,1.3,1.1,0.9
"""

FLAT = """study_id,n_t,n_c,g,var_g
s1,10,10,0.4,0.5
s2,10,10,0.4,0.5
s3,10,10,0.4,0.5
"""


def write(path, text):
    path.write_text(text)
    return str(path)


class TestAnalyze:
    def test_hand_values_in_text_output(self, tmp_path, capsys):
        path = write(tmp_path / "toy.csv", TOY_PRECOMP)
        code = main(["analyze", "--input", path])
        out = capsys.readouterr().out
        assert code == 0
        # DL and MP both solve to tau2 = 1 for this input
        dl_line = next(l for l in out.splitlines() if l.strip().startswith("DL"))
        assert "1" in dl_line.split()[1]
        assert "interior" in dl_line

    def test_json_format(self, tmp_path, capsys):
        path = write(tmp_path / "toy.csv", TOY_PRECOMP)
        code = main(["analyze", "--input", path, "--format", "json"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["tau2"]["DL"]["estimate"] == pytest.approx(1.0)
        assert payload["tau2"]["MP"]["estimate"] == pytest.approx(1.0, rel=1e-6)
        assert payload["delta"]["IV-DL"]["estimate"] == pytest.approx(1.0)
        assert payload["delta_intervals"]["HKSJ"]["half_width"] == \
            pytest.approx(12.7062, abs=1e-3)

    def test_raw_and_precomputed_agree(self, tmp_path, capsys):
        raw_path = write(tmp_path / "raw.csv", TOY_RAW)
        main(["analyze", "--input", raw_path, "--format", "json"])
        from_raw = json.loads(capsys.readouterr().out)
        # re-express the same studies as precomputed g, var_g
        import csv as _csv
        import io
        from smdmeta.smd import ArmSummary, hedges_g
        rows = list(_csv.DictReader(io.StringIO(TOY_RAW)))
        buf = ["study_id,n_t,n_c,g,var_g"]
        for r in rows:
            s = hedges_g(ArmSummary(int(r["n_t"]), float(r["mean_t"]),
                                    float(r["sd_t"])),
                         ArmSummary(int(r["n_c"]), float(r["mean_c"]),
                                    float(r["sd_c"])))
            buf.append(f"{r['study_id']},{s.n_t},{s.n_c},{s.g!r},{s.v2!r}")
        pre_path = write(tmp_path / "pre.csv", "\n".join(buf) + "\n")
        main(["analyze", "--input", pre_path, "--format", "json"])
        from_pre = json.loads(capsys.readouterr().out)
        assert from_raw == from_pre

    def test_both_forms_mismatch_is_invariant_violation(self, tmp_path, capsys):
        text = ("study_id,n_t,n_c,mean_t,sd_t,mean_c,sd_c,g,var_g\n"
                "s1,10,10,1.0,1.0,0.0,1.0,0.5,0.2\n"
                "s2,10,10,0.0,1.0,0.0,1.0,0.0,0.2\n")
        path = write(tmp_path / "bad.csv", text)
        assert main(["analyze", "--input", path]) == 3

    def test_malformed_csv_reports_row_and_column(self, tmp_path, capsys):
        text = "study_id,n_t,n_c,g,var_g\ns1,10,10,zzz,1\ns2,10,10,0,1\n"
        path = write(tmp_path / "bad.csv", text)
        assert main(["analyze", "--input", path]) == 2
        err = capsys.readouterr().err
        assert "row 2" in err and "'g'" in err

    def test_small_arm_is_invariant_violation(self, tmp_path):
        text = "study_id,n_t,n_c,g,var_g\ns1,1,10,0,1\ns2,10,10,0,1\n"
        path = write(tmp_path / "bad.csv", text)
        assert main(["analyze", "--input", path]) == 3

    def test_single_study_rejected(self, tmp_path):
        text = "study_id,n_t,n_c,g,var_g\ns1,10,10,0,1\n"
        path = write(tmp_path / "one.csv", text)
        assert main(["analyze", "--input", path]) == 3

    def test_missing_columns(self, tmp_path):
        path = write(tmp_path / "cols.csv", "study_id,n_t,n_c\ns1,10,10\n")
        assert main(["analyze", "--input", path]) == 2

    def test_homogeneous_input_flags_degenerate(self, tmp_path, capsys):
        path = write(tmp_path / "flat.csv", FLAT)
        code = main(["analyze", "--input", path, "--format", "json"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert all(v["estimate"] == 0.0 for v in payload["tau2"].values())
        assert "degenerate" in payload["delta_intervals"]["HKSJ"]["flags"]

    def test_bad_level(self, tmp_path):
        path = write(tmp_path / "toy.csv", TOY_PRECOMP)
        assert main(["analyze", "--input", path, "--level", "0.4"]) == 2


SIM_FLAGS = ["--delta", "0", "--tau2", "0", "--k", "5", "--n", "20",
             "--q", "0.5", "--reps", "40", "--chunks", "4", "--seed", "7"]


class TestSimulate:
    def test_deterministic_bytes(self, tmp_path, capsys):
        p1, p2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        assert main(["simulate", *SIM_FLAGS, "--out", p1]) == 0
        assert main(["simulate", *SIM_FLAGS, "--out", p2]) == 0
        capsys.readouterr()
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_header_schema(self, tmp_path, capsys):
        path = str(tmp_path / "r.csv")
        main(["simulate", *SIM_FLAGS, "--out", path])
        capsys.readouterr()
        header = open(path).readline().strip()
        assert header == ",".join(RESULTS_HEADER)

    def test_cell_count_in_output(self, tmp_path, capsys):
        path = str(tmp_path / "r.csv")
        code = main(["simulate", "--delta", "0,0.2", "--tau2", "0,0.5",
                     "--k", "5", "--n", "20", "--q", "0.5,0.75",
                     "--reps", "4", "--chunks", "2", "--seed", "1",
                     "--out", path])
        capsys.readouterr()
        assert code == 0
        import csv as _csv
        rows = list(_csv.DictReader(open(path)))
        cells = {(r["delta"], r["tau2"], r["q"]) for r in rows}
        assert len(cells) == 8

    def test_off_grid_rejected_without_allow_custom(self, tmp_path, capsys):
        path = str(tmp_path / "r.csv")
        args = ["simulate", "--delta", "0.3", "--tau2", "0", "--k", "5",
                "--n", "20", "--q", "0.5", "--reps", "4", "--chunks", "2",
                "--seed", "1", "--out", path]
        assert main(args) == 2
        capsys.readouterr()
        assert main([*args, "--allow-custom"]) == 0

    def test_requires_some_size_flag(self, tmp_path):
        assert main(["simulate", "--delta", "0", "--tau2", "0", "--k", "5",
                     "--q", "0.5", "--out", str(tmp_path / "x.csv")]) == 2

    def test_no_partial_file_on_error(self, tmp_path):
        out = tmp_path / "sub" / "r.csv"
        code = main(["simulate", "--delta", "bogus", "--tau2", "0", "--k", "5",
                     "--n", "20", "--q", "0.5", "--out", str(out)])
        assert code == 2
        assert not out.exists()


@pytest.fixture(scope="module")
def results_csv(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("plotdata")
    path = str(tmp / "results.csv")
    code = main(["simulate", "--delta", "0", "--tau2", "0,0.5",
                 "--k", "5,10,30", "--n", "20,40,100,250", "--q", "0.5",
                 "--reps", "4", "--chunks", "2", "--seed", "3",
                 "--out", path])
    assert code == 0
    return path


class TestPlot:
    def test_round_trip_produces_svg(self, tmp_path, results_csv, capsys):
        out_dir = str(tmp_path / "figs")
        code = main(["plot", "--results", results_csv,
                     "--metric", "tau2_coverage", "--out-dir", out_dir])
        capsys.readouterr()
        assert code == 0
        files = os.listdir(out_dir)
        assert len(files) == 1 and files[0].endswith(".svg")
        svg = open(os.path.join(out_dir, files[0])).read()
        assert "<svg" in svg and "polyline" in svg
        # nominal-level reference line present for coverage plots
        assert 'stroke-dasharray="3,3"' in svg

    def test_bias_plot(self, tmp_path, results_csv, capsys):
        out_dir = str(tmp_path / "figs2")
        code = main(["plot", "--results", results_csv,
                     "--metric", "tau2_bias", "--out-dir", out_dir])
        capsys.readouterr()
        assert code == 0

    def test_missing_cells_listed(self, tmp_path, results_csv, capsys):
        out_dir = str(tmp_path / "figs3")
        code = main(["plot", "--results", results_csv,
                     "--metric", "tau2_coverage", "--out-dir", out_dir,
                     "--delta", "0", "--q", "0.5", "--family", "equal-small"])
        assert code == 2
        err = capsys.readouterr().err
        assert err.count("K=") == 12  # all 12 panels missing

    def test_unknown_metric(self, tmp_path, results_csv):
        assert main(["plot", "--results", results_csv, "--metric", "nope",
                     "--out-dir", str(tmp_path / "f")]) == 2
