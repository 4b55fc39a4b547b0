import csv
import json
import struct

import numpy as np
import pytest

from lords.cli import main
from lords.core.formats import read_packed, read_tensor, write_tensor


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestPlans:
    @pytest.mark.parametrize("rows,cols,block,expected", [
        (4096, 4096, 128, "16"),
        (1024, 4096, 128, "6"),
        (14336, 4096, 128, "24"),
        (4096, 2560, 128, "12"),
        (1024, 2560, 256, "2"),
    ])
    def test_rank_plan(self, capsys, state_dir, rows, cols, block, expected):
        code, out, _ = run(capsys, "rank-plan", "--rows", str(rows), "--cols", str(cols), "--block-size", str(block))
        assert code == 0
        assert out == expected + "\n"

    def test_rank_plan_adapter(self, capsys, state_dir):
        _, out, _ = run(capsys, "rank-plan", "--rows", "4096", "--cols", "4096", "--block-size", "128",
                        "--adapter-rank", "16")
        assert out.strip() == "32"

    def test_rank_plan_too_small(self, capsys, state_dir):
        code, out, err = run(capsys, "rank-plan", "--rows", "4", "--cols", "4", "--block-size", "128")
        assert code == 3
        assert out == ""
        assert err.startswith("❌")

    def test_mixed_plan(self, capsys, state_dir):
        code, out, _ = run(capsys, "mixed-plan", "--layers", "8", "--bits", "2.25")
        rows = list(csv.reader(out.splitlines()))
        assert code == 0
        assert rows[0] == ["layer", "codebook"]
        assert rows[1] == ["0", "nf4"]
        assert [r[1] for r in rows[2:]] == ["nf2"] * 7


class TestPipeline:
    def test_zero_step_refine_matches_quantize(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(32, 128)
        base, refined = tmp_path / "base.lrq", tmp_path / "refined.lrq"
        assert run(capsys, "quantize", "--in", str(w_path), "--codebook", "nf4", "--block-size", "32",
                   "--out", str(base))[0] == 0
        assert run(capsys, "refine", "--in", str(w_path), "--codebook", "nf4", "--rank", "4", "--steps", "0",
                   "--out", str(refined))[0] == 0
        for artifact in (base, refined):
            assert run(capsys, "dequantize", "--in", str(artifact), "--out", str(artifact) + ".lrt")[0] == 0
        np.testing.assert_array_equal(read_packed(base).codes, read_packed(refined).codes)
        np.testing.assert_array_equal(read_tensor(str(refined) + ".lrt"), read_tensor(str(base) + ".lrt"))

    def test_refine_report_and_cache(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(16, 64)
        out, report = tmp_path / "q.lrq", tmp_path / "trace.csv"
        code, stdout, _ = run(capsys, "refine", "--in", str(w_path), "--block-size", "8", "--steps", "5",
                              "--out", str(out), "--report", str(report))
        assert code == 0
        assert float(stdout) >= 0.0
        lines = report.read_text().splitlines()
        assert lines[0] == "iter,frob_error"
        assert len(lines) == 1 + 6 + 1
        first = out.read_bytes()

        code, again, _ = run(capsys, "refine", "--in", str(w_path), "--block-size", "8", "--steps", "5",
                             "--out", str(out))
        assert again == stdout
        assert out.read_bytes() == first
        _, stats, _ = run(capsys, "runs", "stats")
        assert json.loads(stats)["total_entries"] == 1

        run(capsys, "refine", "--in", str(w_path), "--block-size", "8", "--steps", "5",
            "--out", str(out), "--no-cache")
        assert out.read_bytes() == first
        _, stats, _ = run(capsys, "runs", "stats")
        assert json.loads(stats)["total_entries"] == 1

        run(capsys, "refine", "--in", str(w_path), "--block-size", "8", "--steps", "5",
            "--out", str(out), "--refresh")
        assert out.read_bytes() == first
        _, stats, _ = run(capsys, "runs", "stats")
        assert json.loads(stats)["total_entries"] == 2
        code, cleaned, _ = run(capsys, "runs", "cleanup", "--keep", "1")
        assert code == 0
        assert cleaned.strip() == "1"

    def test_refresh_conflicts_with_no_cache(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(8, 16)
        code, _, _ = run(capsys, "refine", "--in", str(w_path), "--out", str(tmp_path / "q.lrq"),
                         "--no-cache", "--refresh")
        assert code == 2

    def test_adapter_rank_needs_auto_rank(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(16, 64)
        out = tmp_path / "q.lrq"
        code, stdout, err = run(capsys, "refine", "--in", str(w_path), "--rank", "4", "--adapter-rank", "2",
                                "--steps", "1", "--out", str(out))
        assert code == 3
        assert stdout == ""
        assert err.startswith("❌")
        assert not out.exists()

    def test_error_report_ratio_positive(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(64, 128, seed=3)
        base, refined = tmp_path / "base.lrq", tmp_path / "refined.lrq"
        run(capsys, "quantize", "--in", str(w_path), "--block-size", "16", "--out", str(base))
        run(capsys, "refine", "--in", str(w_path), "--block-size", "16", "--rank", "auto", "--out", str(refined))
        code, out, _ = run(capsys, "error-report", "--weights", str(w_path),
                           "--artifacts", str(base), str(refined), "--format", "csv")
        rows = list(csv.DictReader(out.splitlines()))
        assert code == 0
        assert [r["method"] for r in rows] == ["blockwise", "lords"]
        assert rows[1]["float_params"] == str(2 * (64 + 128))
        assert float(rows[1]["reduction_ratio"]) > 0.0

    def test_error_report_markdown(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(8, 32)
        base = tmp_path / "base.lrq"
        run(capsys, "quantize", "--in", str(w_path), "--block-size", "8", "--out", str(base))
        _, out, _ = run(capsys, "error-report", "--weights", str(w_path), "--artifacts", str(base), "--format", "md")
        assert out.startswith("| matrix")

    def test_quantize_layers(self, capsys, state_dir, gaussian_file, tmp_path):
        paths = [str(gaussian_file(8, 32, seed=i, name=f"l{i}.lrt")[0]) for i in range(4)]
        code, out, _ = run(capsys, "quantize-layers", "--in", *paths, "--bits", "3", "--block-size", "8",
                           "--out-dir", str(tmp_path / "layers"))
        rows = list(csv.DictReader(out.splitlines()))
        assert code == 0
        assert [r["codebook"] for r in rows] == ["nf4", "nf4", "nf2", "nf2"]
        assert read_packed(rows[3]["path"]).codebook_id.label == "nf2"


class TestQatDemo:
    def test_trace_file(self, capsys, state_dir, tmp_path):
        out = tmp_path / "trace.csv"
        code, stdout, _ = run(capsys, "qat-demo", "--seed", "1", "--steps", "10", "--lr", "0.05", "--out", str(out))
        rows = list(csv.reader(out.read_text().splitlines()))
        assert code == 0
        assert rows[0] == ["step", "loss"]
        assert len(rows) == 12
        assert float(stdout) == float(rows[-1][1])

    def test_compare_to_stdout(self, capsys, state_dir):
        _, stdout, _ = run(capsys, "qat-demo", "--seed", "1", "--steps", "3", "--mode", "weights", "--compare")
        rows = list(csv.reader(stdout.splitlines()))
        assert rows[0] == ["step", "weights_loss", "joint_loss"]
        assert rows[1][1] == rows[1][2]

    def test_scale_lr_ratio_flag(self, capsys, state_dir):
        _, frozen, _ = run(capsys, "qat-demo", "--seed", "2", "--steps", "5", "--scale-lr-ratio", "0", "--compare")
        rows = list(csv.reader(frozen.splitlines()))
        assert all(row[1] == row[2] for row in rows[1:])
        code, _, err = run(capsys, "qat-demo", "--steps", "1", "--scale-lr-ratio", "-1")
        assert code == 10
        assert err.startswith("❌")


class TestPeft:
    def test_init_merge_and_delta(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(32, 64)
        base = tmp_path / "base.lrq"
        run(capsys, "refine", "--in", str(w_path), "--rank", "4", "--steps", "5", "--out", str(base))
        b_path, a_path = tmp_path / "b.lrt", tmp_path / "a.lrt"
        assert run(capsys, "peft-init", "--base", str(base), "--out-b", str(b_path), "--out-a", str(a_path))[0] == 0

        code, out, _ = run(capsys, "delta-rank", "--base", str(base), "--tuned-b", str(b_path),
                           "--tuned-a", str(a_path))
        assert code == 0 and out.strip() == "0"

        rng = np.random.default_rng(5)
        tuned_b = read_tensor(b_path) * rng.uniform(0.5, 1.5, size=(32, 4))
        write_tensor(tuned_b, b_path)
        spectrum = tmp_path / "spectrum.csv"
        code, out, _ = run(capsys, "delta-rank", "--base", str(base), "--tuned-b", str(b_path),
                           "--tuned-a", str(a_path), "--out", str(spectrum), "--lora-rank", "4")
        assert int(out) > 4
        rows = list(csv.reader(spectrum.read_text().splitlines()))
        assert rows[0] == ["index", "sigma", "additive_sigma"]
        assert len(rows) == 1 + 32

        merged = tmp_path / "merged.lrq"
        assert run(capsys, "peft-merge", "--base", str(base), "--tuned-b", str(b_path), "--tuned-a", str(a_path),
                   "--out", str(merged))[0] == 0
        m = read_packed(merged)
        np.testing.assert_array_equal(m.codes, read_packed(base).codes)
        np.testing.assert_array_equal(m.scale_repr.b, read_tensor(b_path))

    def test_train_round_trip(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(16, 32)
        base = tmp_path / "base.lrq"
        run(capsys, "refine", "--in", str(w_path), "--rank", "2", "--steps", "10", "--out", str(base))
        b_path, a_path = tmp_path / "b.lrt", tmp_path / "a.lrt"
        run(capsys, "peft-init", "--base", str(base), "--out-b", str(b_path), "--out-a", str(a_path))

        tuned_b, tuned_a, trace = tmp_path / "tb.lrt", tmp_path / "ta.lrt", tmp_path / "peft.csv"
        code, out, _ = run(capsys, "peft-train", "--base", str(base), "--tuned-b", str(b_path),
                           "--tuned-a", str(a_path), "--out-b", str(tuned_b), "--out-a", str(tuned_a),
                           "--seed", "2", "--steps", "100", "--trace", str(trace))
        assert code == 0
        rows = list(csv.reader(trace.read_text().splitlines()))
        assert rows[0] == ["step", "loss"]
        assert len(rows) == 1 + 101
        assert float(out) == float(rows[-1][1])
        assert float(rows[-1][1]) < float(rows[1][1])

        code, out, _ = run(capsys, "delta-rank", "--base", str(base), "--tuned-b", str(tuned_b),
                           "--tuned-a", str(tuned_a))
        assert code == 0 and int(out) > 2

        merged = tmp_path / "merged.lrq"
        assert run(capsys, "peft-merge", "--base", str(base), "--tuned-b", str(tuned_b),
                   "--tuned-a", str(tuned_a), "--out", str(merged))[0] == 0
        m = read_packed(merged)
        np.testing.assert_array_equal(m.codes, read_packed(base).codes)
        np.testing.assert_array_equal(m.scale_repr.a, read_tensor(tuned_a))

    def test_merge_rank_mismatch(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(16, 32)
        base = tmp_path / "base.lrq"
        run(capsys, "refine", "--in", str(w_path), "--rank", "2", "--steps", "1", "--out", str(base))
        write_tensor(np.ones((16, 3)), tmp_path / "b.lrt")
        write_tensor(np.ones((3, 32)), tmp_path / "a.lrt")
        code, _, err = run(capsys, "peft-merge", "--base", str(base), "--tuned-b", str(tmp_path / "b.lrt"),
                           "--tuned-a", str(tmp_path / "a.lrt"), "--out", str(tmp_path / "m.lrq"))
        assert code == 3
        assert len(err.strip().splitlines()) == 1


class TestErrors:
    def test_unknown_flag(self, capsys, state_dir):
        assert run(capsys, "rank-plan", "--rows", "4", "--bogus")[0] == 2

    def test_no_command(self, capsys, state_dir):
        assert run(capsys)[0] == 2

    def test_missing_file(self, capsys, state_dir, tmp_path):
        code, _, err = run(capsys, "dequantize", "--in", str(tmp_path / "none.lrq"), "--out", str(tmp_path / "x"))
        assert code == 4
        assert err.startswith("❌")

    def test_bad_magic(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(2, 4)
        assert run(capsys, "dequantize", "--in", str(w_path), "--out", str(tmp_path / "x"))[0] == 5

    def test_truncated(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(2, 4)
        w_path.write_bytes(w_path.read_bytes()[:-2])
        assert run(capsys, "quantize", "--in", str(w_path), "--block-size", "2", "--out", str(tmp_path / "q"))[0] == 6

    def test_non_finite_weights(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(2, 4)
        data = bytearray(w_path.read_bytes())
        data[-4:] = struct.pack("<f", float("nan"))
        w_path.write_bytes(bytes(data))
        code, out, err = run(capsys, "quantize", "--in", str(w_path), "--block-size", "2", "--out", str(tmp_path / "q"))
        assert code == 5
        assert out == ""
        assert "non-finite" in err
        assert not (tmp_path / "q").exists()

    def test_divisibility(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(4, 30)
        code, out, err = run(capsys, "quantize", "--in", str(w_path), "--block-size", "8", "--out", str(tmp_path / "q"))
        assert code == 3
        assert out == ""
        assert not (tmp_path / "q").exists()

    def test_corrupted_codebook(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(2, 4)
        q_path = tmp_path / "q.lrq"
        run(capsys, "quantize", "--in", str(w_path), "--block-size", "2", "--out", str(q_path))
        data = bytearray(q_path.read_bytes())
        data[8] = 9
        q_path.write_bytes(bytes(data))
        assert run(capsys, "dequantize", "--in", str(q_path), "--out", str(tmp_path / "x"))[0] == 8

    def test_bad_config(self, capsys, state_dir):
        state_dir.mkdir()
        (state_dir / "config.json").write_text('{"unknown": 1}')
        assert run(capsys, "config", "show")[0] == 10


class TestConfigAndRuns:
    def test_config_init_and_show(self, capsys, state_dir):
        code, out, _ = run(capsys, "config", "init")
        assert code == 0
        assert (state_dir / "config.json").exists()
        assert json.loads(out)["steps"] == 500

    def test_state_dir_flag(self, capsys, tmp_path):
        other = tmp_path / "elsewhere"
        run(capsys, "config", "init", "--state-dir", str(other))
        assert (other / "config.json").exists()

    def test_runs_clear(self, capsys, state_dir, gaussian_file, tmp_path):
        w_path, _ = gaussian_file(8, 16)
        run(capsys, "refine", "--in", str(w_path), "--rank", "1", "--steps", "1", "--out", str(tmp_path / "q"))
        _, out, _ = run(capsys, "runs", "list")
        assert len(out.splitlines()) == 2
        _, out, _ = run(capsys, "runs", "clear")
        assert out.strip() == "1"
