import hashlib
import json
from pathlib import Path

import pytest

from ssda_lab.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, main

FAST = ["--t-max", "200", "--t-val", "25", "--patience", "4"]


def gen_args(out, seed=0, shots=3, extra=()):
    return [
        "gen-data", "--out", str(out), "--classes", "3", "--n-source", "90",
        "--n-target", "90", "--seed", str(seed), "--shots", str(shots), *extra,
    ]


@pytest.fixture(scope="module")
def split_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "split"
    assert main(gen_args(out)) == EXIT_OK
    return out


def _tree_digest(root: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.iterdir())}


class TestGenData:
    def test_default_flags_give_default_benchmark(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path / "s")]) == EXIT_OK
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest["counts"]["labeled_target"] == 15  # 3-shot, 5 classes
        assert manifest["spec"]["n_classes"] == 5
        assert manifest["spec"]["shift"]["rotation_degrees"] == 30.0

    def test_one_shot_flag(self, tmp_path):
        assert main(gen_args(tmp_path / "s", shots=1)) == EXIT_OK
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest["counts"]["labeled_target"] == 3  # 1 per class, 3 classes

    def test_same_seed_identical_bytes(self, tmp_path):
        main(gen_args(tmp_path / "a", seed=7))
        main(gen_args(tmp_path / "b", seed=7))
        assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")

    def test_invalid_spec_is_config_error(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "s"), "--classes", "1"]) == EXIT_CONFIG


class TestRunPipeline:
    def test_end_to_end_artifacts(self, split_dir, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["run-pipeline", "--split", str(split_dir), "--out", str(out), *FAST]) == EXIT_OK
        for name in [
            "baseline_checkpoint.json", "baseline_report.csv", "selection.json",
            "final_checkpoint.json", "final_report.csv", "manifest.json",
        ]:
            assert (out / name).exists(), name
        stdout = capsys.readouterr().out
        assert "reliability before/after selection" in stdout
        assert "final accuracy" in stdout
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["split_checksum"]
        assert set(manifest["artifacts"]) >= {"baseline_checkpoint", "selection", "final_checkpoint"}

    def test_byte_identical_reports_for_identical_config(self, split_dir, tmp_path):
        for name in ("r1", "r2"):
            assert main(["run-pipeline", "--split", str(split_dir), "--out", str(tmp_path / name),
                         "--seed", "3", *FAST]) == EXIT_OK
        for csv in ("baseline_report.csv", "final_report.csv"):
            assert (tmp_path / "r1" / csv).read_bytes() == (tmp_path / "r2" / csv).read_bytes()

    def test_split_files_never_mutated(self, split_dir, tmp_path):
        before = _tree_digest(split_dir)
        main(["run-pipeline", "--split", str(split_dir), "--out", str(tmp_path / "run"), *FAST])
        assert _tree_digest(split_dir) == before

    def test_source_plus_target_arm_skips_pseudo_stages(self, split_dir, tmp_path, capsys):
        out = tmp_path / "st"
        assert main(["run-pipeline", "--split", str(split_dir), "--out", str(out),
                     "--lambda", "0", "--no-pseudo", *FAST]) == EXIT_OK
        assert not (out / "selection.json").exists()
        assert not (out / "final_checkpoint.json").exists()
        assert "baseline only" in capsys.readouterr().out

    def test_vanilla_arm_flags(self, split_dir, tmp_path):
        assert main(["run-pipeline", "--split", str(split_dir), "--out", str(tmp_path / "v"),
                     "--r-u", "1.0", "--hard-labels", "--label-momentum", "1.0", *FAST]) == EXIT_OK

    def test_missing_split_is_data_error(self, tmp_path):
        assert main(["run-pipeline", "--split", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_bad_config_value_is_config_error(self, split_dir, tmp_path):
        assert main(["run-pipeline", "--split", str(split_dir), "--out", str(tmp_path / "o"),
                     "--lambda", "-2"]) == EXIT_CONFIG

    def test_corrupt_checkpoint_is_runtime_error(self, split_dir, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["evaluate", "--split", str(split_dir), "--checkpoint", str(bad)]) == EXIT_RUNTIME


class TestConfigPrecedence:
    def test_file_overrides_defaults_and_flags_override_file(self, split_dir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"t_max": 200, "t_val": 25, "patience": 3, "base_lr": 0.004}))
        out = tmp_path / "run"
        assert main(["train-baseline", "--split", str(split_dir), "--out", str(out),
                     "--config", str(cfg), "--base-lr", "0.006"]) == EXIT_OK
        stdout = capsys.readouterr().out
        effective = json.loads(stdout.split("effective config: ")[1].split("\n")[0])
        assert effective["t_max"] == 200      # from file
        assert effective["base_lr"] == 0.006  # flag beats file
        assert effective["lambda_"] == 0.1    # default survives

    def test_unknown_config_field_rejected(self, split_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learning_rate": 0.1}))
        assert main(["train-baseline", "--split", str(split_dir), "--out", str(tmp_path / "o"),
                     "--config", str(cfg)]) == EXIT_CONFIG

    def test_missing_config_file_rejected(self, split_dir, tmp_path):
        assert main(["train-baseline", "--split", str(split_dir), "--out", str(tmp_path / "o"),
                     "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG


class TestStagedCommands:
    def test_stage_by_stage_matches_pipeline(self, split_dir, tmp_path):
        pipe = tmp_path / "pipe"
        assert main(["run-pipeline", "--split", str(split_dir), "--out", str(pipe),
                     "--seed", "5", *FAST]) == EXIT_OK

        base = tmp_path / "base"
        assert main(["train-baseline", "--split", str(split_dir), "--out", str(base),
                     "--seed", "5", *FAST]) == EXIT_OK
        sel = tmp_path / "sel"
        assert main(["pseudo-label", "--split", str(split_dir),
                     "--checkpoint", str(base / "baseline_checkpoint.json"),
                     "--out", str(sel), "--seed", "5", *FAST]) == EXIT_OK
        st = tmp_path / "st"
        assert main(["self-train", "--split", str(split_dir),
                     "--checkpoint", str(base / "baseline_checkpoint.json"),
                     "--selection", str(sel / "selection.json"),
                     "--out", str(st), "--seed", "5", *FAST]) == EXIT_OK

        assert (pipe / "baseline_report.csv").read_bytes() == (base / "baseline_report.csv").read_bytes()
        assert (pipe / "final_report.csv").read_bytes() == (st / "final_report.csv").read_bytes()

    def test_evaluate_prints_accuracy(self, split_dir, tmp_path, capsys):
        base = tmp_path / "base"
        main(["train-baseline", "--split", str(split_dir), "--out", str(base), *FAST])
        assert main(["evaluate", "--split", str(split_dir),
                     "--checkpoint", str(base / "baseline_checkpoint.json")]) == EXIT_OK
        assert "accuracy on unlabeled target" in capsys.readouterr().out


class TestAblations:
    def test_ru_sweep_row_count_and_best_marker(self, split_dir, tmp_path, capsys):
        out = tmp_path / "ru"
        assert main(["ablate-ru", "--split", str(split_dir), "--out", str(out),
                     "--grid", "0.2,1.0", "--seeds", "0,1", *FAST]) == EXIT_OK
        rows = (out / "ru_sweep.csv").read_text().strip().split("\n")
        assert rows[0] == "r_u,seed,accuracy"
        assert len(rows) - 1 == 2 * 2
        summary = (out / "ru_summary.csv").read_text().strip().split("\n")
        assert summary[0] == "r_u,mean_accuracy,std_accuracy,best"
        assert sum(1 for line in summary[1:] if line.endswith("*")) == 1
        assert "<- best" in capsys.readouterr().out

    def test_bad_grid_value_rejected(self, split_dir, tmp_path):
        assert main(["ablate-ru", "--split", str(split_dir), "--out", str(tmp_path / "o"),
                     "--grid", "0.0,0.2", "--seeds", "0,1"]) == EXIT_CONFIG

    def test_noise_ablation_pairs_and_difference(self, split_dir, tmp_path, capsys):
        out = tmp_path / "noise"
        assert main(["ablate-noise", "--split", str(split_dir), "--out", str(out),
                     "--seeds", "0,1", *FAST]) == EXIT_OK
        rows = (out / "noise_ablation.csv").read_text().strip().split("\n")
        assert rows[0] == "seed,progressive_accuracy,vanilla_accuracy,paired_difference"
        assert len(rows) - 1 == 2
        for line in rows[1:]:
            seed, prog, van, diff = line.split(",")
            assert float(prog) - float(van) == pytest.approx(float(diff), abs=1e-12)
        assert "paired mean difference" in capsys.readouterr().out

    def test_noise_ablation_needs_two_seeds(self, split_dir, tmp_path):
        assert main(["ablate-noise", "--split", str(split_dir), "--out", str(tmp_path / "o"),
                     "--seeds", "0"]) == EXIT_CONFIG


class TestReportReliability:
    def test_arrow_format_and_csv_agreement(self, split_dir, tmp_path, capsys):
        base = tmp_path / "base"
        main(["train-baseline", "--split", str(split_dir), "--out", str(base), *FAST])
        sel = tmp_path / "sel"
        main(["pseudo-label", "--split", str(split_dir),
              "--checkpoint", str(base / "baseline_checkpoint.json"), "--out", str(sel), *FAST])
        capsys.readouterr()
        csv_path = tmp_path / "rel.csv"
        assert main(["report-reliability", "--selection", str(sel / "selection.json"),
                     "--split", str(split_dir), "--csv", str(csv_path)]) == EXIT_OK
        stdout = capsys.readouterr().out.strip()
        assert " -> " in stdout
        lines = csv_path.read_text().strip().split("\n")
        before = float(lines[1].split(",")[1])
        after = float(lines[2].split(",")[1])
        assert stdout == f"{100 * before:.1f} -> {100 * after:.1f}"

    def test_stored_values_used_without_split(self, split_dir, tmp_path, capsys):
        base = tmp_path / "base"
        main(["train-baseline", "--split", str(split_dir), "--out", str(base), *FAST])
        sel = tmp_path / "sel"
        main(["pseudo-label", "--split", str(split_dir),
              "--checkpoint", str(base / "baseline_checkpoint.json"), "--out", str(sel), *FAST])
        capsys.readouterr()
        assert main(["report-reliability", "--selection", str(sel / "selection.json")]) == EXIT_OK
        assert " -> " in capsys.readouterr().out
