import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from usamkit.cli import build_parser, main
from usamkit.io import read_records, write_records
from usamkit.pipeline import bayes_measures

NOISELESS = ["--world.model-noise", "L=0,B+=0,S=0,T=0", "--world.ambiguity", "0",
             "--world.prompt-noise", "0", "--world.degradation-gain", "0", "--world.score-noise", "0",
             "--world.temperature", "0.001"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["generate", "--n", "3", "--n-prompts", "2", "--out", str(d / "full.jsonl")]) == 0
    assert main(["generate", "--n", "30", "--grid", "usam", "--out", str(d / "train.jsonl")]) == 0
    assert main(["generate", "--n", "20", "--first", "500", "--grid", "identity",
                 "--out", str(d / "test.jsonl")]) == 0
    assert main(["train", "--records", str(d / "train.jsonl"), "--heads", str(d / "heads"),
                 "--epochs", "2", "--hidden", "16"]) == 0
    return d


class TestGenerate:
    def test_line_count(self, tmp_path):
        assert main(["generate", "--n", "5", "--grid", "usam", "--out", str(tmp_path / "r.jsonl")]) == 0
        lines = (tmp_path / "r.jsonl").read_text().splitlines()
        assert len(lines) == 6
        assert json.loads(lines[0])["schema_version"] == 1

    def test_deterministic(self, tmp_path):
        for name in "ab":
            (tmp_path / name).mkdir()
            main(["generate", "--n", "2", "--seed", "3", "--grid", "usam",
                  "--out", str(tmp_path / name / "r.jsonl")])
        assert (tmp_path / "a" / "r.jsonl").read_bytes() == (tmp_path / "b" / "r.jsonl").read_bytes()

    def test_zero_samples_is_error(self, tmp_path, capsys):
        assert main(["generate", "--n", "0", "--out", str(tmp_path / "r.jsonl")]) != 0
        assert "--n" in capsys.readouterr().err
        assert not (tmp_path / "r.jsonl").exists()

    def test_invalid_world_is_error(self, tmp_path):
        assert main(["generate", "--n", "1", "--world.ambiguity", "2", "--out", str(tmp_path / "r")]) != 0

    def test_world_override_recorded(self, tmp_path):
        main(["generate", "--n", "1", "--grid", "usam", "--world.ambiguity", "0.9",
              "--world.image-size", "24x20", "--out", str(tmp_path / "r")])
        header = json.loads((tmp_path / "r").read_text().splitlines()[0])
        assert header["world"]["ambiguity"] == 0.9 and header["world"]["image_size"] == [24, 20]
        assert read_records(tmp_path / "r")[0].gt.shape == (24, 20)

    def test_manifest(self, tmp_path):
        main(["generate", "--n", "1", "--grid", "usam", "--seed", "7", "--out", str(tmp_path / "r")])
        m = json.loads((tmp_path / "r.manifest.json").read_text())
        assert m["command"] == "generate" and m["seeds"]["seed"] == 7
        assert m["outputs"] == [str(tmp_path / "r")] and len(m["config_digest"]) == 64
        assert m["completed"] is not None and "numpy" in m["versions"]
        header = json.loads((tmp_path / "r").read_text().splitlines()[0])
        assert header["manifest"] == "r.manifest.json"


class TestParser:
    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--n", "1", "--out", "x", "--bogus"])
        assert exc.value.code == 2

    @pytest.mark.parametrize("cmd", ["generate", "bayes", "train", "eval", "correlate", "ablate",
                                     "bench", "export"])
    def test_help_lists_flags(self, cmd, capsys):
        with pytest.raises(SystemExit):
            main([cmd, "--help"])
        text = capsys.readouterr().out
        assert "--seed" in text and "--out" in text or "--heads" in text

    def test_world_flags_documented(self, capsys):
        with pytest.raises(SystemExit):
            main(["generate", "--help"])
        text = capsys.readouterr().out
        for flag in ("--world.seed", "--world.model-noise", "--world.ambiguity", "--world.prompt-gain"):
            assert flag in text


class TestBayes:
    def test_noiseless(self, tmp_path):
        main(["generate", "--n", "2", "--n-prompts", "2", *NOISELESS, "--out", str(tmp_path / "r")])
        assert main(["bayes", "--records", str(tmp_path / "r"), "--out", str(tmp_path / "b.csv")]) == 0
        rows = read_csv(tmp_path / "b.csv")
        assert rows[0] == ["image_id", "H_Y", "H_Theta", "H_XP", "H_A", "H_Std", "inv_samscore"]
        for row in rows[1:]:
            assert all(abs(float(v)) <= 1e-6 for v in row[1:6])

    def test_matches_library(self, small_run, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["bayes", "--records", str(small_run / "full.jsonl"), "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows[0]) == 7
        for s, row in zip(read_records(small_run / "full.jsonl"), rows[1:]):
            ref = bayes_measures(s, "L")
            assert row[0] == s.image_id
            assert [float(v) for v in row[1:]] == [ref[k] for k in rows[0][1:]]


class TestTrainEval:
    def test_checkpoints_and_manifest(self, small_run):
        heads = small_run / "heads"
        manifest = json.loads((heads / "manifest.json").read_text())
        assert len(manifest["heads"]) == 9 and manifest["run_manifest"] == "run_manifest.json"
        assert json.loads((heads / "run_manifest.json").read_text())["command"] == "train"

    def test_train_deterministic(self, small_run, tmp_path):
        main(["train", "--records", str(small_run / "train.jsonl"), "--heads", str(tmp_path / "h"),
              "--epochs", "2", "--hidden", "16"])
        for f in (small_run / "heads").glob("*.mlp"):
            assert f.read_bytes() == (tmp_path / "h" / f.name).read_bytes()

    def test_search(self, small_run, tmp_path):
        assert main(["train", "--records", str(small_run / "train.jsonl"), "--heads", str(tmp_path / "h"),
                     "--search", "2", "--hidden", "8", "--head-set", "usam_T"]) == 0
        m = json.loads((tmp_path / "h" / "manifest.json").read_text())
        assert m["search"]["trials"] == 2 and m["params"]["epochs"] == m["search"]["best"]["epochs"]

    def test_eval_outputs(self, small_run, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--records", str(small_run / "test.jsonl"), "--heads", str(small_run / "heads"),
                     "--out", str(out), "--svg"]) == 0
        table = read_csv(out / "rel_auc.csv")
        assert table[0] == ["method", "scenario", "auc", "rel_auc_percent"]
        by = {(r[0], r[1]): r for r in table[1:]}
        for sc in ("model-swap", "prompt-refine", "task-supervise", "gt-correct"):
            assert by[("oracle", sc)][3] == "100.00"
            assert by[("worst", sc)][3] == "0.00"
            assert ("random", sc) in by and ("direct_delta_task", sc) in by and ("H_XP", sc) in by
            curves = read_csv(out / f"curves_{sc}.csv")
            assert curves[0][0] == "ratio" and curves[0][-2:] == ["oracle", "worst"]
            assert len(curves) == 22
            root = ET.parse(out / f"curves_{sc}.svg").getroot()
            assert root.tag.endswith("svg")
        # full-grid entropy is skipped on identity-grid records
        assert ("H_Y", "model-swap") not in by

    def test_eval_single_scenario(self, small_run, tmp_path):
        out = tmp_path / "ev"
        assert main(["eval", "--records", str(small_run / "test.jsonl"), "--scenario", "gt-correct",
                     "--no-bayes", "--out", str(out)]) == 0
        assert {p.name for p in out.iterdir()} == {"curves_gt-correct.csv", "rel_auc.csv", "run_manifest.json"}

    def test_eval_missing_heads(self, small_run, tmp_path):
        assert main(["eval", "--records", str(small_run / "test.jsonl"), "--heads", str(tmp_path / "none"),
                     "--out", str(tmp_path / "ev")]) != 0

    def test_delta_beats_random(self, trained, tmp_path):
        write_records(tmp_path / "test.jsonl", trained.test_sets)
        trained.heads.save(tmp_path / "heads")
        out = tmp_path / "ev"
        assert main(["eval", "--records", str(tmp_path / "test.jsonl"), "--heads", str(tmp_path / "heads"),
                     "--no-bayes", "--out", str(out)]) == 0
        rel = {(r[0], r[1]): float(r[3]) for r in read_csv(out / "rel_auc.csv")[1:]}
        for kind, sc in (("theta", "model-swap"), ("prompt", "prompt-refine"),
                         ("task", "task-supervise")):
            assert rel[(f"direct_delta_{kind}", sc)] > rel[("random", sc)]
        assert rel[("usam", "gt-correct")] > rel[("random", "gt-correct")]


class TestOtherCommands:
    def test_correlate(self, small_run, tmp_path):
        out = tmp_path / "c.csv"
        assert main(["correlate", "--records", str(small_run / "test.jsonl"), "--heads",
                     str(small_run / "heads"), "--out", str(out)]) == 0
        rows = read_csv(out)
        names = rows[0][1:]
        assert names[:2] == ["IoU_GT", "SamScore"] and "USAM" in names and "H_Theta" in names
        vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        np.testing.assert_allclose(np.diag(vals), 1.0, atol=1e-6)
        np.testing.assert_allclose(vals, vals.T, atol=1e-12)

    def test_ablate(self, small_run, tmp_path):
        out = tmp_path / "a.csv"
        assert main(["ablate", "--records", str(small_run / "train.jsonl"), "--test-records",
                     str(small_run / "test.jsonl"), "--epochs", "1", "--hidden", "8", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["zero", "model-swap", "prompt-refine", "task-supervise", "mean"]
        assert [r[0] for r in rows[1:]] == ["none", "mask_token", "iou_token"]

    def test_bench(self, tmp_path):
        out = tmp_path / "b.csv"
        assert main(["bench", "--sizes", "64", "--out", str(out)]) == 0
        rows = read_csv(out)
        assert rows[0] == ["mask_size", "method", "median_seconds"]
        assert [r[1] for r in rows[1:]] == ["sam", "usam_head", "usam_all", "entropy", "mc_T5"]

    def test_export(self, small_run, tmp_path):
        out = tmp_path / "e.csv"
        assert main(["export", "--records", str(small_run / "full.jsonl"), "--out", str(out)]) == 0
        rows = read_csv(out)
        assert len(rows) == 4 and rows[0][:2] == ["image_id", "height"]
        assert rows[1][4] == str((6 * 2 + 1) * 12)

    def test_empty_records_is_error(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert main(["export", "--records", str(tmp_path / "e.jsonl"), "--out", str(tmp_path / "o")]) != 0


def test_parser_builds():
    assert build_parser().prog == "usamkit"
