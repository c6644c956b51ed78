import json
import re

import numpy as np
import pytest

from capsule_sed import ctsr
from capsule_sed.cli import (EXIT_CONFIG, EXIT_MALFORMED_MANIFEST, EXIT_MISSING_FILE, EXIT_TRAINING,
                             build_parser, main)
from capsule_sed.postprocess import Event, write_event_list, write_weak_labels

SMALL = {"synth": {"clips": {"train": 8, "validation": 4, "test": 4}}, "train": {"epochs": 2, "top_k": 2}}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "small.json"
    config.write_text(json.dumps(SMALL))
    c = ["--config", str(config)]
    assert main(["synth-data", *c, "--out", str(root / "corpus")]) == 0
    assert main(["extract-features", *c, "--corpus", str(root / "corpus"), "--out", str(root / "feats")]) == 0
    assert main(["train", *c, "--features", str(root / "feats"), "--out", str(root / "run")]) == 0
    assert main(["predict", *c, "--features", str(root / "feats"), "--run", str(root / "run"),
                 "--out", str(root / "pred")]) == 0
    return root, c


class TestHelp:
    @pytest.mark.parametrize("command", ["synth-data", "extract-features", "train", "predict", "evaluate"])
    def test_documents_common_flags(self, command, capsys):
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--config", "--seed", "--out", "--preset"):
            assert flag in text

    def test_every_flag_has_help(self):
        parser = build_parser()
        for sub in parser._subparsers._group_actions[0].choices.values():
            for action in sub._actions:
                assert action.help, (sub.prog, action.dest)


class TestPipeline:
    def test_outputs_exist(self, pipeline):
        root, _ = pipeline
        manifest = json.loads((root / "feats" / "manifest.json").read_text())
        assert set(manifest["splits"]) == {"train", "validation", "test"}
        assert len(manifest["splits"]["test"]["clips"]) == 4
        assert sorted(p.name for p in (root / "run" / "checkpoints").iterdir()) == ["epoch_000", "epoch_001"]
        assert (root / "pred" / "tags.csv").exists() and (root / "pred" / "events.tsv").exists()

    def test_feature_files(self, pipeline):
        root, _ = pipeline
        arr = ctsr.load(root / "feats" / "train" / "train_0000.ctsr")
        assert arr.shape == (60, 64) and arr.dtype == np.float32

    def test_evaluate_writes_metrics(self, pipeline):
        root, c = pipeline
        out = root / "eval"
        assert main(["evaluate", *c, "--features", str(root / "feats"), "--predictions", str(root / "pred"),
                     "--out", str(out)]) == 0
        report = json.loads((out / "metrics.json").read_text())
        assert set(report) == {"tagging", "sed"}
        assert report["sed"]["n_segments"] == 40

    def test_predict_evaluate_byte_stable(self, pipeline):
        root, c = pipeline
        blobs = []
        for name in ("p1", "p2"):
            assert main(["predict", *c, "--features", str(root / "feats"), "--run", str(root / "run"),
                         "--out", str(root / name)]) == 0
            assert main(["evaluate", *c, "--features", str(root / "feats"), "--predictions", str(root / name)]) == 0
            blobs.append((root / name / "metrics.json").read_bytes() + (root / name / "events.tsv").read_bytes())
        assert blobs[0] == blobs[1]

    def test_idempotent_synth(self, pipeline):
        root, c = pipeline
        assert main(["synth-data", *c, "--out", str(root / "corpus2")]) == 0
        for name in ("train_weak.csv", "test_strong.tsv", "audio/test/test_0003.wav"):
            assert (root / "corpus" / name).read_bytes() == (root / "corpus2" / name).read_bytes()

    def test_seed_flag_wins_over_config(self, pipeline, tmp_path):
        root, c = pipeline
        assert main(["synth-data", *c, "--seed", "5", "--out", str(tmp_path / "c5")]) == 0
        corpus = json.loads((tmp_path / "c5" / "corpus.json").read_text())
        assert corpus["spec"]["seed"] == 5
        assert corpus["spec"]["clips"] == SMALL["synth"]["clips"]


class TestEvaluatePerfect:
    def test_predictions_equal_references(self, tmp_path, capsys):
        tags = {"a": {"dog"}, "b": {"dog", "cat"}}
        events = {"a": [Event("dog", 0.5, 2.5)], "b": [Event("cat", 1.0, 3.0), Event("dog", 6.2, 9.0)]}
        pred = tmp_path / "pred"
        pred.mkdir()
        write_weak_labels(pred / "tags.csv", tags)
        write_event_list(pred / "events.tsv", events)
        rc = main(["evaluate", "--predictions", str(pred), "--reference-tags", str(pred / "tags.csv"),
                   "--reference-events", str(pred / "events.tsv")])
        assert rc == 0
        report = json.loads((pred / "metrics.json").read_text())
        assert report["tagging"]["f_score"] == 1.0
        assert report["sed"]["f_score"] == 1.0 and report["sed"]["error_rate"] == 0.0


class TestExitCodes:
    def test_missing_features(self, tmp_path):
        assert main(["train", "--features", str(tmp_path / "none")]) == EXIT_MISSING_FILE

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == EXIT_MISSING_FILE

    def test_missing_checkpoints(self, pipeline, tmp_path):
        root, c = pipeline
        rc = main(["predict", *c, "--features", str(root / "feats"), "--run", str(tmp_path)])
        assert rc == EXIT_MISSING_FILE

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"splits": {}}')
        assert main(["train", "--features", str(tmp_path)]) == EXIT_MALFORMED_MANIFEST

    def test_manifest_not_json(self, tmp_path):
        (tmp_path / "manifest.json").write_text("[1, 2")
        assert main(["train", "--features", str(tmp_path)]) == EXIT_MALFORMED_MANIFEST

    def test_malformed_event_file(self, tmp_path):
        (tmp_path / "tags.csv").write_text("a,dog\n")
        (tmp_path / "events.tsv").write_text("a\t3.0\t1.0\tdog\n")
        rc = main(["evaluate", "--predictions", str(tmp_path), "--reference-tags", str(tmp_path / "tags.csv"),
                   "--reference-events", str(tmp_path / "events.tsv")])
        assert rc == EXIT_MALFORMED_MANIFEST

    def test_config_schema(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"train": {"epochs": 2, "momentum": 0.9}}')
        assert main(["train", "--config", str(path)]) == EXIT_CONFIG

    def test_invalid_flag_value(self, pipeline):
        root, c = pipeline
        assert main(["train", *c, "--features", str(root / "feats"), "--epochs", "0"]) == EXIT_CONFIG

    def test_training_failure(self, pipeline, tmp_path, capsys):
        root, c = pipeline
        feats = tmp_path / "feats"
        feats.mkdir()
        manifest = json.loads((root / "feats" / "manifest.json").read_text())
        for split, info in manifest["splits"].items():
            (feats / split).mkdir()
            for clip, entry in info["clips"].items():
                arr = ctsr.load(root / "feats" / entry["file"])
                if split == "train":
                    arr[:] = np.nan
                ctsr.save(feats / entry["file"], arr)
        (feats / "manifest.json").write_text(json.dumps(manifest))
        rc = main(["train", *c, "--features", str(feats), "--out", str(tmp_path / "run")])
        assert rc == EXIT_TRAINING
        assert re.search(r"batch \d+", capsys.readouterr().err)

    def test_codes_distinct(self):
        codes = [EXIT_MISSING_FILE, EXIT_MALFORMED_MANIFEST, EXIT_CONFIG, EXIT_TRAINING]
        assert len(set(codes)) == 4 and 0 not in codes and 2 not in codes
