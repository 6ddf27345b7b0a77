"""Tests for the run configuration model and the command-line interface."""

import json

import pytest

from vidrel.cli import main, parse_relations
from vidrel.config import (
    ConfigError,
    RunConfig,
    load_run_config,
    relation_names,
)
from vidrel.sampling import RelationCategory


class TestRunConfig:
    def test_dict_round_trip(self):
        config = RunConfig(seed=9)
        rebuilt = RunConfig.from_dict(config.to_dict())
        assert rebuilt == config
        assert rebuilt.to_dict() == config.to_dict()

    def test_tuples_serialize_as_lists(self):
        d = RunConfig().to_dict()
        assert isinstance(d["training"]["lr_milestones"], list)
        assert isinstance(d["downstream"]["topk"], list)

    def test_unknown_root_key_rejected(self):
        d = RunConfig().to_dict()
        d["sampels"] = {}
        with pytest.raises(ConfigError):
            RunConfig.from_dict(d)

    def test_unknown_nested_key_rejected(self):
        d = RunConfig().to_dict()
        d["shots"]["segment_size"] = 99
        with pytest.raises(ConfigError):
            RunConfig.from_dict(d)

    def test_seed_must_be_integer(self):
        d = RunConfig().to_dict()
        d["seed"] = "zero"
        with pytest.raises(ConfigError):
            RunConfig.from_dict(d)

    def test_validation_examples(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"shots": {"threshold": "sometimes"}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"shots": {"segment_len": 40, "min_segment_len": 48}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"samples": {"relations": ["same_shot", "same_shot"]}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"samples": {"relations": ["besties"]}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"downstream": {"topk": [5, 1]}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"downstream": {"metric": "hamming"}})

    def test_relation_names_follow_label_order(self):
        assert list(relation_names()) == [c.name.lower() for c in RelationCategory]

    def test_sample_categories_sorted(self):
        config = RunConfig.from_dict(
            {"samples": {"relations": ["dilated", "same_shot", "rotated"]}}
        )
        assert config.samples.categories() == (
            RelationCategory.SAME_SHOT,
            RelationCategory.ROTATED,
            RelationCategory.DILATED,
        )


class TestStageIdentity:
    def test_stage_seeds_differ_and_are_stable(self):
        config = RunConfig(seed=5)
        seeds = {s: config.stage_seed(s) for s in ("synth", "edit-shots", "pretrain")}
        assert len(set(seeds.values())) == 3
        assert RunConfig(seed=5).stage_seed("synth") == seeds["synth"]
        assert RunConfig(seed=6).stage_seed("synth") != seeds["synth"]

    def test_fingerprint_covers_only_upstream_sections(self):
        base = RunConfig(seed=1)
        trained = RunConfig.from_dict({**base.to_dict(), "training": {"epochs": 7}})
        # Training settings must not invalidate earlier artifacts...
        for stage in ("synth", "edit-shots", "build-samples"):
            assert trained.stage_fingerprint(stage) == base.stage_fingerprint(stage)
        # ...but they do change the pretraining stage identity.
        assert trained.stage_fingerprint("pretrain") != base.stage_fingerprint(
            "pretrain"
        )

    def test_fingerprint_tracks_the_producing_slice(self):
        base = RunConfig(seed=1)
        moved = RunConfig.from_dict({**base.to_dict(), "shots": {"segment_len": 64}})
        assert moved.stage_fingerprint("synth") == base.stage_fingerprint("synth")
        assert moved.stage_fingerprint("edit-shots") != base.stage_fingerprint(
            "edit-shots"
        )

    def test_seed_changes_every_fingerprint(self):
        a, b = RunConfig(seed=1), RunConfig(seed=2)
        for stage in ("synth", "edit-shots", "build-samples", "pretrain"):
            assert a.stage_fingerprint(stage) != b.stage_fingerprint(stage)

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig().stage_fingerprint("deploy")


class TestLoadRunConfig:
    def test_defaults_without_file(self):
        assert load_run_config() == RunConfig()

    def test_file_and_overrides_merge(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(
            json.dumps({"seed": 3, "shots": {"segment_len": 90, "min_segment_len": 20}})
        )
        config = load_run_config(path, overrides={"shots": {"segment_len": 120}})
        assert config.seed == 3
        assert config.shots.segment_len == 120  # override wins
        assert config.shots.min_segment_len == 20  # file survives merging

    def test_missing_file_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")

    def test_malformed_json_errors(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(path)


class TestParseRelations:
    def test_full_names_and_compact_aliases(self):
        assert parse_relations("same_shot,rotated") == ("same_shot", "rotated")
        assert parse_relations("C_S,C_V,C_D,C_R,P_I,P_D,P_S") == tuple(
            c.name.lower() for c in RelationCategory
        )

    def test_case_insensitive_and_spaces(self):
        assert parse_relations(" Same_Shot , c_r ") == ("same_shot", "rotated")

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            parse_relations("same_shot,nearby")
        with pytest.raises(ValueError):
            parse_relations("")


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """A tiny synth -> edit-shots -> build-samples chain driven via main()."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    manifest = root / "manifest.jsonl"
    overrides = [
        "--seed", "13",
        "--config", str(_write_config(root)),
    ]
    assert main(["synth", "--out", str(corpus), *overrides]) == 0
    assert (
        main(
            [
                "edit-shots",
                "--input", str(corpus),
                "--output", str(manifest),
                *overrides,
            ]
        )
        == 0
    )
    samples = root / "samples.jsonl"
    assert (
        main(
            [
                "build-samples",
                "--manifest", str(manifest),
                "--relations", "c_s,c_r,p_i",
                "--count", "30",
                "--out", str(samples),
                *overrides,
            ]
        )
        == 0
    )
    return root, corpus, manifest, samples


def _write_config(root):
    # Shared stage parameters live in the config file so every stage
    # resolves the same settings (and therefore the same fingerprints).
    path = root / "run.json"
    path.write_text(
        json.dumps(
            {
                "corpus": {
                    "videos": 2,
                    "shots_min": 1,
                    "shots_max": 2,
                    "frames_min": 60,
                    "frames_max": 90,
                },
                "shots": {"segment_len": 48, "min_segment_len": 20},
            }
        )
    )
    return path


class TestCliPipeline:
    def test_artifacts_exist(self, cli_run):
        root, corpus, manifest, samples = cli_run
        assert (corpus / "corpus-info.json").exists()
        assert manifest.exists()
        assert samples.exists()

    def test_manifest_carries_stage_fingerprint(self, cli_run):
        root, corpus, manifest, samples = cli_run
        header = json.loads(manifest.read_text().splitlines()[0])
        info = json.loads((corpus / "corpus-info.json").read_text())
        assert header["fingerprint"]
        assert info["fingerprint"]
        assert header["fingerprint"] != info["fingerprint"]

    def test_samples_respect_relation_subset(self, cli_run):
        _, _, _, samples = cli_run
        lines = [json.loads(l) for l in samples.read_text().splitlines()]
        header, rows = lines[0], lines[1:]
        assert header["relations"] == ["same_shot", "rotated", "reversed"]
        assert len(rows) == 30
        assert {r["label"] for r in rows} <= {"same_shot", "rotated", "reversed"}

    def test_config_echo_written(self, cli_run):
        root, corpus, _, _ = cli_run
        echo = json.loads((corpus / "synth.config.json").read_text())
        assert echo["stage"] == "synth"
        assert echo["config"]["seed"] == 13
        assert echo["config"]["corpus"]["videos"] == 2

    def test_mismatched_seed_is_refused_then_forced(self, cli_run, capsys):
        root, corpus, manifest, _ = cli_run
        args = [
            "edit-shots",
            "--input", str(corpus),
            "--output", str(root / "other.jsonl"),
            "--seed", "14",
            "--config", str(root / "run.json"),
        ]
        assert main(args) == 1
        err = capsys.readouterr().err
        assert "error:" in err and "fingerprint" in err
        assert main(args + ["--force"]) == 0
        assert "warning" in capsys.readouterr().err

    def test_flag_overrides_reach_the_artifact(self, cli_run):
        root, corpus, _, _ = cli_run
        out = root / "short.jsonl"
        args = [
            "edit-shots",
            "--input", str(corpus),
            "--output", str(out),
            "--k", "32",
            "--min-len", "16",
            "--seed", "13",
            "--config", str(root / "run.json"),
        ]
        assert main(args) == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        lengths = {
            r["end_frame"] - r["start_frame"]
            for r in rows
            if r.get("kind") != "manifest"
        }
        assert max(lengths) == 32

    def test_usage_errors_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["edit-shots", "--no-such-flag"])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            main(["unknown-command"])
        assert exc.value.code == 2

    def test_bad_input_exits_one(self, tmp_path, capsys):
        code = main(
            [
                "edit-shots",
                "--input", str(tmp_path / "nothing"),
                "--output", str(tmp_path / "m.jsonl"),
            ]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err
