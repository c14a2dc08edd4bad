import json

import numpy as np
import pytest

import app.cli.commands as commands_module
from app.cli.commands import CommandLine
from app.core.binary_format import f32_bytes, pack_header, sha256_file
from app.core.codebook import load_codebook, reconstruct
from app.core.descriptor_store import SCENE_MAGIC, DescriptorSet, load_descriptors, save_descriptors

SMALL_TRAIN = [
    "--epochs", "2", "--batch-size", "100", "--m", "4", "--k", "8",
    "--hidden", "32", "--kmeans-iters", "5",
]


def run(*argv):
    return CommandLine().run([str(arg) for arg in argv])


@pytest.fixture
def descriptors(tmp_path):
    path = tmp_path / "set.dsc"
    assert run("synth", "--clusters", 8, "--per-cluster", 50, "--dim", 16, "--seed", 3, "--out", path) == 0
    return path


@pytest.fixture
def codebook(tmp_path, descriptors):
    path = tmp_path / "pq.cbk"
    assert run("fit", "--input", descriptors, "--m", 4, "--k", 8, "--iters", 5, "--out", path) == 0
    return path


class TestErrors:
    def test_usage_error(self, capsys):
        assert run("train") == 2
        err = [line for line in capsys.readouterr().err.splitlines() if line.startswith("error ")]
        assert len(err) == 1
        assert err[0].startswith("error code=usage exit=2 message=")

    def test_missing_subcommand(self, capsys):
        assert run() == 2

    def test_missing_input_file(self, tmp_path, capsys):
        assert run("fit", "--input", tmp_path / "absent.dsc", "--out", tmp_path / "x.cbk") == 4
        assert "error code=input exit=4" in capsys.readouterr().err

    def test_infeasible_budget(self, tmp_path, capsys):
        code = run("budget", "--bytes", 100, "--n", 10, "--m", 4, "--k", 256, "--overhead", 200,
                   "--out", tmp_path / "plan.json")
        assert code == 7
        assert "code=infeasible_budget" in capsys.readouterr().err
        assert not (tmp_path / "plan.json").exists()

    def test_bad_config_value(self, tmp_path, descriptors, capsys):
        assert run("train", "--input", descriptors, "--tau", "-1", "--out", tmp_path / "model") == 3


    def test_quantize_dimension_mismatch(self, tmp_path, codebook, capsys):
        wide = tmp_path / "wide.dsc"
        assert run("synth", "--clusters", 2, "--per-cluster", 10, "--dim", 32, "--out", wide) == 0
        assert run("quantize", "--input", wide, "--codebook", codebook, "--out", tmp_path / "c.qix") == 3
        assert "error code=dimension exit=3" in capsys.readouterr().err
        assert not (tmp_path / "c.qix").exists()

    def test_invalid_scene_values(self, tmp_path, capsys):
        scene = tmp_path / "bad.scn"
        positions = np.zeros((3, 3))
        scene.write_bytes(pack_header(SCENE_MAGIC, "QQ", 3, 5) + f32_bytes(positions) + f32_bytes(np.full(3, 2.0)))
        assert run("compress-map", "--input", scene, "--alpha", 0.5, "--out", tmp_path / "keep.txt") == 5
        assert "error code=format exit=5" in capsys.readouterr().err

    def test_invalid_in_memory_record(self, tmp_path, descriptors, codebook, monkeypatch, capsys):
        def empty_set(path, expected_dim=None):
            return DescriptorSet(descriptors=np.zeros((0, 16)))

        monkeypatch.setattr(commands_module, "load_descriptors", empty_set)
        assert run("quantize", "--input", descriptors, "--codebook", codebook, "--out", tmp_path / "c.qix") == 4
        err = capsys.readouterr().err
        assert "error code=input exit=4" in err and "DescriptorSet" in err

class TestCommands:
    def test_budget(self, tmp_path, capsys):
        out = tmp_path / "plan.json"
        assert run("budget", "--bytes", 4_000_000, "--n", 1_000_000, "--m", 4, "--k", 256, "--out", out) == 0
        assert capsys.readouterr().out.strip() == "alpha=1 selected=1000000"
        plan = json.loads(out.read_text())
        assert plan["alpha"] == 1.0

    def test_budget_counts_model_files(self, tmp_path, codebook):
        out = tmp_path / "plan.json"
        assert run("budget", "--bytes", 4000, "--n", 1000, "--m", 4, "--k", 8, "--codebook", codebook,
                   "--out", out) == 0
        plan = json.loads(out.read_text())
        assert plan["overhead_bytes"] == codebook.stat().st_size
        manifest = json.loads((tmp_path / "plan.json.manifest.json").read_text())
        assert manifest["input_hashes"] == {"codebook": sha256_file(codebook)}

    def test_quantize_dequantize_centroid_rows(self, tmp_path, codebook):
        loaded = load_codebook(codebook)
        codes = np.random.default_rng(0).integers(0, 8, size=(30, 4))
        original = tmp_path / "centroids.dsc"
        save_descriptors(DescriptorSet(descriptors=reconstruct(codes, loaded)), original)

        assert run("quantize", "--input", original, "--codebook", codebook, "--out", tmp_path / "c.qix") == 0
        assert run("dequantize", "--input", tmp_path / "c.qix", "--codebook", codebook,
                   "--out", tmp_path / "back.dsc") == 0
        assert (tmp_path / "back.dsc").read_bytes() == original.read_bytes()

    def test_train_is_reproducible(self, tmp_path, descriptors):
        prefix = tmp_path / "model"
        names = ["model.cbk", "model.dec", "model.rpt", "model.cbk.manifest.json"]
        assert run("train", "--input", descriptors, "--seed", 7, *SMALL_TRAIN, "--out", prefix) == 0
        first = {name: (tmp_path / name).read_bytes() for name in names}
        assert run("train", "--input", descriptors, "--seed", 7, *SMALL_TRAIN, "--out", prefix) == 0
        second = {name: (tmp_path / name).read_bytes() for name in names}
        assert first == second

        manifest = json.loads(first["model.cbk.manifest.json"])
        assert manifest["command"] == "train" and manifest["seed"] == 7
        assert manifest["config"]["train_config"]["K"] == 8
        assert manifest["input_hashes"]["input"] == sha256_file(descriptors)
        assert "wall_time_s" not in manifest
        assert list(manifest) == sorted(manifest)

    def test_lora_pipeline(self, tmp_path, descriptors):
        prefix = tmp_path / "model"
        assert run("train", "--input", descriptors, *SMALL_TRAIN, "--out", prefix) == 0
        delta = tmp_path / "site.lra"
        assert run("finetune-lora", "--input", descriptors, "--codebook", tmp_path / "model.cbk",
                   "--decoder", tmp_path / "model.dec", *SMALL_TRAIN, "--epochs", 1, "--out", delta) == 0
        assert (tmp_path / "site.lra.rpt").exists()

        assert run("quantize", "--input", descriptors, "--codebook", tmp_path / "model.cbk",
                   "--out", tmp_path / "c.qix") == 0
        out = tmp_path / "decoded.dsc"
        assert run("dequantize", "--input", tmp_path / "c.qix", "--codebook", tmp_path / "model.cbk",
                   "--decoder", tmp_path / "model.dec", "--lora", delta, "--out", out) == 0
        assert load_descriptors(out).n == 400

    def test_lora_without_decoder(self, tmp_path, codebook, capsys):
        assert run("dequantize", "--input", tmp_path / "c.qix", "--codebook", codebook,
                   "--lora", tmp_path / "d.lra", "--out", tmp_path / "x.dsc") == 2

    def test_compress_map(self, tmp_path):
        scene = tmp_path / "scene.scn"
        assert run("synth", "--kind", "scene", "--points", 100, "--clusters", 4, "--out", scene) == 0
        out = tmp_path / "keep.txt"
        assert run("compress-map", "--input", scene, "--alpha", 0.3, "--out", out) == 0
        kept = [int(line) for line in out.read_text().splitlines()]
        assert 0 < len(kept) <= 30
        assert json.loads((tmp_path / "keep.txt.summary.json").read_text())["selected_count"] == len(kept)
        assert (tmp_path / "keep.txt.manifest.json").exists()

    def test_eval(self, tmp_path, descriptors, codebook):
        out = tmp_path / "results.tsv"
        assert run("eval", "--input", descriptors, "--codebook", codebook, "--symmetric",
                   "--triplets", 200, "--out", out) == 0
        rows = out.read_text().splitlines()
        assert [row.split("\t")[0] for row in rows[1:]] == ["raw", "PQ", "symmetric"]


class TestDeterminism:
    @pytest.mark.parametrize(
        "command",
        [
            ["fit", "--input", "{set}", "--m", "4", "--k", "8", "--iters", "5"],
            ["quantize", "--input", "{set}", "--codebook", "{cbk}"],
            ["eval", "--input", "{set}", "--codebook", "{cbk}", "--triplets", "300"],
            ["budget", "--bytes", "5000", "--n", "400", "--m", "4", "--k", "8", "--codebook", "{cbk}"],
        ],
    )
    def test_rerun_gives_identical_bytes(self, tmp_path, descriptors, codebook, command):
        out = tmp_path / "result"
        argv = [arg.format(set=descriptors, cbk=codebook) for arg in command] + ["--seed", "11", "--out", str(out)]
        manifest = tmp_path / "result.manifest.json"
        assert run(*argv) == 0
        first = (out.read_bytes(), manifest.read_bytes())
        assert run(*argv) == 0
        assert (out.read_bytes(), manifest.read_bytes()) == first
