"""
Tests for the sparsegen command line.
"""

import json

import pytest
import yaml

from sparsegen import cli
from sparsegen.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from sparsegen.cli import CHECKPOINT_NAME, cli_main, describe_checkpoint
from sparsegen.metrics_sink import MetricsSink
from sparsegen.models import ParseGraph

SMALL_RUN = {
    "d": 4,
    "fc_shape": [2, 2, 4],
    "layers": [
        {"kernel": 4, "stride": 2, "pad": 1, "out_channels": 6},
        {"kernel": 4, "stride": 2, "pad": 1, "out_channels": 3},
    ],
    "t_k": [4, 12],
    "image_size": 8,
    "epochs": 1,
    "batch_size": 4,
    "langevin_steps": 2,
    "descriptor_convs": [{"kernel": 4, "stride": 2, "pad": 1, "out_channels": 4}],
    "descriptor_steps": 2,
}


@pytest.fixture
def checkpoint_path(tmp_path, small_config, make_params):
    """A checkpoint holding random parameters for the small architecture."""
    tensors = make_params(small_config, seed=0).named_tensors()
    ckpt = Checkpoint(generator_config=small_config, tensors=tensors, seed=5)
    return save_checkpoint(tmp_path / "model.sgao", ckpt)


@pytest.fixture
def ckpt_args(checkpoint_path):
    return ["--checkpoint", str(checkpoint_path)]


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.yml"
    path.write_text(yaml.safe_dump(SMALL_RUN))
    return path


@pytest.fixture
def corpus_dir(tmp_path, config_path):
    out = tmp_path / "corpus"
    argv = ["synth", "--config", str(config_path), "-n", "8", "--out", str(out)]
    assert cli_main(argv) == 0
    return out


@pytest.fixture
def train_args(config_path, corpus_dir):
    return ["--config", str(config_path), "--data", str(corpus_dir)]


class TestUsage:
    def test_no_command(self, capsys):
        assert cli_main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert cli_main(["frobnicate"]) == 1
        assert "invalid choice" in capsys.readouterr().err

    def test_missing_required_flag(self):
        assert cli_main(["sample"]) == 1

    def test_latent_sources_are_exclusive(self, ckpt_args, tmp_path):
        image = str(tmp_path / "x.ppm")
        argv = ["parse", *ckpt_args, "--z", "0,0,0,0", "--image", image]
        assert cli_main(argv) == 1


class TestInfo:
    def test_prints_architecture(self, ckpt_args, capsys):
        assert cli_main(["info", *ckpt_args]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert "d: 4" in lines
        assert "t_k: [4, 12]" in lines
        assert "fm1: 2x2x4" in lines
        assert "fm2: 4x4x6" in lines
        assert "image: 8x8x3" in lines
        assert "deconv2: kernel=4 stride=2 pad=1 out=3" in lines
        assert "seed: 5" in lines
        assert "descriptor: no" in lines
        assert "tensors: 6" in lines

    def test_describe_checkpoint_matches(self, checkpoint_path):
        lines = describe_checkpoint(load_checkpoint(checkpoint_path))
        assert lines[0] == "d: 4"
        assert lines[-1] == "tensors: 6"

    def test_missing_checkpoint_is_runtime_error(self, tmp_path):
        assert cli_main(["info", "--checkpoint", str(tmp_path / "absent.sgao")]) == 2

    def test_corrupt_checkpoint_is_runtime_error(self, tmp_path):
        path = tmp_path / "bad.sgao"
        path.write_bytes(b"not a checkpoint")
        assert cli_main(["info", "--checkpoint", str(path)]) == 2


class TestGeneration:
    def test_sample_is_reproducible(self, ckpt_args, tmp_path):
        for out in ("a", "b"):
            argv = ["sample", *ckpt_args, "-n", "4", "--seed", "3"]
            assert cli_main(argv + ["--out", str(tmp_path / out)]) == 0
        a = (tmp_path / "a" / "samples.ppm").read_bytes()
        assert a == (tmp_path / "b" / "samples.ppm").read_bytes()
        assert a.startswith(b"P6\n")

    def test_parse_writes_valid_graph(self, ckpt_args, tmp_path):
        out = tmp_path / "parse"
        argv = ["parse", *ckpt_args, "--z=-0.5,1,0.25,2", "--out", str(out)]
        assert cli_main(argv) == 0
        pg = ParseGraph.model_validate_json((out / "parse_graph.json").read_text())
        assert [lg.layer for lg in pg.layers] == [1, 2]
        assert all(lg.k_total <= k for lg, k in zip(pg.layers, (4, 12)))

    def test_parse_rejects_wrong_latent_length(self, ckpt_args, tmp_path):
        argv = ["parse", *ckpt_args, "--z", "1,2", "--out", str(tmp_path)]
        assert cli_main(argv) == 2

    def test_parse_rejects_non_numeric_latent(self, ckpt_args, tmp_path):
        argv = ["parse", *ckpt_args, "--z", "a,b,c,d", "--out", str(tmp_path)]
        assert cli_main(argv) == 2

    def test_bases_outputs(self, ckpt_args, tmp_path):
        out = tmp_path / "bases"
        assert cli_main(["bases", *ckpt_args, "--layer", "1", "--out", str(out)]) == 0
        assert (out / "bases_layer1_H.ppm").exists()
        assert (out / "bases_layer1_B.ppm").exists()
        doc = json.loads((out / "bases_layer1.json").read_text())
        pg = ParseGraph.model_validate({"layers": doc["layers"]})
        assert len(doc["atlas"]) == pg.layer(1).k_total

    def test_bases_from_image(self, ckpt_args, corpus_dir, tmp_path):
        out = tmp_path / "bases"
        image = sorted(corpus_dir.iterdir())[0]
        argv = ["bases", *ckpt_args, "--image", str(image), "--layer", "2"]
        assert cli_main(argv + ["--out", str(out)]) == 0

    def test_kernels(self, ckpt_args, tmp_path):
        out = tmp_path / "kernels"
        assert cli_main(["kernels", *ckpt_args, "--out", str(out)]) == 0
        assert (out / "kernels_layer1.ppm").exists()
        assert (out / "kernels_layer2.ppm").exists()
        argv = ["kernels", *ckpt_args, "--layer", "1", "--hierarchical"]
        assert cli_main(argv + ["--out", str(out)]) == 0
        assert (out / "kernels_layer1_projected.ppm").exists()

    def test_kernels_bad_layer(self, ckpt_args, tmp_path):
        argv = ["kernels", *ckpt_args, "--layer", "3", "--out", str(tmp_path)]
        assert cli_main(argv) == 2


class TestTraining:
    def test_synth_writes_corpus(self, corpus_dir):
        assert len(list(corpus_dir.glob("*.ppm"))) == 8

    def test_train_then_reconstruct(self, train_args, corpus_dir, tmp_path):
        out = tmp_path / "train"
        argv = ["train", *train_args, "--out", str(out), "--epochs", "2"]
        assert cli_main(argv) == 0
        ckpt = load_checkpoint(out / CHECKPOINT_NAME)
        assert ckpt.epoch == 2
        rows = MetricsSink(out / "metrics.csv", append=True).read_rows()
        assert [r.epoch for r in rows] == [1, 2]

        rec = tmp_path / "rec"
        argv = [
            "reconstruct",
            "--checkpoint",
            str(out / CHECKPOINT_NAME),
            "--data",
            str(corpus_dir),
            "--limit",
            "2",
            "--steps",
            "3",
            "--out",
            str(rec),
        ]
        assert cli_main(argv) == 0
        assert (rec / "reconstruct.ppm").exists()

    def test_resume_appends_metrics(self, train_args, tmp_path):
        out = tmp_path / "train"
        base = ["train", *train_args, "--out", str(out)]
        assert cli_main(base + ["--epochs", "1"]) == 0
        resume = ["--epochs", "2", "--resume", str(out / CHECKPOINT_NAME)]
        assert cli_main(base + resume) == 0
        rows = MetricsSink(out / "metrics.csv", append=True).read_rows()
        assert [r.epoch for r in rows] == [1, 2]

    def test_coop_train(self, train_args, tmp_path):
        out = tmp_path / "coop"
        assert cli_main(["coop-train", *train_args, "--out", str(out)]) == 0
        assert load_checkpoint(out / CHECKPOINT_NAME).has_descriptor
        sink = MetricsSink(out / "metrics.csv", cooperative=True, append=True)
        assert sink.read_rows()[0].cooperative

    def test_dataset_size_mismatch(self, corpus_dir, tmp_path):
        # default architecture expects 16x16 images; image_size 8 does not fit
        path = tmp_path / "mismatch.yml"
        path.write_text("image_size: 8\nepochs: 1\n")
        argv = ["train", "--config", str(path), "--data", str(corpus_dir)]
        assert cli_main(argv + ["--out", str(tmp_path / "o")]) == 2

    def test_invalid_config_file(self, corpus_dir, tmp_path):
        path = tmp_path / "bad.yml"
        path.write_text("epochz: 1\n")
        argv = ["train", "--config", str(path), "--data", str(corpus_dir)]
        assert cli_main(argv + ["--out", str(tmp_path)]) == 2


class TestDispatch:
    def test_keyboard_interrupt(self, ckpt_args, mocker):
        interrupted = mocker.Mock(side_effect=KeyboardInterrupt)
        mocker.patch.dict(cli.COMMANDS, {"info": interrupted})
        assert cli_main(["info", *ckpt_args]) == 1

    def test_command_receives_run_config(self, checkpoint_path, ckpt_args, mocker):
        handler = mocker.Mock()
        mocker.patch.dict(cli.COMMANDS, {"info": handler})
        assert cli_main(["info", *ckpt_args, "--seed", "11"]) == 0
        args, run = handler.call_args[0]
        assert run.seed == 11
        assert args.checkpoint == checkpoint_path
