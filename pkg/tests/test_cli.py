"""Command-line surface: wiring, determinism, config merging, exit codes."""

import numpy as np
import pytest

from dfsn.cli import main, parse_flat_config
from dfsn.data import gen_synthetic, save_checkpoint, save_manifest, save_ppm
from dfsn.model import empty_model, fusion_preset


@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    manifest = gen_synthetic(24, (0.3, 0.3, 0.2, 0.2), seed=1, out_dir=d)
    save_manifest(manifest, d / "manifest.jsonl")
    return d


@pytest.fixture
def zero_checkpoint(tmp_path):
    path = tmp_path / "zero.dfsn"
    save_checkpoint(empty_model(fusion_preset("tiny")), path)
    return path


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestGenData:
    def test_writes_manifest_and_images(self, tmp_path, capsys):
        out = tmp_path / "gen"
        code, stdout, _ = run(capsys, "gen-data", "--n", "10", "--seed", "7",
                              "--out", str(out))
        assert code == 0
        assert (out / "manifest.jsonl").exists()
        assert len(list((out / "images").glob("*.ppm"))) == 10
        assert "manifest.jsonl" in stdout

    def test_rerun_identical_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code, _, _ = run(capsys, "gen-data", "--n", "8", "--seed", "3",
                             "--out", str(out))
            assert code == 0
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for ppm in sorted((a / "images").glob("*.ppm")):
            assert ppm.read_bytes() == (b / "images" / ppm.name).read_bytes()

    def test_bad_mix_exits_nonzero_with_stderr(self, tmp_path, capsys):
        code, stdout, stderr = run(capsys, "gen-data", "--n", "4", "--mix",
                                   "0.5,0.5,0.5,0.5", "--out", str(tmp_path / "x"))
        assert code != 0
        assert "error" in stderr
        assert stdout == ""


class TestTrainEvalPredict:
    def test_train_writes_outputs_and_eval_reads_them(self, dataset, tmp_path, capsys):
        out = tmp_path / "run"
        code, stdout, stderr = run(
            capsys, "train", "--manifest", str(dataset / "manifest.jsonl"),
            "--out", str(out), "--preset", "tiny", "--epochs", "3",
            "--batch-size", "6", "--lr", "0.05", "--seed", "5")
        assert code == 0, stderr
        assert (out / "checkpoint-final.dfsn").exists()
        assert (out / "checkpoint-best.dfsn").exists()
        assert (out / "history.csv").exists()
        assert "train" in stdout

        code, stdout, _ = run(capsys, "eval", "--checkpoint",
                              str(out / "checkpoint-final.dfsn"),
                              "--manifest", str(dataset / "manifest.jsonl"))
        assert code == 0
        fields = stdout.split()
        assert len(fields) == 4
        for f in fields:
            assert 0.0 <= float(f) <= 1.0

    def test_train_determinism_across_runs(self, dataset, tmp_path, capsys):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code, _, _ = run(capsys, "train", "--manifest",
                             str(dataset / "manifest.jsonl"), "--out", str(out),
                             "--epochs", "2", "--batch-size", "6",
                             "--lr", "0.05", "--seed", "9")
            assert code == 0
            outs.append(out)
        assert (outs[0] / "history.csv").read_bytes() == (outs[1] / "history.csv").read_bytes()
        assert (outs[0] / "checkpoint-final.dfsn").read_bytes() == \
            (outs[1] / "checkpoint-final.dfsn").read_bytes()

    def test_predict_zero_checkpoint_is_uniform(self, zero_checkpoint, tmp_path, capsys):
        img = tmp_path / "img.ppm"
        save_ppm(img, np.full((8, 8, 3), 200, dtype=np.uint8))
        code, stdout, _ = run(capsys, "predict", "--checkpoint", str(zero_checkpoint),
                              "--image", str(img), "--text", "a fine day")
        assert code == 0
        assert stdout.strip() == "0 0.500 0.500"

    def test_missing_checkpoint_file_fails(self, tmp_path, capsys):
        code, _, stderr = run(capsys, "eval", "--checkpoint",
                              str(tmp_path / "nope.dfsn"), "--manifest",
                              str(tmp_path / "nope.jsonl"))
        assert code != 0
        assert "error" in stderr


class TestMalformedInputsExitNonzero:
    def test_malformed_embeddings(self, zero_checkpoint, tmp_path, capsys):
        img = tmp_path / "img.ppm"
        save_ppm(img, np.zeros((4, 4, 3), dtype=np.uint8))
        bad = tmp_path / "bad.vec"
        bad.write_text("2 3\nword 1 2\n")
        code, _, stderr = run(capsys, "predict", "--checkpoint", str(zero_checkpoint),
                              "--image", str(img), "--text", "hi there",
                              "--embeddings", str(bad))
        assert code != 0
        assert "line 2" in stderr

    def test_malformed_ppm(self, zero_checkpoint, tmp_path, capsys):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P3\n1 1\n255\n1 2 3\n")
        code, _, stderr = run(capsys, "predict", "--checkpoint", str(zero_checkpoint),
                              "--image", str(bad), "--text", "hi there")
        assert code != 0
        assert "P3" in stderr

    def test_corrupt_checkpoint(self, zero_checkpoint, tmp_path, capsys):
        blob = bytearray(zero_checkpoint.read_bytes())
        blob[-10] ^= 0x55
        bad = tmp_path / "corrupt.dfsn"
        bad.write_bytes(bytes(blob))
        img = tmp_path / "img.ppm"
        save_ppm(img, np.zeros((4, 4, 3), dtype=np.uint8))
        code, _, stderr = run(capsys, "predict", "--checkpoint", str(bad),
                              "--image", str(img), "--text", "hi")
        assert code != 0
        assert "checksum" in stderr


class TestReport:
    def test_renders_markdown(self, tmp_path, capsys):
        history = tmp_path / "history.csv"
        history.write_text("step,0,0.0001,0.69\nepoch,1,train,0.8,0.7,0.75,0.78\n")
        code, stdout, _ = run(capsys, "report", "--history", str(history))
        assert code == 0
        assert "| Epoch | Split |" in stdout

    def test_writes_file_with_out(self, tmp_path, capsys):
        history = tmp_path / "history.csv"
        history.write_text("step,0,0.0001,0.69\n")
        out = tmp_path / "report.md"
        code, stdout, _ = run(capsys, "report", "--history", str(history),
                              "--out", str(out))
        assert code == 0
        assert out.exists()

    def test_malformed_history_fails(self, tmp_path, capsys):
        history = tmp_path / "history.csv"
        history.write_text("garbage line\n")
        code, _, stderr = run(capsys, "report", "--history", str(history))
        assert code != 0


class TestConfigFile:
    def test_parse_types(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nseed = 5\nlr = 0.01\npreset = 'full'\n"
                       "mix = \"0.4,0.4,0.1,0.1\"\n")
        parsed = parse_flat_config(cfg)
        assert parsed == {"seed": 5, "lr": 0.01, "preset": "full",
                          "mix": "0.4,0.4,0.1,0.1"}

    def test_flags_override_file(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs = 1\nbatch_size = 6\nlr = 0.05\nseed = 2\n")
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        code, _, _ = run(capsys, "train", "--manifest", str(dataset / "manifest.jsonl"),
                         "--config", str(cfg), "--out", str(out1))
        assert code == 0
        # flag overrides the file's epoch count: more steps recorded
        code, _, _ = run(capsys, "train", "--manifest", str(dataset / "manifest.jsonl"),
                         "--config", str(cfg), "--epochs", "2", "--out", str(out2))
        assert code == 0
        lines1 = (out1 / "history.csv").read_text().count("step,")
        lines2 = (out2 / "history.csv").read_text().count("step,")
        assert lines2 == 2 * lines1

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus = 1\n")
        code, _, stderr = run(capsys, "gradcheck", "--config", str(cfg))
        assert code != 0
        assert "bogus" in stderr

    def test_missing_equals_rejected(self, tmp_path):
        from dfsn.cli import CliError

        cfg = tmp_path / "run.cfg"
        cfg.write_text("just a line\n")
        with pytest.raises(CliError, match="line 1"):
            parse_flat_config(cfg)


class TestGradcheckCommand:
    def test_passes_on_tiny_presets(self, capsys):
        code, stdout, _ = run(capsys, "gradcheck", "--seed", "0")
        assert code == 0
        assert "PASS fusion_model_end_to_end" in stdout
        assert "FAIL" not in stdout
