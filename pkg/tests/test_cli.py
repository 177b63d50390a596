import json
import os
import re

import numpy as np
import pytest

from spinn import cli, data, toydata, trainer


def run(capsys, argv):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


TINY_TRAIN = ["--dim", "8", "--tracking-dim", "4", "--n-tokens", "12",
              "--mlp-layers", "1", "--mlp-dim", "8", "--batch-size", "8",
              "--max-steps", "4", "--eval-interval", "2", "--seed", "3"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["train", "--data", "toy", "--glove", "toy",
                     "--out", str(out)] + TINY_TRAIN)
    assert code == 0
    return out


class TestTrace:
    def test_golden_queue_evolution(self, capsys):
        code, out, _ = run(capsys, ["trace", "Spot sat down",
                                    "--transitions", "SSSRR"])
        assert code == 0
        lines = [l for l in out.splitlines() if re.match(r"^\d+\t", l)]
        queues = [l.split("\t")[3] for l in lines]
        assert queues == ["[1]", "[1 2]", "[1 2 3]", "[1 4]", "[5]"]
        assert "( Spot ( sat down ) )" in lines[-1]

    def test_single_word(self, capsys):
        code, out, _ = run(capsys, ["trace", "hello", "--transitions", "S"])
        assert code == 0
        assert len([l for l in out.splitlines() if re.match(r"^\d+\t", l)]) == 1

    def test_degenerate_markers(self, capsys):
        code, out, _ = run(capsys, ["trace", "a b", "--transitions", "RSR"])
        assert code == 0
        assert "[degenerate-pop]" in out

    def test_parse_input(self, capsys):
        code, out, _ = run(capsys, ["trace", "( ( the cat ) ( sat down ) )"])
        assert code == 0
        lines = [l for l in out.splitlines() if re.match(r"^\d+\t", l)]
        assert len(lines) == 7


class TestPrep:
    def test_cache_written(self, tmp_path, capsys):
        src = toydata.toy_dir() / "train.jsonl"
        out = tmp_path / "cache.jsonl"
        code, stdout, _ = run(capsys, ["prep", "--input", str(src),
                                       "--out", str(out)])
        assert code == 0
        assert "loaded 200 examples" in stdout
        examples, skipped = data.load_corpus(out)
        assert len(examples) == 200


class TestTrain:
    def test_artifacts_written(self, trained, capsys):
        assert (trained / "best.spnn").exists()
        assert (trained / "last.spnn").exists()
        assert (trained / "train_log.tsv").exists()
        assert (trained / "train_curves.png").exists()
        config_text = (trained / "config.txt").read_text()
        assert "variant = full" in config_text
        assert "seed = 3" in config_text

    def test_pi_nt_checkpoint_has_no_tracker(self, tmp_path, capsys):
        out = tmp_path / "pintrun"
        code, stdout, _ = run(capsys, ["train", "--data", "toy", "--glove", "toy",
                                       "--out", str(out), "--variant", "pi_nt",
                                       "--tracking-dim", "-1"] + TINY_TRAIN[4:])
        assert code == 0
        ckpt = trainer.load_checkpoint(str(out / "best.spnn"))
        names = [name for name, _ in ckpt.values]
        assert not any(name.startswith(("track.", "trans.")) for name in names)

    def test_missing_data_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(capsys, ["train", "--data", str(tmp_path / "nope"),
                                    "--glove", "toy", "--out",
                                    str(tmp_path / "o")] + TINY_TRAIN)
        assert code == 2
        assert "missing data" in err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("dim = 8\nnot_a_key = 1\n")
        code, _, err = run(capsys, ["train", "--data", "toy", "--glove", "toy",
                                    "--out", str(tmp_path / "o"),
                                    "--config", str(cfg)])
        assert code == 2
        assert "unknown key" in err

    def test_config_file_merging(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\ndim = 16\nmax_steps = 2\n"
                       "eval_interval = 2\nbatch_size = 8\nn_tokens = 12\n"
                       "tracking_dim = 4\nmlp_layers = 1\nmlp_dim = 8\n")
        out = tmp_path / "o"
        code, stdout, _ = run(capsys, ["train", "--data", "toy", "--glove", "toy",
                                       "--out", str(out), "--config", str(cfg),
                                       "--dim", "8"])  # flag beats file
        assert code == 0
        assert "dim = 8" in (out / "config.txt").read_text()


class TestEval:
    def test_report_and_figure(self, trained, tmp_path, capsys):
        out = tmp_path / "evalout"
        code, stdout, _ = run(capsys, [
            "eval", "--checkpoint", str(trained / "best.spnn"),
            "--input", str(toydata.toy_dir() / "dev.jsonl"),
            "--glove", "toy", "--out", str(out)])
        assert code == 0
        report = (out / "eval_report.tsv").read_text()
        assert "accuracy" in report
        assert ">=20" in report
        assert "transition_accuracy" in report  # full variant
        assert (out / "eval_buckets.png").exists()

    def test_accuracy_near_chance_for_untrained_init(self, trained, capsys):
        code, stdout, _ = run(capsys, [
            "eval", "--checkpoint", str(trained / "best.spnn"),
            "--input", str(toydata.toy_dir() / "dev.jsonl"),
            "--glove", "toy"])
        assert code == 0
        acc = float(re.search(r"^accuracy\t([\d.]+)", stdout, re.M).group(1))
        assert 0.0 <= acc <= 1.0


class TestEncode:
    def test_parsed_vectors(self, trained, tmp_path, capsys):
        sentences = tmp_path / "in.txt"
        sentences.write_text("( ( the cat ) ( sat down ) )\n( the dog )\n")
        out = tmp_path / "vecs.tsv"
        code, stdout, _ = run(capsys, [
            "encode", "--checkpoint", str(trained / "best.spnn"),
            "--input", str(sentences), "--glove", "toy", "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 2
        assert all(len(line.split("\t")) == 8 for line in lines)  # dim 8

    def test_unparsed_on_full(self, trained, tmp_path, capsys):
        sentences = tmp_path / "in.txt"
        sentences.write_text("the cat sat down\n")
        code, stdout, _ = run(capsys, [
            "encode", "--checkpoint", str(trained / "best.spnn"),
            "--input", str(sentences), "--glove", "toy", "--unparsed"])
        assert code == 0
        assert len(stdout.strip().splitlines()[-1].split("\t")) == 8

    def test_unparsed_rejected_for_pi_nt(self, tmp_path, capsys):
        out = tmp_path / "pintrun2"
        code, _, _ = run(capsys, ["train", "--data", "toy", "--glove", "toy",
                                  "--out", str(out), "--variant", "pi_nt",
                                  "--tracking-dim", "-1"] + TINY_TRAIN[4:])
        assert code == 0
        sentences = tmp_path / "in.txt"
        sentences.write_text("the cat\n")
        code, _, err = run(capsys, [
            "encode", "--checkpoint", str(out / "best.spnn"),
            "--input", str(sentences), "--glove", "toy", "--unparsed"])
        assert code == 2
        assert "cannot parse" in err


class TestBenchCommand:
    def test_smoke_with_reports(self, tmp_path, capsys):
        out = tmp_path / "bench"
        code, stdout, _ = run(capsys, [
            "bench", "--out", str(out), "--batch-sizes", "1,4",
            "--length", "6", "--dim", "12", "--reps", "3",
            "--naive-sentences", "2", "--dtype", "float64"])
        assert code == 0
        assert (out / "bench.txt").exists()
        assert (out / "bench_throughput.png").exists()
        rows = [json.loads(l) for l in
                (out / "bench.jsonl").read_text().splitlines()][1:]
        assert any(r["model"] == "thin_stack" for r in rows)


class TestGradcheck:
    def test_pi_nt_passes(self, capsys):
        code, stdout, _ = run(capsys, ["gradcheck", "--variant", "pi_nt",
                                       "--dim", "3", "--seed", "1"])
        assert code == 0
        assert "all blocks pass" in stdout
        assert "FAIL" not in stdout
