import json

import pytest

from trackquery.cli import CHECKPOINT_ENV, main
from trackquery.networks import ModelConfig
from trackquery.score import load_corpus, segments_to_midi
from trackquery.synthetic import chorale_corpus, piano_corpus, pop_corpus
from trackquery.training import TrainConfig
from trackquery.instruments import default_vocab


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = TrainConfig(epochs=2, batch_size=4, model=ModelConfig.tiny())
    (d / "tiny.json").write_text(json.dumps(cfg.to_dict()))
    vocab = default_vocab()
    (d / "song.mid").write_bytes(segments_to_midi(pop_corpus(2, seed=7), vocab))
    (d / "ref.mid").write_bytes(segments_to_midi(piano_corpus(4, seed=8)[:2], vocab))
    (d / "choir.mid").write_bytes(segments_to_midi(chorale_corpus(2, seed=9), vocab))
    assert run("prepare", "--synthetic", "pop", "--n", 16, "--out", d / "pop") == 0
    assert run("prepare", "--synthetic", "chorale", "--n", 8, "--out", d / "chorale") == 0
    assert run("train", d / "pop", "--out", d / "run", "--config", d / "tiny.json") == 0
    assert run("train", d / "chorale", "--out", d / "vs", "--config", d / "tiny.json", "--base", d / "run" / "best.pt", "--voicesep") == 0
    return d


class TestPrepare:
    def test_synthetic_manifest(self, work):
        c = load_corpus(work / "pop")
        assert len(c) == 16 and set(c.splits) <= {"train", "validation", "test"}

    def test_midi_directory_with_bad_file(self, work, tmp_path):
        src = tmp_path / "midi"
        src.mkdir()
        (src / "good.mid").write_bytes((work / "song.mid").read_bytes())
        (src / "bad.mid").write_bytes(b"not a midi file")
        with pytest.warns(UserWarning, match="bad.mid"):
            assert run("prepare", src, "--out", tmp_path / "c") == 0
        assert len(load_corpus(tmp_path / "c")) == 2

    def test_no_input(self, tmp_path, capsys):
        assert run("prepare", "--out", tmp_path / "c") == 1
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, work):
        for name in ("best.pt", "last.pt", "train_log.jsonl", "loss_curves.png"):
            assert (work / "run" / name).stat().st_size > 0
        assert (work / "vs" / "best.pt").exists()

    def test_byte_reproducible(self, work, tmp_path):
        assert run("train", work / "pop", "--out", tmp_path / "again", "--config", work / "tiny.json") == 0
        for name in ("best.pt", "last.pt", "train_log.jsonl", "loss_curves.png"):
            assert (tmp_path / "again" / name).read_bytes() == (work / "run" / name).read_bytes(), name

    def test_empty_train_split(self, work, tmp_path, capsys):
        c = load_corpus(work / "pop")
        from trackquery.score import save_corpus

        save_corpus(tmp_path / "c", c.segments, ["test"] * len(c), c.corpora)
        assert run("train", tmp_path / "c", "--out", tmp_path / "o", "--config", work / "tiny.json") == 1
        assert "error:" in capsys.readouterr().err


class TestRearrangeCommands:
    @pytest.mark.parametrize("cmd", ["reinstrument", "pianocover", "orchestrate"])
    def test_fixed_reference_reproducible(self, work, tmp_path, cmd):
        args = [cmd, "--source", work / "song.mid", "--reference", work / "ref.mid", "--checkpoint", work / "run" / "best.pt", "--seed", 3]
        if cmd == "orchestrate":
            args.append("--preserve-melody")
        assert run(*args, "--out", tmp_path / "a.mid", "--figure", tmp_path / "a.png") == 0
        assert run(*args, "--out", tmp_path / "b.mid", "--figure", tmp_path / "b.png") == 0
        assert (tmp_path / "a.mid").read_bytes() == (tmp_path / "b.mid").read_bytes()
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_refdb_with_env_checkpoint(self, work, tmp_path, monkeypatch):
        assert run("build-refdb", work / "pop", "--out", tmp_path / "db") == 0
        monkeypatch.setenv(CHECKPOINT_ENV, str(work / "run"))
        outs = []
        for k in range(2):
            assert run("pianocover", "--source", work / "song.mid", "--refdb", tmp_path / "db", "--out", tmp_path / f"{k}.mid", "--seed", 5) == 0
            outs.append((tmp_path / f"{k}.mid").read_bytes())
        assert outs[0] == outs[1]

    def test_build_refdb_reproducible(self, work, tmp_path):
        for k in range(2):
            assert run("build-refdb", work / "pop", "--out", tmp_path / str(k)) == 0
        for name in ("refdb.json", "segments.npz", "features.npz"):
            assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()

    def test_missing_checkpoint(self, work, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv(CHECKPOINT_ENV, raising=False)
        assert run("reinstrument", "--source", work / "song.mid", "--reference", work / "ref.mid", "--out", tmp_path / "x.mid") == 1
        assert CHECKPOINT_ENV in capsys.readouterr().err
        assert run("reinstrument", "--source", work / "song.mid", "--reference", work / "ref.mid", "--checkpoint", tmp_path / "none.pt", "--out", tmp_path / "x.mid") == 1
        assert not (tmp_path / "x.mid").exists()

    def test_invalid_source(self, work, tmp_path, capsys):
        (tmp_path / "bad.mid").write_bytes(b"garbage")
        assert run("reinstrument", "--source", tmp_path / "bad.mid", "--reference", work / "ref.mid", "--checkpoint", work / "run" / "best.pt", "--out", tmp_path / "x.mid") == 1
        assert "bad.mid" in capsys.readouterr().err


class TestVoiceSep:
    def test_reproducible_with_and_without_hints(self, work, tmp_path):
        for hints in ([], ["--hints"]):
            blobs = []
            for k in range(2):
                out = tmp_path / f"{len(hints)}_{k}.mid"
                assert run("voicesep", "--input", work / "choir.mid", "--checkpoint", work / "vs" / "best.pt", "--out", out, *hints) == 0
                blobs.append(out.read_bytes())
            assert blobs[0] == blobs[1]

    def test_default_checkpoint_name(self, work, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(CHECKPOINT_ENV, str(work / "vs"))
        assert run("voicesep", "--input", work / "choir.mid", "--out", tmp_path / "x.mid") == 1
        assert "voicesep.pt" in capsys.readouterr().err

    def test_base_checkpoint_rejected(self, work, tmp_path, capsys):
        assert run("voicesep", "--input", work / "choir.mid", "--checkpoint", work / "run" / "best.pt", "--out", tmp_path / "x.mid") == 1
        assert "voice separation" in capsys.readouterr().err

    def test_eval_report_reproducible(self, work, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=4, model=ModelConfig.tiny())
        (tmp_path / "ft.json").write_text(json.dumps(cfg.to_dict()))
        for k in range(2):
            assert run("eval-voicesep", work / "chorale", "--checkpoint", work / "run" / "best.pt", "--out", tmp_path / str(k), "--folds", 2, "--config", tmp_path / "ft.json") == 0
        for name in ("voicesep_report.json", "voicesep_report.csv", "fold_accuracy.png"):
            assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes(), name
        report = json.loads((tmp_path / "0" / "voicesep_report.json").read_text())
        assert 0 <= report["random_baseline"] <= 100
