import threading
from datetime import datetime, timezone

import numpy as np
import pytest

from lipauth import authcli, siamese
from lipauth.cli import main
from lipauth.errors import ConflictError, FormatError, NotEnrolledError, StaleEnrollmentError

from conftest import TINY_ARCH

WHEN = datetime(2024, 1, 2, 3, 4, 5, tzinfo=timezone.utc)


def clip_path(corpus, i):
    return corpus.resolve(corpus.records[i])


class TestStore:
    def record(self, user="alice", seed=0):
        v = np.random.default_rng(seed).standard_normal(256)
        return authcli.EnrollmentRecord(user, v / np.linalg.norm(v), "pba", "2024-01-01T00:00:00Z",
                                        "ab" * 32)

    def test_round_trip_bit_exact(self, tmp_path):
        store = authcli.EmbeddingStore(tmp_path / "s.tsv")
        rec = self.record()
        store.put(rec)
        back = store.get("alice")
        np.testing.assert_array_equal(back.embedding, rec.embedding)
        assert (back.phrase, back.fingerprint, back.created) == (rec.phrase, rec.fingerprint, rec.created)
        cols = (tmp_path / "s.tsv").read_text().rstrip("\n").split("\t")
        assert len(cols) == 4 + 256 and cols[0] == "alice" and cols[2] == "ab" * 32

    def test_conflict_and_overwrite(self, tmp_path):
        store = authcli.EmbeddingStore(tmp_path / "s.tsv")
        store.put(self.record())
        with pytest.raises(ConflictError):
            store.put(self.record(seed=1))
        store.put(self.record(seed=1), overwrite=True)
        np.testing.assert_array_equal(store.get("alice").embedding, self.record(seed=1).embedding)
        assert len(store.load()) == 1

    def test_unknown_user(self, tmp_path):
        with pytest.raises(NotEnrolledError):
            authcli.EmbeddingStore(tmp_path / "s.tsv").get("bob")

    def test_norm_invariant(self):
        with pytest.raises(FormatError):
            authcli.EnrollmentRecord("a", np.ones(256), "pba", "t", "f")

    def test_env_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LBA_STORE", str(tmp_path / "env.tsv"))
        assert authcli.EmbeddingStore().path == tmp_path / "env.tsv"

    def test_concurrent_writers(self, tmp_path):
        store = authcli.EmbeddingStore(tmp_path / "s.tsv")
        threads = [threading.Thread(target=store.put, args=(self.record(f"u{i}", i),))
                   for i in range(12)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(store.load()) == sorted(f"u{i}" for i in range(12))


class TestEnrollVerify:
    def test_self_similarity(self, tmp_path, tiny_corpus, tiny_checkpoint):
        store = tmp_path / "s.tsv"
        clip = clip_path(tiny_corpus, 0)
        rec = authcli.enroll("alice", clip, tiny_checkpoint, store, phrase="bba", now=WHEN)
        assert rec.created == "2024-01-02T03:04:05Z"
        assert abs(np.linalg.norm(rec.embedding) - 1) < 1e-5
        verdict = authcli.verify("alice", clip, tiny_checkpoint, 0.45, store)
        assert verdict.score == pytest.approx(1.0, abs=1e-5)
        assert verdict.accept

    def test_reenroll_needs_flag(self, tmp_path, tiny_corpus, tiny_checkpoint):
        store = tmp_path / "s.tsv"
        authcli.enroll("alice", clip_path(tiny_corpus, 0), tiny_checkpoint, store)
        with pytest.raises(ConflictError):
            authcli.enroll("alice", clip_path(tiny_corpus, 1), tiny_checkpoint, store)
        authcli.enroll("alice", clip_path(tiny_corpus, 1), tiny_checkpoint, store, overwrite=True)

    def test_unknown_user(self, tmp_path, tiny_corpus, tiny_checkpoint):
        with pytest.raises(NotEnrolledError):
            authcli.verify("nobody", clip_path(tiny_corpus, 0), tiny_checkpoint, 0.5, tmp_path / "s.tsv")

    def test_stale_checkpoint(self, tmp_path, tiny_corpus, tiny_checkpoint):
        store = tmp_path / "s.tsv"
        authcli.enroll("alice", clip_path(tiny_corpus, 0), tiny_checkpoint, store)
        other = tmp_path / "other.ckpt"
        siamese.save_checkpoint(other, siamese.init_params(1, TINY_ARCH), TINY_ARCH)
        with pytest.raises(StaleEnrollmentError):
            authcli.verify("alice", clip_path(tiny_corpus, 0), other, 0.5, store)

    def test_reproducible(self, tmp_path, tiny_corpus, tiny_checkpoint):
        store = tmp_path / "s.tsv"
        authcli.enroll("alice", clip_path(tiny_corpus, 0), tiny_checkpoint, store)
        a = authcli.verify("alice", clip_path(tiny_corpus, 4), tiny_checkpoint, 0.5, store)
        b = authcli.verify("alice", clip_path(tiny_corpus, 4), tiny_checkpoint, 0.5, store)
        assert a == b


class TestCli:
    def test_no_args(self, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 2

    def test_help(self, capsys):
        assert main(["verify", "--help"]) == 0
        assert "--threshold" in capsys.readouterr().out

    def test_missing_required(self):
        assert main(["verify", "--user", "x"]) == 2

    def test_verify_unknown_user(self, tmp_path, tiny_corpus, tiny_checkpoint, capsys):
        code = main(["verify", "--user", "ghost", "--clip", str(clip_path(tiny_corpus, 0)),
                     "--ckpt", str(tiny_checkpoint), "--threshold", "0.5",
                     "--store", str(tmp_path / "s.tsv")])
        assert code == 1
        assert "ghost" in capsys.readouterr().err

    def test_pipeline(self, tmp_path, capsys):
        corpus, splits = tmp_path / "corpus", tmp_path / "splits"
        assert main(["synth", "--speakers", "3", "--phrases", "2", "--utts", "3", "--t", "3",
                     "--h", "16", "--w", "16", "--out", str(corpus)]) == 0
        assert main(["stats", "--manifest", str(corpus / "manifest.tsv")]) == 0
        assert "positive_pair_capacity" in capsys.readouterr().out

        (tmp_path / "split.txt").write_text("train: 1\nval: 2\ntest: 3\n")
        assert main(["split", "--manifest", str(corpus / "manifest.tsv"),
                     "--spec", str(tmp_path / "split.txt"), "--out", str(splits)]) == 0
        for name in ("train", "val", "test"):
            assert (splits / f"{name}.tsv").exists()

        (tmp_path / "train.cfg").write_text(
            "epochs=2\nlr=1e-3\ntrain_batch=2\neval_batch=2\nscale=0.0625\n"
            "frames=3\nheight=16\nwidth=16\ntrain_pairs=6\nval_pairs=6\n")
        ckpt = tmp_path / "model.ckpt"
        assert main(["train", "--manifest", str(splits), "--config", str(tmp_path / "train.cfg"),
                     "--out", str(ckpt)]) == 0
        assert (tmp_path / "model.ckpt.log.csv").read_text().count("\n") == 3

        thr = tmp_path / "threshold.txt"
        assert main(["calibrate", "--ckpt", str(ckpt), "--manifest", str(splits), "--split", "train",
                     "--batch", "2", "--out", str(thr)]) == 0
        assert thr.read_text().startswith("threshold=")

        report = tmp_path / "report"
        assert main(["eval", "--ckpt", str(ckpt), "--threshold", str(thr), "--manifest", str(splits),
                     "--split", "test", "--batch", "2", "--report", str(report)]) == 0
        for name in ("scored_pairs.csv", "far_frr_curve.csv", "score_histograms.csv",
                     "type_error_curves.csv", "confused_phrases.csv", "word_category_errors.csv",
                     "summary.txt"):
            assert (report / name).exists(), name

        again = tmp_path / "again"
        assert main(["report", "--scores", str(report / "scored_pairs.csv"), "--threshold", str(thr),
                     "--out", str(again)]) == 0
        assert (again / "summary.txt").read_text() == (report / "summary.txt").read_text()

        store = tmp_path / "store.tsv"
        clip = corpus / "clips" / "s3" / "s3_bba_000.lbac"
        assert main(["enroll", "--user", "carol", "--clip", str(clip), "--ckpt", str(ckpt),
                     "--store", str(store)]) == 0
        assert main(["enroll", "--user", "carol", "--clip", str(clip), "--ckpt", str(ckpt),
                     "--store", str(store)]) == 1
        capsys.readouterr()
        assert main(["verify", "--user", "carol", "--clip", str(clip), "--ckpt", str(ckpt),
                     "--threshold", str(thr), "--store", str(store)]) == 0
        assert "ACCEPT" in capsys.readouterr().out

    def test_capacity_error_exit(self, tmp_path, tiny_corpus, tiny_checkpoint, capsys):
        splits = tmp_path / "splits"
        (tmp_path / "split.txt").write_text("train: 1\nval: 2\ntest: 3\n")
        assert main(["split", "--manifest", str(tiny_corpus.root), "--spec",
                     str(tmp_path / "split.txt"), "--out", str(splits)]) == 0
        code = main(["calibrate", "--ckpt", str(tiny_checkpoint), "--manifest", str(splits),
                     "--pairs", "1000", "--out", str(tmp_path / "t.txt")])
        assert code == 1
        assert "only 6 exist" in capsys.readouterr().err
