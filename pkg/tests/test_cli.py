import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from attscore import LayoutConfig, Trial
from attscore.cli import main
from attscore.io import EmbeddingSet, read_checkpoint, read_embeddings, read_scores, write_embeddings, write_trials

import oracle

FIX = Path(__file__).parent / "fixtures"
GOLD = FIX / "golden"
TINY = {
    "layout": {"num_pairs": 2, "key_dim": 2, "value_dim": 2},
    "synth": {"num_speakers": 12, "utts_per_speaker": 4, "latent_dim": 6},
    "batch": {"speakers_per_batch": 4, "utts_per_batch_speaker": 3},
    "train": {"steps": 3},
    "eval": {"num_speakers": 3, "enroll_per_speaker": 2, "tests_per_speaker": 1},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def golden_pipeline(out: Path):
    cfg = FIX / "golden.json"
    assert run("train", "--config", cfg, "--out", out / "model.ckpt") == 0
    assert run("synth", "--config", cfg, "--checkpoint", out / "model.ckpt", "--out", out) == 0
    assert run("score", "--enroll", out / "enroll.atsf", "--test", out / "test.atsf", "--trials",
               out / "trials.tsv", "--checkpoint", out / "model.ckpt", "--out", out / "scores.tsv") == 0


def test_golden_files_reproduce_byte_for_byte(tmp_path, capsys):
    golden_pipeline(tmp_path)
    for name in ("model.ckpt", "model.ckpt.json", "enroll.atsf", "test.atsf", "test_noisy.atsf",
                 "trials.tsv", "scores.tsv"):
        assert (tmp_path / name).read_bytes() == (GOLD / name).read_bytes(), name
    capsys.readouterr()
    assert run("eval", "--scores", tmp_path / "scores.tsv", "--trials", tmp_path / "trials.tsv") == 0
    assert capsys.readouterr().out == (GOLD / "report.txt").read_text()


def test_golden_scores_match_oracle():
    enroll, test = read_embeddings(GOLD / "enroll.atsf"), read_embeddings(GOLD / "test.atsf")
    side = json.loads((GOLD / "model.ckpt.json").read_text())
    lay = LayoutConfig(**side["layout"])
    alpha = float(np.exp(read_checkpoint(GOLD / "model.ckpt")[0]["log_alpha"][0]))
    idx = test.index()
    for trial, s in read_scores(GOLD / "scores.tsv"):
        rows = [v for u, v in zip(enroll.ids, enroll.vectors) if u.startswith(trial.enroll_speaker_id + "/")]
        want = oracle.score(test.vectors[idx[trial.test_utterance_id]], rows, lay.num_pairs, lay.key_dim,
                            lay.value_dim, lay.tied, "key-global-l2", alpha=alpha)
        assert s == pytest.approx(want, rel=1e-12, abs=1e-14)


def test_synth_is_deterministic(tmp_path, tiny):
    assert run("synth", "--config", tiny, "--out", tmp_path / "a") == 0
    assert run("synth", "--config", tiny, "--out", tmp_path / "b") == 0
    for name in ("enroll.atsf", "test.atsf", "test_noisy.atsf", "trials.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    emb = read_embeddings(tmp_path / "a" / "enroll.atsf")
    assert len(emb.ids) == 6 and all("/" in u for u in emb.ids)
    labels = {line.split("\t")[2] for line in (tmp_path / "a" / "trials.tsv").read_text().splitlines()}
    assert labels == {"tgt", "non"}


def test_system_b_flags(tmp_path):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps({"synth": {"latent_dim": 8}, "eval": {"num_speakers": 2, "enroll_per_speaker": 2,
                                                                   "tests_per_speaker": 1}}))
    d = tmp_path / "d"
    assert run("synth", "--config", cfg, "--out", d) == 0
    assert run("score", "--enroll", d / "enroll.atsf", "--test", d / "test.atsf", "--trials", d / "trials.tsv",
               "--out", tmp_path / "s.tsv", "--norm", "key-global-l2", "--pairs", 32, "--key-dim", 16,
               "--value-dim", 48) == 0
    assert len(read_scores(tmp_path / "s.tsv")) == 4


def test_single_pair_no_norm_is_cosine_on_unit_inputs(tmp_path):
    lay = LayoutConfig(1, 1, 3)
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(4, 4))
    vecs[:, 1:] /= np.linalg.norm(vecs[:, 1:], axis=1, keepdims=True)
    vecs = vecs.astype(np.float32).astype(np.float64)
    write_embeddings(tmp_path / "e.atsf", EmbeddingSet(lay, ["a/1", "b/1"], vecs[:2]))
    write_embeddings(tmp_path / "t.atsf", EmbeddingSet(lay, ["x", "y"], vecs[2:]))
    write_trials(tmp_path / "tr.tsv", [Trial(e, t, e == "a") for t in "xy" for e in "ab"])
    assert run("score", "--enroll", tmp_path / "e.atsf", "--test", tmp_path / "t.atsf", "--trials",
               tmp_path / "tr.tsv", "--out", tmp_path / "s.tsv", "--norm", "none", "--pairs", 1) == 0
    got = read_scores(tmp_path / "s.tsv")
    assert [(t.enroll_speaker_id, t.test_utterance_id) for t, _ in got] == [("a", "x"), ("b", "x"), ("a", "y"), ("b", "y")]
    for (t, s), (ti, ei) in zip(got, [(2, 0), (2, 1), (3, 0), (3, 1)]):
        assert s == pytest.approx(oracle.cosine(vecs[ti][1:], [vecs[ei][1:]]), abs=1e-7)


def test_single_enroll_flag_uses_first_file_entry(tmp_path):
    lay = LayoutConfig(1, 1, 2)
    e = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
    write_embeddings(tmp_path / "e.atsf", EmbeddingSet(lay, ["s/2", "s/1"], e))
    write_embeddings(tmp_path / "t.atsf", EmbeddingSet(lay, ["x"], [[1.0, 1.0, 0.0]]))
    write_trials(tmp_path / "tr.tsv", [Trial("s", "x", True)])
    args = ["score", "--enroll", tmp_path / "e.atsf", "--test", tmp_path / "t.atsf", "--trials",
            tmp_path / "tr.tsv", "--out", tmp_path / "s.tsv", "--norm", "none"]
    assert run(*args, "--single") == 0
    assert read_scores(tmp_path / "s.tsv")[0][1] == 1.0
    assert run(*args) == 0
    assert read_scores(tmp_path / "s.tsv")[0][1] == 0.5


@pytest.mark.parametrize("fixture,line", [("perfect.tsv", "EER 0.00%"), ("three_by_three.tsv", "EER 33.33%")])
def test_eval_reports(capsys, fixture, line):
    assert run("eval", "--scores", FIX / fixture) == 0
    out = capsys.readouterr().out.splitlines()
    assert line in out and out[0].startswith("trials ")


def test_eval_det_points(capsys):
    assert run("eval", "--scores", FIX / "perfect.tsv", "--det") == 0
    assert "det 0.000000 0.000000" in capsys.readouterr().out


def test_eval_missing_trial_is_named(tmp_path, capsys):
    write_trials(tmp_path / "t.tsv", [Trial("e1", "t1", True), Trial("e9", "t7", False)])
    assert run("eval", "--scores", FIX / "perfect.tsv", "--trials", tmp_path / "t.tsv") == 2
    assert "e9\tt7" in capsys.readouterr().err


def test_gradcheck_default_and_coarse(capsys):
    assert run("gradcheck", "--instances", 2) == 0
    fine = capsys.readouterr().out
    assert fine.rstrip().endswith("PASS") and fine.count("PASS") == 17
    code = run("gradcheck", "--instances", 2, "--h", 1e-3)
    coarse = capsys.readouterr().out
    worst = lambda text: max(float(w.split()[0]) for w in text.split("worst")[1:])  # noqa: E731
    assert np.isfinite(worst(coarse)) and worst(coarse) > worst(fine)
    assert code in (0, 1)


def test_gradcheck_nonfinite_fixture(tmp_path, capsys):
    lay = LayoutConfig(2, 2, 2)
    v = np.ones((2, lay.total_dim))
    v[0, 5] = np.nan
    write_embeddings(tmp_path / "bad.atsf", EmbeddingSet(lay, ["t", "s/e"], v))
    assert run("gradcheck", "--vectors", tmp_path / "bad.atsf") == 4
    assert "coordinate 5" in capsys.readouterr().err


def test_gradcheck_on_file(tmp_path, capsys):
    lay = LayoutConfig(2, 2, 3)
    v = np.random.default_rng(1).normal(size=(3, lay.total_dim))
    write_embeddings(tmp_path / "v.atsf", EmbeddingSet(lay, ["t", "s/1", "s/2"], v))
    assert run("gradcheck", "--vectors", tmp_path / "v.atsf") == 0
    assert "PASS" in capsys.readouterr().out


@pytest.mark.parametrize("axis,rows", [("norm", ["none", "layer", "kv-l2", "key-global-l2"]),
                                       ("tying", ["tied", "independent"]),
                                       ("enrollment", ["joint/joint", "joint/mean", "mean/mean"]),
                                       ("keys", [f"pairs={m}" for m in (1, 2, 4, 8, 16, 32, 64, 128)])])
def test_ablate_axes(tmp_path, tiny, capsys, axis, rows):
    assert run("ablate", "--config", tiny, "--axis", axis, "--out", tmp_path / "a.tsv") == 0
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert [ln.split("\t")[0] for ln in lines[1:]] == rows
    first = (tmp_path / "a.tsv").read_bytes()
    capsys.readouterr()
    if axis == "enrollment":
        assert run("ablate", "--config", tiny, "--axis", axis, "--out", tmp_path / "b.tsv") == 0
        assert (tmp_path / "b.tsv").read_bytes() == first


def test_train_is_deterministic(tmp_path, tiny):
    for name in "ab":
        assert run("train", "--config", tiny, "--out", tmp_path / f"{name}.ckpt",
                   "--loss-trace", tmp_path / f"{name}.loss") == 0
    for ext in (".ckpt", ".ckpt.json", ".loss"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()


def test_exit_codes(tmp_path, tiny, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"layout": {"pairs": 3}}')
    assert run("train", "--config", bad, "--out", tmp_path / "m") == 2
    assert run("eval", "--scores", tmp_path / "missing.tsv") == 3
    (tmp_path / "junk.atsf").write_bytes(b"junk")
    assert run("score", "--enroll", tmp_path / "junk.atsf", "--test", tmp_path / "junk.atsf",
               "--trials", tmp_path / "t", "--out", tmp_path / "s") == 3
    # degenerate key: a zero block under key normalization
    lay = LayoutConfig(1, 2, 1)
    write_embeddings(tmp_path / "e.atsf", EmbeddingSet(lay, ["s/1"], [[0.0, 0.0, 1.0]]))
    write_embeddings(tmp_path / "t.atsf", EmbeddingSet(lay, ["x"], [[1.0, 0.0, 1.0]]))
    write_trials(tmp_path / "tr.tsv", [Trial("s", "x", True)])
    assert run("score", "--enroll", tmp_path / "e.atsf", "--test", tmp_path / "t.atsf", "--trials",
               tmp_path / "tr.tsv", "--out", tmp_path / "s.tsv") == 4
    assert "s\\tx" in capsys.readouterr().err
    # layout mismatch between flags and file, unknown ids
    assert run("score", "--enroll", tmp_path / "e.atsf", "--test", tmp_path / "t.atsf", "--trials",
               tmp_path / "tr.tsv", "--out", tmp_path / "s.tsv", "--value-dim", 2) == 2
    write_trials(tmp_path / "tr2.tsv", [Trial("nobody", "x", True)])
    assert run("score", "--enroll", tmp_path / "e.atsf", "--test", tmp_path / "t.atsf", "--trials",
               tmp_path / "tr2.tsv", "--out", tmp_path / "s.tsv") == 2
    assert "nobody" in capsys.readouterr().err


def test_console_script_exit_code(tmp_path):
    exe = shutil.which("attscore")
    cmd = [exe] if exe else [sys.executable, "-m", "attscore.cli"]
    res = subprocess.run(cmd + ["eval", "--scores", str(FIX / "three_by_three.tsv")],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "EER 33.33%" in res.stdout
    res = subprocess.run(cmd + ["eval", "--scores", str(tmp_path / "nope")], capture_output=True, text=True,
                         check=False)
    assert res.returncode == 3
