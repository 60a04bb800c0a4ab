import numpy as np
import pytest

from attscore import EnrollAgg, LayoutConfig, ScoringConfig, compute_eer
from attscore.ablation import (
    CONDITIONS,
    AblationRow,
    build_eval_set,
    evaluate_conditions,
    run_ablation,
    score_matrix,
)
from attscore.synth import SynthSpec, synth_generate
from attscore.train import BatchSpec, ToyModel

CFG = ScoringConfig(LayoutConfig(4, 4, 8))


@pytest.fixture(scope="module")
def small():
    spec = SynthSpec(num_speakers=24, utts_per_speaker=6, seed=3)
    return spec, synth_generate(spec), build_eval_set(spec, num_speakers=8, enroll_per_speaker=3,
                                                      tests_per_speaker=2)


def test_eval_set_layout(small):
    _, _, ev = small
    assert ev.enroll_latents.shape == (8, 3, 64)
    assert len(ev.test_ids) == 16 and ev.noisy_test_latents.shape == ev.test_latents.shape
    trials = ev.trials()
    assert len(trials) == 16 * 8 and sum(t.target for t in trials) == 16
    assert not set(ev.test_ids) & {u for row in ev.enroll_ids for u in row}


def test_eval_speakers_are_held_out(small):
    spec, train_data, ev = small
    assert not np.allclose(ev.enroll_latents[0, 0], train_data.latents[0])


def test_table_cell_equals_direct_eer(small):
    _, train_data, ev = small
    model = ToyModel.init(64, CFG, seed=0)
    table = run_ablation(train_data, ev, [AblationRow("b", CFG)], models={"b": model})
    sc = score_matrix(model, CFG, ev, single=True, noisy=False)
    labels = ev.test_speaker[:, None] == np.arange(8)[None, :]
    name, dims, res = table.rows[0]
    assert (name, dims) == ("b", CFG.layout.total_dim)
    assert res["single", "clean"] == compute_eer(sc.ravel(), labels.ravel()).eer


def test_single_enroll_uses_first_utterance(small):
    _, _, ev = small
    model = ToyModel.init(64, CFG, seed=0)
    a = score_matrix(model, CFG, ev, single=True, noisy=False)
    b = score_matrix(model, CFG, ev, single=False, noisy=False, eval_agg=EnrollAgg.MEAN)
    assert a.shape == b.shape == (16, 8)
    ev1 = type(ev)(**{**ev.__dict__, "enroll_latents": ev.enroll_latents[:, :1]})
    assert np.array_equal(a, score_matrix(model, CFG, ev1, single=False, noisy=False))


def test_rows_sharing_training_config_share_the_model(small):
    _, train_data, ev = small
    rows = [AblationRow("jj", CFG), AblationRow("jm", CFG, EnrollAgg.MEAN)]
    table = run_ablation(train_data, ev, rows, BatchSpec(4, 3), steps=5)
    (_, _, jj), (_, _, jm) = table.rows
    # single-enrollment cells cannot differ between concat and mean evaluation
    assert jj["single", "clean"] == jm["single", "clean"]
    assert jj["single", "noisy"] == jm["single", "noisy"]


def test_rendering(small):
    _, train_data, ev = small
    table = run_ablation(train_data, ev, [AblationRow("x", CFG)], models={"x": ToyModel.init(64, CFG)})
    tsv = table.to_tsv().splitlines()
    assert tsv[0].split("\t") == ["system", "total_dims", "single_clean", "single_noisy",
                                  "multi_clean", "multi_noisy", "task_avg"]
    cells = tsv[1].split("\t")
    assert cells[:2] == ["x", "48"]
    avg = np.mean([float(c) for c in cells[2:6]])
    assert float(cells[6]) == pytest.approx(avg, abs=0.006)
    text = table.to_text().splitlines()
    assert text[0].startswith("system") and set(text[1]) == {"-"}


def test_multi_enroll_beats_single_enroll():
    wins = 0
    for seed in range(10):
        spec = SynthSpec(seed=seed)
        ev = build_eval_set(spec, num_speakers=20)
        res = evaluate_conditions(ToyModel.init(64, CFG, seed=seed), CFG, ev)
        wins += all(res["multi", c] <= res["single", c] for c in ("clean", "noisy"))
    assert wins >= 8


def test_condition_grid():
    assert CONDITIONS == (("single", "clean"), ("single", "noisy"), ("multi", "clean"), ("multi", "noisy"))
