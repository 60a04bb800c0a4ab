"""Held-out evaluation of toy models and ablation tables.

Conditions follow the usual grid: single vs multi enrollment (single uses
only the first enrollment utterance of the same trials) and clean vs noisy
test data (noise added to test latents only).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .batched import BatchScorer
from .enrollment import EnrollAgg
from .evaluation import Trial, compute_eer
from .scoring import ScoringConfig
from .synth import SynthSpec, synth_generate
from .train import BatchSpec, ToyModel, train

CONDITIONS = (("single", "clean"), ("single", "noisy"), ("multi", "clean"), ("multi", "noisy"))


@dataclass(frozen=True)
class EvalSet:
    speaker_ids: list
    enroll_ids: list  # per speaker, list of utterance ids
    enroll_latents: np.ndarray  # (S, E, latent_dim)
    test_ids: list
    test_speaker: np.ndarray  # (Nt,)
    test_latents: np.ndarray  # (Nt, latent_dim)
    noisy_test_latents: np.ndarray

    def trials(self) -> list:
        return [Trial(spk, tid, int(self.test_speaker[i]) == s)
                for i, tid in enumerate(self.test_ids)
                for s, spk in enumerate(self.speaker_ids)]


def build_eval_set(spec: SynthSpec, num_speakers: int = 40, enroll_per_speaker: int = 6,
                   tests_per_speaker: int = 4, test_noise: float = 0.5, seed_offset: int = 1_000_003) -> EvalSet:
    """Held-out speakers drawn from the same generator with a disjoint seed."""
    held = replace(spec, num_speakers=num_speakers,
                   utts_per_speaker=enroll_per_speaker + tests_per_speaker,
                   seed=(spec.seed + seed_offset) % 2**64)
    data = synth_generate(held, prefix="eval")
    E = enroll_per_speaker
    grid = data.by_speaker()
    enroll = grid[:, :E]
    tests = grid[:, E:].reshape(-1)
    rng = np.random.default_rng([held.seed, 7])
    clean = data.latents[tests]
    noisy = clean + test_noise * rng.standard_normal(clean.shape)
    return EvalSet(
        speaker_ids=list(data.speaker_ids),
        enroll_ids=[[data.utterance_ids[j] for j in row] for row in enroll],
        enroll_latents=data.latents[enroll],
        test_ids=[data.utterance_ids[j] for j in tests],
        test_speaker=data.speaker_index[tests],
        test_latents=clean,
        noisy_test_latents=noisy,
    )


def score_matrix(model: ToyModel, cfg: ScoringConfig, ev: EvalSet, *, single: bool,
                 noisy: bool, eval_agg: EnrollAgg | None = None) -> np.ndarray:
    """(num_tests, num_speakers) score matrix for one condition."""
    enroll = ev.enroll_latents[:, :1] if single else ev.enroll_latents
    S, E, _ = enroll.shape
    Y = model.embed(enroll.reshape(S * E, -1))
    X = model.embed(ev.noisy_test_latents if noisy else ev.test_latents)
    scfg = model.scoring_config(cfg)
    if eval_agg is not None:
        scfg = replace(scfg, enroll_agg=EnrollAgg(eval_agg))
    return BatchScorer(X, Y, np.arange(S * E).reshape(S, E), scfg).scores


def evaluate_conditions(model: ToyModel, cfg: ScoringConfig, ev: EvalSet,
                        eval_agg: EnrollAgg | None = None) -> dict:
    labels = ev.test_speaker[:, None] == np.arange(len(ev.speaker_ids))[None, :]
    out = {}
    for enr, cond in CONDITIONS:
        sc = score_matrix(model, cfg, ev, single=enr == "single", noisy=cond == "noisy",
                          eval_agg=eval_agg)
        out[(enr, cond)] = compute_eer(sc.ravel(), labels.ravel()).eer
    return out


@dataclass(frozen=True)
class AblationRow:
    name: str
    cfg: ScoringConfig
    eval_agg: EnrollAgg | None = None  # None: same as cfg.enroll_agg


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)  # (name, total_dim, {condition: eer})

    def task_average(self, res: dict) -> float:
        return float(np.mean([res[c] for c in CONDITIONS]))

    def header(self):
        return ["system", "total_dims"] + [f"{a}_{b}" for a, b in CONDITIONS] + ["task_avg"]

    def records(self):
        for name, dims, res in self.rows:
            yield [name, str(dims)] + [f"{100 * res[c]:.2f}" for c in CONDITIONS] + [
                f"{100 * self.task_average(res):.2f}"]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        for rec in [self.header(), *self.records()]:
            buf.write("\t".join(rec) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        recs = [self.header(), *self.records()]
        widths = [max(len(r[i]) for r in recs) for i in range(len(recs[0]))]
        lines = []
        for k, r in enumerate(recs):
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
            if k == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines) + "\n"


def run_ablation(train_data, ev: EvalSet, rows, batch: BatchSpec | None = None, steps: int = 300,
                 lr: float = 0.5, seed: int = 0, models: dict | None = None) -> AblationTable:
    """Train one toy model per distinct training config and evaluate every row.

    ``models`` may carry pre-trained models keyed by row name; rows sharing a
    training config (e.g. Joint/Joint and Joint/Mean) reuse one model.
    """
    batch = batch or BatchSpec()
    models = {} if models is None else models
    cache = {}
    table = AblationTable()
    latent_dim = train_data.latents.shape[1]
    for row in rows:
        if row.name in models:
            model = models[row.name]
        else:
            key = row.cfg
            if key not in cache:
                init = ToyModel.init(latent_dim, row.cfg, seed=seed)
                cache[key] = train(init, train_data, row.cfg, batch, steps=steps, lr=lr, seed=seed).model
            model = cache[key]
        res = evaluate_conditions(model, row.cfg, ev, row.eval_agg)
        dims = model.projection.shape[0]
        table.rows.append((row.name, dims, res))
    return table
