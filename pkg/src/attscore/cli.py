"""Command-line entry point: ``attscore <command> ...``.

Exit codes: 0 success, 1 check failed, 2 invalid input or configuration,
3 file or format error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .ablation import AblationRow, build_eval_set, run_ablation
from .config import RunConfig, config_from_dict, load_config
from .enrollment import EnrollAgg
from .errors import AttScoreError, LayoutError, NumericalError, ValidationError
from .evaluation import compute_det_points, compute_eer
from .grad import gradcheck_suite, fd_gradient, relative_error, score_grad
from .io import (
    EmbeddingSet,
    format_score,
    read_checkpoint,
    read_embeddings,
    read_scores,
    read_trials,
    write_checkpoint,
    write_embeddings,
    write_scores,
    write_trials,
)
from .layout import LayoutConfig
from .normalize import NormMode
from .scoring import score_trial
from .synth import synth_generate
from .train import ToyModel, train

log = logging.getLogger("attscore")

EXIT_CHECK_FAILED = 1
EXIT_IO = 3

ABLATION_KEYS = (1, 2, 4, 8, 16, 32, 64, 128)


def split_enroll_id(uid: str) -> tuple:
    """``"speaker/utterance"`` -> ``("speaker", "utterance")``; the last slash splits."""
    spk, sep, utt = uid.rpartition("/")
    if not sep or not spk or not utt:
        raise ValidationError(f"enrollment id {uid!r} is not of the form speaker/utterance")
    return spk, utt


# -- configuration -----------------------------------------------------------

def _scoring_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("layout and scoring")
    g.add_argument("--pairs", type=int, help="key-value pairs per embedding (M)")
    g.add_argument("--key-dim", type=int)
    g.add_argument("--value-dim", type=int)
    tie = g.add_mutually_exclusive_group()
    tie.add_argument("--tied", dest="tied", action="store_true", default=None)
    tie.add_argument("--independent", dest="tied", action="store_false")
    g.add_argument("--norm", choices=[m.value for m in NormMode])
    g.add_argument("--enroll-agg", choices=[a.value for a in EnrollAgg])
    g.add_argument("--method", choices=["attentive", "cosine"])
    g.add_argument("--alpha", type=float, help="softmax temperature (default 1/sqrt(key dim))")


def _layout_overrides(args) -> dict:
    pairs = {"num_pairs": args.pairs, "key_dim": args.key_dim, "value_dim": args.value_dim,
             "tied": args.tied}
    return {k: v for k, v in pairs.items() if v is not None}


def _scoring_overrides(args) -> dict:
    pairs = {"norm": args.norm, "enroll_agg": args.enroll_agg, "method": args.method,
             "alpha": args.alpha}
    return {k: v for k, v in pairs.items() if v is not None}


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if hasattr(args, "norm"):
        raw = cfg.to_dict()
        raw["layout"].update(_layout_overrides(args))
        raw["scoring"].update(_scoring_overrides(args))
        cfg = config_from_dict(raw)
    return cfg


# -- model plumbing ----------------------------------------------------------

def _model_config(cfg: RunConfig) -> dict:
    return {**cfg.to_dict(), "latent_dim": cfg.synth.latent_dim}


def _load_model(path, cfg: RunConfig) -> ToyModel:
    params, saved = read_checkpoint(path)
    lay = saved.get("layout", {})
    if LayoutConfig(**lay) != cfg.layout:
        raise LayoutError(f"checkpoint layout {lay} does not match the requested layout")
    if saved.get("latent_dim") != cfg.synth.latent_dim:
        raise LayoutError("checkpoint latent_dim does not match synth.latent_dim")
    return ToyModel(params["projection"], float(params["log_alpha"][0]),
                    float(params["log_scale"][0]), params.get("ln_gain"), params.get("ln_bias"),
                    params.get("offset"))


def _fresh_model(cfg: RunConfig) -> ToyModel:
    return ToyModel.init(cfg.synth.latent_dim, cfg.scoring_config(), seed=cfg.train.seed)


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args.checkpoint, cfg) if args.checkpoint else _fresh_model(cfg)
    ev = build_eval_set(cfg.synth, **dataclasses.asdict(cfg.eval))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    S, E, _ = ev.enroll_latents.shape
    enroll_ids = [f"{spk}/{uid}" for spk, row in zip(ev.speaker_ids, ev.enroll_ids) for uid in row]
    enroll_vecs = model.embed(ev.enroll_latents.reshape(S * E, -1))
    write_embeddings(out / "enroll.atsf", EmbeddingSet(cfg.layout, enroll_ids, enroll_vecs))
    write_embeddings(out / "test.atsf", EmbeddingSet(cfg.layout, ev.test_ids, model.embed(ev.test_latents)))
    write_embeddings(out / "test_noisy.atsf",
                     EmbeddingSet(cfg.layout, ev.test_ids, model.embed(ev.noisy_test_latents)))
    write_trials(out / "trials.tsv", ev.trials())
    print(f"wrote {S} speakers x {E} enrollment, {len(ev.test_ids)} test utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    scfg = cfg.scoring_config()
    data = synth_generate(cfg.synth)
    t = cfg.train
    res = train(_fresh_model(cfg), data, scfg, cfg.batch, steps=t.steps, lr=t.lr, seed=t.seed,
                warmup_frac=t.warmup_frac, optimizer=t.optimizer)
    write_checkpoint(args.out, res.model.parameters(), _model_config(cfg))
    if args.loss_trace:
        with open(args.loss_trace, "w", encoding="utf-8", newline="\n") as fh:
            for step, loss in enumerate(res.losses):
                fh.write(f"{step}\t{format_score(loss)}\n")
    if res.losses:
        print(f"loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f} over {len(res.losses)} steps; "
              f"alpha {res.model.alpha:.4g}")
    return 0


def _check_layout(flags: dict, lay: LayoutConfig, path) -> None:
    for key, val in flags.items():
        if getattr(lay, key) != val:
            raise LayoutError(f"{path}: file has {key}={getattr(lay, key)}, flags request {val}")


def cmd_score(args) -> int:
    enroll = read_embeddings(args.enroll)
    test = read_embeddings(args.test)
    if test.layout != enroll.layout:
        raise LayoutError(f"layouts differ: {args.enroll} {enroll.layout} vs {args.test} {test.layout}")
    _check_layout(_layout_overrides(args), enroll.layout, args.enroll)
    cfg = load_config(args.config) if args.config else RunConfig(layout=enroll.layout)
    if args.config:
        _check_layout(dataclasses.asdict(cfg.layout), enroll.layout, args.enroll)
    overrides = _scoring_overrides(args)
    if args.checkpoint:
        raw = dict(read_checkpoint(args.checkpoint)[1])
        raw.pop("latent_dim", None)
        saved = config_from_dict(raw)
        _check_layout(dataclasses.asdict(saved.layout), enroll.layout, args.checkpoint)
        model = _load_model(args.checkpoint, saved)
        scfg = model.scoring_config(saved.scoring_config(**overrides))
        if "alpha" in overrides:
            scfg = dataclasses.replace(scfg, alpha=overrides["alpha"])
    else:
        scfg = cfg.scoring_config(**overrides)

    models: dict = {}
    for row, uid in enumerate(enroll.ids):
        spk, _ = split_enroll_id(uid)
        models.setdefault(spk, []).append(row)
    if args.single:
        models = {spk: rows[:1] for spk, rows in models.items()}
    tindex = test.index()

    scored = []
    for trial in read_trials(args.trials):
        key = f"{trial.enroll_speaker_id}\t{trial.test_utterance_id}"
        if trial.enroll_speaker_id not in models:
            raise ValidationError(f"trial {key!r}: unknown enrollment speaker")
        if trial.test_utterance_id not in tindex:
            raise ValidationError(f"trial {key!r}: unknown test utterance")
        try:
            s = score_trial(test.vectors[tindex[trial.test_utterance_id]],
                            list(enroll.vectors[models[trial.enroll_speaker_id]]), scfg)
        except NumericalError as exc:
            raise type(exc)(f"trial {key!r}: {exc}") from exc
        scored.append((trial, s))
    write_scores(args.out, scored)
    return 0


def eer_report(scored, det: bool = False) -> str:
    res = compute_eer(scored)
    lines = [f"trials {res.num_target + res.num_nontarget} "
             f"(target {res.num_target}, nontarget {res.num_nontarget})",
             f"EER {100 * res.eer:.2f}%",
             f"threshold {format_score(res.threshold)}"]
    if det:
        lines += [f"det {far:.6f} {frr:.6f}" for far, frr in compute_det_points(scored)]
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    scored = read_scores(args.scores)
    if args.trials:
        by_key = {(t.enroll_speaker_id, t.test_utterance_id): (t, s) for t, s in scored}
        picked = []
        for t in read_trials(args.trials):
            hit = by_key.get((t.enroll_speaker_id, t.test_utterance_id))
            if hit is None:
                raise ValidationError(
                    f"trial {t.enroll_speaker_id}\t{t.test_utterance_id} has no score in {args.scores}")
            if hit[0].target != t.target:
                raise ValidationError(
                    f"trial {t.enroll_speaker_id}\t{t.test_utterance_id}: label differs between files")
            picked.append(hit)
        scored = picked
    sys.stdout.write(eer_report(scored, det=args.det))
    return 0


def _gradcheck_file(args, cfg: RunConfig) -> int:
    emb = read_embeddings(args.vectors)
    if len(emb.ids) < 2:
        raise ValidationError(f"{args.vectors}: need a test record followed by enrollment records")
    scfg = RunConfig(layout=emb.layout, scoring=cfg.scoring).scoring_config()
    # keep the raw float64 vectors: a non-finite entry must surface with its coordinate
    x, ys = emb.vectors[0], list(emb.vectors[1:])
    _, g = score_grad(x, ys, scfg)
    f = fd_gradient(x, ys, scfg, h=args.h)
    err = relative_error(g.flat(), f.flat())
    worst = int(np.argmax(err))
    ok = bool(err[worst] < args.tol)
    print(f"{emb.ids[0]} vs {len(ys)} enrollment: worst relative error {err[worst]:.3e} "
          f"at coordinate {worst} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    if args.vectors:
        return _gradcheck_file(args, cfg)
    cases = gradcheck_suite(seed=args.seed, instances=args.instances, h=args.h, tol=args.tol)
    for c in cases:
        tie = "tied" if c.tied else "independent"
        print(f"{c.norm.value:<14} {tie:<11} E={c.num_enroll}  worst {c.worst:.3e}  "
              f"failures {c.failures}/{c.instances}  {'PASS' if c.passed else 'FAIL'}")
    ok = all(c.passed for c in cases)
    print(f"gradcheck h={args.h:g} tol={args.tol:g}: {'PASS' if ok else 'FAIL'}")
    if not all(math.isfinite(c.worst) for c in cases):
        raise NumericalError("non-finite discrepancy in gradient check")
    return 0 if ok else EXIT_CHECK_FAILED


def ablation_rows(cfg: RunConfig, axis: str, keys=ABLATION_KEYS) -> list:
    base = cfg.scoring_config()
    rep = dataclasses.replace
    if axis == "norm":
        return [AblationRow(m.value, rep(base, norm=m)) for m in NormMode]
    if axis == "tying":
        return [AblationRow(name, rep(base, layout=rep(base.layout, tied=t)))
                for name, t in (("tied", True), ("independent", False))]
    if axis == "keys":
        return [AblationRow(f"pairs={m}", rep(base, layout=rep(base.layout, num_pairs=m))) for m in keys]
    if axis == "enrollment":
        joint, mean = rep(base, enroll_agg=EnrollAgg.CONCAT), rep(base, enroll_agg=EnrollAgg.MEAN)
        return [AblationRow("joint/joint", joint), AblationRow("joint/mean", joint, EnrollAgg.MEAN),
                AblationRow("mean/mean", mean)]
    raise ValidationError(f"unknown ablation axis {axis!r}")


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    keys = tuple(int(k) for k in args.keys.split(",")) if args.keys else ABLATION_KEYS
    rows = ablation_rows(cfg, args.axis, keys)
    ev = build_eval_set(cfg.synth, **dataclasses.asdict(cfg.eval))
    t = cfg.train
    table = run_ablation(synth_generate(cfg.synth), ev, rows, cfg.batch, steps=t.steps, lr=t.lr,
                         seed=t.seed)
    sys.stdout.write(table.to_text())
    if args.out:
        Path(args.out).write_text(table.to_tsv(), encoding="utf-8")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attscore", description="Attentive scoring of packed speaker embeddings.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write held-out synthetic embeddings and trial list")
    s.add_argument("--config")
    s.add_argument("--checkpoint", help="trained model (default: untrained projection)")
    s.add_argument("--out", required=True, help="output directory")
    _scoring_flags(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the toy projection")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint path (sidecar written to <out>.json)")
    s.add_argument("--loss-trace")
    _scoring_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="score a trial list")
    s.add_argument("--enroll", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--checkpoint", help="take the trained temperature and layer-norm parameters from here")
    s.add_argument("--single", action="store_true", help="use only the first enrollment utterance per speaker")
    _scoring_flags(s)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="EER report for a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--trials")
    s.add_argument("--det", action="store_true", help="append DET operating points")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--h", type=float, default=1e-6)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--vectors", help="embedding file: first record is the test, the rest enrollment")
    s.add_argument("--config")
    _scoring_flags(s)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train and evaluate one ablation axis")
    s.add_argument("--config")
    s.add_argument("--axis", required=True, choices=["norm", "tying", "keys", "enrollment"])
    s.add_argument("--keys", help="comma-separated pair counts for --axis keys")
    s.add_argument("--out", help="also write the table as TSV")
    _scoring_flags(s)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AttScoreError as exc:
        print(f"attscore: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"attscore: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
