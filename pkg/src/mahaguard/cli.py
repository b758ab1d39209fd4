"""Command-line entry point: fit, score, eval, train, sweep, gen-task.

Exit codes: 0 success, 2 usage or validation failure, 3 numerical failure.
All randomness flows from ``--seed`` (default 0, never wall-clock entropy);
``MAHAGUARD_THREADS`` caps sweep worker parallelism.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .embio import EmbeddingSet, read_csv, read_emb, write_emb
from .errors import InvalidParams, MahaguardError, NumericalError, ValidationError
from .metrics import EvalReport, macro_average
from .scorers import (
    KnnIndex,
    ScoreVector,
    ThresholdRule,
    check_scorer_id,
    score_energy,
    score_knn,
    score_md,
    score_msp,
    score_rmd,
    write_scores_csv,
)
from .stats import Shrinkage, fit_gaussian_stats, load_stats, save_stats
from .trainer import (
    GeneratorParams,
    MlpModel,
    TrainConfig,
    accuracy,
    evaluate_ood,
    gaussian_log_likelihood,
    forward,
    make_synthetic_task,
    save_model,
    train,
    write_history_jsonl,
)

_FEATURE_SCORERS = ("md", "rmd", "knn")


def _read_embeddings(path: str, labels_included: bool = False) -> EmbeddingSet:
    p = Path(path)
    if not p.exists():
        raise InvalidParams(f"input path does not exist: {p}")
    if p.suffix.lower() == ".csv":
        return read_csv(p, has_labels=labels_included)
    return read_emb(p)


def _parse_scorers(text: str) -> list[str]:
    names = [check_scorer_id(s) for s in text.split(",") if s.strip()]
    if not names:
        raise InvalidParams("no scorers requested")
    return names


def _logits_for(path: str, override: str | None) -> EmbeddingSet:
    if override:
        return _read_embeddings(override)
    candidate = Path(path).with_suffix(".logits.emb")
    if candidate.exists():
        return read_emb(candidate)
    raise InvalidParams(
        f"logit-based scorer needs a logits file; none found at {candidate} "
        "(pass --id-logits/--ood-logits)"
    )


def _score_set(args, names, emb: EmbeddingSet, stats, bank_index, logits: EmbeddingSet | None):
    out = []
    for sid in names:
        if sid == "md":
            out.append(score_md(emb, stats))
        elif sid == "rmd":
            out.append(score_rmd(emb, stats))
        elif sid == "knn":
            out.append(score_knn(emb, bank_index))
        elif sid == "msp":
            out.append(score_msp(logits.data))
        elif sid == "energy":
            out.append(score_energy(logits.data, args.temperature))
    return out


def _bank_index(args, names) -> KnnIndex | None:
    if "knn" not in names:
        return None
    if not args.bank:
        raise InvalidParams("knn scorer needs --bank <embeddings of the reference set>")
    bank = _read_embeddings(args.bank)
    return KnnIndex(bank, k=args.k)


def _load_stats_if_needed(args, names):
    if not any(s in ("md", "rmd") for s in names):
        return None
    if not args.stats:
        raise InvalidParams("md/rmd scorers need --stats <fitted statistics file>")
    return load_stats(args.stats)


def cmd_fit(args) -> int:
    emb = _read_embeddings(args.input, labels_included=True)
    if emb.labels is None:
        raise InvalidParams(f"{args.input}: stats fitting requires labeled embeddings")
    stats, lam = fit_gaussian_stats(emb, shrinkage=Shrinkage.parse(args.shrinkage))
    save_stats(stats, args.out)
    print(
        json.dumps(
            {
                "num_classes": stats.num_classes,
                "dim": stats.dim,
                "lambda": lam,
                "logdet": stats.log_det_tied(),
            },
            sort_keys=True,
        )
    )
    return 0


def cmd_score(args) -> int:
    names = _parse_scorers(args.scorers)
    emb = _read_embeddings(args.input, labels_included=args.labels_included)
    stats = _load_stats_if_needed(args, names)
    bank_index = _bank_index(args, names)
    logits = None
    if any(s in ("msp", "energy") for s in names):
        logits = emb if all(s in ("msp", "energy") for s in names) else _logits_for(args.input, args.id_logits)
    rule = ThresholdRule(args.tau) if args.tau is not None else None
    vectors = _score_set(args, names, emb, stats, bank_index, logits)
    for sv in vectors:
        dest = args.out if len(vectors) == 1 else _suffixed(args.out, sv.scorer_id)
        write_scores_csv(sv, dest, rule)
    return 0


def _suffixed(path: str, tag: str) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.{tag}{p.suffix}")


def _maybe_scores_csv(path: str) -> np.ndarray | None:
    """Scores from a cmd_score CSV (header row_index,score[,decision]), else None."""
    p = Path(path)
    if p.suffix.lower() != ".csv" or not p.exists():
        return None
    with p.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header not in ("row_index,score", "row_index,score,decision"):
            return None
        return np.array([float(line.split(",")[1]) for line in fh if line.strip()])


def cmd_eval(args) -> int:
    names = _parse_scorers(args.scorers)

    id_scores = _maybe_scores_csv(args.id)
    if id_scores is not None:
        # precomputed-scores path: inputs are cmd_score CSVs, one scorer
        if len(names) != 1:
            raise InvalidParams("score-CSV inputs support exactly one scorer")
        from .metrics import evaluate as evaluate_scores

        reports = []
        for path in [p for p in args.ood.split(",") if p.strip()]:
            ood_scores = _maybe_scores_csv(path)
            if ood_scores is None:
                raise InvalidParams(f"{path}: expected a row_index,score CSV like --id")
            reports.append(
                evaluate_scores(
                    [ScoreVector(id_scores, names[0])],
                    [ScoreVector(ood_scores, names[0])],
                    target_tpr=args.target_tpr,
                    ood_set=Path(path).stem,
                )
            )
        entries = [e for r in reports for e in r.entries]
        if len(reports) > 1:
            entries.extend(macro_average(reports, target_tpr=args.target_tpr).entries)
        report = EvalReport(entries=entries, target_tpr=args.target_tpr)
        text = report.to_json()
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        else:
            print(text)
        return 0

    id_emb = _read_embeddings(args.id)
    stats = _load_stats_if_needed(args, names)
    bank_index = _bank_index(args, names)
    id_logits = _logits_for(args.id, args.id_logits) if any(s in ("msp", "energy") for s in names) else None
    id_vectors = _score_set(args, names, id_emb, stats, bank_index, id_logits)

    ood_paths = [p for p in args.ood.split(",") if p.strip()]
    ood_logit_overrides = (args.ood_logits or "").split(",") if args.ood_logits else []
    reports = []
    from .metrics import evaluate as evaluate_scores

    for i, path in enumerate(ood_paths):
        ood_emb = _read_embeddings(path)
        ood_logits = None
        if any(s in ("msp", "energy") for s in names):
            override = ood_logit_overrides[i] if i < len(ood_logit_overrides) else None
            ood_logits = _logits_for(path, override)
        ood_vectors = _score_set(args, names, ood_emb, stats, bank_index, ood_logits)
        reports.append(
            evaluate_scores(
                id_vectors, ood_vectors, target_tpr=args.target_tpr, ood_set=Path(path).stem
            )
        )
    entries = [e for r in reports for e in r.entries]
    if len(reports) > 1:
        entries.extend(macro_average(reports, target_tpr=args.target_tpr).entries)
    report = EvalReport(entries=entries, target_tpr=args.target_tpr)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        alpha=args.alpha,
        ema_momentum=args.ema_momentum,
        shrinkage=Shrinkage.parse(args.shrinkage),
    )


def _run_training(seed: int, config: TrainConfig):
    task = make_synthetic_task(seed=seed)
    model = MlpModel.init(
        task.params.input_dim, config.hidden_dims, task.params.num_classes,
        activation=config.activation, seed=config.seed,
    )
    model, stats, history = train(model, task, config)
    return task, model, stats, history


def cmd_train(args) -> int:
    config = _train_config(args)
    task, model, stats, history = _run_training(args.seed, config)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    save_model(model, outdir / "model.mgm")
    save_stats(stats, outdir / "stats.mgs")
    write_history_jsonl(history, outdir / "history.jsonl")
    report = evaluate_ood(model, stats, task, scorer_ids=("md", "rmd"), split="far")
    summary = {
        "epochs": config.epochs,
        "alpha": config.alpha,
        "train_acc": history[-1].acc,
        "test_acc": accuracy(model, task.id_test),
        "gauss_ll": history[-1].gauss_ll,
        "far_rmd_auroc": next(e.auroc for e in report.entries if e.scorer == "rmd"),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _sweep_point(alpha: float, seed: int, base: TrainConfig, scorer: str) -> dict:
    config = TrainConfig(
        epochs=base.epochs,
        batch_size=base.batch_size,
        learning_rate=base.learning_rate,
        seed=base.seed,
        alpha=alpha,
        ema_momentum=base.ema_momentum,
        shrinkage=base.shrinkage,
    )
    task, model, stats, history = _run_training(seed, config)
    report = evaluate_ood(model, stats, task, scorer_ids=(scorer,), split="far")
    entry = report.entries[0]
    train_features, _, _ = forward(model, task.id_train.data)
    return {
        "alpha": alpha,
        "auroc": entry.auroc,
        "fpr95": entry.fpr95,
        "gauss_ll": gaussian_log_likelihood(train_features, task.id_train.labels, stats),
        "id_acc": accuracy(model, task.id_test),
    }


def cmd_sweep(args) -> int:
    alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    if not alphas:
        raise InvalidParams("empty alpha list")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise InvalidParams(f"alpha {a} outside [0,1]")
    scorer = _parse_scorers(args.scorers)[0]
    base = _train_config(argparse.Namespace(**{**vars(args), "alpha": 0.0}))
    alphas = sorted(alphas)
    workers = max(1, int(os.environ.get("MAHAGUARD_THREADS", "1") or "1"))
    rows: list[dict] = []
    if workers > 1 and len(alphas) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {a: pool.submit(_sweep_point, a, args.seed, base, scorer) for a in alphas}
            for a in alphas:
                rows.append(_collect(futures[a], a))
    else:
        for a in alphas:
            try:
                rows.append(_sweep_point(a, args.seed, base, scorer))
            except MahaguardError as exc:
                print(f"alpha={a}: {exc}", file=sys.stderr)
                rows.append(_error_row(a))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["alpha", "auroc", "fpr95", "gauss_ll", "id_acc"])
        for row in rows:
            writer.writerow(
                [repr(float(row[c])) for c in ("alpha", "auroc", "fpr95", "gauss_ll", "id_acc")]
            )
    return 0


def _collect(future, alpha: float) -> dict:
    try:
        return future.result()
    except MahaguardError as exc:
        print(f"alpha={alpha}: {exc}", file=sys.stderr)
        return _error_row(alpha)


def _error_row(alpha: float) -> dict:
    # NaN metric fields mark a failed run; the sweep itself continues.
    return {"alpha": alpha, "auroc": np.nan, "fpr95": np.nan, "gauss_ll": np.nan, "id_acc": np.nan}


def cmd_gen_task(args) -> int:
    task = make_synthetic_task(GeneratorParams(), seed=args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for name in ("id_train", "id_test", "ood_near", "ood_far"):
        write_emb(getattr(task, name), outdir / f"{name}.emb")
    print(json.dumps({"out": str(outdir), "seed": args.seed}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mahaguard",
        description="Density-based OOD detection toolkit: fit Gaussian statistics, "
        "score embeddings, evaluate AUROC/FPR95, and run the toy training recipe.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=int, default=0, help="all randomness flows from this")

    p_fit = sub.add_parser("fit", help="fit Gaussian stats from labeled embeddings")
    p_fit.add_argument("--input", required=True)
    p_fit.add_argument("--labels-included", action="store_true",
                       help="CSV inputs: treat the last column as labels")
    p_fit.add_argument("--shrinkage", default="auto", help="auto | fixed:<lam>")
    p_fit.add_argument("--out", required=True)

    p_score = sub.add_parser("score", help="score embeddings against fitted stats")
    p_score.add_argument("--input", required=True)
    p_score.add_argument("--labels-included", action="store_true")
    p_score.add_argument("--stats")
    p_score.add_argument("--scorers", default="md")
    p_score.add_argument("--bank", help="reference embeddings for knn")
    p_score.add_argument("--k", type=int, default=10)
    p_score.add_argument("--temperature", type=float, default=1.0)
    p_score.add_argument("--id-logits", dest="id_logits")
    p_score.add_argument("--tau", type=float, default=None, help="optional decision threshold")
    p_score.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="AUROC/FPR95 report for ID vs OOD embeddings")
    p_eval.add_argument("--id", required=True)
    p_eval.add_argument("--ood", required=True, help="comma-separated OOD embedding paths")
    p_eval.add_argument("--stats")
    p_eval.add_argument("--scorers", default="md,rmd")
    p_eval.add_argument("--bank")
    p_eval.add_argument("--k", type=int, default=10)
    p_eval.add_argument("--temperature", type=float, default=1.0)
    p_eval.add_argument("--target-tpr", dest="target_tpr", type=float, default=0.95)
    p_eval.add_argument("--id-logits", dest="id_logits")
    p_eval.add_argument("--ood-logits", dest="ood_logits")
    p_eval.add_argument("--out")

    p_train = sub.add_parser("train", help="train the toy MLP on the synthetic task")
    common(p_train)
    p_train.add_argument("--alpha", type=float, default=0.5)
    p_train.add_argument("--epochs", type=int, default=12)
    p_train.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p_train.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.05)
    p_train.add_argument("--ema-momentum", dest="ema_momentum", type=float, default=0.95)
    p_train.add_argument("--shrinkage", default="auto")
    p_train.add_argument("--out", required=True, help="output directory")

    p_sweep = sub.add_parser("sweep", help="train once per alpha; emit a plot-ready CSV")
    common(p_sweep)
    p_sweep.add_argument("--alphas", required=True, help="comma-separated alpha values")
    p_sweep.add_argument("--epochs", type=int, default=12)
    p_sweep.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p_sweep.add_argument("--learning-rate", dest="learning_rate", type=float, default=0.05)
    p_sweep.add_argument("--ema-momentum", dest="ema_momentum", type=float, default=0.95)
    p_sweep.add_argument("--shrinkage", default="auto")
    p_sweep.add_argument("--scorers", default="rmd", help="scorer used for the sweep metrics")
    p_sweep.add_argument("--out", required=True)

    p_gen = sub.add_parser("gen-task", help="write the synthetic task splits as EMB1 files")
    common(p_gen)
    p_gen.add_argument("--out", required=True, help="output directory")

    return parser


_COMMANDS = {
    "fit": cmd_fit,
    "score": cmd_score,
    "eval": cmd_eval,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "gen-task": cmd_gen_task,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, MahaguardError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
