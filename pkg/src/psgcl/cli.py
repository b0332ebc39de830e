"""Command-line entry point: ``psgcl <verb> ...``.

Preprocessed clips are cached under ``$PSGCL_CACHE`` (default
``~/.cache/psgcl``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data.corpus import build_corpus
from .data.recording import read_alias_map, save_native_recording
from .data.splits import SPLITS, ManifestRow, read_manifest, split_participants, write_manifest
from .data.synth import SynthParams, synthesize_recording
from .embeddings import EmbeddingSet
from .harness import ABLATION_SUBSETS, emit_figures, run_ablation, run_external_validation, \
    run_supervised_baseline, write_run_manifest
from .pretrain import TrainConfig, extract_embeddings, load_train_config, pretrain
from .probe import FEW_SHOT_K, TASKS, evaluate_task, few_shot_curve, write_curve, write_reports
from .retrieval import cross_modal_matrix, write_retrieval_csv

log = logging.getLogger("psgcl")


def parse_objective(text: str) -> dict:
    """``leave_one_out``, ``pairwise``, ``pair_subset:A,B`` or ``single:M`` -> TrainConfig fields."""
    name, _, arg = text.partition(":")
    mods = tuple(m.strip().upper() for m in arg.split(",") if m.strip())
    if name in ("leave_one_out", "pairwise"):
        return {"objective": name, **({"modalities": mods} if mods else {})}
    if name == "pair_subset":
        if len(mods) != 2:
            raise argparse.ArgumentTypeError("pair_subset needs two modalities, e.g. pair_subset:BAS,ECG")
        return {"objective": "pair_subset", "modalities": mods}
    if name in ("single", "single_modality"):
        if len(mods) != 1:
            raise argparse.ArgumentTypeError("single needs one modality, e.g. single:BAS")
        return {"objective": "single_modality", "modalities": mods}
    raise argparse.ArgumentTypeError(f"unknown objective {text!r}")


def parse_k_grid(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok:
            out.append("all" if tok == "all" else int(tok))
    return out


def _train_config(args, **extra) -> TrainConfig:
    over = dict(extra)
    if getattr(args, "objective", None):
        over.update(args.objective)
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "profile", None):
        over["encoder_profile"] = args.profile
    if args.config:
        return load_train_config(args.config, **over)
    return TrainConfig(**over)


def _corpus(args, **kw):
    return build_corpus(read_manifest(args.data), **kw)


def _out(args, default: str) -> Path:
    return Path(args.out or default)


# verbs -----------------------------------------------------------------------

def cmd_synth_data(args):
    out = _out(args, "synth")
    out.mkdir(parents=True, exist_ok=True)
    params = SynthParams(duration_s=args.hours * 3600.0, coupling=args.coupling)
    seed = args.seed or 0
    ids = [f"synth{i:04d}" for i in range(args.participants)]
    fractions = tuple(float(f) for f in args.fractions.split(","))
    splits = split_participants(ids, fractions, seed)
    rows = []
    for i, pid in enumerate(ids):
        path = out / f"{pid}.npz"
        rec = synthesize_recording(params, seed=seed * 100003 + i, participant_id=pid)
        save_native_recording(rec, path)
        rows.append(ManifestRow(pid, path.name, splits[pid], rec.age, rec.sex))
        log.info("wrote %s (%s)", path, splits[pid])
    write_manifest(rows, out / "manifest.csv")
    (out / "synth_params.json").write_text(json.dumps(params.to_dict(), indent=2))
    print(out / "manifest.csv")


def cmd_pretrain(args):
    cfg = _train_config(args)
    out = _out(args, "run")
    corpus = _corpus(args).select_modalities(cfg.modalities)
    write_run_manifest(out, "pretrain", cfg.to_dict(), cfg.seed, {"data": str(args.data)})
    ck = pretrain(cfg, corpus.by_split("pretrain"), corpus.by_split("valid"), out_dir=out)
    print(f"best epoch {ck.best_epoch}, checkpoint {out / 'best.npz'}")


def cmd_embed(args):
    corpus = _corpus(args)
    emb = extract_embeddings(args.checkpoint, corpus, fusion=args.fusion)
    path = emb.save(_out(args, "embeddings"))
    print(path)


def cmd_evaluate(args):
    emb = EmbeddingSet.load(args.embeddings)
    reports = evaluate_task(emb, args.task, None if args.stratify == "none" else args.stratify,
                            source=args.source, n_boot=args.n_boot, seed=args.seed or 0, with_f1=args.f1)
    out = _out(args, "report.csv")
    write_reports(reports, out)
    for r in reports:
        print(f"{r.task} [{r.stratum}] macro AUROC {r.metric('auroc'):.4f} AUPRC {r.metric('auprc'):.4f}")


def cmd_fewshot(args):
    emb = EmbeddingSet.load(args.embeddings)
    curve = few_shot_curve(emb.by_split("train"), emb.by_split("test"), args.k, task=args.task,
                           replicates=args.replicates, seed=args.seed or 0, source=args.source)
    write_curve([curve], _out(args, "fewshot_curve.csv"), variant=args.variant)
    for k, v in curve.mean().items():
        print(f"k={k}: AUROC {v:.4f}")


def cmd_retrieval(args):
    emb = EmbeddingSet.load(args.embeddings)
    if args.split:
        emb = emb.by_split(args.split)
    results = cross_modal_matrix(emb, args.pool_size, args.k, args.seed or 0)
    write_retrieval_csv(results, _out(args, "retrieval.csv"))
    for (q, t), r in results.items():
        print(f"{q}->{t}: Recall@{args.k} {r.recall_at_k:.3f} median rank {r.median_rank:g}")


def cmd_ablation(args):
    cfg = _train_config(args)
    base = {k: v for k, v in cfg.to_dict().items() if k not in ("objective", "modalities")}
    subsets = ABLATION_SUBSETS
    if args.subsets:
        subsets = tuple(tuple(m.strip().upper() for m in s.split("+")) for s in args.subsets.split(";"))
    out = _out(args, "ablation")
    res = run_ablation(_corpus(args), base, subsets, k_values=args.k, replicates=args.replicates,
                       seed=cfg.seed, out_dir=out)
    for name, skipped in res.skipped.items():
        for task, why in skipped.items():
            print(f"{name}: {task} skipped ({why})")
    print(out / "ablation_curves.csv")


def cmd_baseline(args):
    cfg = _train_config(args)
    splits = ("train",) if args.probe_splits_only else ("pretrain", "train")
    out = _out(args, "baseline")
    out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, f"baseline-{args.task}", {**cfg.to_dict(), "train_splits": list(splits)}, cfg.seed)
    rep = run_supervised_baseline(args.task, _corpus(args), cfg, train_splits=splits, n_boot=args.n_boot)
    write_reports([rep], out / "report.csv")
    print(f"{args.task} supervised macro AUROC {rep.metric('auroc'):.4f}")


def cmd_external(args):
    out = _out(args, "external")
    out.mkdir(parents=True, exist_ok=True)
    aliases = read_alias_map(args.aliases) if args.aliases else None
    write_run_manifest(out, "external", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                                         "aliases": str(args.aliases), "n_test": args.n_test}, args.seed or 0)
    rep = run_external_validation(args.checkpoint, args.data, aliases, n_test=args.n_test, seed=args.seed or 0,
                                  n_boot=args.n_boot)
    write_reports([rep], out / "report.csv")
    print(f"external stage5 macro AUROC {rep.metric('auroc'):.4f} F1 {rep.metric('f1'):.4f}")


def cmd_figures(args):
    for p in emit_figures(args.results, args.out):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value training config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="psgcl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(fn=fn)
        return sp

    s = verb("synth-data", cmd_synth_data, "write a synthetic corpus and its manifest")
    s.add_argument("--participants", type=int, default=40)
    s.add_argument("--hours", type=float, default=1.0)
    s.add_argument("--coupling", type=float, default=0.9)
    s.add_argument("--fractions", default="0.5,0.05,0.2,0.25", help=f"fractions for {','.join(SPLITS)}")

    s = verb("pretrain", cmd_pretrain, "contrastive pretraining")
    s.add_argument("--data", required=True, help="manifest file")
    s.add_argument("--objective", type=parse_objective)
    s.add_argument("--profile", choices=("full", "desk"))

    s = verb("embed", cmd_embed, "extract embeddings with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--fusion", choices=("concat", "mean"), default="concat")

    s = verb("evaluate", cmd_evaluate, "linear-probe report with bootstrap CIs")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--task", choices=tuple(TASKS), required=True)
    s.add_argument("--stratify", choices=("none", "age", "sex"), default="none")
    s.add_argument("--source", default="fused", help="fused or one modality name")
    s.add_argument("--n-boot", type=int, default=1000)
    s.add_argument("--f1", action="store_true")

    s = verb("fewshot", cmd_fewshot, "few-shot probe curve")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--task", choices=tuple(TASKS), default="stage5")
    s.add_argument("--k", type=parse_k_grid, default=list(FEW_SHOT_K))
    s.add_argument("--replicates", type=int, default=3)
    s.add_argument("--source", default="fused")
    s.add_argument("--variant", default="")

    s = verb("retrieval", cmd_retrieval, "cross-modal retrieval metrics")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--pool-size", type=int, default=1000)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--split", default="test", help="restrict to one split ('' for all clips)")

    s = verb("ablation", cmd_ablation, "modality-subset ablation with few-shot curves")
    s.add_argument("--data", required=True)
    s.add_argument("--subsets", help="e.g. 'BAS+ECG+RESP;BAS;RESP'")
    s.add_argument("--profile", choices=("full", "desk"))
    s.add_argument("--k", type=parse_k_grid, default=list(FEW_SHOT_K))
    s.add_argument("--replicates", type=int, default=3)

    s = verb("baseline", cmd_baseline, "end-to-end supervised CNN baseline")
    s.add_argument("--data", required=True)
    s.add_argument("--task", choices=("stage5", "sdb"), default="stage5")
    s.add_argument("--profile", choices=("full", "desk"))
    s.add_argument("--n-boot", type=int, default=1000)
    s.add_argument("--probe-splits-only", action="store_true",
                   help="train on the probe's train split instead of pretrain+train")

    s = verb("external", cmd_external, "frozen-encoder validation on an external cohort")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="external manifest")
    s.add_argument("--aliases", help="alias = canonical channel map")
    s.add_argument("--n-test", type=int, default=100)
    s.add_argument("--n-boot", type=int, default=1000)

    s = verb("figures", cmd_figures, "plot curve tables")
    s.add_argument("--results", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
