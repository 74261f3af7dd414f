"""Command-line interface: generate | curate | train | eval | analyze.

Exit codes: 0 success, 1 usage or validation error, 2 I/O or file-format
error, 3 numerical failure (e.g. Sinkhorn non-convergence).  All file
outputs are deterministic functions of (inputs, config, seed).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .analysis import run_analysis, write_analysis_bundle
from .config import EngineConfig, load_config
from .embedding import l2_normalize
from .curation import CuratedSelection, run_curation
from .errors import (
    FormatError,
    NumericalFailureError,
    ProtocurateError,
    UsageError,
)
from .io import read_corpus, validate_corpus
from .metrics import PromptPair, evaluate_zero_shot
from .prototypes import save_bank
from .synth import (
    MixtureSpec,
    generate_prompts,
    read_prompts,
    write_prompts,
    write_synthetic_corpus,
)
from .trainer import (
    identity_head,
    load_head,
    save_head,
    selection_rows,
    train_head,
    train_joint,
    write_loss_csv,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protocurate",
        description="Prototype-driven online curation of paired-embedding corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="engine config file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("generate", help="emit a seeded long-tailed synthetic corpus")
    common(p)
    p.add_argument("--out", required=True, help="corpus output path")
    p.add_argument("--prompts-out", help="also write per-class prompt embeddings (JSON)")

    p = sub.add_parser("curate", help="run the curation loop over a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="selection CSV output path")
    p.add_argument("--proto-out", required=True, help="prototype checkpoint output path")
    p.add_argument("--stats-out", help="per-iteration stats JSON output path")
    p.add_argument("--mode", choices=("frozen", "joint"), default="frozen")
    p.add_argument("--head-out", help="joint mode: also write the trained head")
    p.add_argument("--target-size", type=int, help="override target_subset_size")

    p = sub.add_parser("train", help="train the projection head")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument(
        "--selection",
        help="selection CSV; given = reuse mode on that subset, absent = joint online mode",
    )
    p.add_argument("--head-out", required=True)
    p.add_argument("--loss-out", required=True, help="per-step loss CSV")
    p.add_argument("--selection-out", help="joint mode: write the curated selection")
    p.add_argument("--proto-out", help="joint mode: write the prototype checkpoint")
    p.add_argument("--target-size", type=int, help="override target_subset_size")

    p = sub.add_parser("eval", help="zero-shot classification and retrieval metrics")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--prompts", required=True, help="prompt-pair JSON file")
    p.add_argument("--head", help="trained head checkpoint; omit for the identity head")
    p.add_argument("--out", required=True, help="metric report JSON path")
    p.add_argument("--csv-out", help="per-class CSV path")

    p = sub.add_parser("analyze", help="density/distribution analysis bundle")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--selection", help="curated selection CSV to compare against")
    p.add_argument("--out-dir", required=True)
    return parser


def _load_cfg(args) -> EngineConfig:
    cfg = load_config(args.config) if args.config else EngineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "target_size", None) is not None:
        cfg = replace(cfg, target_subset_size=args.target_size)
    return cfg


def _read_corpus_checked(path):
    corpus = read_corpus(path)
    validate_corpus(corpus)
    return corpus


def _cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    spec = MixtureSpec.from_config(cfg)
    corpus = write_synthetic_corpus(args.out, spec)
    if args.prompts_out:
        positive, negative = generate_prompts(spec)
        write_prompts(args.prompts_out, positive, negative)
    print(f"generated {corpus.n} samples ({spec.clusters} classes) -> {args.out}")
    return 0


def _cmd_curate(args) -> int:
    cfg = _load_cfg(args)
    corpus = _read_corpus_checked(args.corpus)
    if args.mode == "joint":
        head, _, selection, bank = train_joint(corpus, cfg)
        if args.head_out:
            save_head(args.head_out, head)
    else:
        selection, bank = run_curation(corpus, cfg, mode="frozen")
    selection.write_csv(args.out)
    save_bank(args.proto_out, bank)
    if args.stats_out:
        selection.write_stats(args.stats_out)
    print(f"curated {len(selection)} of {corpus.n} samples -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    corpus = _read_corpus_checked(args.corpus)
    if args.selection:
        selection = CuratedSelection.read_csv(args.selection)
        if len(selection) == 0:
            raise UsageError(f"selection file {args.selection} holds no samples")
        rows = selection_rows(corpus, selection)
        head, loss_rows = train_head(corpus, cfg, rows=rows)
    else:
        head, loss_rows, selection, bank = train_joint(corpus, cfg)
        if args.selection_out:
            selection.write_csv(args.selection_out)
        if args.proto_out:
            save_bank(args.proto_out, bank)
    save_head(args.head_out, head)
    write_loss_csv(args.loss_out, loss_rows)
    final = loss_rows[-1].loss if loss_rows else float("nan")
    print(f"trained {len(loss_rows)} steps, final loss {final:.6g} -> {args.head_out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    corpus = _read_corpus_checked(args.corpus)
    if corpus.labels is None:
        raise UsageError("eval requires a labeled corpus")
    names, positive, negative = read_prompts(args.prompts)
    if len(names) != corpus.n_labels:
        raise UsageError(
            f"prompts file has {len(names)} classes, corpus has {corpus.n_labels}"
        )
    if args.head:
        head = load_head(args.head)
        tau = head.tau
    else:
        if corpus.d_img != corpus.d_txt:
            raise UsageError(
                "eval without --head needs d_img == d_txt for the identity head"
            )
        head = identity_head(corpus.d_img)
        tau = 1.0
    if cfg.zero_shot_tau is not None:
        tau = cfg.zero_shot_tau
    if positive.shape[1] != head.W_txt.shape[0]:
        raise UsageError(
            f"prompt dimension {positive.shape[1]} does not match text side "
            f"{head.W_txt.shape[0]}"
        )

    prompts = [
        PromptPair(
            name=names[c],
            positive=l2_normalize(head.project_txt(positive[c])),
            negative=l2_normalize(head.project_txt(negative[c])),
        )
        for c in range(len(names))
    ]
    report = evaluate_zero_shot(
        head.project_img(corpus.img),
        head.project_txt(corpus.txt),
        corpus.labels,
        prompts,
        tau=tau,
    )
    report.write(args.out, args.csv_out)
    macro = "n/a" if report.macro_auroc is None else f"{report.macro_auroc:.4f}"
    print(
        f"evaluated {report.n_samples} samples: macro AUROC {macro}, "
        f"R@1 i->t {report.recall_img_to_txt:.4f} -> {args.out}"
    )
    return 0


def _cmd_analyze(args) -> int:
    cfg = _load_cfg(args)
    corpus = _read_corpus_checked(args.corpus)
    selection_ids = None
    if args.selection:
        selection_ids = CuratedSelection.read_csv(args.selection).ids()
    bundle = run_analysis(corpus, cfg, selection_ids=selection_ids)
    write_analysis_bundle(args.out_dir, bundle)
    extra = ""
    if "low_density_proportion" in bundle["tests"]:
        extra = f", low-density proportion {bundle['tests']['low_density_proportion']:.4f}"
    print(
        f"analyzed {corpus.n} samples (mean kNN "
        f"{bundle['tests']['full_mean_knn']:.6g}{extra}) -> {args.out_dir}"
    )
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "curate": _cmd_curate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "analyze": _cmd_analyze,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; this tool reserves 2 for I/O.
        return 0 if exc.code in (0, None) else 1

    try:
        return _COMMANDS[args.command](args)
    except NumericalFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: cannot open {exc.filename}: no such file", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ProtocurateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
