"""Single command-line surface for the whole matching workflow.

Each subcommand is a thin orchestration of one module operation. All
artifacts live at explicit paths, --seed is threaded everywhere, and a
key=value config file can supply defaults (flags win). Logs go to
stderr, data to files, machine-readable summaries to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .annindex import AnnIndex, build_exact_index
from .data import (
    AdDescriptor,
    DatasetSplit,
    GeneratorConfig,
    PlantedOracle,
    Vocabulary,
    ad_item_from_descriptor,
    build_vocab,
    generate_synthetic,
    make_instances,
    read_ads,
    read_log_records,
    split_by_day,
    write_ads,
    write_jsonl,
)
from .evaluation import (
    ablation_suite,
    gamma_sweep,
    model_aucs,
    report_table,
    report_to_csv,
    sweep_table,
    sweep_to_csv,
)
from .model import EncoderConfig, MatchingModel, QueryRequest, PAD_BEHAVIOR, VARIANTS
from .pipeline import (
    PipelineConfig,
    precompute_ad_parts,
    load_ad_parts,
    save_ad_parts,
    simulate,
    write_simulation,
)
from .training import MODES, TrainConfig, train, write_history_csv

logger = logging.getLogger(__name__)


def _parse_config_file(path: str) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _apply_config_defaults(
    subparser: argparse.ArgumentParser, overrides: dict[str, str]
) -> None:
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in overrides.items():
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            defaults[dest] = action.type(raw)
        else:
            defaults[dest] = raw
    subparser.set_defaults(**defaults)


def _comma_list(raw: str) -> list[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def _encoder_config(args: argparse.Namespace) -> EncoderConfig:
    t1, d = (int(x) for x in _comma_list(args.tower_dims))
    return EncoderConfig(
        variant=args.variant,
        behavior_window=args.behavior_window,
        item_dim=args.item_dim,
        shop_dim=args.shop_dim,
        brand_dim=args.brand_dim,
        term_dim=args.term_dim,
        profile_dim=args.profile_dim,
        gru_hidden=args.gru_hidden,
        attention_hidden=args.attention_hidden,
        tower_dims=(t1, d),
        prerank_hidden=args.prerank_hidden,
        share_tower=args.share_tower,
        activation=args.activation,
        gamma=args.gamma,
        alpha=args.alpha,
    )


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        mode=args.mode,
        alpha=args.alpha,
        gamma=args.gamma,
        learning_rate=args.learning_rate,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
    )


def _load_split_instances(args: argparse.Namespace, vocab: Vocabulary, m: int):
    records = read_log_records(args.logs)
    split = DatasetSplit(
        tuple(_comma_list(args.train_days)),
        args.test_day,
        validation_fraction=args.validation_fraction,
    )
    train_recs, val_recs, test_recs = split_by_day(records, split)
    return (
        list(make_instances(train_recs, vocab, m)),
        list(make_instances(val_recs, vocab, m)),
        list(make_instances(test_recs, vocab, m)),
    )


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--logs", required=True, help="JSON Lines impression log file")
    p.add_argument("--vocab", required=True, help="vocabulary TSV file")
    p.add_argument("--train-days", required=True, help="three comma-separated days")
    p.add_argument("--test-day", required=True, help="held-out test day")
    p.add_argument("--validation-fraction", type=float, default=0.05)


def _add_encoder_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=VARIANTS, default="ATTENTION_GRU_RNN")
    p.add_argument("--behavior-window", type=int, default=6)
    p.add_argument("--item-dim", type=int, default=16)
    p.add_argument("--shop-dim", type=int, default=8)
    p.add_argument("--brand-dim", type=int, default=8)
    p.add_argument("--term-dim", type=int, default=16)
    p.add_argument("--profile-dim", type=int, default=8)
    p.add_argument("--gru-hidden", type=int, default=32)
    p.add_argument("--attention-hidden", type=int, default=32)
    p.add_argument("--tower-dims", default="128,128", help="two widths, e.g. 128,128")
    p.add_argument("--prerank-hidden", type=int, default=64)
    share = p.add_mutually_exclusive_group()
    share.add_argument("--share-tower", dest="share_tower", action="store_true")
    share.add_argument("--no-share-tower", dest="share_tower", action="store_false")
    p.set_defaults(share_tower=True)
    p.add_argument("--activation", choices=("relu", "tanh"), default="tanh")
    p.add_argument("--gamma", type=float, default=6.0)
    p.add_argument("--alpha", type=float, default=0.5)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default="JOINT")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--learning-rate", type=float, default=3e-3)
    p.add_argument("--max-epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)


# ----------------------------------------------------------------------
# subcommand implementations


def _cmd_gen_data(args) -> int:
    cfg = GeneratorConfig(
        seed=args.seed,
        n_users=args.users,
        n_items=args.items,
        n_categories=args.categories,
        days=args.days,
        impressions_per_user_day=args.impressions_per_user_day,
        p_hi=args.p_hi,
        p_lo=args.p_lo,
        head_query_prob=args.head_query_prob,
        confuser_prob=args.confuser_prob,
    )
    records, ads, oracle = generate_synthetic(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(records, out / "logs.jsonl")
    write_ads(ads, out / "ads.jsonl")
    oracle.save(out / "oracle.json")
    logger.info("wrote %d records, %d ads to %s", len(records), len(ads), out)
    print(json.dumps({"records": len(records), "ads": len(ads)}, sort_keys=True))
    return 0


def _cmd_build_vocab(args) -> int:
    records = read_log_records(args.logs)
    vocab = build_vocab(records, top_k=args.top_k)
    vocab.save_tsv(args.out)
    logger.info("vocabulary sizes: %s", vocab.sizes)
    print(json.dumps(vocab.sizes, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    vocab = Vocabulary.load_tsv(args.vocab)
    encoder = _encoder_config(args)
    train_set, val_set, test_set = _load_split_instances(
        args, vocab, encoder.behavior_window
    )
    model = MatchingModel(encoder, vocab.sizes, seed=args.seed)
    result = train(model, train_set, val_set, _train_config(args))
    model.save(args.checkpoint_out)
    if args.history_out:
        write_history_csv(result.history, args.history_out)
    best = result.history[result.best_epoch - 1]
    summary = {
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "val_auc_retrieval": best.val_auc_retrieval,
        "val_auc_prerank": best.val_auc_prerank,
        "train_instances": len(train_set),
        "validation_instances": len(val_set),
        "test_instances": len(test_set),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    model = MatchingModel.load(args.checkpoint)
    vocab = Vocabulary.load_tsv(args.vocab)
    sets = dict(
        zip(
            ("train", "validation", "test"),
            _load_split_instances(args, vocab, model.config.behavior_window),
        )
    )
    instances = sets[args.split]
    aucs = model_aucs(model, instances, gamma=model.config.gamma)
    payload = {"split": args.split, "instances": len(instances), **aucs}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True))
    print(json.dumps(payload, sort_keys=True))
    return 0


def _cmd_gamma_sweep(args) -> int:
    vocab = Vocabulary.load_tsv(args.vocab)
    encoder = _encoder_config(args)
    train_set, val_set, test_set = _load_split_instances(
        args, vocab, encoder.behavior_window
    )
    gammas = [float(g) for g in _comma_list(args.gammas)]
    rows = gamma_sweep(
        train_set, val_set, test_set, vocab.sizes, encoder, _train_config(args), gammas
    )
    if args.out_csv:
        sweep_to_csv(rows, args.out_csv)
    print(sweep_table(rows))
    return 0


def _cmd_ablation(args) -> int:
    vocab = Vocabulary.load_tsv(args.vocab)
    encoder = _encoder_config(args)
    train_set, val_set, test_set = _load_split_instances(
        args, vocab, encoder.behavior_window
    )
    report = ablation_suite(
        train_set, val_set, test_set, vocab.sizes, encoder, _train_config(args)
    )
    if args.out_csv:
        report_to_csv(report, args.out_csv)
    print(report_table(report))
    return 0


def _cmd_export_vectors(args) -> int:
    model = MatchingModel.load(args.checkpoint)
    vocab = Vocabulary.load_tsv(args.vocab)
    ads = read_ads(args.ads)
    index = build_exact_index(model, ads, vocab)
    index.save(args.out)
    logger.info("exported %d of %d ad vectors", len(index), len(ads))
    print(json.dumps({"exported": len(index), "dim": index.dim}, sort_keys=True))
    return 0


def _cmd_build_index(args) -> int:
    index = AnnIndex.load(args.vectors)
    if not args.no_pq:
        result = index.train_pq(
            n_subspaces=args.pq_m,
            n_centroids=args.pq_k,
            iterations=args.pq_iterations,
            seed=args.seed,
        )
        logger.info(
            "trained PQ codebooks: final quantization error %.6f",
            float(result.error_history[:, -1].mean()),
        )
    index.save(args.out)
    print(
        json.dumps(
            {"entries": len(index), "pq": not args.no_pq, "dim": index.dim},
            sort_keys=True,
        )
    )
    return 0


def _cmd_add_ad(args) -> int:
    index = AnnIndex.load(args.index)
    model = MatchingModel.load(args.checkpoint)
    vocab = Vocabulary.load_tsv(args.vocab)
    raw = args.ad_json
    if raw.startswith("@"):
        raw = Path(raw[1:]).read_text()
    descriptor = AdDescriptor(**json.loads(raw))
    item = ad_item_from_descriptor(descriptor, vocab)
    vector = model.ad_forward([item]).data[0]
    index.add(descriptor.item_id, vector)
    index.save(args.out)
    print(json.dumps({"ad_id": descriptor.item_id, "entries": len(index)}, sort_keys=True))
    return 0


def _cmd_search(args) -> int:
    index = AnnIndex.load(args.index)
    model = MatchingModel.load(args.checkpoint)
    vocab = Vocabulary.load_tsv(args.vocab)
    terms = args.query.split()
    request = QueryRequest(
        query_term_ids=vocab.ids_for("term_id", terms),
        profile_ids=(),
        behaviors=(PAD_BEHAVIOR,) * model.config.behavior_window,
    )
    v_qu = model.qu_forward([request]).data[0]
    norm = float(np.linalg.norm(v_qu))
    if norm == 0.0:
        raise ValueError("query encoded to a zero vector")
    unit = v_qu / norm
    if args.exact:
        hits = index.exact_topk(unit, args.k)
    else:
        hits = index.pq_search(unit, args.k, overfetch_factor=args.overfetch)
    for ad_id, score in hits:
        print(json.dumps({"ad_id": ad_id, "score": score}, sort_keys=True))
    return 0


def _cmd_precompute_ad_parts(args) -> int:
    model = MatchingModel.load(args.checkpoint)
    vocab = Vocabulary.load_tsv(args.vocab)
    ads = read_ads(args.ads)
    ids, parts = precompute_ad_parts(model, ads, vocab)
    save_ad_parts(ids, parts, args.out)
    print(json.dumps({"ads": len(ids), "width": parts.shape[1]}, sort_keys=True))
    return 0


def _cmd_simulate(args) -> int:
    model = MatchingModel.load(args.checkpoint)
    vocab = Vocabulary.load_tsv(args.vocab)
    records = read_log_records(args.logs)
    if args.days:
        wanted = set(_comma_list(args.days))
        records = [r for r in records if r.day in wanted]
    ads = read_ads(args.ads)
    oracle = PlantedOracle.load(args.oracle)
    ann_index = AnnIndex.load(args.index) if args.index else None
    ad_parts = load_ad_parts(args.ad_parts) if args.ad_parts else None
    config = PipelineConfig(
        paths=tuple(_comma_list(args.paths)),
        top_n=args.top_n,
        k_vector=args.k_vector,
        overfetch_factor=args.overfetch,
        rerank=not args.no_rerank,
        seed=args.seed,
        verify_split=not args.no_verify_split,
    )
    result = simulate(records, model, vocab, ann_index, ads, oracle, config, ad_parts)
    write_simulation(result, args.out_dir)
    print(json.dumps(result.metrics, sort_keys=True))
    return 0


# ----------------------------------------------------------------------
# parser assembly


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="admatch",
        description="two-tower ad matching: train, index, and simulate",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = subparsers.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value defaults file (flags override)")
        p.set_defaults(func=func)
        registry[name] = p
        return p

    p = sub("gen-data", _cmd_gen_data, "generate synthetic impression logs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=400)
    p.add_argument("--items", type=int, default=600)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--days", type=int, default=4)
    p.add_argument("--impressions-per-user-day", type=int, default=12)
    p.add_argument("--p-hi", type=float, default=0.6)
    p.add_argument("--p-lo", type=float, default=0.05)
    p.add_argument("--head-query-prob", type=float, default=0.3)
    p.add_argument("--confuser-prob", type=float, default=0.35)

    p = sub("build-vocab", _cmd_build_vocab, "build token vocabularies from logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=50000)

    p = sub("train", _cmd_train, "train the matching model")
    _add_split_flags(p)
    _add_encoder_flags(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--history-out")

    p = sub("eval", _cmd_eval, "evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    _add_split_flags(p)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out")

    p = sub("gamma-sweep", _cmd_gamma_sweep, "train one model per gamma value")
    _add_split_flags(p)
    _add_encoder_flags(p)
    _add_train_flags(p)
    p.add_argument("--gammas", default="1,3,6,9")
    p.add_argument("--out-csv")

    p = sub("ablation", _cmd_ablation, "run the encoder/training/sharing ablations")
    _add_split_flags(p)
    _add_encoder_flags(p)
    _add_train_flags(p)
    p.add_argument("--out-csv")

    p = sub("export-vectors", _cmd_export_vectors, "export normalized ad vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ads", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)

    p = sub("build-index", _cmd_build_index, "train PQ codebooks over a vector file")
    p.add_argument("--vectors", required=True, help="index file from export-vectors")
    p.add_argument("--out", required=True)
    p.add_argument("--pq-m", type=int, default=16)
    p.add_argument("--pq-k", type=int, default=256)
    p.add_argument("--pq-iterations", type=int, default=25)
    p.add_argument("--no-pq", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub("add-ad", _cmd_add_ad, "encode one ad and add it to an index")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ad-json", required=True, help="inline JSON or @file")
    p.add_argument("--out", required=True)

    p = sub("search", _cmd_search, "retrieve top ads for a raw query string")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--overfetch", type=int, default=10)
    p.add_argument("--exact", action="store_true")

    p = sub(
        "precompute-ad-parts",
        _cmd_precompute_ad_parts,
        "precompute the offline ad-side pre-rank partials",
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ads", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)

    p = sub("simulate", _cmd_simulate, "replay logs through the two-stage pipeline")
    p.add_argument("--logs", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--ads", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--index")
    p.add_argument("--ad-parts")
    p.add_argument("--days", help="restrict the replay to these days")
    p.add_argument("--paths", default="keyword,vector")
    p.add_argument("--top-n", type=int, default=200)
    p.add_argument("--k-vector", type=int, default=500)
    p.add_argument("--overfetch", type=int, default=10)
    p.add_argument("--no-rerank", action="store_true")
    p.add_argument("--no-verify-split", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    return parser, registry


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser, registry = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        command = next((a for a in argv if not a.startswith("-")), None)
        try:
            overrides = _parse_config_file(known.config)
            if command in registry:
                _apply_config_defaults(registry[command], overrides)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
