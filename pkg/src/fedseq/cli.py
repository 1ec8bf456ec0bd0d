"""Command-line interface: data preparation, training, evaluation, inference.

Exit codes: 0 success, 2 usage, 3 data problems, 4 divergence, 5 I/O.
Commands read their inputs, write only to the paths they were given, and log
a run manifest next to each trained model.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data as D
from . import federation as F
from . import model as M
from . import serialize as S
from . import tensor as T
from . import training as TR
from . import transport as X
from .seeding import subseed

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_IO = 5

# embed and hidden sizes: "desk" fits experiments in minutes on one core,
# "paper" is the full-size configuration
PRESETS = {"desk": (32, 128), "paper": (256, 1024)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedseq",
        description="Federated sequence-to-sequence symptom-to-disease prediction.",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare-data", help="build a sharded dataset directory")
    source = prep.add_mutually_exclusive_group(required=True)
    source.add_argument("--input", help="one-hot CSV (symptom columns, disease label last)")
    source.add_argument("--synthetic", action="store_true", help="generate a synthetic corpus")
    prep.add_argument("--num-diseases", type=int, default=41)
    prep.add_argument("--num-symptoms", type=int, default=132)
    prep.add_argument("--num-samples", type=int, default=4920)
    prep.add_argument("--clients", type=int, default=5, help="number of client shards")
    prep.add_argument("--sizes", help="comma-separated shard sizes (default: even split)")
    prep.add_argument("--seed", type=int, default=0)
    prep.add_argument("--out", required=True, help="output dataset directory")

    for name in ("train-centralized", "train-federated"):
        tp = sub.add_parser(name, help=f"{name.split('-')[1]} training")
        tp.add_argument("--data", required=True, help="prepared dataset directory")
        tp.add_argument("--preset", choices=sorted(PRESETS), default="paper")
        tp.add_argument("--embed", type=int, help="override preset embedding size")
        tp.add_argument("--hidden", type=int, help="override preset hidden size")
        tp.add_argument("--attention", type=int, help="override attention size (default hidden)")
        tp.add_argument("--batch-size", type=int, default=64)
        tp.add_argument("--lr", type=float, default=1e-3)
        tp.add_argument("--optimizer", choices=TR.OPTIMIZERS, default="adam")
        tp.add_argument("--clip", type=float, default=5.0, help="global gradient norm limit")
        tp.add_argument("--seed", type=int, default=0)
        tp.add_argument("--out", required=True, help="where to write the trained model")
        tp.add_argument("--metrics", help="where to write the metrics CSV")
        if name == "train-centralized":
            tp.add_argument("--epochs", type=int, default=20)
            tp.add_argument("--client", type=int, default=0,
                            help="which client's shard to train on")
        else:
            tp.add_argument("--rounds", type=int, default=30)
            tp.add_argument("--local-epochs", type=int, default=5)
            tp.add_argument("--clients", type=int,
                            help="use only the first K shards (default: all)")
            tp.add_argument("--mode", choices=F.AGGREGATION_MODES, default="weighted")
            tp.add_argument("--transport", choices=("in-process", "socket"),
                            default="in-process")
            tp.add_argument("--checkpoint-dir", help="write round_<n>.fedw after each round")

    ev = sub.add_parser("evaluate", help="compare saved models on the pooled data")
    ev.add_argument("--models", required=True, nargs="+", help="checkpoints to evaluate")
    ev.add_argument("--data", required=True)

    inf = sub.add_parser("infer", help="predict a disease and show attention")
    inf.add_argument("--model", required=True)
    inf.add_argument("--data", required=True, help="dataset directory (for the vocabulary)")
    inf.add_argument("--symptoms", required=True, help="space- or comma-separated symptom names")
    inf.add_argument("--top-k", type=int, default=3)
    inf.add_argument("--max-len", type=int, default=16)
    inf.add_argument("--attention-out", help="write attention weights as JSON")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _dims_for(vocab: D.Vocab, args) -> M.ModelDims:
    embed, hidden = PRESETS[args.preset]
    return M.ModelDims(
        vocab_in=vocab.input_size,
        vocab_out=vocab.output_size,
        embed_dim=args.embed or embed,
        hidden_dim=args.hidden or hidden,
        attention_dim=args.attention,
    )


def _train_config(args, local_epochs: int | None = None) -> TR.TrainConfig:
    return TR.TrainConfig(
        local_epochs=local_epochs if local_epochs is not None else 1,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        grad_clip_norm=args.clip if args.clip > 0 else None,
        seed=subseed(args.seed, "train"),
    )


def _check_vocab_matches(params: M.ModelParams, vocab: D.Vocab) -> None:
    if (params.dims.vocab_in, params.dims.vocab_out) != (vocab.input_size, vocab.output_size):
        raise D.FormatError(
            f"model expects vocab sizes {params.dims.vocab_in}/{params.dims.vocab_out}, "
            f"dataset has {vocab.input_size}/{vocab.output_size}"
        )


def _dataset_reference(data_dir) -> dict:
    """Pin the exact dataset a run used: path plus manifest digest."""
    manifest_path = Path(data_dir) / "manifest.json"
    digest = hashlib.sha256(manifest_path.read_bytes()).hexdigest()
    return {"path": str(data_dir), "manifest_sha256": digest}


def _write_run_manifest(out_path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["created_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    manifest_path = out_path.with_suffix(".run.json")
    manifest_path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"run manifest: {manifest_path}")


def _pooled(shards: list[D.ClientShard]) -> tuple[list, list]:
    train = [p for s in shards for p in s.train]
    test = [p for s in shards for p in s.test]
    return train, test


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(args) -> int:
    if args.input:
        pairs, skipped = D.parse_onehot_csv(args.input)
        source = f"csv:{Path(args.input).name}"
    else:
        pairs = D.synthesize_dataset(
            args.num_diseases, args.num_symptoms, args.num_samples,
            seed=subseed(args.seed, "synthesize"),
        )
        skipped = 0
        source = "synthetic"
    if args.clients < 1:
        raise D.ConfigurationError(f"--clients must be >= 1, got {args.clients}")
    if args.sizes:
        try:
            sizes = [int(s) for s in args.sizes.split(",")]
        except ValueError as exc:
            raise D.ConfigurationError(f"--sizes must be integers: {exc}") from exc
        if len(sizes) != args.clients:
            raise D.ConfigurationError(
                f"--sizes lists {len(sizes)} shards but --clients is {args.clients}"
            )
    else:
        base, extra = divmod(len(pairs), args.clients)
        if base < 1:
            raise D.ConfigurationError(
                f"{len(pairs)} examples cannot fill {args.clients} shards"
            )
        sizes = [base + (1 if k < extra else 0) for k in range(args.clients)]
    vocab = D.build_vocab(pairs)
    shards = D.shard(pairs, sizes, seed=subseed(args.seed, "shard"))
    manifest = D.write_dataset_dir(args.out, shards, vocab, seed=args.seed,
                                   source=source, skipped_rows=skipped)
    print(f"wrote {manifest['num_pairs']} pairs in {len(shards)} shards to {args.out}")
    print(f"vocabulary: {manifest['num_symptoms']} symptoms, "
          f"{manifest['num_diseases']} diseases")
    if skipped:
        print(f"skipped {skipped} rows with no active symptom")
    return EXIT_OK


def cmd_train_centralized(args) -> int:
    """Train one client's model alone: own-shard training, pooled-test evaluation."""
    dataset = D.load_dataset_dir(args.data)
    shards = dataset.client_shards()
    if not 0 <= args.client < len(shards):
        raise UsageError(f"--client must be in 0..{len(shards) - 1}, got {args.client}")
    shard = shards[args.client]
    _, pooled_test = _pooled(shards)
    dims = _dims_for(dataset.vocab, args)
    config = _train_config(args)
    params = M.init_params(dims, subseed(args.seed, "init"))
    print(f"centralized: client {args.client}, {len(shard.train)} train pairs, "
          f"{len(pooled_test)} pooled test pairs, {args.epochs} epochs")

    state = TR.init_optimizer(params)
    epoch_rows: list[tuple[int, float, float]] = []
    for epoch in range(args.epochs):
        params, state, train_loss = TR.train_epoch(params, shard.train, config, state,
                                                   epoch=epoch)
        test_loss = TR.evaluate(params, pooled_test)
        epoch_rows.append((epoch + 1, train_loss, test_loss))
        print(f"epoch {epoch + 1}/{args.epochs}: train_loss={train_loss:.6f} "
              f"pooled_test_loss={test_loss:.6f}", flush=True)
    if epoch_rows:
        _, final_train, final_test = epoch_rows[-1]
    else:
        final_train = TR.evaluate(params, shard.train)
        final_test = TR.evaluate(params, pooled_test)
    print(f"final: train_loss={final_train:.6f} pooled_test_loss={final_test:.6f}")
    out = Path(args.out)
    S.save_params(out, params)
    print(f"model: {out}")
    if args.metrics:
        with Path(args.metrics).open("w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,pooled_test_loss\n")
            for epoch, train_loss, test_loss in epoch_rows:
                fh.write(f"{epoch},{train_loss!r},{test_loss!r}\n")
        print(f"metrics: {args.metrics}")
    _write_run_manifest(out, {
        "command": "train-centralized",
        "dataset": _dataset_reference(args.data),
        "seed": args.seed,
        "client": args.client,
        "dims": asdict(dims),
        "train": asdict(config),
        "epochs": args.epochs,
        "final_train_loss": final_train,
        "final_pooled_test_loss": final_test,
        "model": str(out),
        "metrics": args.metrics,
    })
    return EXIT_OK


def cmd_train_federated(args) -> int:
    dataset = D.load_dataset_dir(args.data)
    shards = dataset.client_shards()
    if args.clients is not None:
        if not 1 <= args.clients <= len(shards):
            raise UsageError(
                f"--clients must be in 1..{len(shards)}, got {args.clients}"
            )
        shards = shards[: args.clients]
    dims = _dims_for(dataset.vocab, args)
    config = F.FederatedConfig(
        num_clients=len(shards),
        num_rounds=args.rounds,
        aggregation=args.mode,
        transport=args.transport.replace("-", "_"),
        seed=args.seed,
        train=_train_config(args, local_epochs=args.local_epochs),
    )
    print(f"federated: {len(shards)} clients, {args.rounds} rounds, "
          f"{args.local_epochs} local epochs, {args.mode} aggregation, "
          f"{args.transport} transport")

    def round_hook(round_index, params, metrics):
        print(f"round {round_index}/{args.rounds}: "
              f"global_train_loss={metrics.global_train_loss:.6f} "
              f"global_test_loss={metrics.global_test_loss:.6f}", flush=True)

    result = F.run_federation(config, shards, dims, round_hook=round_hook,
                              checkpoint_dir=args.checkpoint_dir)
    out = Path(args.out)
    S.save_params(out, result.global_params)
    print(f"model: {out}")
    if args.metrics:
        F.write_metrics_csv(args.metrics, result.history)
        print(f"metrics: {args.metrics}")
    last = result.history[-1]
    _write_run_manifest(out, {
        "command": "train-federated",
        "dataset": _dataset_reference(args.data),
        "seed": args.seed,
        "dims": asdict(dims),
        "federated": {
            "num_clients": config.num_clients,
            "num_rounds": config.num_rounds,
            "aggregation": config.aggregation,
            "transport": config.transport,
            "train": asdict(config.train),
        },
        "final_global_train_loss": last.global_train_loss,
        "final_global_test_loss": last.global_test_loss,
        "model": str(out),
        "metrics": args.metrics,
        "checkpoint_dir": args.checkpoint_dir,
    })
    return EXIT_OK


def cmd_evaluate(args) -> int:
    """Evaluate each checkpoint on the pooled train and test data."""
    dataset = D.load_dataset_dir(args.data)
    shards = dataset.client_shards()
    pooled_train, pooled_test = _pooled(shards)
    rows = []
    for model_path in args.models:
        params = S.load_params(model_path)
        _check_vocab_matches(params, dataset.vocab)
        rows.append((str(model_path),
                     TR.evaluate(params, pooled_train),
                     TR.evaluate(params, pooled_test)))
    width = max(len("model"), max(len(name) for name, _, _ in rows))
    print(f"{'model':<{width}}  {'train_loss':>12}  {'pooled_test_loss':>16}")
    for name, train_loss, test_loss in rows:
        print(f"{name:<{width}}  {train_loss:>12.6f}  {test_loss:>16.6f}")
    return EXIT_OK


SHADE_BLOCKS = " .:-=+*#%@"


def render_heatmap(input_tokens: list[str], output_tokens: list[str],
                   weights: np.ndarray) -> str:
    """Text heatmap: one row per output token, darkest character = most weight.

    The strongest cell in each row is bracketed.
    """
    lines = []
    name_width = max(len(t) for t in output_tokens)
    for row_label, row in zip(output_tokens, weights):
        cells = []
        top = int(np.argmax(row))
        for j, w in enumerate(row):
            shade = SHADE_BLOCKS[min(int(w * len(SHADE_BLOCKS)), len(SHADE_BLOCKS) - 1)]
            cells.append(f"[{shade}]" if j == top else f" {shade} ")
        lines.append(f"{row_label:>{name_width}} |{''.join(cells)}|")
    legend = ", ".join(f"{j}={t}" for j, t in enumerate(input_tokens))
    ruler = "".join(f"{j % 10:^3d}" for j in range(len(input_tokens)))
    lines.append(f"{'':>{name_width}}  {ruler}")
    lines.append(f"columns: {legend}")
    return "\n".join(lines)


def cmd_infer(args) -> int:
    params = S.load_params(args.model)
    dataset = D.load_dataset_dir(args.data)
    vocab = dataset.vocab
    _check_vocab_matches(params, vocab)
    symptoms = [s for s in args.symptoms.replace(",", " ").split() if s]
    if not symptoms:
        raise UsageError("--symptoms must name at least one symptom")
    unknown = [s for s in symptoms if vocab.input_id(s) == D.UNK_ID]
    if unknown:
        logger.warning("unknown symptoms map to %s: %s", D.UNK_TOKEN, ", ".join(unknown))
    pair = D.SymptomDiseasePair(symptoms=tuple(symptoms), disease="?")
    input_ids = list(D.tokenize(pair, vocab).input_ids)
    output_ids, weights = M.greedy_decode(params, input_ids, max_len=args.max_len)

    prediction = D.detokenize_output(output_ids, vocab) if output_ids else []
    print(f"symptoms: {' '.join(symptoms)}")
    print(f"prediction: {' '.join(prediction) if prediction else '(empty)'}")

    input_tokens = D.detokenize_input(input_ids, vocab)
    emitted = prediction + ([D.END_TOKEN] if weights.shape[0] > len(prediction) else [])
    if args.top_k > 0:
        # rank only true symptom positions (columns 1..S-2 skip <start>/<end>)
        symptom_cols = list(range(1, len(input_tokens) - 1))
        for row_label, row in zip(emitted, weights):
            ranked = sorted(symptom_cols, key=lambda j: row[j], reverse=True)
            listed = ", ".join(
                f"{input_tokens[j]} ({row[j]:.3f})" for j in ranked[: args.top_k]
            )
            print(f"  {row_label}: {listed}")
    print()
    print(render_heatmap(input_tokens, emitted, weights))
    if args.attention_out:
        payload = {
            "input_tokens": input_tokens,
            "output_tokens": emitted,
            "weights": [[float(w) for w in row] for row in weights],
        }
        Path(args.attention_out).write_text(json.dumps(payload, indent=2) + "\n",
                                            encoding="utf-8")
        print(f"attention: {args.attention_out}")
    return EXIT_OK


class UsageError(Exception):
    """Command arguments are structurally valid but unusable."""


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-centralized": cmd_train_centralized,
    "train-federated": cmd_train_federated,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except D.DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TR.DivergenceError, F.FederationError, T.NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (S.SerializationError, X.TransportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
