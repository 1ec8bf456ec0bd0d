#!/usr/bin/env python3
"""Run the five-clinic benchmark over several seeds and compare the regimes.

For each seed: train one standalone model per client shard plus one federated
global model, then report own-shard and pooled-test losses side by side.  Exit
status is 0 when the federated model matches or beats the median standalone
model on at least two thirds of the seeds.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from fedseq.benchmark import BenchmarkConfig, run_benchmark, summarize


def result_payload(result) -> dict:
    return {
        "config": asdict(result.config),
        "centralized": [asdict(c) for c in result.centralized],
        "federated_train_loss": result.federated_train_loss,
        "federated_test_loss": result.federated_test_loss,
        "median_centralized_test_loss": result.median_centralized_test_loss,
        "federated_leq_median_centralized": result.federated_leq_median_centralized,
        "clients_with_pooled_ge_own": result.clients_with_pooled_ge_own,
        "rounds": [
            [m.round_index, m.global_train_loss, m.global_test_loss] for m in result.history
        ],
        "elapsed_seconds": result.elapsed_seconds,
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="standalone vs federated benchmark")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--rounds", type=int, default=30)
    parser.add_argument("--local-epochs", type=int, default=5)
    parser.add_argument("--max-centralized-epochs", type=int, default=60)
    parser.add_argument("--hidden", type=int, default=128)
    parser.add_argument("--embed", type=int, default=32)
    parser.add_argument("--out", help="write per-seed results as JSON")
    parser.add_argument("--verbose", action="store_true", help="log every epoch and round")
    args = parser.parse_args(argv)

    results = []
    for seed in args.seeds:
        config = BenchmarkConfig(
            seed=seed,
            num_rounds=args.rounds,
            local_epochs=args.local_epochs,
            max_centralized_epochs=args.max_centralized_epochs,
            hidden_dim=args.hidden,
            embed_dim=args.embed,
        )
        result = run_benchmark(config, log=print if args.verbose else None)
        print(summarize(result))
        results.append(result)

    wins = sum(r.federated_leq_median_centralized for r in results)
    print(f"federated <= median centralized on {wins}/{len(results)} seeds")
    if args.out:
        payload = [result_payload(r) for r in results]
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        print(f"results: {args.out}")
    return 0 if 3 * wins >= 2 * len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
