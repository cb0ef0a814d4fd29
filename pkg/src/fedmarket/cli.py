"""Command-line driver.

``fedmarket demo`` runs the seeded ten-owner scenario end to end and
writes the report bundle; the remaining subcommands are thin wrappers
over the HTTP API for driving a running server (``fedmarket serve``)
one step at a time:

    serve      start the marketplace server (seeded dev genesis)
    deploy     buyer: create a job / deploy the registry contract
    train      owner: train a local model from an npz dataset
    upload     owner: submit a serialized model to a job
    aggregate  buyer: fuse, score and pay
    balance    read any account balance
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .client import ApiFailure, HttpClient
from .config import load_config
from .demo import run_demo
from .learner import (
    Dataset,
    Hyperparams,
    MlpArch,
    deserialize,
    init_model,
    serialize,
    train,
)
from .ledger import eth


def _fail(message: str) -> int:
    print(message, file=sys.stderr)
    return 1


def cmd_demo(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    client = HttpClient(args.server) if args.server else None
    try:
        result = run_demo(
            config,
            seed=args.seed,
            out_dir=args.out,
            client=client,
            wall_times=args.wall_times,
            echo=print,
        )
    except Exception as exc:
        return _fail(f"demo failed: {type(exc).__name__}: {exc}")
    finally:
        if client is not None:
            client.close()

    print(f"\nlocal accuracies: {['%.3f' % a for a in result.local_accuracies]}")
    print(f"aggregate accuracy: {result.aggregate_accuracy:.3f}")
    total = sum(e["wei"] for e in result.job["payments"]["entries"])
    print(f"payments total: {total} wei ({eth(total)} ETH)")
    print(f"reports in {result.out_dir}")
    if not result.ok:
        return _fail("demo checks failed: " + ", ".join(k for k, v in result.checks.items() if not v))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .client import serve_app
    from .marketplace import MarketplaceService

    config = load_config(args.config)
    service = MarketplaceService.from_config(config, cas_root=args.cas_root, seed=args.seed)
    print(f"serving on http://{args.host}:{args.port} (genesis seed {args.seed})")
    serve_app(service, args.host, args.port)
    return 0


def cmd_deploy(args: argparse.Namespace) -> int:
    client = HttpClient(args.server)
    payload = {
        "buyer": args.buyer,
        "budget_wei": args.budget_wei,
        "arch": [int(d) for d in args.arch.split(",")],
        "aggregator": args.aggregator,
        "testset": json.loads(args.testset),
        "min_owners": args.min_owners,
        "init_seed": args.init_seed,
    }
    try:
        job = client.create_job(payload)
    except ApiFailure as exc:
        return _fail(f"deploy rejected: {exc}")
    finally:
        client.close()
    if job["state"] != "Collecting":
        return _fail(f"deploy failed: {job['failure_reason']}")
    print(job["id"])
    print(job["contract_address"])
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    with np.load(args.data) as bundle:
        dataset = Dataset(bundle["features"], bundle["labels"], int(bundle["n_classes"]))
    if args.init:
        model = deserialize(Path(args.init).read_bytes())
    else:
        model = init_model(MlpArch(tuple(int(d) for d in args.arch.split(","))), args.init_seed)
    hp = Hyperparams(
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        local_epochs=args.epochs,
        seed=args.seed,
    )
    started = time.perf_counter()
    trained = train(model, dataset, hp)
    Path(args.out).write_bytes(serialize(trained))
    print(f"trained in {time.perf_counter() - started:.2f}s -> {args.out}")
    return 0


def cmd_upload(args: argparse.Namespace) -> int:
    client = HttpClient(args.server)
    try:
        cid = client.submit_model(
            args.job, args.owner, Path(args.model).read_bytes(), train_seconds=args.train_seconds
        )
    except ApiFailure as exc:
        return _fail(f"upload rejected: {exc}")
    finally:
        client.close()
    print(cid)
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    client = HttpClient(args.server)
    try:
        job = client.aggregate(args.job, args.caller)
    except ApiFailure as exc:
        return _fail(f"aggregate rejected: {exc}")
    finally:
        client.close()
    print(f"state: {job['state']}")
    for entry in job["payments"]["entries"]:
        print(f"{entry['address']} {entry['wei']} wei ({entry['eth']} ETH)")
    return 0


def cmd_balance(args: argparse.Namespace) -> int:
    client = HttpClient(args.server)
    try:
        balance = client.balance(args.address)
    except ApiFailure as exc:
        return _fail(f"balance query failed: {exc}")
    finally:
        client.close()
    print(balance)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmarket", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="run the seeded ten-owner demo and write reports")
    p.add_argument("--config", default=None, help="path to the repo-wide JSON config")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default="demo_out", help="report bundle directory")
    p.add_argument("--server", default=None, help="drive a running server instead")
    p.add_argument("--in-process", action="store_true", help="force in-process mode (default)")
    p.add_argument("--wall-times", action="store_true",
                   help="write measured durations into timings.json (breaks byte reproducibility)")
    p.set_defaults(fn=cmd_demo)

    p = sub.add_parser("serve", help="start the HTTP server")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=1, help="dev genesis seed when config has no genesis")
    p.add_argument("--cas-root", default=None, help="content store directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8500)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("deploy", help="buyer: create a job")
    p.add_argument("--server", required=True)
    p.add_argument("--buyer", required=True)
    p.add_argument("--budget-wei", type=int, required=True)
    p.add_argument("--arch", default="784,100,10")
    p.add_argument("--aggregator", default="matched")
    p.add_argument("--min-owners", type=int, default=2)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--testset", required=True, help='descriptor JSON, e.g. {"kind":"synthetic_digits",...}')
    p.set_defaults(fn=cmd_deploy)

    p = sub.add_parser("train", help="owner: train a local model")
    p.add_argument("--data", required=True, help="npz with features, labels, n_classes")
    p.add_argument("--init", default=None, help="serialized init model (else --arch + --init-seed)")
    p.add_argument("--arch", default="784,100,10")
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("upload", help="owner: submit a model to a job")
    p.add_argument("--server", required=True)
    p.add_argument("--job", required=True)
    p.add_argument("--owner", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--train-seconds", type=float, default=None)
    p.set_defaults(fn=cmd_upload)

    p = sub.add_parser("aggregate", help="buyer: fuse models, score and pay")
    p.add_argument("--server", required=True)
    p.add_argument("--job", required=True)
    p.add_argument("--caller", required=True)
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("balance", help="read an account balance in wei")
    p.add_argument("--server", required=True)
    p.add_argument("address")
    p.set_defaults(fn=cmd_balance)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
