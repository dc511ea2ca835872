"""Command-line entry point.

Exit codes:
    0  success
    2  usage or configuration error (reported before any compute)
    3  dataset or run-directory file error
    4  network/transport failure
    5  training failure
    6  a theorem check reported FAIL
    10-13  serve-client: cannot connect / disconnected / protocol error /
           aggregator sent ERROR
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from carfl.config import ConfigError, RunConfig, describe_keys
from carfl.data import save_hidden_states
from carfl.evaluation import accuracy_table, evaluate, four_way_comparison
from carfl.experiment import (
    DataError,
    Setup,
    build_setup,
    load_dataset,
    precompute,
    synthetic_encoder,
)
from carfl.federation import ClientRound, RoundRecord, make_clients, run_centralized, run_training
from carfl.transport import (
    TransportError,
    decode_tensors,
    encode_tensors,
    model_from_tensors,
    parse_address,
    serve_aggregator,
    serve_client,
)

log = logging.getLogger("carfl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4
EXIT_TRAINING = 5
EXIT_BOUND_FAIL = 6

CONFIG_NAME = "config.ini"
RECORDS_NAME = "records.jsonl"
MODEL_NAME = "model.bin"
SUMMARY_NAME = "summary.txt"
TRACE_NAME = "trace.npz"


class RunDirError(RuntimeError):
    pass


class RecordWriter:
    """Appends one JSON object per line and flushes after each record."""

    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, rec) -> None:
        obj = rec.to_dict() if isinstance(rec, RoundRecord) else rec
        self.fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_records(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_model(model, path: Path) -> None:
    path.write_bytes(encode_tensors(list(model.named_tensors().values())))


def load_model(template, path: Path):
    return model_from_tensors(template, decode_tensors(path.read_bytes()))


def save_trace(path: Path, models, records) -> None:
    arrays = {}
    for t, mdl in enumerate(models):
        for name, arr in mdl.named_tensors().items():
            arrays[f"model_{t}_{name}"] = arr
    for rec in records:
        for c in rec.clients:
            arrays[f"grad_norms_{rec.round}_{c.cid}"] = np.asarray(c.grad_norms)
    arrays["n_models"] = np.array(len(models))
    np.savez(path, **arrays)


def load_trace(path: Path, template, record_dicts: list[dict]):
    """Rebuild the traced global models and full round records."""
    with np.load(path) as z:
        n = int(z["n_models"])
        models = [template.with_tensors({name: z[f"model_{t}_{name}"]
                                         for name in template.named_tensors()})
                  for t in range(n)]
        records = []
        for d in record_dicts:
            clients = [ClientRound(**c, grad_norms=list(z[f"grad_norms_{d['round']}_{c['cid']}"]))
                       for c in d["clients"]]
            records.append(RoundRecord(d["round"], clients, d["val_loss"], d["val_accuracy"]))
    return models, records


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(rc.to_ini(), encoding="utf-8")
    return out


def _summary(setup: Setup, result, rc: RunConfig, scenario: str) -> str:
    acc = evaluate(result.model, setup.enc, setup.val, rc["eval.ks"]) if len(setup.val) else {}
    last = result.records[-1] if result.records else None
    lines = [
        f"scenario            {scenario}",
        f"mode                {rc['model.mode']}",
        f"clients             {setup.fed.m if scenario != 'centralized' else 1}",
        f"records             {len(result.records)}",
        f"wall-clock (ms)     {result.wall_ms:.1f}",
    ]
    if last is not None:
        lines.append(f"final val loss      {last.val_loss:.6f}")
    lines += [f"val top-{k:<12d}{100 * v:.2f}%" for k, v in acc.items()]
    return "\n".join(lines) + "\n"


def _finish(out: Path, setup: Setup, result, rc: RunConfig, scenario: str) -> None:
    save_model(result.model, out / MODEL_NAME)
    if rc["train.trace"] and result.models:
        save_trace(out / TRACE_NAME, result.models, result.records)
    text = _summary(setup, result, rc, scenario)
    (out / SUMMARY_NAME).write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_train(args, rc: RunConfig) -> int:
    setup = build_setup(rc)
    out = _out_dir(rc)
    writer = RecordWriter(out / RECORDS_NAME)
    try:
        if rc["train.scenario"] == "centralized":
            epochs = rc["train.epochs"] or None
            result = run_centralized(setup.fed, setup.enc, setup.train, setup.val, setup.init,
                                     epochs=epochs, on_record=writer)
        else:
            result = run_training(setup.fed, setup.enc, setup.train, setup.val, setup.init,
                                  on_record=writer)
    finally:
        writer.close()
    _finish(out, setup, result, rc, rc["train.scenario"])
    return EXIT_OK


def cmd_serve_agg(args, rc: RunConfig) -> int:
    setup = build_setup(rc)
    bind = parse_address(args.bind)
    out = _out_dir(rc)
    writer = RecordWriter(out / RECORDS_NAME)
    try:
        result = serve_aggregator(rc, bind, rc["net.timeout_s"], setup=setup,
                                  on_listen=lambda port: log.info("listening on port %d", port),
                                  on_record=writer)
    finally:
        writer.close()
    _finish(out, setup, result, rc, "networked")
    return EXIT_OK


def cmd_serve_client(args, rc: RunConfig) -> int:
    return serve_client(args.client_id, parse_address(args.connect), rc["net.timeout_s"])


def _run_dir(args) -> tuple[Path, RunConfig]:
    run = Path(args.run)
    if not (run / CONFIG_NAME).exists():
        raise RunDirError(f"{run} has no {CONFIG_NAME}")
    return run, RunConfig.from_file(run / CONFIG_NAME)


def cmd_eval(args, rc_cli: RunConfig) -> int:
    run, rc = _run_dir(args)
    rc = rc.with_overrides(args.set or [])
    setup = build_setup(rc)
    if not (run / MODEL_NAME).exists():
        raise RunDirError(f"{run} has no {MODEL_NAME}")
    model = load_model(setup.init, run / MODEL_NAME)
    data = setup.train if args.split == "train" else setup.val
    acc = evaluate(model, setup.enc, data, rc["eval.ks"])
    rows = [(f"top-{k} on {args.split}", v) for k, v in acc.items()]
    text = accuracy_table(rows) + "\n"
    (run / f"eval_{args.split}.txt").write_text(text, encoding="utf-8")
    with open(run / f"eval_{args.split}.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"split": args.split, "n": len(data),
                             "accuracy": {str(k): v for k, v in acc.items()}}) + "\n")
    print(text, end="")
    return EXIT_OK


def cmd_compare(args, rc: RunConfig) -> int:
    setup = build_setup(rc)
    out = _out_dir(rc)
    epochs = rc["train.epochs"] or setup.fed.T * setup.fed.E
    lr = rc["fed.lr"] or None
    cmp = four_way_comparison(
        setup.train, setup.val, setup.enc, epochs,
        lr=lr or 1e-3, lr_joint=lr or 1e-4, seed=setup.fed.seed,
        batch_size=setup.fed.batch_size, pre_classifier=rc["model.pre_classifier"],
    )
    with open(out / RECORDS_NAME, "w", encoding="utf-8") as fh:
        for name, acc in cmp.rows():
            fh.write(json.dumps({"method": name, "top1": acc}) + "\n")
    text = accuracy_table(cmp.rows()) + "\n"
    (out / SUMMARY_NAME).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_bound(args, rc_cli: RunConfig) -> int:
    from carfl.theory import check_run

    run, rc = _run_dir(args)
    if not (run / TRACE_NAME).exists():
        raise RunDirError(f"{run} has no {TRACE_NAME}; train with --trace")
    setup = build_setup(rc)
    models, records = load_trace(run / TRACE_NAME, setup.init, read_records(run / RECORDS_NAME))
    shards = [c.shard for c in make_clients(setup.train, setup.fed)]
    check = check_run(models, records, shards, setup.enc, setup.fed, setup.train,
                      rc["theory.gamma1"], rc["theory.gamma2"],
                      rc["theory.reference_epochs"], rc["theory.reference_lr"])
    text = check.text() + "\n"
    (run / "bound.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK if check.passed else EXIT_BOUND_FAIL


def cmd_gen_data(args, rc: RunConfig) -> int:
    rc.validate()
    data = load_dataset(rc)
    kind = "features"
    if args.hidden_states:
        data = precompute(synthetic_encoder(rc, data.dim), data)
        kind = "pooled hidden states"
    path = Path(args.out_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_hidden_states(data, path)
    Path(str(path) + ".ini").write_text(rc.to_ini(), encoding="utf-8")
    print(f"wrote {len(data)} samples of {kind} (d={data.dim}, "
          f"{data.n_classes} classes) to {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "serve-agg": cmd_serve_agg,
    "serve-client": cmd_serve_client,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "bound": cmd_bound,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", help="output directory (output.dir)")
    common.add_argument("--timeout-s", type=float, help="network deadline (net.timeout_s)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(
        prog="carfl",
        description="Classifier-as-retriever training with FedAvg and local DP.",
        epilog="config keys:\n" + describe_keys() + "\n\n" + __doc__.split("\n\n", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="centralized or simulated FL training")
    t.add_argument("--scenario", choices=["centralized", "fl", "simulated-fl"])
    t.add_argument("--mode", choices=["classifier-only", "adapter-and-classifier"])
    t.add_argument("--encoder", choices=["synthetic", "precomputed"])
    t.add_argument("--data", help="hidden-state/feature file (sets data.source = file)")
    t.add_argument("--trace", action="store_true", help="keep iterates for the bound command")
    a = sub.add_parser("serve-agg", parents=[common], help="run the TCP aggregator")
    a.add_argument("--bind", default="127.0.0.1:7070", help="host:port to listen on")
    c = sub.add_parser("serve-client", parents=[common], help="run one TCP client")
    c.add_argument("--connect", required=True, help="aggregator host:port")
    c.add_argument("--client-id", type=int, required=True)
    e = sub.add_parser("eval", parents=[common], help="top-K accuracy of a trained run")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--split", choices=["train", "val"], default="val")
    sub.add_parser("compare", parents=[common], help="four-way retriever comparison")
    b = sub.add_parser("bound", parents=[common], help="theorem report for a traced run")
    b.add_argument("--run", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write a dataset file")
    g.add_argument("--out-file", required=True)
    g.add_argument("--hidden-states", action="store_true",
                   help="store pooled encoder hidden states instead of raw features")
    return p


def config_from_args(args) -> RunConfig:
    rc = RunConfig.from_file(args.config) if args.config else RunConfig()
    flags = {}
    if args.out:
        flags["output.dir"] = args.out
    if args.timeout_s is not None:
        flags["net.timeout_s"] = args.timeout_s
    if getattr(args, "scenario", None):
        flags["train.scenario"] = "centralized" if args.scenario == "centralized" else "fl"
    if getattr(args, "mode", None):
        flags["model.mode"] = args.mode.replace("-", "_")
    if getattr(args, "encoder", None):
        flags["encoder.kind"] = args.encoder
    if getattr(args, "data", None):
        flags["data.source"] = "file"
        flags["data.path"] = args.data
    if getattr(args, "trace", False):
        flags["train.trace"] = True
    rc.update(flags)
    return rc.with_overrides(args.set or [])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = config_from_args(args)
        if args.command not in ("eval", "bound"):
            rc.validate()
        return COMMANDS[args.command](args, rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RunDirError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (RuntimeError, ValueError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
