"""Command-line experiment runner.

    splitnn run CONFIG [--seed N] [--output-dir DIR] [--transport inprocess|tcp]
    splitnn validate CONFIG
    splitnn compare DIR

``run`` writes ``metrics.csv``, ``ledger.csv``, ``summary.txt``, ``meta.json``
and ``weights.spln`` into ``<output_dir>/<run id>/``. ``SPLITNN_OUTPUT_DIR``
overrides the config's output_dir; ``--output-dir`` overrides both.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import report
from .config import ExperimentConfig, load_config
from .data import load_dataset, partition_dataset
from .engine import ClientData, FederatedTrainer, LargeBatchTrainer, SplitTrainer
from .errors import ConfigError, IncompatibleRuns, SplitNNError
from .metering import predict, predict_federated, predict_largebatch, reconcile
from .protocol import Frame, FrameType, encode
from .topology import CLIENT, JOINT, TopologyKind, build_plan

log = logging.getLogger("splitnn")


def _task_labels(labels, targets):
    cols = []
    for t in targets:
        cols.append(labels if t == "label" else labels % int(t.split()[1]))
    return np.stack(cols, axis=1)


def _rows_from_reports(reports, cfg, client_roles):
    rows = []
    for r in reports:
        flops = {role: c[0] for role, c in r.cumulative.items()}
        sent = {role: c[1] for role, c in r.cumulative.items()}
        recv = {role: c[2] for role, c in r.cumulative.items()}
        rows.append(report.MetricsRow(
            "step", r.epoch, r.step, cfg.method, cfg.topology if cfg.method == "splitnn" else "-",
            r.client or "", r.batch, r.loss, list(r.losses), r.correct_count, None, [],
            Fraction(sum(flops[c] for c in client_roles), len(client_roles)), flops, sent, recv))
    return rows


def _eval_row(last, epoch, accs):
    acc = sum(accs) / len(accs)
    return report.MetricsRow(
        "eval", epoch, last.step, last.method, last.topology, "", 0, None, [], None, acc, list(accs),
        last.client_flops, dict(last.role_flops), dict(last.role_bytes_sent), dict(last.role_bytes_received))


def build_trainer(cfg: ExperimentConfig, samples, shards):
    """Returns (trainer, client role ids, cost prediction callable, eval labels)."""
    common = dict(lr=cfg.lr, seed=cfg.seed, batch=cfg.batch, transport=cfg.transport, addresses=cfg.addresses)
    labels = samples.labels
    if cfg.method == "splitnn":
        kind = TopologyKind.parse(cfg.topology)
        input_shape = cfg.input_shape or tuple(samples.features.shape[1:])
        if kind in JOINT:
            plan = build_plan(kind, cfg.network or [], [], len(cfg.towers), towers=cfg.towers, heads=cfg.heads,
                              merge=cfg.merge)
            if kind == TopologyKind.MULTITASK:
                labels = _task_labels(samples.labels, cfg.head_targets)
                shards[0] = ClientData(shards[0].features, labels)
        else:
            if kind == TopologyKind.MULTIHOP and len(shards) != 1:
                raise ConfigError("multihop keeps all data at the first hop; set num_clients = 1")
            plan = build_plan(kind, cfg.network, cfg.cut_points, len(shards), input_shape=input_shape,
                              merge=cfg.merge)
        trainer = SplitTrainer(plan, shards, sync_mode=cfg.weight_sync, batches_per_turn=cfg.batches_per_turn,
                               **common)
        sizes = [len(s) for s in shards] if kind not in JOINT else [len(shards[0])]
        predictor = lambda: predict(plan, sizes, cfg.batch, cfg.epochs, cfg.batches_per_turn, cfg.weight_sync)
        return trainer, plan.client_roles, predictor, labels
    sizes = [len(s) for s in shards]
    shape = cfg.input_shape or tuple(samples.features.shape[1:])
    if cfg.method == "federated":
        trainer = FederatedTrainer(cfg.network, shards, local_epochs=cfg.local_epochs, **common)
        predictor = lambda: predict_federated(cfg.network, shape, sizes, cfg.batch, cfg.epochs, cfg.local_epochs)
    else:
        trainer = LargeBatchTrainer(cfg.network, shards, **common)
        predictor = lambda: predict_largebatch(cfg.network, shape, sizes, cfg.batch, cfg.epochs)
    return trainer, list(trainer.clients), predictor, labels


def _weights_file(trainer) -> bytes:
    frames = []
    if isinstance(trainer, SplitTrainer):
        roles = list(trainer.runtimes)
        for tag, role in enumerate(roles):
            rt = trainer.runtimes[role]
            tensors = [w for seg in trainer.plan.segments if seg.id in rt.states
                       for st in rt.states[seg.id] for w in st.weights]
            if tensors:
                frames.append(encode(Frame(FrameType.WEIGHTS, trainer.step_no, tag, tensors=tensors)))
    else:
        tag = len(trainer.clients)
        tensors = [w for st in trainer.global_model for w in st.weights]
        frames.append(encode(Frame(FrameType.WEIGHTS, trainer.step_no, tag, tensors=tensors)))
    return b"".join(frames)


def _ledger_csv(ledgers, kinds) -> str:
    lines = ["role,kind,flops_forward,flops_backward,bytes_sent,bytes_received,sent_by_type,received_by_type"]
    for role, l in ledgers.items():
        sent = ";".join(f"{k}={v}" for k, v in sorted(l.sent_by_type.items()))
        recv = ";".join(f"{k}={v}" for k, v in sorted(l.received_by_type.items()))
        lines.append(f"{role},{kinds.get(role, '')},{l.flops_forward},{l.flops_backward},"
                     f"{l.bytes_sent},{l.bytes_received},{sent},{recv}")
    return "\n".join(lines) + "\n"


def run(cfg: ExperimentConfig) -> Path:
    """Execute one experiment and write its artifacts; returns the run directory."""
    samples = load_dataset(cfg.dataset)
    if cfg.partition.get("kind") == "vertical" and samples.features.ndim != 2:
        raise ConfigError("vertical partitioning needs [N, D] features; set flatten = true")
    shards = partition_dataset(samples, cfg.partition, cfg.seed)
    trainer, client_roles, predictor, eval_labels = build_trainer(cfg, samples, shards)
    rows = []
    try:
        for epoch in range(cfg.epochs):
            if isinstance(trainer, FederatedTrainer):
                reports = trainer.run_round()
            else:
                reports = trainer.run_epoch()
            rows += _rows_from_reports(reports, cfg, client_roles)
            accs = trainer.evaluate(samples.features, eval_labels)
            rows.append(_eval_row(rows[-1], epoch, accs))
            log.info("epoch %d: loss %.4f accuracy %s", epoch, reports[-1].loss if reports else float("nan"), accs)
    finally:
        trainer.close()

    out = Path(cfg.output_dir) / cfg.run_id
    out.mkdir(parents=True, exist_ok=True)
    report.write_metrics(rows, out / "metrics.csv")
    kinds = ({r.id: r.kind for r in trainer.plan.roles} if isinstance(trainer, SplitTrainer)
             else {**{c: CLIENT for c in trainer.clients}, "server": "server"})
    (out / "ledger.csv").write_text(_ledger_csv(trainer.ledgers, kinds))
    (out / "weights.spln").write_bytes(_weights_file(trainer))
    meta = {
        "run_id": cfg.run_id,
        "method": cfg.method,
        "topology": cfg.topology if cfg.method == "splitnn" else None,
        "dataset": samples.fingerprint(),
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "client_roles": list(client_roles),
        "roles": kinds,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    diffs = reconcile(trainer.ledgers, predictor())
    lines = [f"run {cfg.run_id}: method={cfg.method} topology={meta['topology'] or '-'} epochs={cfg.epochs}",
             f"final accuracy: {rows[-1].accuracy!r}", "",
             "per-role totals (FLOPs fwd/bwd, bytes sent/received)"]
    for role, l in trainer.ledgers.items():
        lines.append(f"  {role:<12} {l.flops_forward:>16} {l.flops_backward:>16} {l.bytes_sent:>14} {l.bytes_received:>14}")
    lines.append("")
    lines.append("accounting: measured == predicted" if not diffs else
                 "accounting MISMATCH:\n  " + "\n  ".join(map(str, diffs)))
    others = [p for p in report.find_runs(cfg.output_dir) if p.resolve() != out.resolve()]
    if others:
        try:
            lines += ["", report.summary_table([out] + others)]
        except IncompatibleRuns as exc:
            lines += ["", f"no comparison table: {exc}"]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    if diffs:
        raise SplitNNError("resource accounting mismatch:\n  " + "\n  ".join(map(str, diffs)))
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(prog="splitnn", description="Split learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--output-dir")
    p_run.add_argument("--transport", choices=("inprocess", "tcp"))
    p_run.add_argument("-v", "--verbose", action="store_true")
    p_val = sub.add_parser("validate", help="check a config and list every violation")
    p_val.add_argument("config")
    p_cmp = sub.add_parser("compare", help="write curves.csv and summary.txt for all runs in DIR")
    p_cmp.add_argument("dir")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            print(report.compare(args.dir), end="")
            return 0
        overrides = {}
        if args.command == "run":
            overrides = {"seed": args.seed, "output_dir": args.output_dir, "transport": args.transport}
        cfg = load_config(args.config, overrides)
        if args.command == "validate":
            print(f"{args.config}: ok ({cfg.method}, {cfg.topology or '-'})")
            return 0
        out = run(cfg)
        print(out)
        return 0
    except SplitNNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
