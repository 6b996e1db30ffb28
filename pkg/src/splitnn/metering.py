"""Per-role resource ledgers and exact closed-form cost predictions.

Predictions are computed from shapes and the step schedule alone; they never
look at the engine's tensors. ``reconcile`` then demands equality, counter by
counter, with zero tolerance.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from . import nn_core as nn
from .errors import IncompatibleRuns
from .protocol import FrameType, frame_size
from .topology import HORIZONTAL, JOINT, PartitionPlan, TopologyKind

COUNTERS = ("flops_forward", "flops_backward", "bytes_sent", "bytes_received")


@dataclass
class ResourceLedger:
    role: str
    flops_forward: int = 0
    flops_backward: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    sent_by_type: Counter = field(default_factory=Counter)
    received_by_type: Counter = field(default_factory=Counter)
    history: list = field(default_factory=list)

    def add_flops(self, direction, n):
        if n < 0:
            raise ValueError("FLOP counts are nonnegative")
        if direction == nn.FORWARD:
            self.flops_forward += n
        else:
            self.flops_backward += n

    def record_sent(self, frame_type, n):
        self.bytes_sent += n
        self.sent_by_type[FrameType(frame_type).name] += n

    def record_received(self, frame_type, n):
        self.bytes_received += n
        self.received_by_type[FrameType(frame_type).name] += n

    @property
    def flops(self):
        return self.flops_forward + self.flops_backward

    def totals(self):
        return tuple(getattr(self, c) for c in COUNTERS)

    def mark(self):
        """Close a step: remember the cumulative counters for divergence reports."""
        self.history.append(self.totals())

    def breakdown(self):
        return {"sent": dict(self.sent_by_type), "received": dict(self.received_by_type)}


def new_ledgers(roles):
    return {r: ResourceLedger(r) for r in roles}


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepSlot:
    epoch: int
    client: Optional[int]  # index into the plan's data clients; None for joint steps
    start: int
    stop: int
    turn_ended_early: bool = False

    @property
    def size(self):
        return self.stop - self.start


def batch_ranges(n, batch):
    return [(i, min(i + batch, n)) for i in range(0, n, batch)]


def round_robin(shard_sizes, batch, batches_per_turn=1, epoch=0):
    """Client turns over one epoch: each turn takes up to ``batches_per_turn``
    consecutive batches from one client; exhausted clients drop out."""
    queues = [batch_ranges(n, batch) for n in shard_sizes]
    pos = [0] * len(queues)
    slots = []
    while any(p < len(q) for p, q in zip(pos, queues)):
        for i, q in enumerate(queues):
            if pos[i] >= len(q):
                continue
            take = q[pos[i]:pos[i] + batches_per_turn]
            pos[i] += len(take)
            short = len(take) < batches_per_turn
            for k, (lo, hi) in enumerate(take):
                slots.append(StepSlot(epoch, i, lo, hi, short and k == len(take) - 1))
    return slots


def joint_schedule(n, batch, epoch=0):
    return [StepSlot(epoch, None, lo, hi) for lo, hi in batch_ranges(n, batch)]


def split_schedule(plan: PartitionPlan, shard_sizes, batch, epochs, batches_per_turn=1):
    slots = []
    for e in range(epochs):
        if plan.topology_kind in HORIZONTAL:
            slots += round_robin(shard_sizes, batch, batches_per_turn, e)
        elif plan.topology_kind == TopologyKind.MULTIHOP:
            slots += [StepSlot(e, 0, lo, hi) for lo, hi in batch_ranges(shard_sizes[0], batch)]
        else:
            slots += joint_schedule(shard_sizes[0], batch, e)
    return slots


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------

@dataclass
class CostPrediction:
    roles: dict  # role -> ResourceLedger holding predicted counters
    per_step: list = field(default_factory=list)  # per step: role -> cumulative totals

    def __getitem__(self, role):
        return self.roles[role]


class _Tally:
    def __init__(self, roles):
        self.ledgers = new_ledgers(roles)
        self.per_step = []

    def frame(self, src, dst, frame_type, size):
        self.ledgers[src].record_sent(frame_type, size)
        self.ledgers[dst].record_received(frame_type, size)

    def flops(self, role, fwd, bwd):
        self.ledgers[role].add_flops(nn.FORWARD, fwd)
        self.ledgers[role].add_flops(nn.BACKWARD, bwd)

    def mark(self):
        self.per_step.append({r: l.totals() for r, l in self.ledgers.items()})

    def result(self):
        return CostPrediction(self.ledgers, self.per_step)


def param_shapes(specs):
    shapes = []
    for spec in specs:
        if isinstance(spec, nn.Dense):
            shapes.append((spec.in_dim, spec.out_dim))
            if spec.has_bias:
                shapes.append((spec.out_dim,))
        elif isinstance(spec, nn.Conv2D):
            shapes.append((spec.out_ch, spec.in_ch, spec.kernel_h, spec.kernel_w))
            shapes.append((spec.out_ch,))
    return shapes


def num_params(specs):
    return sum(math.prod(s) for s in param_shapes(specs))


def weight_frame_bytes(specs):
    return frame_size(FrameType.WEIGHTS, param_shapes(specs))


def segment_flops(seg, in_shape, batch):
    return nn.chain_flops(seg.layers, in_shape, batch)


def predict(plan: PartitionPlan, shard_sizes, batch, epochs, batches_per_turn=1,
            sync_mode="server") -> CostPrediction:
    """Exact per-role FLOPs and bytes for a split-learning run.

    ``shard_sizes`` lists samples per data client (one entry for Vertical,
    MultiTask and MultiHop, where rows are aligned or held by one client).
    ``sync_mode`` is ``"server"``, ``"p2p"`` or ``None``.
    """
    kind = plan.topology_kind
    tally = _Tally([r.id for r in plan.roles])
    in_shapes = plan.in_shapes()
    out_shapes = {s.id: nn.chain_shapes(s.layers, in_shapes[s.id])[1] for s in plan.segments}
    sync_bytes = weight_frame_bytes([l for s in plan.replicated_segments for l in s.layers])
    ushaped = kind == TopologyKind.USHAPED
    prev = None

    for slot in split_schedule(plan, shard_sizes, batch, epochs, batches_per_turn):
        b = slot.size
        active = plan.clients[slot.client] if slot.client is not None else plan.clients[0]

        def owner(seg):
            return active if seg.replicated else seg.owner

        if kind in HORIZONTAL and prev is not None and prev != active and sync_mode:
            if sync_mode == "server":
                tally.frame(prev, "coordinator", FrameType.WEIGHTS, sync_bytes)
                tally.frame("coordinator", active, FrameType.WEIGHTS, sync_bytes)
            else:
                tally.frame(prev, active, FrameType.WEIGHTS, sync_bytes)
        prev = active

        if kind in JOINT:
            for c in plan.clients:
                tally.frame("coordinator", c, FrameType.CONTROL, frame_size(FrameType.CONTROL, n_args=2))
        source = active if kind in HORIZONTAL else plan.label_source
        for seg in plan.loss_segments:
            if owner(seg) != source:
                # each head receives only its own task's labels
                tally.frame(source, owner(seg), FrameType.LABELS, frame_size(FrameType.LABELS, labels=b))
        for seg in plan.segments:
            fwd, bwd = segment_flops(seg, in_shapes[seg.id], b)
            tally.flops(owner(seg), fwd, bwd)
            for src_id in seg.inputs:
                src = plan.segment(src_id)
                if owner(src) == owner(seg):
                    continue
                shape = (b,) + tuple(out_shapes[src_id])
                ftype = FrameType.LOGITS if ushaped and seg.has_loss else FrameType.ACTIVATION
                size = frame_size(ftype, [shape])
                tally.frame(owner(src), owner(seg), ftype, size)
                tally.frame(owner(seg), owner(src), FrameType.GRADIENT, frame_size(FrameType.GRADIENT, [shape]))
        tally.mark()
    return tally.result()


def _batches(n, batch):
    return [hi - lo for lo, hi in batch_ranges(n, batch)]


def predict_federated(network, input_shape, shard_sizes, batch, rounds, local_epochs=1) -> CostPrediction:
    """Every round: local training, one weight upload, one weight broadcast."""
    clients = [f"client{i}" for i in range(len(shard_sizes))]
    tally = _Tally(clients + ["server"])
    w = weight_frame_bytes(network)
    for _ in range(rounds):
        for c, n in zip(clients, shard_sizes):
            if n == 0:
                continue
            for _ in range(local_epochs):
                for b in _batches(n, batch):
                    tally.flops(c, *nn.chain_flops(network, input_shape, b))
                    tally.mark()
        for c, n in zip(clients, shard_sizes):
            if n:
                tally.frame(c, "server", FrameType.WEIGHTS, w)
        for c, n in zip(clients, shard_sizes):
            if n:
                tally.frame("server", c, FrameType.WEIGHTS, w)
        if tally.per_step:
            tally.per_step[-1] = {r: l.totals() for r, l in tally.ledgers.items()}
    return tally.result()


def predict_largebatch(network, input_shape, shard_sizes, batch, epochs) -> CostPrediction:
    """Every step: participants upload gradients, server broadcasts weights to all."""
    clients = [f"client{i}" for i in range(len(shard_sizes))]
    tally = _Tally(clients + ["server"])
    w = weight_frame_bytes(network)
    queues = [_batches(n, batch) for n in shard_sizes]
    holders = [c for c, n in zip(clients, shard_sizes) if n]
    for _ in range(epochs):
        for s in range(max((len(q) for q in queues), default=0)):
            for c, q in zip(clients, queues):
                if s < len(q):
                    tally.flops(c, *nn.chain_flops(network, input_shape, q[s]))
                    tally.frame(c, "server", FrameType.GRADIENT, w)
            for c in holders:
                tally.frame("server", c, FrameType.WEIGHTS, w)
            tally.mark()
    return tally.result()


# ---------------------------------------------------------------------------
# Reconciliation and comparison
# ---------------------------------------------------------------------------

@dataclass
class Diff:
    role: str
    counter: str
    measured: int
    predicted: int
    first_divergent_step: Optional[int]

    def __str__(self):
        where = "" if self.first_divergent_step is None else f", first divergent step {self.first_divergent_step}"
        return f"{self.role}.{self.counter}: measured {self.measured} != predicted {self.predicted}{where}"


def reconcile(ledgers, prediction: CostPrediction) -> list:
    """Empty list when every counter of every role matches; otherwise one Diff each."""
    diffs = []
    for role in sorted(set(ledgers) | set(prediction.roles)):
        m = ledgers.get(role) or ResourceLedger(role)
        p = prediction.roles.get(role) or ResourceLedger(role)
        for idx, counter in enumerate(COUNTERS):
            mv, pv = getattr(m, counter), getattr(p, counter)
            if mv == pv:
                continue
            first = None
            for step, snap in enumerate(prediction.per_step):
                hist = m.history[step] if step < len(m.history) else None
                if hist is None or hist[idx] != snap.get(role, (0,) * 4)[idx]:
                    first = step
                    break
            diffs.append(Diff(role, counter, mv, pv, first))
        for direction in ("sent", "received"):
            mb, pb = m.breakdown()[direction], p.breakdown()[direction]
            if mb != pb:
                diffs.append(Diff(role, f"{direction}_by_type", sum(mb.values()), sum(pb.values()), None))
    return diffs


# Published per-client figures for VGG on CIFAR-10 (TFLOPs) and ResNet-50 on
# CIFAR-100 (GB), at 100 and 500 clients. Shown for orientation only; desk-scale
# runs cannot reproduce them.
REFERENCE_TFLOPS = {
    "largebatch": (29.4, 5.89),
    "federated": (29.4, 5.89),
    "splitnn": (0.1548, 0.03),
}
REFERENCE_GB = {
    "largebatch": (13.0, 14.0),
    "federated": (3.0, 2.4),
    "splitnn": (6.0, 1.2),
}
METHOD_LABELS = {"largebatch": "Large Batch SGD", "federated": "Federated Learning", "splitnn": "SplitNN"}


@dataclass
class RunSummary:
    """What a finished run contributes to a comparison table."""
    run_id: str
    method: str
    topology: str
    dataset: str
    epochs: int
    client_flops: dict  # client role -> total FLOPs
    client_bytes_sent: dict
    client_bytes_received: dict

    @property
    def per_client_flops(self) -> Fraction:
        return Fraction(sum(self.client_flops.values()), max(len(self.client_flops), 1))

    @property
    def per_client_bytes(self) -> Fraction:
        total = sum(self.client_bytes_sent.values()) + sum(self.client_bytes_received.values())
        return Fraction(total, max(len(self.client_flops), 1))


def summarize(run_id, method, topology, dataset, epochs, ledgers, client_roles) -> RunSummary:
    return RunSummary(
        run_id, method, topology, dataset, epochs,
        {r: ledgers[r].flops for r in client_roles},
        {r: ledgers[r].bytes_sent for r in client_roles},
        {r: ledgers[r].bytes_received for r in client_roles},
    )


def check_comparable(runs):
    keys = {(r.dataset, r.epochs) for r in runs}
    if len(keys) > 1:
        detail = ", ".join(f"{r.run_id}: dataset {r.dataset[:12]} epochs {r.epochs}" for r in runs)
        raise IncompatibleRuns(f"runs differ in dataset or epoch count and cannot be compared ({detail})")


def comparison_table(runs) -> list:
    """One row per run: (run id, method, topology, per-client FLOPs, per-client GB)."""
    runs = list(runs)
    check_comparable(runs)
    rows = []
    for r in runs:
        rows.append({
            "run": r.run_id,
            "method": r.method,
            "topology": r.topology,
            "per_client_flops": r.per_client_flops,
            "per_client_gb": r.per_client_bytes / 10 ** 9,
        })
    return rows


def format_reference_block() -> str:
    lines = [
        "Published reference values (VGG/CIFAR-10 TFLOPs, ResNet-50/CIFAR-100 GB; not reproduced here)",
        f"{'method':<20}{'TFLOPs@100':>12}{'TFLOPs@500':>12}{'GB@100':>10}{'GB@500':>10}",
    ]
    for key in ("largebatch", "federated", "splitnn"):
        t100, t500 = REFERENCE_TFLOPS[key]
        g100, g500 = REFERENCE_GB[key]
        lines.append(f"{METHOD_LABELS[key]:<20}{t100:>12g}{t500:>12g}{g100:>10g}{g500:>10g}")
    return "\n".join(lines)


def format_comparison(rows) -> str:
    lines = [
        "Desk-scale measurements (per client, whole run)",
        f"{'run':<34}{'method':<12}{'topology':<18}{'client FLOPs':>16}{'client GB':>14}",
    ]
    for row in rows:
        flops = row["per_client_flops"]
        flops_txt = str(int(flops)) if flops.denominator == 1 else f"{float(flops):.1f}"
        lines.append(f"{row['run']:<34}{row['method']:<12}{row['topology']:<18}"
                     f"{flops_txt:>16}{float(row['per_client_gb']):>14.9f}")
    return "\n".join(lines)
