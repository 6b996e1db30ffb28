"""Training orchestration for split learning and the two baselines.

Roles run in one deterministic interleaving: the trainer walks the plan's
segments in order and lets each role act in turn, but every tensor that moves
between roles goes through an encoded frame on the fabric. A role's inputs
come only from its own data or from frames it decoded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn_core as nn
from .errors import InputError, SplitNNError, StepError
from .metering import ResourceLedger, StepSlot, batch_ranges, new_ledgers, split_schedule
from .protocol import Fabric, Frame, FrameType, Opcode, raw_tags
from .topology import HORIZONTAL, JOINT, PartitionPlan, TopologyKind, name_layers

log = logging.getLogger(__name__)

SERVER_MEDIATED = "server"
PEER_TO_PEER = "p2p"


@dataclass
class ClientData:
    """Rows held by one data client. For MultiTask, ``labels`` is [N, tasks]."""
    features: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.features)


@dataclass
class RoleRuntime:
    role: str
    states: dict = field(default_factory=dict)  # segment id -> list of LayerState
    data: Optional[ClientData] = None
    ledger: Optional[ResourceLedger] = None

    @property
    def labels(self):
        return None if self.data is None else self.data.labels


@dataclass
class TrainStepReport:
    step: int
    epoch: int
    losses: list
    correct_count: int
    batch: int
    flops_delta: dict
    bytes_delta: dict
    cumulative: dict = field(default_factory=dict)  # role -> (flops, bytes_sent, bytes_received)
    client: Optional[str] = None
    turn_ended_early: bool = False
    handoff: bool = False

    @property
    def loss(self):
        return float(sum(self.losses))


def _snapshot(ledgers):
    return {r: (l.flops, l.bytes_sent, l.bytes_received) for r, l in ledgers.items()}


def _deltas(before, ledgers):
    flops, nbytes = {}, {}
    for r, l in ledgers.items():
        f0, s0, r0 = before[r]
        flops[r] = l.flops - f0
        nbytes[r] = (l.bytes_sent - s0) + (l.bytes_received - r0)
    return flops, nbytes


def _run_layers(states, x, ledger, train, skip_loss=True):
    """Forward through ``states``; charges FLOPs to ``ledger`` when given."""
    for st in states:
        if skip_loss and isinstance(st.spec, nn.SoftmaxCrossEntropy):
            break
        if ledger is not None:
            shape = [a.shape[1:] for a in x] if isinstance(st.spec, nn.Concat) else x.shape[1:]
            batch = x[0].shape[0] if isinstance(st.spec, nn.Concat) else x.shape[0]
            ledger.add_flops(nn.FORWARD, nn.flops(st.spec, batch, nn.FORWARD, shape))
        x = nn.forward(st, x, train=train)
    return x


def _backprop(states, g, lr, ledger):
    for st in reversed(states):
        if isinstance(st.spec, nn.SoftmaxCrossEntropy):
            continue
        x = st.cached_input
        shape = [a.shape[1:] for a in x] if isinstance(st.spec, nn.Concat) else x.shape[1:]
        batch = x[0].shape[0] if isinstance(st.spec, nn.Concat) else x.shape[0]
        ledger.add_flops(nn.BACKWARD, nn.flops(st.spec, batch, nn.BACKWARD, shape))
        g = nn.backward(st, g, lr)
    return g


def _loss(state, logits, labels, ledger):
    if ledger is not None:
        ledger.add_flops(nn.FORWARD, nn.flops(state.spec, logits.shape[0], nn.FORWARD))
    return nn.loss_forward_backward(state, logits, labels)


def make_states(specs, seed):
    return [nn.LayerState(s, seed=seed) for s in specs]


def segment_weights(states_lists):
    return [w for states in states_lists for st in states for w in st.weights]


def load_weights(states_lists, tensors):
    tensors = list(tensors)
    slots = [(st, i) for states in states_lists for st in states for i in range(len(st.weights))]
    if len(slots) != len(tensors):
        raise SplitNNError(f"weight frame holds {len(tensors)} tensors, expected {len(slots)}")
    for (st, i), t in zip(slots, tensors):
        if st.weights[i].shape != t.shape:
            raise SplitNNError(f"weight shape mismatch for {st.name}: {st.weights[i].shape} vs {t.shape}")
        st.weights[i] = np.array(t, dtype=nn.DTYPE)


# ---------------------------------------------------------------------------
# Split learning
# ---------------------------------------------------------------------------

class SplitTrainer:
    """Runs one partition plan over its roles.

    ``data`` holds one ClientData per data client of the plan (for Vertical and
    MultiTask the client order matches the towers; labels sit with client 0).
    """

    def __init__(self, plan: PartitionPlan, data, *, lr=0.05, seed=0, batch=32,
                 sync_mode=SERVER_MEDIATED, batches_per_turn=1, transport="inprocess",
                 addresses=(), track_inputs=False):
        self.plan = plan
        self.lr = lr
        self.batch = batch
        self.sync_mode = sync_mode
        self.batches_per_turn = batches_per_turn
        self.track_inputs = track_inputs
        self.raw_tags = set()
        roles = [r.id for r in plan.roles]
        self.ledgers = new_ledgers(roles)
        self.fabric = Fabric(roles, self.ledgers, kind=transport, addresses=addresses)
        self.runtimes = {r: RoleRuntime(r, ledger=self.ledgers[r]) for r in roles}
        self.step_no = 0
        self.epoch_no = 0
        self.last_client = None
        self.handoffs = 0

        data = list(data)
        if len(data) != len(plan.clients):
            raise InputError(f"plan has {len(plan.clients)} data clients but {len(data)} shards were given")
        for c, d in zip(plan.clients, data):
            self.runtimes[c].data = d
        if plan.topology_kind in JOINT:
            n = {len(d) for d in data}
            if len(n) != 1:
                raise InputError(f"vertical shards must be row-aligned; got sizes {sorted(n)}")
        for seg in plan.segments:
            owners = plan.clients if seg.replicated else (seg.owner,)
            for o in owners:
                self.runtimes[o].states[seg.id] = make_states(seg.layers, seed)

    # -- plumbing ---------------------------------------------------------

    def owner(self, seg, active):
        return active if seg.replicated else seg.owner

    def states(self, seg, active):
        return self.runtimes[self.owner(seg, active)].states[seg.id]

    def client_weights(self, client):
        rt = self.runtimes[client]
        return segment_weights([rt.states[s.id] for s in self.plan.replicated_segments])

    def close(self):
        self.fabric.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- weight sync ------------------------------------------------------

    def handoff(self, prev, cur):
        """Bring ``cur``'s copy of the shared client segments up to ``prev``'s."""
        segs = self.plan.replicated_segments
        weights = self.client_weights(prev)
        if self.sync_mode == SERVER_MEDIATED:
            self.fabric.endpoint(prev, "coordinator").send(Frame(FrameType.WEIGHTS, self.step_no, tensors=weights))
            got = self.fabric.endpoint("coordinator", prev).receive(FrameType.WEIGHTS)
            self.fabric.endpoint("coordinator", cur).send(Frame(FrameType.WEIGHTS, self.step_no, tensors=got.tensors))
            frame = self.fabric.endpoint(cur, "coordinator").receive(FrameType.WEIGHTS)
        elif self.sync_mode == PEER_TO_PEER:
            self.fabric.endpoint(prev, cur).send(Frame(FrameType.WEIGHTS, self.step_no, tensors=weights))
            frame = self.fabric.endpoint(cur, prev).receive(FrameType.WEIGHTS)
        else:
            raise SplitNNError(f"unknown weight sync mode {self.sync_mode!r}")
        load_weights([self.runtimes[cur].states[s.id] for s in segs], frame.tensors)
        self.handoffs += 1

    # -- one step ---------------------------------------------------------

    def _batches(self, active, lo, hi, fabric):
        plan = self.plan
        if plan.topology_kind in JOINT:
            for c in plan.clients:
                fabric.endpoint("coordinator", c).send(
                    Frame(FrameType.CONTROL, self.step_no, opcode=Opcode.BATCH_RANGE, args=(lo, hi)))
            out = {}
            for c in plan.clients:
                start, stop = fabric.endpoint(c, "coordinator").receive(FrameType.CONTROL).args
                out[c] = self.runtimes[c].data.features[start:stop]
            return out
        return {active: self.runtimes[active].data.features[lo:hi]}

    def _forward(self, active, batches, labels, fabric, train):
        """Forward through every segment. Returns {loss segment id: (logits, loss, grad)}."""
        plan = self.plan
        ushaped = plan.topology_kind == TopologyKind.USHAPED
        kept = {}  # (src, dst) -> tensor that stayed inside one role
        results = {}
        source = active if plan.topology_kind in HORIZONTAL else plan.label_source
        step = self.step_no
        for seg in plan.segments:
            me = self.owner(seg, active)
            ledger = self.ledgers[me] if train else None
            role = me
            try:
                if seg.reads_data:
                    x = batches[me]
                else:
                    xs = []
                    for src_id in seg.inputs:
                        src = plan.segment(src_id)
                        them = self.owner(src, active)
                        if them == me:
                            xs.append(kept.pop((src_id, seg.id)))
                        else:
                            ftype = FrameType.LOGITS if ushaped and seg.has_loss else FrameType.ACTIVATION
                            xs.append(fabric.endpoint(me, them).receive(ftype).tensor)
                    x = xs if len(xs) > 1 else xs[0]
                states = self.states(seg, active)
                out = _run_layers(states, x, ledger, train)

                if seg.has_loss:
                    if train:
                        if me == source:
                            y = labels[:, self._task(seg)] if labels.ndim == 2 else labels
                        else:
                            y = fabric.endpoint(me, source).receive(FrameType.LABELS).labels
                        loss, grad = _loss(states[-1], out, y, ledger)
                        results[seg.id] = (out, loss, grad, y)
                    else:
                        results[seg.id] = (out, None, None, None)
                for cons in plan.consumers(seg.id):
                    them = self.owner(cons, active)
                    if them == me:
                        kept[(seg.id, cons.id)] = out
                    else:
                        ftype = FrameType.LOGITS if ushaped and cons.has_loss else FrameType.ACTIVATION
                        fabric.endpoint(me, them).send(Frame(ftype, step, tensors=(out,)))
                if seg.reads_data and me == source and train:
                    # labels follow the activations and go only to loss segments held elsewhere
                    for loss_seg in plan.loss_segments:
                        dest = self.owner(loss_seg, active)
                        if dest != me:
                            y = labels[:, self._task(loss_seg)] if labels.ndim == 2 else labels
                            fabric.endpoint(me, dest).send(Frame(FrameType.LABELS, step, labels=y))
            except StepError:
                raise
            except SplitNNError as exc:
                raise StepError(role, f"forward of segment {seg.id}", exc) from exc
        return results

    def _task(self, seg):
        for j, (_, head) in enumerate(self.plan.task_heads):
            if head == seg.id:
                return j
        return 0

    def _backward(self, active, results):
        plan = self.plan
        fabric = self.fabric
        step = self.step_no
        kept = {}
        for seg in reversed(plan.segments):
            me = self.owner(seg, active)
            try:
                if seg.has_loss:
                    g = results[seg.id][2]
                else:
                    parts = []
                    for cons in plan.consumers(seg.id):
                        them = self.owner(cons, active)
                        if them == me:
                            parts.append(kept.pop((cons.id, seg.id)))
                        else:
                            parts.append(fabric.endpoint(me, them).receive(FrameType.GRADIENT).tensor)
                    g = parts[0]
                    for p in parts[1:]:
                        g = g + p
                    if len(parts) > 1 and plan.merge == "mean":
                        g = g / g.dtype.type(len(parts))
                g = _backprop(self.states(seg, active), g, self.lr, self.ledgers[me])
                if seg.reads_data:
                    continue
                grads = g if len(seg.inputs) > 1 else [g]
                for src_id, gi in zip(seg.inputs, grads):
                    them = self.owner(plan.segment(src_id), active)
                    if them == me:
                        kept[(seg.id, src_id)] = gi
                    else:
                        fabric.endpoint(me, them).send(Frame(FrameType.GRADIENT, step, tensors=(gi,)))
            except StepError:
                raise
            except SplitNNError as exc:
                raise StepError(me, f"backward of segment {seg.id}", exc) from exc

    def run_step(self, slot: StepSlot) -> TrainStepReport:
        plan = self.plan
        before = _snapshot(self.ledgers)
        active = plan.clients[slot.client] if slot.client is not None else plan.clients[0]
        handoff = False
        if plan.topology_kind in HORIZONTAL:
            if self.last_client is not None and self.last_client != active and self.sync_mode:
                self.handoff(self.last_client, active)
                handoff = True
            self.last_client = active
        batches = self._batches(active, slot.start, slot.stop, self.fabric)
        if self.track_inputs:
            for x in batches.values():
                self.raw_tags |= raw_tags(x)
        source = active if plan.topology_kind in HORIZONTAL else plan.label_source
        labels = np.asarray(self.runtimes[source].labels[slot.start:slot.stop])
        results = self._forward(active, batches, labels, self.fabric, train=True)
        self._backward(active, results)

        losses, correct = [], 0
        for seg in plan.loss_segments:
            logits, loss, _, y = results[seg.id]
            losses.append(loss)
            correct += int((nn.predict_classes(logits) == y).sum())
        for l in self.ledgers.values():
            l.mark()
        flops, nbytes = _deltas(before, self.ledgers)
        report = TrainStepReport(self.step_no, slot.epoch, losses, correct, slot.size, flops, nbytes,
                                 _snapshot(self.ledgers), client=active,
                                 turn_ended_early=slot.turn_ended_early, handoff=handoff)
        self.step_no += 1
        return report

    def schedule(self, epochs=1):
        sizes = [len(self.runtimes[c].data) for c in self.plan.clients]
        return split_schedule(self.plan, sizes, self.batch, epochs, self.batches_per_turn)

    def run_epoch(self, schedule=None):
        if schedule is None:
            schedule = [StepSlot(self.epoch_no, s.client, s.start, s.stop, s.turn_ended_early)
                        for s in self.schedule(1)]
        reports = [self.run_step(slot) for slot in schedule]
        self.epoch_no += 1
        return reports

    # -- inference --------------------------------------------------------

    def predict(self, features, active=None):
        """Forward-only logits for ``features`` per loss segment, moved over a
        private in-process fabric so training ledgers stay untouched."""
        plan = self.plan
        if active is None:
            active = self.last_client or plan.clients[0]
        roles = [r.id for r in plan.roles]
        fabric = Fabric(roles, new_ledgers(roles), kind="inprocess", record=False)
        features = np.asarray(features, dtype=nn.DTYPE)
        outs = {seg.id: [] for seg in plan.loss_segments}
        saved, self.fabric = self.fabric, fabric
        try:
            for lo, hi in batch_ranges(len(features), self.batch):
                if plan.topology_kind in JOINT:
                    batches = {c: features[lo:hi, slice(*plan.segment(f"{c}.tower").feature_slice)]
                               for c in plan.clients}
                else:
                    batches = {active: features[lo:hi]}
                res = self._forward(active, batches, None, fabric, train=False)
                for k, v in res.items():
                    outs[k].append(v[0])
        finally:
            self.fabric = saved
        return [np.concatenate(outs[s.id]) for s in plan.loss_segments]

    def evaluate(self, features, labels, active=None):
        """Accuracy per task (a list; one entry outside MultiTask)."""
        labels = np.asarray(labels)
        logits = self.predict(features, active)
        accs = []
        for j, lg in enumerate(logits):
            y = labels[:, j] if labels.ndim == 2 else labels
            accs.append(float((nn.predict_classes(lg) == y).mean()) if len(y) else 0.0)
        return accs


def run_split_step(trainer: SplitTrainer, slot: StepSlot) -> TrainStepReport:
    return trainer.run_step(slot)


def run_split_epoch(trainer: SplitTrainer, schedule=None):
    return trainer.run_epoch(schedule)


# ---------------------------------------------------------------------------
# Monolithic oracle
# ---------------------------------------------------------------------------

class MonolithicNet:
    """Single-machine reference: optional input towers over column slices,
    concatenated into a trunk, followed by one or more loss heads."""

    def __init__(self, trunk=(), *, towers=(), heads=(), seed=0, merge="sum"):
        self.towers = [make_states(t, seed) for t in towers]
        self.trunk = make_states(trunk, seed)
        self.heads = [make_states(h, seed) for h in heads]
        self.merge = merge
        self.widths = [t[0].spec.in_dim for t in self.towers]

    @classmethod
    def from_plan(cls, plan: PartitionPlan, seed=0):
        from .topology import monolithic_equivalent
        eq = monolithic_equivalent(plan)
        if plan.topology_kind == TopologyKind.VERTICAL:
            towers, trunk = eq
            return cls(trunk, towers=towers, seed=seed)
        if plan.topology_kind == TopologyKind.MULTITASK:
            towers = eq[0][0]
            shared = [eq[0][1][0]]
            heads = [h[1:] for _, h in eq]
            return cls(shared, towers=towers, heads=heads, seed=seed, merge=plan.merge)
        return cls(eq, seed=seed)

    def _split_columns(self, x):
        cols, lo = [], 0
        for w in self.widths:
            cols.append(np.ascontiguousarray(x[:, lo:lo + w]))
            lo += w
        return cols

    def _trunk_out(self, x, train):
        if self.towers:
            x = [_run_layers(t, c, None, train) for t, c in zip(self.towers, self._split_columns(x))]
        return _run_layers(self.trunk, x, None, train)

    def logits(self, x):
        h = self._trunk_out(np.asarray(x, dtype=nn.DTYPE), train=False)
        if not self.heads:
            return [h]
        return [_run_layers(head, h, None, False) for head in self.heads]

    def train_step(self, x, y, lr):
        """One SGD step on batch (x, y); returns the per-task losses."""
        x = np.asarray(x, dtype=nn.DTYPE)
        y = np.asarray(y)
        scratch = ResourceLedger("oracle")
        h = self._trunk_out(x, train=True)
        if not self.heads:
            loss, g = _loss(self.trunk[-1], h, y, None)
            losses = [loss]
        else:
            grads, losses = [], []
            for j, head in enumerate(self.heads):
                out = _run_layers(head, h, None, True)
                loss, gj = _loss(head[-1], out, y[:, j], None)
                losses.append(loss)
                grads.append(_backprop(head, gj, lr, scratch))
            g = grads[0]
            for p in grads[1:]:
                g = g + p
            if len(grads) > 1 and self.merge == "mean":
                g = g / g.dtype.type(len(grads))
        g = _backprop(self.trunk, g, lr, scratch)
        if self.towers:
            for t, gi in zip(self.towers, g):
                _backprop(t, gi, lr, scratch)
        return losses

    def evaluate(self, x, y):
        y = np.asarray(y)
        accs = []
        for j, lg in enumerate(self.logits(x)):
            yj = y[:, j] if y.ndim == 2 else y
            accs.append(float((nn.predict_classes(lg) == yj).mean()))
        return accs

    def all_weights(self):
        groups = self.towers + [self.trunk] + self.heads
        return segment_weights(groups)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

class _BaselineTrainer:
    def __init__(self, network, data, *, lr=0.05, seed=0, batch=32, transport="inprocess", addresses=()):
        self.network = list(name_layers(network))
        self.lr = lr
        self.batch = batch
        self.data = list(data)
        self.clients = [f"client{i}" for i in range(len(self.data))]
        roles = self.clients + ["server"]
        self.ledgers = new_ledgers(roles)
        self.fabric = Fabric(roles, self.ledgers, kind=transport, addresses=addresses)
        self.models = {c: make_states(self.network, seed) for c in self.clients}
        self.global_model = make_states(self.network, seed)
        self.step_no = 0
        self.epoch_no = 0

    def _local_step(self, client, lo, hi, lr):
        states = self.models[client]
        d = self.data[self.clients.index(client)]
        ledger = self.ledgers[client]
        x = d.features[lo:hi]
        y = np.asarray(d.labels[lo:hi])
        logits = _run_layers(states, x, ledger, True)
        loss, g = _loss(states[-1], logits, y, ledger)
        _backprop(states, g, lr, ledger)
        return loss, int((nn.predict_classes(logits) == y).sum())

    def _broadcast(self, targets):
        weights = segment_weights([self.global_model])
        for c in targets:
            self.fabric.endpoint("server", c).send(Frame(FrameType.WEIGHTS, self.step_no, tensors=weights))
        for c in targets:
            frame = self.fabric.endpoint(c, "server").receive(FrameType.WEIGHTS)
            load_weights([self.models[c]], frame.tensors)

    def evaluate(self, features, labels):
        logits = _run_layers(self.global_model, np.asarray(features, dtype=nn.DTYPE), None, False)
        return [float((nn.predict_classes(logits) == np.asarray(labels)).mean())]

    def close(self):
        self.fabric.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FederatedTrainer(_BaselineTrainer):
    """Federated averaging: local epochs, shard-size weighted weight average."""

    def __init__(self, network, data, *, local_epochs=1, **kw):
        super().__init__(network, data, **kw)
        self.local_epochs = local_epochs

    def run_round(self):
        reports = []
        active = []
        for c, d in zip(self.clients, self.data):
            if len(d) == 0:
                log.warning("federated round: %s has an empty shard and is skipped", c)
                continue
            active.append(c)
            for _ in range(self.local_epochs):
                for lo, hi in batch_ranges(len(d), self.batch):
                    before = _snapshot(self.ledgers)
                    loss, correct = self._local_step(c, lo, hi, self.lr)
                    for l in self.ledgers.values():
                        l.mark()
                    flops, nbytes = _deltas(before, self.ledgers)
                    reports.append(TrainStepReport(self.step_no, self.epoch_no, [loss], correct, hi - lo,
                                                   flops, nbytes, _snapshot(self.ledgers), client=c))
                    self.step_no += 1
        before = _snapshot(self.ledgers)
        sizes = {}
        uploads = {}
        for c in active:
            weights = segment_weights([self.models[c]])
            self.fabric.endpoint(c, "server").send(Frame(FrameType.WEIGHTS, self.step_no, tensors=weights))
        for c in active:
            uploads[c] = self.fabric.endpoint("server", c).receive(FrameType.WEIGHTS).tensors
            sizes[c] = len(self.data[self.clients.index(c)])
        if active:
            load_weights([self.global_model], fedavg([uploads[c] for c in active], [sizes[c] for c in active]))
            self._broadcast(active)
        if reports:
            flops, nbytes = _deltas(before, self.ledgers)
            last = reports[-1]
            for r in nbytes:
                last.bytes_delta[r] += nbytes[r]
            last.cumulative = _snapshot(self.ledgers)
            for l in self.ledgers.values():
                l.history[-1] = l.totals()
        self.epoch_no += 1
        return reports


def fedavg(weight_sets, sizes):
    """Shard-size weighted mean of per-client weight lists, accumulated in float64."""
    total = sum(sizes)
    if total <= 0:
        raise InputError("federated average over zero samples")
    out = []
    for tensors in zip(*weight_sets):
        acc = np.zeros(tensors[0].shape, dtype=np.float64)
        for t, n in zip(tensors, sizes):
            acc += t.astype(np.float64) * n
        out.append((acc / total).astype(nn.DTYPE))
    return out


class LargeBatchTrainer(_BaselineTrainer):
    """Synchronous SGD: each step, clients send gradients of one local batch;
    the server applies their mean and broadcasts the new weights."""

    def run_epoch(self):
        queues = [batch_ranges(len(d), self.batch) for d in self.data]
        holders = [c for c, d in zip(self.clients, self.data) if len(d)]
        reports = []
        for s in range(max((len(q) for q in queues), default=0)):
            before = _snapshot(self.ledgers)
            losses, correct, size, parts = [], 0, 0, []
            for c, q in zip(self.clients, queues):
                if s >= len(q):
                    continue
                lo, hi = q[s]
                loss, ok = self._local_step(c, lo, hi, 0.0)
                losses.append(loss)
                correct += ok
                size += hi - lo
                grads = [g.astype(nn.DTYPE, copy=False) for st in self.models[c] for g in st.grads]
                self.fabric.endpoint(c, "server").send(Frame(FrameType.GRADIENT, self.step_no, tensors=grads))
                parts.append(c)
            received = [self.fabric.endpoint("server", c).receive(FrameType.GRADIENT).tensors for c in parts]
            mean = [sum_tensors(ts) / nn.DTYPE(len(ts)) for ts in zip(*received)]
            slots = [(st, i) for st in self.global_model for i in range(len(st.weights))]
            for (st, i), g in zip(slots, mean):
                st.weights[i] -= st.weights[i].dtype.type(self.lr) * g
            self._broadcast(holders)
            for l in self.ledgers.values():
                l.mark()
            flops, nbytes = _deltas(before, self.ledgers)
            reports.append(TrainStepReport(self.step_no, self.epoch_no, [float(np.mean(losses))], correct, size,
                                           flops, nbytes, _snapshot(self.ledgers)))
            self.step_no += 1
        self.epoch_no += 1
        return reports

    run_round = run_epoch


def sum_tensors(ts):
    acc = np.array(ts[0], dtype=nn.DTYPE)
    for t in ts[1:]:
        acc = acc + t
    return acc


def run_federated_round(trainer: FederatedTrainer):
    return trainer.run_round()


def run_largebatch_sgd_round(trainer: LargeBatchTrainer):
    return trainer.run_epoch()
