"""Partition plans: which role owns which run of layers, and how they connect.

A plan is a list of segments in topological order. Segments that read raw data
have no inputs; every other segment names the segments it consumes. In the
horizontal topologies (Vanilla, UShaped, ExtendedVanilla) the data-holding
segments are *replicated*: each client owns its own copy of the same layers and
only the active client's copy runs in a given step.

Cut points count layers: a cut at ``k`` places layers ``[0, k)`` before the cut.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from . import nn_core as nn
from .errors import PlanError, SplitNNError


class TopologyKind(str, Enum):
    VANILLA = "vanilla"
    USHAPED = "ushaped"
    VERTICAL = "vertical"
    EXTENDED_VANILLA = "extended_vanilla"
    MULTITASK = "multitask"
    MULTIHOP = "multihop"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for kind in cls:
            if kind.value == key or kind.name.lower() == key or kind.value.replace("_", "") == key:
                return kind
        raise SplitNNError(f"unknown topology {value!r}; choose from {[k.value for k in cls]}")


HORIZONTAL = (TopologyKind.VANILLA, TopologyKind.USHAPED, TopologyKind.EXTENDED_VANILLA)
JOINT = (TopologyKind.VERTICAL, TopologyKind.MULTITASK)

CLIENT, SERVER, COORDINATOR = "client", "server", "coordinator"


@dataclass(frozen=True)
class Role:
    id: str
    kind: str


@dataclass(frozen=True)
class Segment:
    id: str
    layers: tuple
    owner: str
    inputs: tuple = ()
    replicated: bool = False
    # column range of the raw feature matrix read by a data segment (vertical only)
    feature_slice: Optional[tuple] = None

    @property
    def reads_data(self):
        return not self.inputs

    @property
    def has_loss(self):
        return bool(self.layers) and isinstance(self.layers[-1], nn.SoftmaxCrossEntropy)


@dataclass(frozen=True)
class PartitionPlan:
    topology_kind: TopologyKind
    segments: tuple
    roles: tuple
    label_holder: str
    num_clients: int
    input_shape: tuple
    task_heads: tuple = ()  # (server role id, head segment id) per task
    clients: tuple = ()  # data-holding client role ids
    label_source: str = ""  # role that owns the labels natively
    merge: str = "sum"

    @property
    def edges(self):
        return tuple((src, seg.id) for seg in self.segments for src in seg.inputs)

    def segment(self, seg_id) -> Segment:
        for seg in self.segments:
            if seg.id == seg_id:
                return seg
        raise KeyError(seg_id)

    def consumers(self, seg_id):
        return [s for s in self.segments if seg_id in s.inputs]

    def role(self, role_id) -> Role:
        for r in self.roles:
            if r.id == role_id:
                return r
        raise KeyError(role_id)

    @property
    def loss_segments(self):
        return [s for s in self.segments if s.has_loss]

    @property
    def replicated_segments(self):
        return [s for s in self.segments if s.replicated]

    @property
    def client_roles(self):
        return [r.id for r in self.roles if r.kind == CLIENT]

    def data_shape(self, seg: Segment):
        if self.topology_kind in JOINT:
            lo, hi = seg.feature_slice
            return (hi - lo,)
        return tuple(self.input_shape)

    def in_shapes(self):
        """Per-sample input shape of every segment, keyed by segment id."""
        out_shapes, in_shapes = {}, {}
        for seg in self.segments:
            if seg.reads_data:
                shape = self.data_shape(seg)
            elif len(seg.inputs) == 1:
                shape = out_shapes[seg.inputs[0]]
            else:
                shape = [out_shapes[i] for i in seg.inputs]
            in_shapes[seg.id] = shape
            _, out_shapes[seg.id] = nn.chain_shapes(seg.layers, shape)
        return in_shapes


def name_layers(layers, prefix="L"):
    """Give unnamed or default-named layers unique names based on their position."""
    named = []
    seen = set()
    for i, spec in enumerate(layers):
        default = type(spec).__dataclass_fields__["name"].default
        name = spec.name
        if name == default or name in seen:
            name = f"{prefix}{i}.{type(spec).__name__.lower()}"
            spec = nn.with_name(spec, name)
        seen.add(name)
        named.append(spec)
    return tuple(named)


def _check_cuts(cuts, n_layers, how_many, kind, violations):
    cuts = list(cuts)
    if how_many is not None and len(cuts) != how_many:
        violations.append(f"{kind.value}: expected {how_many} cut point(s), got {len(cuts)}")
        return False
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        violations.append(f"{kind.value}: cut points must be strictly increasing, got {cuts}")
        return False
    if any(c < 1 or c >= n_layers for c in cuts):
        violations.append(f"{kind.value}: cut points must lie in [1, {n_layers - 1}], got {cuts}")
        return False
    return True


def build_plan(
    topology_kind,
    full_network: Sequence,
    cut_points: Sequence[int] = (),
    num_clients: int = 1,
    *,
    input_shape=None,
    towers: Sequence[Sequence] = (),
    heads: Sequence[Sequence] = (),
    merge: str = "sum",
) -> PartitionPlan:
    """Split ``full_network`` into owned segments for ``topology_kind``.

    ``full_network`` ends with a SoftmaxCrossEntropy layer for the chain
    topologies. For Vertical and MultiTask it is the part after the cut, starting
    with the Concat layer; per-client ``towers`` hold the layers before the cut
    (their first Dense ``in_dim`` fixes each client's feature width). MultiTask
    takes its per-server ``heads`` separately, and ``full_network`` is then the
    shared Concat alone.
    """
    kind = TopologyKind.parse(topology_kind)
    layers = name_layers(full_network)
    cuts = [int(c) for c in cut_points]
    violations = []
    if num_clients < 1:
        violations.append("num_clients must be >= 1")
    if merge not in ("sum", "mean"):
        violations.append(f"merge must be 'sum' or 'mean', got {merge!r}")

    coordinator = Role("coordinator", COORDINATOR)

    if kind in HORIZONTAL or kind == TopologyKind.MULTIHOP:
        if input_shape is None:
            first = layers[0] if layers else None
            if isinstance(first, nn.Dense):
                input_shape = (first.in_dim,)
            else:
                violations.append(f"{kind.value}: input_shape is required when the first layer is not Dense")
        if not layers or not isinstance(layers[-1], nn.SoftmaxCrossEntropy):
            violations.append(f"{kind.value}: network must end with a SoftmaxCrossEntropy layer")
        if any(isinstance(s, nn.Concat) for s in layers):
            violations.append(f"{kind.value}: Concat layers only belong in Vertical/MultiTask plans")
        expected = {TopologyKind.VANILLA: 1, TopologyKind.USHAPED: 2, TopologyKind.EXTENDED_VANILLA: 2}.get(kind)
        if kind == TopologyKind.MULTIHOP and len(cuts) < 2:
            violations.append("multihop: needs >= 2 cut points (>= 2 client hops)")
        if violations or not _check_cuts(cuts, len(layers), expected, kind, violations):
            raise PlanError(violations)

        bounds = [0] + cuts + [len(layers)]
        pieces = [layers[a:b] for a, b in zip(bounds, bounds[1:])]
        clients = tuple(f"client{i}" for i in range(num_clients))
        server = Role("server", SERVER)

        if kind == TopologyKind.VANILLA:
            roles = tuple(Role(c, CLIENT) for c in clients) + (server, coordinator)
            segments = (
                Segment("client.front", pieces[0], clients[0], replicated=True),
                Segment("server.body", pieces[1], "server", ("client.front",)),
            )
            label_holder = "server"
        elif kind == TopologyKind.USHAPED:
            roles = tuple(Role(c, CLIENT) for c in clients) + (server, coordinator)
            segments = (
                Segment("client.front", pieces[0], clients[0], replicated=True),
                Segment("server.body", pieces[1], "server", ("client.front",)),
                Segment("client.tail", pieces[2], clients[0], ("server.body",), replicated=True),
            )
            label_holder = clients[0]
        elif kind == TopologyKind.EXTENDED_VANILLA:
            roles = tuple(Role(c, CLIENT) for c in clients) + (Role("relay", CLIENT), server, coordinator)
            segments = (
                Segment("client.front", pieces[0], clients[0], replicated=True),
                Segment("relay.mid", pieces[1], "relay", ("client.front",)),
                Segment("server.body", pieces[2], "server", ("relay.mid",)),
            )
            label_holder = "server"
        else:
            hops = tuple(f"hop{i}" for i in range(len(cuts)))
            roles = tuple(Role(h, CLIENT) for h in hops) + (server, coordinator)
            segments = []
            prev = ()
            for i, hop in enumerate(hops):
                segments.append(Segment(f"{hop}.seg", pieces[i], hop, prev))
                prev = (f"{hop}.seg",)
            segments.append(Segment("server.body", pieces[-1], "server", prev))
            segments = tuple(segments)
            clients = hops[:1]
            num_clients = len(hops)
            label_holder = "server"
        plan = PartitionPlan(kind, segments, roles, label_holder, num_clients, tuple(input_shape),
                             clients=clients, label_source=clients[0], merge=merge)

    else:
        if cuts:
            violations.append(f"{kind.value}: cut points are implied by the towers; got {cuts}")
        towers = [name_layers(t, prefix=f"T{i}.") for i, t in enumerate(towers)]
        if len(towers) < 2:
            violations.append(f"{kind.value}: needs >= 2 client towers, got {len(towers)}")
        if num_clients != len(towers):
            violations.append(f"{kind.value}: num_clients ({num_clients}) != number of towers ({len(towers)})")
        if not layers or not isinstance(layers[0], nn.Concat):
            violations.append(f"{kind.value}: the post-cut network must start with a Concat layer")
        elif layers[0].input_arity != len(towers):
            violations.append(
                f"{kind.value}: concat layer {layers[0].name!r} has arity {layers[0].input_arity} "
                f"but there are {len(towers)} client segments")
        widths = []
        for i, t in enumerate(towers):
            if not t or not isinstance(t[0], nn.Dense):
                violations.append(f"{kind.value}: tower {i} must start with a Dense layer")
            else:
                widths.append(t[0].in_dim)
        if kind == TopologyKind.MULTITASK:
            if len(layers) != 1:
                violations.append("multitask: the shared post-cut network must be the Concat layer alone")
            if len(heads) < 2:
                violations.append(f"multitask: needs >= 2 task heads, got {len(heads)}")
        elif layers and not isinstance(layers[-1], nn.SoftmaxCrossEntropy):
            violations.append("vertical: network must end with a SoftmaxCrossEntropy layer")
        if violations:
            raise PlanError(violations)

        clients = tuple(f"client{i}" for i in range(len(towers)))
        offsets = [0]
        for w in widths:
            offsets.append(offsets[-1] + w)
        segments = [
            Segment(f"{c}.tower", towers[i], c, feature_slice=(offsets[i], offsets[i + 1]))
            for i, c in enumerate(clients)
        ]
        tower_ids = tuple(s.id for s in segments)
        task_heads = ()
        if kind == TopologyKind.VERTICAL:
            servers = (Role("server", SERVER),)
            segments.append(Segment("server.body", layers, "server", tower_ids))
            label_holder = "server"
        else:
            servers = tuple(Role(f"server{j}", SERVER) for j in range(len(heads)))
            for j, head in enumerate(heads):
                head = name_layers(head, prefix=f"H{j}.")
                if not head or not isinstance(head[-1], nn.SoftmaxCrossEntropy):
                    raise PlanError([f"multitask: head {j} must end with a SoftmaxCrossEntropy layer"])
                segments.append(Segment(f"server{j}.head", (layers[0],) + head, f"server{j}", tower_ids))
            task_heads = tuple((f"server{j}", f"server{j}.head") for j in range(len(heads)))
            label_holder = servers[0].id
        roles = tuple(Role(c, CLIENT) for c in clients) + servers + (coordinator,)
        plan = PartitionPlan(kind, tuple(segments), roles, label_holder, len(towers), (offsets[-1],),
                             task_heads=task_heads, clients=clients, label_source=clients[0], merge=merge)

    problems = validate_plan(plan)
    if problems:
        raise PlanError(problems)
    return plan


def validate_plan(plan: PartitionPlan) -> list:
    """Every invariant violation of ``plan``; an empty list means the plan is valid."""
    v = []
    kind = plan.topology_kind
    ids = [r.id for r in plan.roles]
    if len(set(ids)) != len(ids):
        v.append(f"role ids are not unique: {ids}")
    seg_ids = [s.id for s in plan.segments]
    if len(set(seg_ids)) != len(seg_ids):
        v.append(f"segment ids are not unique: {seg_ids}")
    kinds = {r.id: r.kind for r in plan.roles}
    for seg in plan.segments:
        if not seg.layers:
            v.append(f"segment {seg.id!r} has no layers")
        if seg.owner not in kinds:
            v.append(f"segment {seg.id!r} is owned by unknown role {seg.owner!r}")
        for src in seg.inputs:
            if src not in seg_ids or seg_ids.index(src) >= seg_ids.index(seg.id):
                v.append(f"segment {seg.id!r} consumes {src!r} which does not precede it")
        if seg.reads_data and kinds.get(seg.owner) != CLIENT:
            v.append(f"raw data must stay at clients: data segment {seg.id!r} is owned by {seg.owner!r}")
        if len(seg.inputs) > 1:
            first = seg.layers[0] if seg.layers else None
            if not isinstance(first, nn.Concat):
                v.append(f"segment {seg.id!r} has {len(seg.inputs)} inputs but does not start with Concat")
            elif first.input_arity != len(seg.inputs):
                v.append(f"concat layer {first.name!r} has arity {first.input_arity} "
                         f"but {len(seg.inputs)} client segments feed it")
        for spec in seg.layers[:-1]:
            if isinstance(spec, nn.SoftmaxCrossEntropy):
                v.append(f"segment {seg.id!r}: loss layer {spec.name!r} must be last")
    if plan.label_holder not in kinds:
        v.append(f"label holder {plan.label_holder!r} is not a role")
    if plan.merge not in ("sum", "mean"):
        v.append(f"merge must be 'sum' or 'mean', got {plan.merge!r}")

    names = [spec.name for seg in plan.segments for spec in seg.layers]
    if kind == TopologyKind.MULTITASK and plan.segments:
        shared = [s.layers[0].name for s in plan.segments if len(s.inputs) > 1]
        names = [n for n in names if n not in shared] + shared[:1]
    if len(set(names)) != len(names):
        v.append("layer names must be unique within a plan")

    data = [s for s in plan.segments if s.reads_data]
    servers = [r.id for r in plan.roles if r.kind == SERVER]
    losses = plan.loss_segments
    if kind == TopologyKind.VANILLA:
        if len(plan.segments) != 2 or len(data) != 1:
            v.append("vanilla: expected exactly one cut (one client segment feeding one server segment)")
        if plan.label_holder != "server" or not servers:
            v.append("vanilla: labels are held by the server")
    elif kind == TopologyKind.USHAPED:
        if len(plan.segments) != 3:
            v.append("ushaped: expected client front, server middle, client tail")
        else:
            a, b, c = plan.segments
            if kinds.get(a.owner) != CLIENT or kinds.get(c.owner) != CLIENT or a.owner != c.owner:
                v.append("ushaped: the same client must own the first and last segments")
            if kinds.get(b.owner) != SERVER:
                v.append("ushaped: the server owns the middle segment")
        if kinds.get(plan.label_holder) != CLIENT:
            v.append("labels must stay at client: ushaped label_holder must be a client")
    elif kind == TopologyKind.VERTICAL:
        if len(data) < 2:
            v.append("vertical: needs >= 2 client segments")
        if len(plan.segments) != len(data) + 1:
            v.append("vertical: all client segments feed one concat then the server segment")
    elif kind == TopologyKind.EXTENDED_VANILLA:
        if len(plan.segments) != 3:
            v.append("extended_vanilla: expected client front, intermediate client, server")
        else:
            mid = plan.segments[1]
            if kinds.get(mid.owner) != CLIENT or mid.replicated:
                v.append("extended_vanilla: the intermediate segment must be owned by a single client")
            if kinds.get(plan.segments[2].owner) != SERVER:
                v.append("extended_vanilla: the final segment must be owned by the server")
    elif kind == TopologyKind.MULTITASK:
        heads = [s for s in plan.segments if not s.reads_data]
        if len(heads) < 2:
            v.append("multitask: needs >= 2 server-owned head segments")
        if any(kinds.get(h.owner) != SERVER for h in heads):
            v.append("multitask: heads must be owned by servers")
        if len({h.owner for h in heads}) != len(heads):
            v.append("multitask: each head needs its own server")
        if len(plan.task_heads) != len(heads):
            v.append("multitask: task_heads must list every head")
    elif kind == TopologyKind.MULTIHOP:
        chain = [s for s in plan.segments if kinds.get(s.owner) == CLIENT]
        if len(chain) < 2:
            v.append("multihop: needs >= 2 client segments in a chain")
        for prev, seg in zip(plan.segments, plan.segments[1:]):
            if seg.inputs != (prev.id,):
                v.append(f"multihop: segment {seg.id!r} must consume {prev.id!r}")
        if plan.segments and kinds.get(plan.segments[-1].owner) != SERVER:
            v.append("multihop: the final segment must be owned by the server")
    if kind != TopologyKind.MULTITASK and len(losses) != 1:
        v.append(f"expected exactly one loss segment, found {len(losses)}")
    if kind == TopologyKind.MULTITASK and len(losses) != len([s for s in plan.segments if not s.reads_data]):
        v.append("multitask: every head must end with its own loss layer")
    for seg in losses:
        owner = seg.owner
        if kind in (TopologyKind.USHAPED,) and kinds.get(owner) != CLIENT:
            v.append("labels must stay at client: the ushaped loss segment must be client-owned")

    if not v:
        try:
            plan.in_shapes()
        except SplitNNError as exc:
            v.append(f"shape propagation failed: {exc}")
    return v


def monolithic_equivalent(plan: PartitionPlan):
    """The single-machine network(s) obtained by stitching the plan's segments.

    Chain topologies return one flat layer list. Vertical returns
    ``(towers, trunk)``. MultiTask returns one ``(towers, head)`` pair per task,
    all sharing the same tower specs.
    """
    kind = plan.topology_kind
    if kind in HORIZONTAL or kind == TopologyKind.MULTIHOP:
        return [spec for seg in plan.segments for spec in seg.layers]
    towers = [list(s.layers) for s in plan.segments if s.reads_data]
    if kind == TopologyKind.VERTICAL:
        return towers, list(plan.segments[-1].layers)
    return [(towers, list(s.layers)) for s in plan.segments if not s.reads_data]
