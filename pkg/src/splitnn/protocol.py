"""Wire format and transports for every message that crosses a role boundary.

Frame layout (little-endian)::

    magic      4s   b"SPLN"
    version    u8   1
    frame_type u8   1=Activation 2=Gradient 3=Weights 4=Logits 5=Labels 6=Control
    step       u32
    role_tag   u16  index of the sending role
    length     u32  payload byte count
    payload

Tensor payloads are ``rank:u32, dims:u32*rank, values:f32*numel``; frames of
types 1-4 carry one or more of them back to back. Labels payloads are
``count:u32, ids:u16*count``. Control payloads are ``opcode:u8`` followed by
zero or more u32 arguments.
"""

from __future__ import annotations

import hashlib
import math
import queue
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import (BadMagic, ChannelClosed, LengthMismatch, NonFiniteError,
                     SplitNNError, UnknownFrameType, UnsupportedVersion)

MAGIC = b"SPLN"
VERSION = 1
HEADER = struct.Struct("<4sBBIHI")
HEADER_SIZE = HEADER.size  # 16


class FrameType(IntEnum):
    ACTIVATION = 1
    GRADIENT = 2
    WEIGHTS = 3
    LOGITS = 4
    LABELS = 5
    CONTROL = 6


TENSOR_FRAMES = (FrameType.ACTIVATION, FrameType.GRADIENT, FrameType.WEIGHTS, FrameType.LOGITS)


class Opcode(IntEnum):
    END_EPOCH = 1
    BATCH_RANGE = 2  # args: start, stop
    SHUTDOWN = 3


@dataclass(eq=False)
class Frame:
    frame_type: FrameType
    step: int = 0
    role_tag: int = 0
    tensors: tuple = ()
    labels: np.ndarray = None
    opcode: int = 0
    args: tuple = ()

    def __post_init__(self):
        self.frame_type = FrameType(self.frame_type)

    @property
    def tensor(self):
        return self.tensors[0]

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        if (self.frame_type, self.step, self.role_tag) != (other.frame_type, other.step, other.role_tag):
            return False
        if self.frame_type in TENSOR_FRAMES:
            return len(self.tensors) == len(other.tensors) and all(
                a.shape == b.shape and np.asarray(a, "<f4").tobytes() == np.asarray(b, "<f4").tobytes()
                for a, b in zip(self.tensors, other.tensors))
        if self.frame_type == FrameType.LABELS:
            return np.array_equal(self.labels, other.labels)
        return self.opcode == other.opcode and tuple(self.args) == tuple(other.args)

    def __repr__(self):
        if self.frame_type in TENSOR_FRAMES:
            body = f"tensors={[t.shape for t in self.tensors]}"
        elif self.frame_type == FrameType.LABELS:
            body = f"labels={len(self.labels)}"
        else:
            body = f"opcode={self.opcode}, args={self.args}"
        return f"Frame({self.frame_type.name}, step={self.step}, role_tag={self.role_tag}, {body})"


def tensor_payload_size(shape) -> int:
    return 4 + 4 * len(shape) + 4 * math.prod(shape)


def frame_size(frame_type, shapes=(), labels=0, n_args=0) -> int:
    """Encoded size of a frame, from its content's shapes alone."""
    frame_type = FrameType(frame_type)
    if frame_type in TENSOR_FRAMES:
        return HEADER_SIZE + sum(tensor_payload_size(s) for s in shapes)
    if frame_type == FrameType.LABELS:
        return HEADER_SIZE + 4 + 2 * labels
    return HEADER_SIZE + 1 + 4 * n_args


def _encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("refusing to encode a tensor with non-finite entries")
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode(frame: Frame) -> bytes:
    ft = frame.frame_type
    if ft in TENSOR_FRAMES:
        payload = b"".join(_encode_tensor(t) for t in frame.tensors)
    elif ft == FrameType.LABELS:
        labels = np.asarray(frame.labels)
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
            raise SplitNNError("labels must fit in an unsigned 16-bit field")
        payload = struct.pack("<I", labels.size) + labels.astype("<u2").tobytes()
    else:
        payload = struct.pack(f"<B{len(frame.args)}I", frame.opcode, *frame.args)
    header = HEADER.pack(MAGIC, VERSION, int(ft), frame.step, frame.role_tag, len(payload))
    return header + payload


def _decode_tensor(buf, pos, end):
    if end - pos < 4:
        raise LengthMismatch("tensor payload truncated before rank", pos)
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if end - pos < 4 * rank:
        raise LengthMismatch(f"tensor payload truncated inside {rank} dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * math.prod(dims)
    if end - pos < nbytes:
        raise LengthMismatch(f"tensor values need {nbytes} bytes, {end - pos} present", pos)
    values = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos)
    return values.astype(np.float32).reshape(dims), pos + nbytes


def decode(data: bytes) -> Frame:
    buf = bytes(data)
    if len(buf) < HEADER_SIZE:
        raise LengthMismatch(f"header needs {HEADER_SIZE} bytes, {len(buf)} present", len(buf))
    magic, version, ftype, step, role_tag, length = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}", 4)
    try:
        ft = FrameType(ftype)
    except ValueError:
        raise UnknownFrameType(f"unknown frame type {ftype}", 5) from None
    end = HEADER_SIZE + length
    if len(buf) != end:
        raise LengthMismatch(f"payload_len {length} but {len(buf) - HEADER_SIZE} payload bytes present",
                             HEADER_SIZE)
    pos = HEADER_SIZE
    if ft in TENSOR_FRAMES:
        tensors = []
        while pos < end:
            t, pos = _decode_tensor(buf, pos, end)
            tensors.append(t)
        return Frame(ft, step, role_tag, tensors=tuple(tensors))
    if ft == FrameType.LABELS:
        if length < 4:
            raise LengthMismatch("labels payload truncated before count", pos)
        (count,) = struct.unpack_from("<I", buf, pos)
        if length != 4 + 2 * count:
            raise LengthMismatch(f"labels payload holds {length - 4} bytes for {count} labels", pos + 4)
        labels = np.frombuffer(buf, dtype="<u2", count=count, offset=pos + 4).astype(np.int64)
        return Frame(ft, step, role_tag, labels=labels)
    if length < 1 or (length - 1) % 4:
        raise LengthMismatch(f"control payload of {length} bytes is not opcode + u32 args", pos)
    n_args = (length - 1) // 4
    opcode, *args = struct.unpack_from(f"<B{n_args}I", buf, pos)
    return Frame(ft, step, role_tag, opcode=opcode, args=tuple(args))


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

@dataclass
class TranscriptEntry:
    src: str
    dst: str
    frame_type: FrameType
    step: int
    nbytes: int
    data: bytes


class Endpoint:
    """One role's end of a duplex link. ``send``/``receive`` do the accounting."""

    def __init__(self, owner, peer, ledgers, transcript, role_tag):
        self.owner = owner
        self.peer = peer
        self.ledgers = ledgers
        self.transcript = transcript
        self.role_tag = role_tag
        self.closed = False

    def send(self, frame: Frame) -> int:
        if self.closed:
            raise ChannelClosed(f"{self.owner}->{self.peer}: channel closed")
        frame.role_tag = self.role_tag
        data = encode(frame)
        self._put(data)
        self.ledgers[self.owner].record_sent(frame.frame_type, len(data))
        if self.transcript is not None:
            self.transcript.append(
                TranscriptEntry(self.owner, self.peer, frame.frame_type, frame.step, len(data), data))
        return len(data)

    def receive(self, expect=None, timeout=None) -> Frame:
        data = self._get(timeout)
        frame = decode(data)
        self.ledgers[self.owner].record_received(frame.frame_type, len(data))
        if expect is not None and frame.frame_type != expect:
            raise SplitNNError(f"{self.owner}: expected {FrameType(expect).name} from {self.peer}, "
                               f"got {frame.frame_type.name}")
        return frame

    def _put(self, data):
        raise NotImplementedError

    def _get(self, timeout):
        raise NotImplementedError

    def close(self):
        self.closed = True


class _QueueEndpoint(Endpoint):
    def __init__(self, inbox, outbox, **kw):
        super().__init__(**kw)
        self.inbox = inbox
        self.outbox = outbox
        self.state = None  # shared dict with the peer: {"closed": bool}

    def _put(self, data):
        self.outbox.append(data)

    def _get(self, timeout):
        if self.inbox:
            return self.inbox.popleft()
        if self.closed or self.state["closed"]:
            raise ChannelClosed(f"{self.owner}<-{self.peer}: channel closed and empty")
        raise ChannelClosed(f"{self.owner}<-{self.peer}: no frame pending (deadlock in a single-threaded run)")

    def close(self):
        self.closed = True
        self.state["closed"] = True


class _TcpEndpoint(Endpoint):
    def __init__(self, sock, **kw):
        super().__init__(**kw)
        self.sock = sock
        self.inbox = queue.Queue()
        self.reader = threading.Thread(target=self._read_loop, daemon=True)
        self.reader.start()

    def _recv_exact(self, n):
        chunks = []
        while n:
            chunk = self.sock.recv(min(n, 1 << 20))
            if not chunk:
                return None
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _read_loop(self):
        try:
            while True:
                header = self._recv_exact(HEADER_SIZE)
                if header is None:
                    break
                length = HEADER.unpack(header)[5]
                payload = self._recv_exact(length)
                if payload is None:
                    self.inbox.put(header)  # truncated frame; decode reports the mismatch
                    break
                self.inbox.put(header + payload)
        except OSError:
            pass
        self.inbox.put(None)

    def _put(self, data):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ChannelClosed(f"{self.owner}->{self.peer}: {exc}") from exc

    def _get(self, timeout):
        try:
            data = self.inbox.get(timeout=30.0 if timeout is None else timeout)
        except queue.Empty:
            raise ChannelClosed(f"{self.owner}<-{self.peer}: timed out waiting for a frame") from None
        if data is None:
            self.inbox.put(None)
            raise ChannelClosed(f"{self.owner}<-{self.peer}: channel closed")
        return data

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


class Fabric:
    """All links between the roles of one run, created on first use.

    ``kind`` is ``"inprocess"`` or ``"tcp"``. TCP links listen on ``host`` with
    an ephemeral port unless ``addresses`` supplies ``host:port`` strings, which
    are handed out to links in creation order.
    """

    def __init__(self, roles, ledgers, kind="inprocess", addresses=(), record=True, host="127.0.0.1"):
        if kind not in ("inprocess", "tcp"):
            raise SplitNNError(f"unknown transport {kind!r}")
        self.kind = kind
        self.role_tags = {r: i for i, r in enumerate(roles)}
        self.ledgers = ledgers
        self.transcript = [] if record else None
        self.addresses = list(addresses)
        self.host = host
        self._links = {}

    def endpoint(self, src, dst) -> Endpoint:
        key = tuple(sorted((src, dst)))
        if key not in self._links:
            self._links[key] = self._connect(*key)
        return self._links[key][src]

    def _connect(self, a, b):
        common = dict(ledgers=self.ledgers, transcript=self.transcript)
        if self.kind == "inprocess":
            ab, ba = deque(), deque()
            state = {"closed": False}
            ea = _QueueEndpoint(ba, ab, owner=a, peer=b, role_tag=self.role_tags[a], **common)
            eb = _QueueEndpoint(ab, ba, owner=b, peer=a, role_tag=self.role_tags[b], **common)
            ea.state = eb.state = state
            return {a: ea, b: eb}
        if self.addresses:
            host, port = self.addresses.pop(0).rsplit(":", 1)
            addr = (host, int(port))
        else:
            addr = (self.host, 0)
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind(addr)
            listener.listen(1)
            client = socket.create_connection(listener.getsockname())
            server, _ = listener.accept()
        for s in (client, server):
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        ea = _TcpEndpoint(client, owner=a, peer=b, role_tag=self.role_tags[a], **common)
        eb = _TcpEndpoint(server, owner=b, peer=a, role_tag=self.role_tags[b], **common)
        return {a: ea, b: eb}

    def close(self):
        for link in self._links.values():
            for ep in link.values():
                ep.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def send(endpoint: Endpoint, frame: Frame) -> int:
    return endpoint.send(frame)


def receive(endpoint: Endpoint, expect=None) -> Frame:
    return endpoint.receive(expect)


# ---------------------------------------------------------------------------
# Transcript scanning
# ---------------------------------------------------------------------------

def fingerprint(arr) -> str:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return hashlib.sha256(repr(arr.shape).encode() + arr.tobytes()).hexdigest()


def raw_tags(features) -> set:
    """Fingerprints of a raw-input batch, as a whole and row by row."""
    features = np.asarray(features, dtype=np.float32)
    tags = {fingerprint(features)}
    for row in features.reshape(features.shape[0], -1):
        tags.add(fingerprint(row))
    return tags


def leaked_inputs(transcript, tags) -> list:
    """Transcript entries whose tensors (or any tensor row) match a raw-input tag."""
    hits = []
    for entry in transcript:
        if entry.frame_type not in TENSOR_FRAMES:
            continue
        for t in decode(entry.data).tensors:
            if fingerprint(t) in tags or (t.ndim >= 1 and t.shape[0] and
                                          any(fingerprint(r) in tags for r in t.reshape(t.shape[0], -1))):
                hits.append(entry)
                break
    return hits
