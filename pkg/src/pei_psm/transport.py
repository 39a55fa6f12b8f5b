"""Wire protocol, session state machine and the two protocol roles.

Frames are ``u8 version | u8 tag | u32 payload length | payload``.  One
session is VerifyRequest -> MaskedResponse -> SumReport -> DecisionNotice,
preceded once per connection by a Setup exchange.  The MNO role never holds
the HE secret key or the LE private key.
"""
from __future__ import annotations

import enum
import hashlib
import os
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

from . import he
from .encoding import PEI, CWCParams, PBHParams
from .le_hook import AuditLog, le_encrypt, forward_on_greylist
from .psm import (
    Decision, Outcome, QueryCiphertexts, build_query, client_aggregate, decide, demask,
    prepare_list, psi_sum, sample_masks,
)
from .registry import ListKind, Registry, preprocess

WIRE_VERSION = 1
HEADER = struct.Struct("<BBI")
HEADER_BYTES = HEADER.size  # 6
MAX_PAYLOAD = 1 << 30
SUM_BYTES = 8


class Tag(enum.IntEnum):
    SETUP = 1
    VERIFY_REQUEST = 2
    MASKED_RESPONSE = 3
    SUM_REPORT = 4
    DECISION_NOTICE = 5


class WireError(Exception):
    """Malformed byte stream; `offset` is where parsing stopped."""

    def __init__(self, msg: str, offset: int = 0):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class TruncatedError(WireError):
    pass


class BadTagError(WireError):
    pass


class BadVersionError(WireError):
    pass


class LengthMismatchError(WireError):
    pass


class ProtocolError(Exception):
    """Message valid on the wire but not allowed in the current state."""


# ----------------------------------------------------------------- messages

@dataclass
class Setup:
    params: he.HEParams | None = None
    pbh: PBHParams | None = None
    cwc: CWCParams | None = None
    key_fp: bytes = b""          # 32-byte fingerprint of (pk, rk), or empty
    pk: bytes = b""
    rk: bytes = b""
    tag = Tag.SETUP


@dataclass
class VerifyRequest:
    query: list                  # serialized ciphertext blobs, one per codeword bit
    le_ct: bytes
    tag = Tag.VERIFY_REQUEST


@dataclass
class MaskedResponse:
    results: list                # serialized ciphertext blobs, blacklist first
    tag = Tag.MASKED_RESPONSE


@dataclass
class SumReport:
    sums: list                   # one 64-bit value per list
    tag = Tag.SUM_REPORT


@dataclass
class DecisionNotice:
    decision: Decision
    session_id: bytes = bytes(16)
    tag = Tag.DECISION_NOTICE


Message = Setup | VerifyRequest | MaskedResponse | SumReport | DecisionNotice

_DECISION_CODES = {d: i for i, d in enumerate(Decision)}
_CODE_DECISIONS = {i: d for d, i in _DECISION_CODES.items()}


class _Reader:
    def __init__(self, buf, base: int):
        self.buf = memoryview(buf)
        self.pos = 0
        self.base = base

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError("payload ends inside a field", self.base + len(self.buf))
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def he_blob(self) -> bytes:
        if self.pos + 4 > len(self.buf):
            raise TruncatedError("payload ends inside a ciphertext", self.base + len(self.buf))
        return self.take(he.blob_length(self.buf, self.pos))

    def done(self):
        if self.pos != len(self.buf):
            raise LengthMismatchError("trailing bytes in payload", self.base + self.pos)


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _encode_payload(m) -> bytes:
    if isinstance(m, Setup):
        flags = (m.params is not None) | (m.pbh is not None) << 1 | (m.cwc is not None) << 2 \
            | bool(m.key_fp) << 3
        out = [bytes([flags])]
        if m.params is not None:
            out.append(_blob(he.serialize_params(m.params)))
        if m.pbh is not None:
            out.append(struct.pack("<IB", m.pbh.N, m.pbh.lam) + _blob(m.pbh.perm_key))
        if m.cwc is not None:
            out.append(struct.pack("<BHB", m.cwc.h, m.cwc.l, m.cwc.lam_bar))
        if m.key_fp:
            if len(m.key_fp) != 32:
                raise ValueError("key fingerprint must be 32 bytes")
            out.append(m.key_fp + _blob(m.pk) + _blob(m.rk))
        return b"".join(out)
    if isinstance(m, VerifyRequest):
        return struct.pack("<H", len(m.query)) + b"".join(m.query) + _blob(m.le_ct)
    if isinstance(m, MaskedResponse):
        return struct.pack("<B", len(m.results)) + b"".join(m.results)
    if isinstance(m, SumReport):
        return b"".join(int(s).to_bytes(SUM_BYTES, "little") for s in m.sums)
    if isinstance(m, DecisionNotice):
        if len(m.session_id) != 16:
            raise ValueError("session id must be 16 bytes")
        return bytes([_DECISION_CODES[m.decision]]) + m.session_id
    raise TypeError(f"not a protocol message: {type(m).__name__}")


def _decode_payload(tag: int, payload, base: int):
    r = _Reader(payload, base)
    if tag == Tag.SETUP:
        (flags,) = r.unpack("<B")
        m = Setup()
        if flags & 1:
            try:
                m.params = he.deserialize_params(r.blob())
            except (he.HEError, ValueError) as e:
                raise WireError(f"bad HE parameters: {e}", base) from e
        if flags & 2:
            n, lam = r.unpack("<IB")
            m.pbh = PBHParams(n, r.blob(), lam)
        if flags & 4:
            h, l, lb = r.unpack("<BHB")
            m.cwc = CWCParams(h, l, lb)
        if flags & 8:
            m.key_fp = r.take(32)
            m.pk = r.blob()
            m.rk = r.blob()
    elif tag == Tag.VERIFY_REQUEST:
        (n,) = r.unpack("<H")
        q = [r.he_blob() for _ in range(n)]
        m = VerifyRequest(q, r.blob())
    elif tag == Tag.MASKED_RESPONSE:
        (n,) = r.unpack("<B")
        m = MaskedResponse([r.he_blob() for _ in range(n)])
    elif tag == Tag.SUM_REPORT:
        if len(payload) == 0 or len(payload) % SUM_BYTES:
            raise LengthMismatchError("sum report must be a multiple of 8 bytes", base)
        m = SumReport([int.from_bytes(r.take(SUM_BYTES), "little") for _ in range(len(payload) // SUM_BYTES)])
    elif tag == Tag.DECISION_NOTICE:
        (code,) = r.unpack("<B")
        if code not in _CODE_DECISIONS:
            raise WireError(f"unknown decision code {code}", base)
        m = DecisionNotice(_CODE_DECISIONS[code], r.take(16))
    else:  # pragma: no cover - tags are checked before dispatch
        raise BadTagError(f"unknown tag {tag}", base)
    r.done()
    return m


def serialize(m) -> bytes:
    payload = _encode_payload(m)
    return HEADER.pack(WIRE_VERSION, int(m.tag), len(payload)) + payload


def _check_header(buf, offset: int) -> tuple[int, int]:
    if len(buf) - offset < HEADER_BYTES:
        raise TruncatedError("frame header truncated", offset)
    ver, tag, n = HEADER.unpack_from(buf, offset)
    if ver != WIRE_VERSION:
        raise BadVersionError(f"unsupported wire version {ver}", offset)
    if tag not in Tag._value2member_map_:
        raise BadTagError(f"unknown message tag {tag}", offset + 1)
    if n > MAX_PAYLOAD:
        raise LengthMismatchError(f"payload length {n} exceeds limit", offset + 2)
    return tag, n


def deserialize(buf) -> Message:
    """Parse exactly one frame."""
    tag, n = _check_header(buf, 0)
    if len(buf) < HEADER_BYTES + n:
        raise TruncatedError(f"frame needs {HEADER_BYTES + n} bytes, have {len(buf)}", len(buf))
    if len(buf) > HEADER_BYTES + n:
        raise LengthMismatchError("bytes after the frame", HEADER_BYTES + n)
    return _decode_payload(tag, memoryview(buf)[HEADER_BYTES:], HEADER_BYTES)


def parse_stream(buf) -> list:
    """Split a byte stream into messages or fail at a deterministic offset."""
    out = []
    pos = 0
    while pos < len(buf):
        tag, n = _check_header(buf, pos)
        end = pos + HEADER_BYTES + n
        if end > len(buf):
            raise TruncatedError("frame truncated", len(buf))
        out.append(_decode_payload(tag, memoryview(buf)[pos + HEADER_BYTES:end], pos + HEADER_BYTES))
        pos = end
    return out


# ---------------------------------------------------------------- metering

@dataclass
class ByteCounter:
    """Framed bytes per direction and per message tag."""

    sent: dict = field(default_factory=dict)
    received: dict = field(default_factory=dict)

    def count(self, direction: str, tag: Tag, n: int):
        d = self.sent if direction == "sent" else self.received
        d[tag] = d.get(tag, 0) + n

    @property
    def total_sent(self) -> int:
        return sum(self.sent.values())

    @property
    def total_received(self) -> int:
        return sum(self.received.values())


class SessionState(enum.Enum):
    AWAIT_REQUEST = "AwaitRequest"
    AWAIT_SUM = "AwaitSum"
    DONE = "Done"


@dataclass
class SessionRecord:
    """Everything measured about one verification session."""

    session_id: bytes = field(default_factory=lambda: os.urandom(16))
    bytes: ByteCounter = field(default_factory=ByteCounter)
    times_ms: dict = field(default_factory=dict)
    decision: Decision | None = None
    outcomes: tuple = ()
    response_bytes_per_list: list = field(default_factory=list)
    sum_field_bytes: int = 0
    aborted: str | None = None

    def add_time(self, key: str, ms: float):
        self.times_ms[key] = self.times_ms.get(key, 0.0) + ms


def measure(session: SessionRecord) -> dict:
    """The seven per-session metrics (None where this side did not observe one)."""
    b = session.bytes
    req = b.sent.get(Tag.VERIFY_REQUEST) or b.received.get(Tag.VERIFY_REQUEST)
    resp = b.sent.get(Tag.MASKED_RESPONSE) or b.received.get(Tag.MASKED_RESPONSE)
    t = session.times_ms
    return {
        "client_request_bytes": req,
        "server_response_bytes": resp,
        "client_response_bytes": session.sum_field_bytes or None,
        "ue_offline_ms": t.get("ue_offline"),
        "mno_offline_ms": t.get("mno_offline"),
        "ue_online_ms": t.get("ue_online"),
        "mno_online_ms": t.get("mno_online"),
    }


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


# --------------------------------------------------------------------- roles

def key_fingerprint(pk: bytes, rk: bytes) -> bytes:
    return hashlib.sha256(pk + rk).digest()


class UEClient:
    """Client role: owns the HE secret key and the LE public key."""

    def __init__(self, keys: he.KeyMaterial, pk_LE: bytes):
        if keys.sk is None:
            raise ValueError("client needs the HE secret key")
        self.keys = keys
        self.pk_LE = pk_LE
        self._pk = he.serialize_public_key(keys.pk)
        self._rk = he.serialize_relin_keys(keys.rk)
        self.key_fp = key_fingerprint(self._pk, self._rk)
        self.pp: PBHParams | None = None
        self.cp: CWCParams | None = None
        self.last_response: list | None = None  # kept for local diagnostics only

    def setup_message(self, include_keys: bool = True) -> Setup:
        return Setup(self.keys.params, key_fp=self.key_fp,
                     pk=self._pk if include_keys else b"", rk=self._rk if include_keys else b"")

    def on_setup(self, m: Setup):
        if m.params != self.keys.params or m.pbh is None or m.cwc is None:
            raise ProtocolError("server setup does not match client parameters")
        self.pp, self.cp = m.pbh, m.cwc

    def request(self, pei: PEI | str, rec: SessionRecord) -> VerifyRequest:
        if self.pp is None:
            raise ProtocolError("setup not completed")
        t0 = time.perf_counter()
        q = build_query(pei, self.keys, self.pp, self.cp)
        blobs = [he.serialize_cipher(c) for c in q.bits]
        le_ct = le_encrypt(pei, self.pk_LE)
        rec.add_time("ue_offline", _ms(t0))
        return VerifyRequest(blobs, le_ct)

    def on_response(self, m: MaskedResponse, rec: SessionRecord) -> SumReport:
        cts = [he.deserialize_cipher(b, self.keys.params) for b in m.results]
        self.last_response = cts
        t0 = time.perf_counter()
        t = self.keys.params.plain_modulus
        sums = [client_aggregate(he.decrypt(self.keys.sk, c), t) for c in cts]
        rec.add_time("ue_online", _ms(t0))
        rec.sum_field_bytes = SUM_BYTES * len(sums)
        return SumReport(sums)


class MNOServer:
    """Server role: registry, encoded lists and audit log; no decryption keys."""

    def __init__(self, registry: Registry, pp: PBHParams, cp: CWCParams, params: he.HEParams,
                 audit_log: AuditLog | None = None, single_list: bool = False,
                 full_range_masks: bool = False):
        if pp.N != params.poly_degree:
            raise ValueError("PBH slot count must equal the ring degree")
        self.registry = registry
        self.pp, self.cp, self.params = pp, cp, params
        self.audit_log = audit_log if audit_log is not None else AuditLog()
        self.kinds = [ListKind.BLACKLIST] if single_list else [ListKind.BLACKLIST, ListKind.GREYLIST]
        self.full_range_masks = full_range_masks
        self._lock = threading.Lock()
        self._prepared: dict = {}
        self._keys: dict = {}      # fingerprint -> RelinKeys
        self.completed: list[SessionRecord] = []
        self.refresh()

    def refresh(self) -> float:
        """Bring the HE-encoded lists up to date with the registry; returns ms spent."""
        t0 = time.perf_counter()
        new = {}
        for k in self.kinds:
            el = preprocess(self.registry[k], self.pp, self.cp)
            new[k] = prepare_list(el, self.params, self._prepared.get(k), kind=k)
        with self._lock:
            self._prepared = new
        return _ms(t0)

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._prepared)

    def on_setup(self, m: Setup) -> Setup:
        if m.params != self.params:
            raise ProtocolError("client HE parameters differ from the server's")
        if not m.key_fp:
            raise ProtocolError("setup lacks a key fingerprint")
        with self._lock:
            known = m.key_fp in self._keys
        if not known:
            if not m.rk or key_fingerprint(m.pk, m.rk) != m.key_fp:
                raise ProtocolError("unknown client keys")
            rk = he.deserialize_relin_keys(m.rk, self.params)
            with self._lock:
                self._keys[m.key_fp] = rk
        return Setup(self.params, self.pp, self.cp)

    def session(self, key_fp: bytes) -> "MNOSession":
        with self._lock:
            rk = self._keys[key_fp]
        return MNOSession(self, rk)


class MNOSession:
    """Per-session state machine; masking secrets live only here."""

    def __init__(self, server: MNOServer, rk: he.RelinKeys):
        self.server = server
        self.rk = rk
        self.state = SessionState.AWAIT_REQUEST
        self.rec = SessionRecord()
        self._masks = None
        self._le_ct = b""

    def abort(self, why: str) -> DecisionNotice:
        self.state = SessionState.DONE
        self._masks = None
        self.rec.aborted = why
        self.rec.decision = Decision.NON_EVALUABLE
        return DecisionNotice(Decision.NON_EVALUABLE, self.rec.session_id)

    def handle(self, m) -> Message:
        try:
            if self.state is SessionState.AWAIT_REQUEST and isinstance(m, VerifyRequest):
                return self._on_request(m)
            if self.state is SessionState.AWAIT_SUM and isinstance(m, SumReport):
                return self._on_sum(m)
            return self.abort(f"{type(m).__name__} not allowed in state {self.state.value}")
        except (he.HEError, ValueError) as e:
            return self.abort(f"malformed {type(m).__name__}: {e}")

    def _on_request(self, m: VerifyRequest) -> MaskedResponse:
        srv = self.server
        p = srv.params
        if len(m.query) != srv.cp.l:
            raise ValueError(f"query must hold {srv.cp.l} ciphertexts")
        cts = [he.deserialize_cipher(b, p) for b in m.query]
        if any(c.size != 2 or c.level != p.max_level for c in cts):
            raise ValueError("query ciphertexts have the wrong shape")
        q = QueryCiphertexts(cts)
        lists = srv.snapshot()
        t0 = time.perf_counter()
        self._masks = [sample_masks(p.plain_modulus, p.poly_degree, full_range=srv.full_range_masks)
                       for _ in srv.kinds]
        self.rec.add_time("mno_offline", _ms(t0))
        t0 = time.perf_counter()
        res = [psi_sum(q, lists[k], ms, self.rk, srv.cp).ct_res for k, ms in zip(srv.kinds, self._masks)]
        self.rec.add_time("mno_online", _ms(t0))
        blobs = [he.serialize_cipher(c) for c in res]
        self.rec.response_bytes_per_list = [len(b) for b in blobs]
        self._le_ct = m.le_ct
        self.state = SessionState.AWAIT_SUM
        return MaskedResponse(blobs)

    def _on_sum(self, m: SumReport) -> DecisionNotice:
        srv = self.server
        if len(m.sums) != len(srv.kinds):
            raise ValueError(f"expected {len(srv.kinds)} sums, got {len(m.sums)}")
        t0 = time.perf_counter()
        outs = [demask(s, ms) for s, ms in zip(m.sums, self._masks)]
        b = outs[0]
        g = outs[1] if len(outs) > 1 else Outcome.NO_MATCH
        d = decide(b, g)
        self.rec.add_time("mno_online", _ms(t0))
        self._masks = None  # masking secrets end with the session
        self.rec.outcomes = tuple(outs)
        self.rec.decision = d
        self.rec.sum_field_bytes = SUM_BYTES * len(m.sums)
        forward_on_greylist(d, self._le_ct, srv.audit_log, self.rec.session_id)
        self.state = SessionState.DONE
        return DecisionNotice(d, self.rec.session_id)


# ------------------------------------------------------------------ runners

class _Pipe:
    """Frame counting for one side of a connection."""

    def __init__(self, rec: SessionRecord):
        self.rec = rec

    def out(self, m) -> bytes:
        b = serialize(m)
        if m.tag is not Tag.SETUP:
            self.rec.bytes.count("sent", m.tag, len(b))
        return b

    def inp(self, b: bytes):
        m = deserialize(b)
        if m.tag is not Tag.SETUP:
            self.rec.bytes.count("received", m.tag, len(b))
        return m


def run_session_inproc(client: UEClient, server: MNOServer, pei, *, sum_override=None) -> SessionRecord:
    """One full session with real framing but no sockets (used by the bench).

    `sum_override` lets tests play a tampering client by rewriting the sums.
    Returns the server-side record with the client's timings merged in.
    """
    crec = SessionRecord()
    cp_ = _Pipe(crec)
    if client.pp is None:
        client.on_setup(deserialize(serialize(server.on_setup(deserialize(serialize(client.setup_message()))))))
    sess = server.session(client.key_fp)
    sp = _Pipe(sess.rec)
    resp = sp.inp(cp_.out(client.request(pei, crec)))
    reply = cp_.inp(sp.out(sess.handle(resp)))
    if isinstance(reply, DecisionNotice):
        crec.decision = reply.decision
    else:
        report = client.on_response(reply, crec)
        if sum_override is not None:
            report = SumReport(list(sum_override(report.sums)))
        notice = cp_.inp(sp.out(sess.handle(sp.inp(cp_.out(report)))))
        crec.decision = notice.decision
    rec = sess.rec
    for k, v in crec.times_ms.items():
        rec.add_time(k, v)
    rec.sum_field_bytes = rec.sum_field_bytes or crec.sum_field_bytes
    with server._lock:
        server.completed.append(rec)
    return rec


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise TruncatedError("connection closed mid-frame", len(buf))
        buf += chunk
    return bytes(buf)


def recv_frame(sock) -> bytes:
    head = _recv_exact(sock, HEADER_BYTES)
    _check_header(head, 0)
    (n,) = struct.unpack_from("<I", head, 2)
    return head + _recv_exact(sock, n)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: MNOServer = self.server.mno
        sock = self.request
        try:
            setup = deserialize(recv_frame(sock))
            if not isinstance(setup, Setup):
                sock.sendall(serialize(DecisionNotice(Decision.NON_EVALUABLE)))
                return
            try:
                sock.sendall(serialize(srv.on_setup(setup)))
            except (ProtocolError, he.HEError) as e:
                sock.sendall(serialize(DecisionNotice(Decision.NON_EVALUABLE)))
                return
            sess = srv.session(setup.key_fp)
            pipe = _Pipe(sess.rec)
            while sess.state is not SessionState.DONE:
                try:
                    m = pipe.inp(recv_frame(sock))
                except WireError as e:
                    reply = sess.abort(str(e))
                else:
                    reply = sess.handle(m)
                sock.sendall(pipe.out(reply))
            with srv._lock:
                srv.completed.append(sess.rec)
        except (OSError, WireError):
            pass


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def run_server(listen_addr: tuple[str, int], server: MNOServer, background: bool = False):
    """Serve sessions on a TCP socket; with `background` returns the running server."""
    tcp = _TCPServer(listen_addr, _Handler)
    tcp.mno = server
    if background:
        threading.Thread(target=tcp.serve_forever, daemon=True).start()
        return tcp
    try:
        tcp.serve_forever()
    finally:
        tcp.server_close()
    return tcp


def run_client(addr: tuple[str, int], pei, client: UEClient, timeout: float = 600.0) -> tuple[Decision, SessionRecord]:
    rec = SessionRecord()
    pipe = _Pipe(rec)
    with socket.create_connection(addr, timeout=timeout) as sock:
        sock.sendall(serialize(client.setup_message()))
        m = deserialize(recv_frame(sock))
        if isinstance(m, DecisionNotice):
            return m.decision, rec
        client.on_setup(m)
        sock.sendall(pipe.out(client.request(pei, rec)))
        m = pipe.inp(recv_frame(sock))
        if isinstance(m, MaskedResponse):
            sock.sendall(pipe.out(client.on_response(m, rec)))
            m = pipe.inp(recv_frame(sock))
        if not isinstance(m, DecisionNotice):
            raise ProtocolError(f"expected a decision notice, got {type(m).__name__}")
        rec.decision = m.decision
        rec.session_id = m.session_id
        return m.decision, rec
