import os
import socket

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pei_psm import he
from pei_psm.encoding import PEI
from pei_psm.le_hook import AuditLog, le_decrypt, le_encrypt, le_keygen
from pei_psm.psm import Decision
from pei_psm.registry import DeviceList, ListKind, Registry
from pei_psm.transport import (
    HEADER_BYTES, BadTagError, BadVersionError, DecisionNotice, LengthMismatchError,
    MaskedResponse, MNOServer, ProtocolError, SessionRecord, SessionState, Setup, SumReport,
    Tag, TruncatedError, UEClient, VerifyRequest, WireError, deserialize, measure, parse_stream,
    recv_frame, run_client, run_server, run_session_inproc, serialize,
)

BLACK = [1, 5, 9, 22]
GREY = [2, 17]


@pytest.fixture(scope="module")
def le():
    return le_keygen()


@pytest.fixture()
def server(toy_params, toy_pbh, toy_cwc):
    reg = Registry(DeviceList(ListKind.BLACKLIST, [PEI.from_int(v) for v in BLACK]),
                   DeviceList(ListKind.GREYLIST, [PEI.from_int(v) for v in GREY]))
    return MNOServer(reg, toy_pbh, toy_cwc, toy_params, AuditLog())


@pytest.fixture()
def client(toy_keys, le):
    return UEClient(toy_keys, le.pk_LE)


def _expected(v):
    if v in BLACK:
        return Decision.LISTED_BLACKLIST
    return Decision.LISTED_GREYLIST if v in GREY else Decision.NOT_LISTED


# ---------------------------------------------------------------- framing

def _samples(toy_params, toy_keys, toy_pbh, toy_cwc):
    ct = he.serialize_cipher(he.encrypt(toy_keys.pk, he.Plaintext(toy_params, np.arange(8))))
    seeded = he.serialize_cipher(he.encrypt_symmetric(toy_keys.sk, he.Plaintext(toy_params, np.ones(8))))
    return [
        Setup(toy_params, toy_pbh, toy_cwc, os.urandom(32), b"pk-bytes", b"rk-bytes"),
        Setup(toy_params),
        Setup(toy_params, toy_pbh, toy_cwc),
        VerifyRequest([ct, seeded, ct, seeded], os.urandom(74)),
        MaskedResponse([ct, ct]),
        MaskedResponse([seeded]),
        SumReport([0, 2 ** 64 - 1]),
        SumReport([123]),
        DecisionNotice(Decision.LISTED_GREYLIST, os.urandom(16)),
        DecisionNotice(Decision.NON_EVALUABLE),
    ]


def test_roundtrip_every_variant(toy_params, toy_keys, toy_pbh, toy_cwc):
    for m in _samples(toy_params, toy_keys, toy_pbh, toy_cwc):
        b = serialize(m)
        assert b[0] == 1 and b[1] == int(m.tag)
        assert int.from_bytes(b[2:6], "little") == len(b) - HEADER_BYTES
        assert deserialize(b) == m


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 2 ** 64 - 1), min_size=1, max_size=4),
       st.sampled_from(list(Decision)), st.binary(min_size=16, max_size=16))
def test_roundtrip_random_payloads(sums, d, sid):
    assert deserialize(serialize(SumReport(sums))) == SumReport(sums)
    assert deserialize(serialize(DecisionNotice(d, sid))) == DecisionNotice(d, sid)


def test_sum_report_is_22_bytes():
    b = serialize(SumReport([1, 2]))
    assert len(b) == 22 and len(b) - HEADER_BYTES == 16
    assert len(serialize(SumReport([7]))) == 14


def test_truncation_and_bad_headers(toy_params, toy_keys, toy_pbh, toy_cwc):
    for m in _samples(toy_params, toy_keys, toy_pbh, toy_cwc):
        b = serialize(m)
        for cut in (1, HEADER_BYTES - 1, HEADER_BYTES, len(b) - 1):
            with pytest.raises(TruncatedError):
                deserialize(b[:cut])
    b = serialize(SumReport([1, 2]))
    with pytest.raises(BadVersionError):
        deserialize(b"\x02" + b[1:])
    with pytest.raises(BadTagError) as e:
        deserialize(b[:1] + b"\x63" + b[2:])
    assert e.value.offset == 1
    with pytest.raises(LengthMismatchError):
        deserialize(b + b"\x00")
    with pytest.raises(LengthMismatchError):
        deserialize(serialize(SumReport([1]))[:2] + (9).to_bytes(4, "little") + bytes(9))


def test_parse_stream_offsets(toy_params, toy_keys, toy_pbh, toy_cwc):
    ms = _samples(toy_params, toy_keys, toy_pbh, toy_cwc)
    stream = b"".join(serialize(m) for m in ms)
    assert parse_stream(stream) == ms
    first = len(serialize(ms[0]))
    bad = bytearray(stream)
    bad[first + 1] = 0x77
    with pytest.raises(BadTagError) as e:
        parse_stream(bytes(bad))
    assert e.value.offset == first + 1
    with pytest.raises(TruncatedError) as e:
        parse_stream(stream[:-3])
    assert e.value.offset == len(stream) - 3


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_framing_totality(junk):
    """Arbitrary bytes either parse or raise a WireError with an offset."""
    stream = serialize(SumReport([1, 2])) + junk
    try:
        parse_stream(stream)
    except WireError as e:
        assert 0 <= e.offset <= len(stream)


# ---------------------------------------------------------------- sessions

@pytest.mark.parametrize("v", [1, 2, 3, 9, 17, 30])
def test_inproc_sessions(server, client, toy_keys, le, v):
    rec = run_session_inproc(client, server, PEI.from_int(v))
    assert rec.decision is _expected(v)
    m = measure(rec)
    assert set(m) == {"client_request_bytes", "server_response_bytes", "client_response_bytes",
                      "ue_offline_ms", "mno_offline_ms", "ue_online_ms", "mno_online_ms"}
    assert all(x is not None for x in m.values())
    assert m["client_response_bytes"] == 16
    # byte additivity: totals equal the serialized frame lengths
    assert rec.bytes.sent[Tag.MASKED_RESPONSE] == HEADER_BYTES + 1 + sum(rec.response_bytes_per_list)
    assert rec.bytes.received[Tag.SUM_REPORT] == 22
    assert rec.bytes.total_sent == rec.bytes.sent[Tag.MASKED_RESPONSE] + rec.bytes.sent[Tag.DECISION_NOTICE]
    audited = server.audit_log.records()
    assert len(audited) == int(v in GREY)
    if audited:
        assert le_decrypt(audited[0].le_ct, le.sk_LE).value == v


def test_single_list_mode(toy_params, toy_pbh, toy_cwc, client):
    reg = Registry(DeviceList(ListKind.BLACKLIST, [PEI.from_int(4)]))
    srv = MNOServer(reg, toy_pbh, toy_cwc, toy_params, single_list=True)
    rec = run_session_inproc(client, srv, PEI.from_int(4))
    assert rec.decision is Decision.LISTED_BLACKLIST
    assert measure(rec)["client_response_bytes"] == 8


def test_tampered_sum_is_non_evaluable(server, client):
    rec = run_session_inproc(client, server, PEI.from_int(3), sum_override=lambda s: [s[0] + 1, s[1]])
    assert rec.decision is Decision.NON_EVALUABLE


def test_out_of_order_aborts(server, client):
    client.on_setup(server.on_setup(client.setup_message()))
    sess = server.session(client.key_fp)
    reply = sess.handle(SumReport([0, 0]))
    assert isinstance(reply, DecisionNotice) and reply.decision is Decision.NON_EVALUABLE
    assert sess.state is SessionState.DONE and sess.rec.aborted
    # a second request after Done is rejected too
    assert sess.handle(client.request(PEI.from_int(1), SessionRecord())).decision is Decision.NON_EVALUABLE


def test_repeated_request_aborts(server, client):
    client.on_setup(server.on_setup(client.setup_message()))
    sess = server.session(client.key_fp)
    req = client.request(PEI.from_int(1), SessionRecord())
    assert isinstance(sess.handle(req), MaskedResponse)
    assert sess.handle(req).decision is Decision.NON_EVALUABLE


def test_malformed_request_aborts(server, client):
    client.on_setup(server.on_setup(client.setup_message()))
    sess = server.session(client.key_fp)
    req = client.request(PEI.from_int(1), SessionRecord())
    req.query = req.query[:-1]
    assert sess.handle(req).decision is Decision.NON_EVALUABLE


def test_setup_cache_by_fingerprint(server, client):
    server.on_setup(client.setup_message())
    # later sessions may omit the key material
    assert server.on_setup(client.setup_message(include_keys=False)).pbh == server.pp
    bogus = Setup(client.keys.params, key_fp=os.urandom(32))
    with pytest.raises(ProtocolError):
        server.on_setup(bogus)


def test_server_messages_carry_no_slot_values(server, client):
    """The server only ever sees the aggregated sums, never per-slot values."""
    client.on_setup(server.on_setup(client.setup_message()))
    sess = server.session(client.key_fp)
    resp = sess.handle(client.request(PEI.from_int(5), SessionRecord()))
    report = client.on_response(resp, SessionRecord())
    assert len(report.sums) == 2 and all(isinstance(s, int) for s in report.sums)
    assert vars(report).keys() == {"sums"}


def test_tcp_end_to_end(server, client):
    tcp = run_server(("127.0.0.1", 0), server, background=True)
    try:
        addr = tcp.server_address
        for v, want in ((1, Decision.LISTED_BLACKLIST), (3, Decision.NOT_LISTED), (17, Decision.LISTED_GREYLIST)):
            d, rec = run_client(addr, PEI.from_int(v), client)
            assert d is want and rec.decision is want
        # a client that skips the masked response gets an abort
        with socket.create_connection(addr) as s:
            s.sendall(serialize(client.setup_message()))
            recv_frame(s)
            s.sendall(serialize(SumReport([0, 0])))
            notice = deserialize(recv_frame(s))
            assert notice.decision is Decision.NON_EVALUABLE
        # garbage instead of setup
        with socket.create_connection(addr) as s:
            s.sendall(serialize(SumReport([0, 0])))
            assert deserialize(recv_frame(s)).decision is Decision.NON_EVALUABLE
    finally:
        tcp.shutdown()
        tcp.server_close()
    assert len(server.audit_log) == 1


def test_concurrent_sessions(server, client):
    from concurrent.futures import ThreadPoolExecutor
    vals = list(range(32)) * 2
    with ThreadPoolExecutor(8) as ex:
        recs = list(ex.map(lambda v: run_session_inproc(client, server, PEI.from_int(v)), vals))
    assert [r.decision for r in recs] == [_expected(v) for v in vals]
    assert len(server.audit_log) == 2 * len(GREY)
