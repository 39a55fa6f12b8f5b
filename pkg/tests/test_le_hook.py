import ast
import struct
import zlib
from pathlib import Path

import pytest

import pei_psm
from pei_psm.encoding import PEI
from pei_psm.le_hook import (
    AUDIT_MAGIC, LE_CT_BYTES, AuditLog, AuditLogError, AuditRecord, LEIntegrityError,
    forward_on_greylist, le_decrypt, le_encrypt, le_keygen, read_audit_log,
)
from pei_psm.psm import Decision
from pei_psm.registry import gen_random_list

SRC = Path(pei_psm.__file__).parent


@pytest.fixture(scope="module")
def le():
    return le_keygen()


def test_roundtrip_random(le):
    for p in gen_random_list(50, 99):
        ct = le_encrypt(p, le.pk_LE)
        assert len(ct) == LE_CT_BYTES
        assert le_decrypt(ct, le.sk_LE) == p


def test_probabilistic(le):
    p = PEI("35294906000000")
    assert le_encrypt(p, le.pk_LE) != le_encrypt(p, le.pk_LE)


def test_wrong_key_is_integrity_error(le):
    ct = le_encrypt("35294906000000", le.pk_LE)
    with pytest.raises(LEIntegrityError):
        le_decrypt(ct, le_keygen().sk_LE)


def test_tamper_detected(le):
    ct = bytearray(le_encrypt("35294906000000", le.pk_LE))
    for i in (0, 40, len(ct) - 1):
        bad = bytearray(ct)
        bad[i] ^= 1
        with pytest.raises(LEIntegrityError):
            le_decrypt(bytes(bad), le.sk_LE)
    with pytest.raises(LEIntegrityError):
        le_decrypt(bytes(ct[:-1]), le.sk_LE)


def test_secret_hidden_in_repr(le):
    assert le.sk_LE.hex() not in repr(le)


@pytest.mark.parametrize("d,emitted", [
    (Decision.LISTED_GREYLIST, True),
    (Decision.NOT_LISTED, False),
    (Decision.LISTED_BLACKLIST, False),
    (Decision.NON_EVALUABLE, False),
])
def test_forward_iff_greylist(le, d, emitted):
    log = AuditLog()
    ct = le_encrypt("00000000000007", le.pk_LE)
    rec = forward_on_greylist(d, ct, log)
    assert (rec is not None) == emitted
    assert len(log) == int(emitted)
    if emitted:
        assert rec.le_ct == ct and len(rec.session_id) == 16 and rec.trigger == 1
        assert le_decrypt(log.records()[0].le_ct, le.sk_LE).value == 7


def test_audit_file_format(tmp_path, le):
    path = tmp_path / "audit.log"
    log = AuditLog(path)
    cts = [le_encrypt(p, le.pk_LE) for p in gen_random_list(3, 1)]
    for c in cts:
        forward_on_greylist(Decision.LISTED_GREYLIST, c, log, session_id=bytes(16))
    data = path.read_bytes()
    assert data.startswith(AUDIT_MAGIC)
    pos = len(AUDIT_MAGIC)
    for c in cts:
        (n,) = struct.unpack_from("<I", data, pos)
        payload = data[pos + 4:pos + 4 + n]
        (crc,) = struct.unpack_from("<I", data, pos + 4 + n)
        assert crc == zlib.crc32(payload)
        assert AuditRecord.decode(payload).le_ct == c
        pos += 8 + n
    assert pos == len(data)
    assert [r.le_ct for r in read_audit_log(path)] == cts
    # reopening appends after existing records
    log2 = AuditLog(path)
    assert len(log2) == 3
    forward_on_greylist(Decision.LISTED_GREYLIST, cts[0], log2)
    assert len(read_audit_log(path)) == 4


def test_audit_corruption_diagnostics(tmp_path, le):
    path = tmp_path / "audit.log"
    log = AuditLog(path)
    forward_on_greylist(Decision.LISTED_GREYLIST, le_encrypt("00000000000001", le.pk_LE), log)
    data = bytearray(path.read_bytes())
    data[len(AUDIT_MAGIC) + 10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(AuditLogError, match="offset 7"):
        read_audit_log(path)
    path.write_bytes(bytes(data[:-2]))
    with pytest.raises(AuditLogError, match="truncated"):
        read_audit_log(path)
    path.write_bytes(b"NOTMAGIC")
    with pytest.raises(AuditLogError):
        read_audit_log(path)


# ------------------------------------------------------------ one-way channel

MNO_MODULES = ["transport.py", "registry.py", "psm.py"]


def _calls(tree):
    for node in ast.walk(tree):
        if isinstance(node, ast.Call):
            f = node.func
            yield f.attr if isinstance(f, ast.Attribute) else getattr(f, "id", None)


def test_mno_code_never_decrypts_escrow():
    for name in MNO_MODULES:
        text = (SRC / name).read_text()
        assert "le_decrypt" not in text, name
        assert "le_decrypt" not in set(_calls(ast.parse(text))), name


def test_mno_classes_hold_no_secret_keys():
    """The server role's methods never call the HE decrypt routines either."""
    tree = ast.parse((SRC / "transport.py").read_text())
    for cls in (n for n in tree.body if isinstance(n, ast.ClassDef) and n.name.startswith("MNO")):
        called = set(_calls(cls))
        assert not called & {"decrypt", "noise_budget", "le_decrypt"}, cls.name
