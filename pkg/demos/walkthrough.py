"""One verification session at baseline parameters, step by step.

Run:  python3 demos/walkthrough.py
"""
import time

from pei_psm import he
from pei_psm.bench import perm_key_from_seed
from pei_psm.encoding import PBHParams, cwc_params_for, encode_cwc, pbh_map
from pei_psm.le_hook import AuditLog, le_decrypt, le_keygen
from pei_psm.registry import ListKind, Registry, gen_random_list
from pei_psm.transport import MNOServer, UEClient, measure, run_session_inproc

params = he.gen_params("default_safe", 8192)
pp = PBHParams(8192, perm_key_from_seed(1))
cp = cwc_params_for(pp.lam_bar, 8, params.plain_modulus)
print(f"ring N={params.poly_degree}, t={params.plain_modulus}, q={params.total_bits} bits")
print(f"residual {pp.lam_bar} bits -> codewords of length {cp.l}, weight {cp.h}")

black = gen_random_list(1 << 12, 1, ListKind.BLACKLIST)
grey = gen_random_list(64, 2, ListKind.GREYLIST, exclude=black)
t0 = time.perf_counter()
server = MNOServer(Registry(black, grey), pp, cp, params, AuditLog())
rows = server.snapshot()[ListKind.BLACKLIST].n_rows
print(f"operator encoded {len(black)} + {len(grey)} identifiers ({rows} blacklist rows) "
      f"in {(time.perf_counter() - t0) * 1e3:.0f} ms")

keys = he.keygen(params)
le = le_keygen()
client = UEClient(keys, le.pk_LE)

for label, pei in (("blacklisted", next(iter(black))), ("greylisted", next(iter(grey))),
                   ("unlisted", "35294906000000")):
    slot, res = pbh_map(int(str(pei)), pp)
    print(f"\n{label} device {pei}: slot {slot}, codeword "
          f"{''.join(map(str, encode_cwc(res, cp)))}")
    rec = run_session_inproc(client, server, pei)
    m = measure(rec)
    print(f"  decision {rec.decision.value}")
    print(f"  request {m['client_request_bytes']:,} B, response {m['server_response_bytes']:,} B, "
          f"sum report {m['client_response_bytes']} B")
    print(f"  MNO online {m['mno_online_ms']:.0f} ms, UE online {m['ue_online_ms']:.1f} ms, "
          f"budget left {min(he.noise_budget(keys.sk, c) for c in client.last_response)} bits")

for r in server.audit_log.records():
    print(f"\naudit record {r.session_id.hex()[:8]}: law enforcement opens it to {le_decrypt(r.le_ct, le.sk_LE)}")
