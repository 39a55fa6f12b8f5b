"""The eleven acceptance criteria, each recorded for the end-of-run summary."""
import itertools
import math
import os
import statistics
from fractions import Fraction

import numpy as np
import pytest

from conftest import record
from pei_psm import he
from pei_psm.bench import cmd_bench, cmd_forge_sim, perm_key_from_seed
from pei_psm.encoding import (
    PEI, PBHParams, cwc_params_for, decode_cwc, encode_cwc_many, pbh_invert, pbh_map_many,
)
from pei_psm.le_hook import AuditLog, le_decrypt, le_keygen
from pei_psm.psm import (
    Decision, Outcome, build_query, client_aggregate, demask, forgery_success_bound,
    prepare_list, psi_sum, sample_masks,
)
from pei_psm.registry import (
    DeviceList, ListKind, Registry, gen_random_list, preprocess, preprocess_fresh,
)
from pei_psm.transport import MNOServer, UEClient, measure, run_session_inproc

T = 1_032_193
RUNS = 150


@pytest.fixture(scope="module")
def bench():
    return cmd_bench(list_size=1 << 14, runs=RUNS, seed=2024, log=lambda m: None)


def _rows(rep, kind):
    return [r for r in rep.runs if r.kind == kind]


# 1 ------------------------------------------------------------------------

def test_c01_correctness_desk_scale(bench):
    bl, wl = _rows(bench, "Blacklist"), _rows(bench, "Whitelist")
    correct = sum(r.decision is r.expected for r in bench.runs)
    min_budget = min(r.min_budget for r in bench.runs)
    ok = len(bl) == RUNS and len(wl) == RUNS and correct == 2 * RUNS and min_budget > 0
    record(1, ok, f"{correct}/{2 * RUNS} correct, min noise budget {min_budget} bits")
    assert ok


# 2 ------------------------------------------------------------------------

def test_c02_client_response_size(bench):
    per_list = [r.metrics["client_response_bytes"] / 2 for r in bench.runs]
    ok = len(per_list) == 2 * RUNS and set(per_list) == {8.0}
    record(2, ok, f"sum field {sorted(set(per_list))} B per list, SD "
                  f"{statistics.pstdev(per_list):.1f} over {len(per_list)} runs")
    assert ok


# 3 ------------------------------------------------------------------------

def test_c03_request_size(bench):
    framed = [r.metrics["client_request_bytes"] for r in bench.runs]
    params = he.gen_params("default_safe", 8192)
    keys = he.keygen(params)
    pp = PBHParams(8192, perm_key_from_seed(1))
    cp = cwc_params_for(pp.lam_bar, 8, T)
    q = build_query("35294906000000", keys, pp, cp)
    he_payload = sum(len(he.serialize_cipher(c)) for c in q.bits)
    ok = 8_000_000 <= he_payload <= 33_000_000 and len(set(framed)) == 1
    record(3, ok, f"HE payload {he_payload:,} B ({cp.l} ciphertexts), framed request {framed[0]:,} B")
    assert ok


# 4 ------------------------------------------------------------------------

def _mno_online(list_size, sessions=5, seed=7):
    params = he.gen_params("default_safe", 8192)
    keys = he.keygen(params)
    le = le_keygen()
    pp = PBHParams(8192, perm_key_from_seed(seed))
    cp = cwc_params_for(pp.lam_bar, 8, T)
    black = gen_random_list(list_size, seed)
    srv = MNOServer(Registry(black), pp, cp, params, single_list=True)
    client = UEClient(keys, le.pk_LE)
    picks = list(black)[:sessions]
    times = []
    for p in picks:
        rec = run_session_inproc(client, srv, p)
        assert rec.decision is Decision.LISTED_BLACKLIST
        times.append(measure(rec)["mno_online_ms"])
    rows = srv.snapshot()[ListKind.BLACKLIST].n_rows
    del srv
    return statistics.median(times), rows


def test_c04_online_latency(bench):
    ue_all = [r.metrics["ue_online_ms"] for r in bench.runs]
    ue = statistics.fmean(ue_all)
    parts = [f"UE online mean {ue:.1f} ms (median {statistics.median(ue_all):.1f}, max {max(ue_all):.1f})"]
    ok = ue <= 50
    if os.environ.get("PSM_FULL"):
        t_full, rows = _mno_online(1 << 20, sessions=3)
        parts.append(f"n=2^20 MNO online {t_full:.0f} ms ({rows} rows)")
        ok &= t_full <= 5000
    else:
        t17, rows17 = _mno_online(1 << 17)
        parts.append(f"n=2^17 MNO online {t17:.0f} ms ({rows17} rows)")
        ok &= t17 <= 1500
        ts = {}
        for e in (14, 15, 16):
            ts[e] = _mno_online(1 << e)
        ratios = [ts[e + 1][0] / ts[e][0] for e in (14, 15)]
        parts.append("scaling " + ", ".join(
            f"2^{e}->2^{e + 1}: {r:.2f} (rows {ts[e][1]}->{ts[e + 1][1]})" for e, r in zip((14, 15), ratios)))
        ok &= all(1.5 <= r <= 2.6 for r in ratios)
    record(4, ok, "; ".join(parts))
    assert ok


# 5 ------------------------------------------------------------------------

def test_c05_noise_budget_dichotomy(bench):
    params = he.gen_params("paper_original", 8192)
    keys = he.keygen(params)
    pp = PBHParams(8192, perm_key_from_seed(3))
    cp = cwc_params_for(pp.lam_bar, 8, T)
    black = gen_random_list(1 << 12, 3)
    prepared = prepare_list(preprocess(black, pp, cp), params)
    budgets, wrong = [], 0
    for p in list(black)[:3]:
        ms = sample_masks(T, 8192)
        ct = psi_sum(build_query(p, keys, pp, cp), prepared, ms, keys.rk, cp).ct_res
        budgets.append(he.noise_budget(keys.sk, ct))
        wrong += demask(client_aggregate(he.decrypt(keys.sk, ct), T), ms) is not Outcome.MATCH
    safe = [r.min_budget for r in bench.runs]
    # budget 0 is the detection signal; a depleted ciphertext may still decode by chance
    ok = max(budgets) == 0 and min(safe) > 0
    record(5, ok, f"paper_original budgets {budgets} ({wrong}/{len(budgets)} wrong outcomes); "
                  f"default_safe min {min(safe)} bits over {len(safe)} runs")
    assert ok


# 6 ------------------------------------------------------------------------

def test_c06_forgery_bound():
    r = cmd_forge_sim(t_eff_value=1021, trials=10 ** 6, seed=20240601)
    p = 1 / 1021
    sigma = math.sqrt(p * (1 - p) / r.trials)
    z = (r.empirical_rate - p) / sigma
    b1 = Fraction(1, T // 2 - 1)
    b1825 = Fraction(1825, T // 2 - 1)
    ok = (abs(z) <= 3 and b1 == Fraction(1, 516_095)
          and forgery_success_bound(T, 1) == float(b1)
          and round(float(b1), 8) == 1.94e-6
          and round(float(b1825), 5) == 3.54e-3
          and forgery_success_bound(T, 1825) == float(b1825))
    record(6, ok, f"{r.hits} hits in 10^6 (z={z:+.2f}); bound 1/{b1.denominator} = {float(b1):.3e}; "
                  f"n=1825 -> {float(b1825):.3e}")
    assert ok


# 7 ------------------------------------------------------------------------

def test_c07_oracle_equivalence(toy_params, toy_keys, toy_pbh, toy_cwc):
    universe = range(16)
    queries = {x: build_query(x, toy_keys, toy_pbh, toy_cwc) for x in universe}
    total = agree = 0
    for k in range(5):
        for subset in itertools.combinations(universe, k):
            d = DeviceList(ListKind.BLACKLIST)
            d._values = set(subset)
            prepared = prepare_list(preprocess_fresh(d, toy_pbh, toy_cwc), toy_params)
            for x in universe:
                ms = sample_masks(toy_params.plain_modulus, 8)
                ct = psi_sum(queries[x], prepared, ms, toy_keys.rk, toy_cwc).ct_res
                out = demask(client_aggregate(he.decrypt(toy_keys.sk, ct), toy_params.plain_modulus), ms)
                agree += out is (Outcome.MATCH if x in subset else Outcome.NO_MATCH)
                total += 1
    ok = agree == total
    record(7, ok, f"{agree}/{total} agree (16 identifiers x {total // 16} subsets of size <= 4)")
    assert ok


# 8 ------------------------------------------------------------------------

def test_c08_masking_algebra():
    rng = np.random.default_rng(8)
    trials = 100_000
    honest = tampered = overflow = 0
    for i in range(trials):
        n = 8192 if i < 200 else 64  # full ring for a slice, small vectors for the bulk
        ms = sample_masks(T, n)
        overflow += ms.r1 + int(ms.r2.max()) >= T
        result = np.zeros(n, dtype=np.int64)
        truth = Outcome.NO_MATCH
        if rng.random() < 0.5:
            result[rng.integers(n)] = 1
            truth = Outcome.MATCH
        y = ms.r1 * result + ms.r2  # no reduction needed: bounded masks never wrap
        overflow += int(y.max()) >= T
        s = client_aggregate(y, T)
        honest += demask(s, ms) is truth
        forged = int(rng.integers(0, T))
        if forged not in (ms.R2, (ms.R2 + ms.r1) % T):
            tampered += demask(forged, ms) is Outcome.PROTOCOL_DEVIATION
        else:
            tampered += 1
        # a tamper by a fixed offset that is neither 0 nor r1
        delta = int(rng.integers(1, T))
        if delta != ms.r1:
            base = ms.R2 if truth is Outcome.NO_MATCH else (ms.R2 + ms.r1) % T
            bad = (base + delta) % T
            if bad not in (ms.R2, (ms.R2 + ms.r1) % T):
                assert demask(bad, ms) is Outcome.PROTOCOL_DEVIATION
    ok = honest == trials and tampered == trials and overflow == 0
    record(8, ok, f"honest {honest}/{trials}, tampered -> deviation {tampered}/{trials}, overflow {overflow}")
    assert ok


# 9 ------------------------------------------------------------------------

def test_c09_encoding_inverses():
    pp = PBHParams(8192, os.urandom(16))
    xs = np.random.default_rng(9).integers(0, 2 ** 47, 100_000)
    slots, res = pbh_map_many(xs, pp)
    back = (slots ^ pp.prf(res)) << pp.lam_bar | res
    pbh_ok = np.array_equal(back, xs) and all(
        pbh_invert(int(s), int(r), pp) == int(x) for s, r, x in zip(slots[:1000], res[:1000], xs[:1000]))

    cwc_bad = 0
    for lam_bar in range(1, 9):
        for h in range(1, 11):
            cp = cwc_params_for(lam_bar, h)
            rs = np.arange(2 ** lam_bar)
            cws = encode_cwc_many(rs, cp)
            cwc_bad += int((cws.sum(axis=1) != h).sum())
            cwc_bad += sum(decode_cwc(c, cp) != r for c, r in zip(cws, rs))

    min_bad = 0
    for h in range(1, 11):
        for lam_bar in range(1, 41):
            l = cwc_params_for(lam_bar, h).l
            min_bad += not (math.comb(l, h) >= 2 ** lam_bar > math.comb(l - 1, h))
    ok = pbh_ok and cwc_bad == 0 and min_bad == 0
    record(9, ok, f"pbh round trip {'ok' if pbh_ok else 'FAILED'} on 10^5; cwc mismatches {cwc_bad} "
                  f"(lam_bar<=8, h<=10); minimality violations {min_bad}/400")
    assert ok


# 10 -----------------------------------------------------------------------

def test_c10_incremental_preprocessing():
    pp = PBHParams(8192, perm_key_from_seed(10))
    cp = cwc_params_for(pp.lam_bar, 8, T)
    d = gen_random_list(1 << 12, 10)
    preprocess(d, pp, cp)
    rng = np.random.default_rng(1010)  # independent of the list generator's seed
    adds = removes = 0
    for _ in range(100):
        if rng.random() < 0.5 and len(d):
            vals = d.values()
            d.remove_pei(int(vals[rng.integers(len(vals))]))
            removes += 1
        else:
            v = int(rng.integers(0, 10 ** 14))
            if v not in d:
                d.add_pei(v)
                adds += 1
    inc = preprocess(d, pp, cp)
    fresh = preprocess_fresh(d, pp, cp)
    ok = (inc.planes.shape == fresh.planes.shape and np.array_equal(inc.planes, fresh.planes)
          and np.array_equal(inc.occupancy, fresh.occupancy))
    record(10, ok, f"{adds} adds + {removes} removes; planes {inc.planes.shape} bit-identical: {ok}")
    assert ok


# 11 -----------------------------------------------------------------------

def test_c11_le_hook(toy_params, toy_keys, toy_pbh, toy_cwc):
    rng = np.random.default_rng(11)
    le = le_keygen()
    client = UEClient(toy_keys, le.pk_LE)
    sessions = grey_hits = mismatched = decrypt_ok = 0
    records_total = 0
    for _ in range(10):
        vals = rng.permutation(32)
        black = [PEI.from_int(int(v)) for v in vals[:5]]
        grey = [PEI.from_int(int(v)) for v in vals[5:10]]
        log = AuditLog()
        srv = MNOServer(Registry(DeviceList(ListKind.BLACKLIST, black), DeviceList(ListKind.GREYLIST, grey)),
                        toy_pbh, toy_cwc, toy_params, log)
        client.pp = None
        expected_forwarded = []
        for x in rng.integers(0, 32, 100):
            p = PEI.from_int(int(x))
            rec = run_session_inproc(client, srv, p)
            sessions += 1
            want = (Decision.LISTED_BLACKLIST if p in black else
                    Decision.LISTED_GREYLIST if p in grey else Decision.NOT_LISTED)
            mismatched += rec.decision is not want
            if rec.decision is Decision.LISTED_GREYLIST:
                grey_hits += 1
                expected_forwarded.append((rec.session_id, p))
        recs = log.records()
        records_total += len(recs)
        for r, (sid, p) in zip(recs, expected_forwarded):
            decrypt_ok += r.session_id == sid and le_decrypt(r.le_ct, le.sk_LE) == p
    ok = (sessions == 1000 and mismatched == 0 and records_total == grey_hits
          and decrypt_ok == grey_hits and grey_hits > 0)
    record(11, ok, f"{sessions} sessions, {grey_hits} greylist matches, {records_total} audit records, "
                   f"{decrypt_ok} escrow decryptions exact, {mismatched} wrong decisions")
    assert ok
