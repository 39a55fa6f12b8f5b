"""Benchmark harness, forgery Monte Carlo and parameter search."""
from __future__ import annotations

import csv
import hashlib
import io
import math
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import he
from .encoding import PEI, PBHParams, cwc_params_for, min_length, pbh_map, EncodingError
from .le_hook import AuditLog, le_keygen
from .psm import Decision, build_query, prepare_list, psi_sum, sample_masks, t_eff
from .registry import ListKind, Registry, gen_random_list, preprocess
from .transport import MNOServer, UEClient, measure, run_session_inproc

PEI_BITS = 47
FULL_LIST_SIZE = 1 << 20

# Table-2 header names; SD / max columns append a suffix
CSV_COLUMNS = [
    "Test", "Runs", "Correct", "Min noise budget [bits]",
    "Client request [B]", "Client request SD [B]",
    "Server response [B]", "Server response SD [B]",
    "Client response [B]", "Client response SD [B]",
    "UE offline [ms]", "UE offline SD [ms]", "UE offline max [ms]",
    "MNO offline [ms]", "MNO offline SD [ms]", "MNO offline max [ms]",
    "UE online [ms]", "UE online SD [ms]", "UE online max [ms]",
    "MNO online [ms]", "MNO online SD [ms]", "MNO online max [ms]",
]


def perm_key_from_seed(seed: int) -> bytes:
    return hashlib.sha256(f"pbh-key:{seed}".encode()).digest()[:16]


def planes_memory_bytes(list_size: int, params: he.HEParams, l: int) -> int:
    """Rough HE-plane footprint: expected rows x l x limbs x N x 8 bytes."""
    N = params.poly_degree
    load = list_size / N
    rows = max(1, math.ceil(load + 4 * math.sqrt(max(load, 1)) + 4))
    return rows * l * params.max_level * N * 8


@dataclass
class RunResult:
    kind: str
    pei: PEI
    expected: Decision
    decision: Decision
    metrics: dict
    min_budget: int
    slot_value: int   # client's masked value at its own slot (blacklist list)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)         # dicts keyed by CSV_COLUMNS
    runs: list = field(default_factory=list)         # RunResult
    histograms: dict = field(default_factory=dict)   # kind -> (edges, counts)
    preprocess_ms: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def failures(self) -> int:
        return sum(r.decision is not r.expected or r.min_budget == 0 for r in self.runs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def to_text(self) -> str:
        out = []
        for r in self.rows:
            out.append(f"{r['Test']} (runs: {r['Runs']}, correct: {r['Correct']}, "
                       f"min budget: {r['Min noise budget [bits]']} bits)")
            for name, unit in (("Client request", "B"), ("Server response", "B"), ("Client response", "B")):
                out.append(f"  {name:<16} {r[f'{name} [{unit}]']:>16,.2f} {unit} ± {r[f'{name} SD [{unit}]']:,.2f} {unit}")
            for name in ("UE offline", "MNO offline", "UE online", "MNO online"):
                out.append(f"  {name:<16} {r[f'{name} [ms]']:>16,.2f} ms ± {r[f'{name} SD [ms]']:,.2f} ms"
                           f" (max {r[f'{name} max [ms]']:,.2f} ms)")
        return "\n".join(out)

    def histogram_text(self) -> str:
        out = []
        for kind, (edges, counts) in self.histograms.items():
            out.append(f"masked value at the client slot, {kind} runs")
            top = max(counts.max(), 1)
            for i, c in enumerate(counts):
                out.append(f"  [{int(edges[i]):>8}, {int(edges[i + 1]):>8}) {int(c):>5} {'#' * int(40 * c / top)}")
        return "\n".join(out)


def _stats(xs):
    xs = [float(x) for x in xs if x is not None]
    if not xs:
        return 0.0, 0.0, 0.0
    sd = statistics.stdev(xs) if len(xs) > 1 else 0.0
    return statistics.fmean(xs), sd, max(xs)


def _row(test: str, runs: list, preprocess_ms: float) -> dict:
    r = {"Test": test, "Runs": len(runs),
         "Correct": sum(x.decision is x.expected for x in runs),
         "Min noise budget [bits]": min((x.min_budget for x in runs), default=0)}
    for name, key in (("Client request", "client_request_bytes"), ("Server response", "server_response_bytes"),
                      ("Client response", "client_response_bytes")):
        m, sd, _ = _stats(x.metrics[key] for x in runs)
        r[f"{name} [B]"], r[f"{name} SD [B]"] = round(m, 2), round(sd, 2)
    for name, key in (("UE offline", "ue_offline_ms"), ("MNO offline", "mno_offline_ms"),
                      ("UE online", "ue_online_ms"), ("MNO online", "mno_online_ms")):
        vals = [x.metrics[key] for x in runs]
        if key == "mno_offline_ms":
            vals = [v + preprocess_ms for v in vals]
        m, sd, mx = _stats(vals)
        r[f"{name} [ms]"], r[f"{name} SD [ms]"], r[f"{name} max [ms]"] = round(m, 3), round(sd, 3), round(mx, 3)
    return r


def cmd_bench(list_size: int = 1 << 14, runs: int = 150, profile: str = "default_safe", seed: int = 1,
              full: bool = False, replicate_overflow: bool = False, parallel: int = 1,
              grey_size: int = 1024, grey_runs: int = 0, single_list: bool = False,
              poly_degree: int = 8192, h: int = 8, log=print) -> BenchReport:
    """Blacklisted, unlisted and (optionally) greylisted sessions against fresh lists."""
    if full:
        list_size = FULL_LIST_SIZE
    params = he.gen_params(profile, poly_degree)
    N = params.poly_degree
    pp = PBHParams(N, perm_key_from_seed(seed))
    cp = cwc_params_for(pp.lam_bar, h, params.plain_modulus)
    need = planes_memory_bytes(list_size, params, cp.l)
    if full or need > 2 << 30:
        log(f"warning: list of {list_size} entries needs about {need / 2**30:.1f} GiB of encoded planes")
    keys = he.keygen(params)
    le = le_keygen()
    black = gen_random_list(list_size, seed, ListKind.BLACKLIST)
    grey = gen_random_list(0 if single_list else grey_size, seed + 1, ListKind.GREYLIST, exclude=black)
    reg = Registry(black, grey)
    t0 = time.perf_counter()
    server = MNOServer(reg, pp, cp, params, AuditLog(), single_list=single_list,
                       full_range_masks=replicate_overflow)
    pre_ms = (time.perf_counter() - t0) * 1e3
    log(f"preprocessed {list_size} entries into {server.snapshot()[ListKind.BLACKLIST].n_rows} rows"
        f" in {pre_ms:.0f} ms")

    rng = np.random.default_rng(seed + 2)
    bl_vals = black.values()
    picks = [("Blacklist", PEI.from_int(int(v)), Decision.LISTED_BLACKLIST)
             for v in rng.choice(bl_vals, size=min(runs, len(bl_vals)), replace=False)]
    if grey_runs and len(grey):
        gv = grey.values()
        picks += [("Greylist", PEI.from_int(int(v)), Decision.LISTED_GREYLIST)
                  for v in rng.choice(gv, size=min(grey_runs, len(gv)), replace=False)]
    fresh = gen_random_list(runs, seed + 3, exclude=set(black) | set(grey))
    picks += [("Whitelist", p, Decision.NOT_LISTED) for p in fresh]

    def one(item):
        kind, pei, expected = item
        client = UEClient(keys, le.pk_LE)
        rec = run_session_inproc(client, server, pei)
        resp = client.last_response or []
        budget = min((he.noise_budget(keys.sk, c) for c in resp), default=0)
        slot, _ = pbh_map(pei.value, pp)
        y = int(he.decrypt(keys.sk, resp[0])[slot]) if resp else -1
        return RunResult(kind, pei, expected, rec.decision, measure(rec), budget, y)

    results = []
    if parallel > 1:
        with ThreadPoolExecutor(parallel) as ex:
            results = list(ex.map(one, picks))
    else:
        for i, item in enumerate(picks):
            results.append(one(item))
            r = results[-1]
            if r.decision is not r.expected:
                log(f"run {i}: {r.kind} {r.pei} -> {r.decision.value} (expected {r.expected.value})")
    rep = BenchReport(runs=results, preprocess_ms=pre_ms,
                      config=dict(list_size=list_size, runs=runs, profile=profile, seed=seed,
                                  replicate_overflow=replicate_overflow, parallel=parallel))
    t = params.plain_modulus
    edges = np.linspace(0, t, 17)
    for kind in ("Blacklist", "Greylist", "Whitelist"):
        rs = [r for r in results if r.kind == kind]
        if rs:
            rep.rows.append(_row(f"{kind} (runs: {len(rs)})", rs, pre_ms))
            vals = [r.slot_value for r in rs if r.slot_value >= 0]
            rep.histograms[kind] = (edges, np.histogram(vals, bins=edges)[0])
    return rep


# -------------------------------------------------------------- forgery

@dataclass
class ForgeResult:
    trials: int
    hits: int
    empirical_rate: float
    bound: float
    t_eff: int
    curve: list  # (attempts, 1-(1-1/t_eff)^n, union bound)


def cmd_forge_sim(t: int | None = None, trials: int = 10 ** 6, strategy: str = "uniform",
                  seed: int | None = None, t_eff_value: int | None = None, batch: int = 1 << 20) -> ForgeResult:
    """An evading client forges pt_sum = R2 + guess; it wins iff guess == r1.

    Each trial draws a fresh r1 exactly as the server does.  `strategy` is the
    adversary's guess: "uniform" over the mask range or "fixed" (always 1).
    """
    if t is None and t_eff_value is None:
        raise ValueError("give t or t_eff")
    te = t_eff_value if t_eff_value is not None else t_eff(t)
    tt = t if t is not None else 2 * (te + 1)
    if te < 1:
        raise ValueError("mask space is empty")
    if strategy not in ("uniform", "fixed"):
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        k = min(batch, trials - done)
        r1 = rng.integers(1, te + 1, k)
        r2sum = rng.integers(0, tt, k)
        guess = rng.integers(1, te + 1, k) if strategy == "uniform" else np.ones(k, dtype=np.int64)
        forged = (r2sum + guess) % tt
        hits += int(np.count_nonzero((forged - r2sum) % tt == r1))
        done += k
    rate = hits / trials if trials else 0.0
    pts = sorted({1, 10, 100, 365, 1000, 1825, 10 ** 4, 10 ** 5, te})
    curve = [(n, 1 - (1 - 1 / te) ** n, min(1.0, n / te)) for n in pts]
    return ForgeResult(trials, hits, rate, 1 / te, te, curve)


# ----------------------------------------------------------- param search

@dataclass
class ParamCandidate:
    N: int
    lam_bar: int
    h: int
    l: int
    lam: int
    runtime_ms: float | None = None
    request_bytes: int | None = None
    decryptable: bool | None = None
    discarded: str | None = None
    paper_choice: bool = False


def cmd_param_search(target_lam: int = PEI_BITS, h_range=range(2, 11), n_range=(4096, 8192, 16384),
                     probe_list_size: int = 1 << 10, probe: bool = True, profile: str = "default_safe",
                     seed: int = 1, log=lambda *a: None) -> list:
    """Enumerate (N, lam_bar, h); discard lam != target; probe and rank the rest."""
    cands = []
    for N in n_range:
        logn = int(math.log2(N))
        base = target_lam - logn
        for lb in (base - 1, base, base + 1):
            for h in h_range:
                l = min_length(lb, h)
                c = ParamCandidate(N, lb, h, l, lb + logn)
                c.paper_choice = (N, lb, h) == (8192, 34, 8)
                if c.lam != target_lam:
                    c.discarded = f"reconstructed bit length {c.lam} != {target_lam}"
                cands.append(c)
    for c in cands:
        if c.discarded:
            continue
        params = he.gen_params(profile, c.N)
        try:
            cp = cwc_params_for(c.lam_bar, c.h, params.plain_modulus)
        except EncodingError as e:
            c.discarded = str(e)
            continue
        keys = he.keygen(params)
        pp = PBHParams(c.N, perm_key_from_seed(seed))
        q = build_query(PEI.from_int(12345678901234), keys, pp, cp)
        c.request_bytes = sum(len(he.serialize_cipher(b)) for b in q.bits)
        if not probe:
            continue
        lst = gen_random_list(probe_list_size, seed)
        prepared = prepare_list(preprocess(lst, pp, cp), params)
        ms = sample_masks(params.plain_modulus, c.N)
        t0 = time.perf_counter()
        res = psi_sum(q, prepared, ms, keys.rk, cp)
        c.runtime_ms = (time.perf_counter() - t0) * 1e3
        c.decryptable = he.noise_budget(keys.sk, res.ct_res) > 0
        log(f"N={c.N} lam_bar={c.lam_bar} h={c.h} l={c.l}: {c.runtime_ms:.0f} ms, "
            f"{c.request_bytes} B, decryptable={c.decryptable}")
    kept = [c for c in cands if not c.discarded]
    kept.sort(key=lambda c: (not c.decryptable if c.decryptable is not None else False,
                             c.runtime_ms if c.runtime_ms is not None else 0.0,
                             c.request_bytes or 0))
    return kept + [c for c in cands if c.discarded]
