import math
import subprocess
import sys

import numpy as np
import pytest

from pei_psm import cli, he
from pei_psm.bench import CSV_COLUMNS, cmd_bench, cmd_forge_sim, cmd_param_search
from pei_psm.encoding import PEI
from pei_psm.le_hook import AuditLog, le_keygen
from pei_psm.registry import DeviceList, ListKind, Registry
from pei_psm.transport import MNOServer, run_server


# ------------------------------------------------------------ lists / config

def test_gen_lists_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["gen-lists", "--size", "1024", "--seed", "7", "--out-dir", str(a)]) == 0
    assert cli.main(["gen-lists", "--size", "1024", "--seed", "7", "--out-dir", str(b)]) == 0
    for f in ("blacklist.txt", "greylist.txt"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    lines = (a / "blacklist.txt").read_text().split()
    assert len(lines) == 1024 and all(len(x) == 14 for x in lines)
    assert not set(lines) & set((a / "greylist.txt").read_text().split())


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "psm.conf"
    cfg.write_text("# list generation\nsize = 12\ngrey-size=3\nout_dir = " + str(tmp_path / "c") + "\n")
    assert cli.main(["gen-lists", "--config", str(cfg)]) == 0
    assert len((tmp_path / "c" / "blacklist.txt").read_text().split()) == 12
    assert cli.main(["gen-lists", "--config", str(cfg), "--size", "5"]) == 0
    assert len((tmp_path / "c" / "blacklist.txt").read_text().split()) == 5
    assert len((tmp_path / "c" / "greylist.txt").read_text().split()) == 3


def test_config_errors(tmp_path):
    cfg = tmp_path / "bad.conf"
    cfg.write_text("nonsense = 1\n")
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-lists", "--config", str(cfg)])
    assert e.value.code != 0
    cfg.write_text("just words\n")
    with pytest.raises(SystemExit):
        cli.main(["gen-lists", "--config", str(cfg)])


def test_usage_errors():
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 2
    with pytest.raises(SystemExit):
        cli.main(["bench", "--profile", "nope"])


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "pei_psm", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "param-search" in out.stdout


# ------------------------------------------------------------- verify

def test_verify_exit_codes(tmp_path, toy_params, toy_keys, toy_pbh, toy_cwc):
    le = le_keygen()
    keys = tmp_path / "keys.bin"
    keys.write_bytes(he.serialize_keys(toy_keys))
    (tmp_path / "le.pub").write_bytes(le.pk_LE)
    reg = Registry(DeviceList(ListKind.BLACKLIST, [PEI.from_int(3)]),
                   DeviceList(ListKind.GREYLIST, [PEI.from_int(8)]))
    srv = MNOServer(reg, toy_pbh, toy_cwc, toy_params, AuditLog(tmp_path / "audit.log"))
    tcp = run_server(("127.0.0.1", 0), srv, background=True)
    host, port = tcp.server_address
    base = ["verify", "--host", host, "--port", str(port), "--keys", str(keys), "--le-pub", str(tmp_path / "le.pub")]
    try:
        assert cli.main(base + ["--pei", "00000000000004"]) == 0
        assert cli.main(base + ["--pei", "00000000000003"]) == 2
        assert cli.main(base + ["--pei", "00000000000008", "--verbose"]) == 2
        assert cli.main(base + ["--pei", "123"]) == 1  # malformed identifier
        public = tmp_path / "pub.bin"
        public.write_bytes(he.serialize_keys(toy_keys, include_secret=False))
        assert cli.main(base[:5] + ["--keys", str(public), "--le-pub", str(tmp_path / "le.pub"),
                                    "--pei", "00000000000004"]) == cli.EXIT_USAGE
    finally:
        tcp.shutdown()
        tcp.server_close()
    assert len(srv.audit_log) == 1


def test_keygen_writes_files(tmp_path):
    out = tmp_path / "k.bin"
    assert cli.main(["keygen", "--poly-degree", "4096", "--out", str(out), "--le-out", str(tmp_path / "le.key")]) == 0
    km = he.deserialize_keys(out.read_bytes())
    assert km.sk is not None and km.params.poly_degree == 4096
    assert len((tmp_path / "le.key.pub").read_bytes()) == 32


# ------------------------------------------------------------- forge sim

def test_forge_sim_statistics():
    r = cmd_forge_sim(t_eff_value=1021, trials=10 ** 6, seed=11)
    p = 1 / 1021
    sd = math.sqrt(p * (1 - p) / r.trials)
    assert abs(r.empirical_rate - p) <= 3 * sd
    assert r.bound == pytest.approx(p)


def test_forge_sim_fixed_strategy():
    r = cmd_forge_sim(t_eff_value=101, trials=200_000, strategy="fixed", seed=3)
    sd = math.sqrt((1 / 101) * (1 - 1 / 101) / r.trials)
    assert abs(r.empirical_rate - 1 / 101) <= 3 * sd


def test_forge_sim_baseline_bound_and_edges():
    r = cmd_forge_sim(t=1_032_193, trials=0)
    assert r.t_eff == 516_095 and r.bound == 1 / 516_095
    assert r.hits == 0 and r.empirical_rate == 0
    curve = dict((n, u) for n, _, u in r.curve)
    assert curve[1825] == pytest.approx(3.54e-3, rel=5e-3)
    with pytest.raises(ValueError):
        cmd_forge_sim(t_eff_value=10, strategy="clever")


def test_forge_sim_cli(capsys):
    assert cli.main(["forge-sim", "--trials", "1000", "--seed", "1"]) == 0
    assert "t_eff=516095" in capsys.readouterr().out


# ------------------------------------------------------------- param search

@pytest.fixture(scope="module")
def search():
    return cmd_param_search(h_range=range(6, 10), n_range=(8192,), probe=False)


def test_param_search_paper_choice(search):
    paper = [c for c in search if c.paper_choice]
    assert len(paper) == 1
    c = paper[0]
    assert (c.N, c.lam_bar, c.h, c.l, c.lam) == (8192, 34, 8, 76, 47) and not c.discarded


def test_param_search_discards(search):
    c = next(c for c in search if (c.N, c.lam_bar, c.h) == (8192, 33, 8))
    assert c.lam == 46 and c.discarded
    # 10! exceeds t, so h=10 would be dropped too; h=9 survives
    assert all(c.lam == 47 for c in search if not c.discarded)


def test_param_search_h7_larger_request(search):
    by_h = {c.h: c for c in search if c.lam_bar == 34 and not c.discarded}
    assert by_h[7].request_bytes > by_h[8].request_bytes
    assert by_h[7].l > by_h[8].l


def test_param_search_probe_small():
    cands = cmd_param_search(h_range=range(8, 9), n_range=(8192,), probe_list_size=64)
    kept = [c for c in cands if not c.discarded]
    assert len(kept) == 1 and kept[0].decryptable and kept[0].runtime_ms > 0


# ------------------------------------------------------------- bench

def test_small_bench(tmp_path):
    rep = cmd_bench(list_size=512, runs=3, grey_size=16, grey_runs=2, seed=5, log=lambda m: None)
    assert rep.failures == 0
    assert {r["Test"].split()[0] for r in rep.rows} == {"Blacklist", "Greylist", "Whitelist"}
    for row in rep.rows:
        assert row["Correct"] == row["Runs"]
        assert row["Client response [B]"] == 16 and row["Client response SD [B]"] == 0
        assert row["Min noise budget [bits]"] > 0
    csv = rep.to_csv().splitlines()
    assert csv[0].split(",") == CSV_COLUMNS
    assert "Blacklist" in rep.histogram_text()


def test_bench_cli_writes_csv(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    rc = cli.main(["bench", "--list-size", "128", "--runs", "2", "--single-list", "--out", str(out)])
    assert rc == 0
    text = out.read_text()
    assert text.startswith("Test,Runs,Correct")
    assert (tmp_path / "bench.csv.hist.txt").exists()
    rows = text.strip().splitlines()[1:]
    assert len(rows) == 2
    col = CSV_COLUMNS.index("Client response [B]")
    assert all(float(r.split(",")[col]) == 8 for r in rows)


def test_replicate_overflow_flag_runs():
    rep = cmd_bench(list_size=128, runs=3, replicate_overflow=True, single_list=True, log=lambda m: None)
    assert rep.config["replicate_overflow"]
    assert len(rep.runs) == 6


def test_parallel_bench():
    rep = cmd_bench(list_size=128, runs=4, parallel=4, single_list=True, log=lambda m: None)
    assert rep.failures == 0
