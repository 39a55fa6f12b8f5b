"""Command-line entry point: ``pei-psm <command> ...`` or ``python -m pei_psm``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import he
from .encoding import PEI, EncodingError, PBHParams, cwc_params_for

EXIT_USAGE = 64


def load_config(path) -> dict:
    """Parse a key=value file; '#' starts a comment, dashes in keys become underscores."""
    out = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ValueError(f"{path}:{no}: expected key=value")
        k, v = (x.strip() for x in s.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(parser: argparse.ArgumentParser, cfg: dict) -> dict:
    """Convert config strings with each option's own type; unknown keys are errors."""
    acts = {a.dest: a for a in parser._actions}
    out = {}
    for k, v in cfg.items():
        a = acts.get(k)
        if a is None:
            raise ValueError(f"unknown configuration key {k!r}")
        if isinstance(a, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            out[k] = v.lower() in ("1", "true", "yes", "on")
        elif a.type is not None:
            out[k] = a.type(v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------- commands

def cmd_keygen(args) -> int:
    from .le_hook import le_keygen
    params = he.gen_params(args.profile, args.poly_degree)
    km = he.keygen(params)
    Path(args.out).write_bytes(he.serialize_keys(km))
    print(f"HE keys ({params.profile}, N={params.poly_degree}) -> {args.out}")
    if args.le_out:
        le = le_keygen()
        Path(args.le_out).write_bytes(le.sk_LE)
        Path(args.le_out + ".pub").write_bytes(le.pk_LE)
        print(f"LE key pair -> {args.le_out} (private), {args.le_out}.pub (public)")
    return 0


def cmd_gen_lists(args) -> int:
    from .registry import ListKind, gen_random_list, save_list
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    black = gen_random_list(args.size, args.seed, ListKind.BLACKLIST)
    grey = gen_random_list(args.grey_size, args.seed + 1, ListKind.GREYLIST, exclude=black)
    save_list(black, d / "blacklist.txt")
    save_list(grey, d / "greylist.txt")
    print(f"{len(black)} blacklist and {len(grey)} greylist identifiers -> {d}")
    return 0


def _server_from_args(args):
    from .bench import perm_key_from_seed
    from .le_hook import AuditLog
    from .registry import DeviceList, ListKind, Registry, load_list, preprocess_cached
    from .transport import MNOServer
    params = he.gen_params(args.profile, args.poly_degree)
    pp = PBHParams(params.poly_degree, perm_key_from_seed(args.seed))
    cp = cwc_params_for(pp.lam_bar, args.h, params.plain_modulus)
    black = load_list(args.blacklist, ListKind.BLACKLIST)
    grey = load_list(args.greylist, ListKind.GREYLIST) if args.greylist else DeviceList(ListKind.GREYLIST)
    reg = Registry(black, grey)
    preprocess_cached(black, pp, cp, args.blacklist)
    if args.greylist:
        preprocess_cached(grey, pp, cp, args.greylist)
    return MNOServer(reg, pp, cp, params, AuditLog(args.audit_log), single_list=args.single_list)


def cmd_serve(args) -> int:
    from .transport import run_server
    srv = _server_from_args(args)
    print(f"serving on {args.host}:{args.port} "
          f"({srv.snapshot()[srv.kinds[0]].n_rows} blacklist rows)", flush=True)
    try:
        run_server((args.host, args.port), srv)
    except KeyboardInterrupt:
        pass
    return 0


def cmd_verify(args) -> int:
    from .transport import UEClient, run_client, measure
    km = he.deserialize_keys(Path(args.keys).read_bytes())
    if km.sk is None:
        print("key file holds no secret key", file=sys.stderr)
        return EXIT_USAGE
    pk_le = Path(args.le_pub).read_bytes()
    d, rec = run_client((args.host, args.port), PEI(args.pei), UEClient(km, pk_le))
    print(d.value)
    if args.verbose:
        print(json.dumps(measure(rec), indent=2))
    return d.exit_code


def cmd_bench(args) -> int:
    from .bench import cmd_bench as bench
    rep = bench(list_size=args.list_size, runs=args.runs, profile=args.profile, seed=args.seed,
                full=args.full, replicate_overflow=args.replicate_overflow, parallel=args.parallel,
                grey_size=args.grey_size, grey_runs=args.grey_runs, single_list=args.single_list,
                poly_degree=args.poly_degree, h=args.h,
                log=lambda m: print(m, file=sys.stderr, flush=True))
    print(rep.to_text())
    print(rep.histogram_text())
    if args.out:
        Path(args.out).write_text(rep.to_csv(), encoding="utf-8")
        Path(args.out + ".hist.txt").write_text(rep.histogram_text() + "\n", encoding="utf-8")
    bad = rep.failures
    if bad:
        note = " (expected with --replicate-overflow)" if args.replicate_overflow else ""
        print(f"{bad} run(s) failed{note}", file=sys.stderr)
        return 0 if args.replicate_overflow else 1
    return 0


def cmd_forge_sim(args) -> int:
    from .bench import cmd_forge_sim as forge
    r = forge(t=args.t, trials=args.trials, strategy=args.strategy, seed=args.seed,
              t_eff_value=args.t_eff)
    sd = (r.bound * (1 - r.bound) / r.trials) ** 0.5 if r.trials else 0.0
    print(f"t_eff={r.t_eff} trials={r.trials} hits={r.hits} rate={r.empirical_rate:.6g} "
          f"bound=1/{r.t_eff}={r.bound:.6g} sd={sd:.3g}")
    print("attempts,p_at_least_one,union_bound")
    for n, p, b in r.curve:
        print(f"{n},{p:.6g},{b:.6g}")
    return 0


def cmd_param_search(args) -> int:
    from .bench import cmd_param_search as search
    hs = range(args.h_min, args.h_max + 1)
    ns = [int(x) for x in args.n_values.split(",")]
    cands = search(args.target_lam, hs, ns, probe_list_size=args.probe_list_size, probe=not args.no_probe,
                   profile=args.profile, seed=args.seed, log=lambda m: print(m, file=sys.stderr, flush=True))
    print("rank,N,lam_bar,h,l,lam,runtime_ms,request_bytes,decryptable,status")
    for i, c in enumerate(cands, 1):
        status = "discarded: " + c.discarded if c.discarded else ("paper choice" if c.paper_choice else "")
        rt = f"{c.runtime_ms:.1f}" if c.runtime_ms is not None else ""
        print(f"{i if not c.discarded else ''},{c.N},{c.lam_bar},{c.h},{c.l},{c.lam},{rt},"
              f"{c.request_bytes or ''},{'' if c.decryptable is None else c.decryptable},{status}")
    return 0


# ------------------------------------------------------------------ parser

def _common(p, profile=True):
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    if profile:
        p.add_argument("--profile", choices=["default_safe", "paper_original"], default="default_safe")
        p.add_argument("--poly-degree", type=int, default=8192, help="ring degree N (slot count)")
    p.add_argument("--seed", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pei-psm", description="Private equipment-identifier verification")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate HE keys and an LE key pair")
    _common(p)
    p.add_argument("--out", default="keys.bin")
    p.add_argument("--le-out", default=None, help="write the LE private key here and the public key to <path>.pub")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("gen-lists", help="write deterministic random blacklist/greylist files")
    _common(p, profile=False)
    p.add_argument("--size", type=int, default=1 << 14)
    p.add_argument("--grey-size", type=int, default=1024)
    p.add_argument("--out-dir", default="lists")
    p.set_defaults(func=cmd_gen_lists)

    for name, fn, helptext in (("serve", cmd_serve, "run the MNO server"),):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=7413)
        p.add_argument("--blacklist", required=False, default="lists/blacklist.txt")
        p.add_argument("--greylist", default=None)
        p.add_argument("--audit-log", default="audit.log")
        p.add_argument("--single-list", action="store_true")
        p.add_argument("--h", type=int, default=8, help="codeword weight")
        p.set_defaults(func=fn)

    p = sub.add_parser("verify", help="run one verification as the UE")
    _common(p, profile=False)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7413)
    p.add_argument("--keys", default="keys.bin")
    p.add_argument("--le-pub", default="le.key.pub")
    p.add_argument("--pei", required=True, help="14-digit identifier")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="Table-2 style benchmark with ground-truth checks")
    _common(p)
    p.add_argument("--list-size", type=int, default=1 << 14)
    p.add_argument("--runs", type=int, default=150)
    p.add_argument("--full", action="store_true", help="use a 2^20-entry list (needs several GiB)")
    p.add_argument("--replicate-overflow", action="store_true", help="full-range masks (pre-fix behaviour)")
    p.add_argument("--parallel", type=int, default=1, help="concurrent sessions")
    p.add_argument("--grey-size", type=int, default=1024)
    p.add_argument("--grey-runs", type=int, default=0)
    p.add_argument("--single-list", action="store_true", help="blacklist only; 8-byte sum report")
    p.add_argument("--h", type=int, default=8, help="codeword weight")
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("forge-sim", help="Monte Carlo of a client guessing r1")
    p.add_argument("--config")
    p.add_argument("--t", type=int, default=None, help="plaintext modulus")
    p.add_argument("--t-eff", type=int, default=None, help="mask space size instead of t")
    p.add_argument("--trials", type=int, default=10 ** 6)
    p.add_argument("--strategy", choices=["uniform", "fixed"], default="uniform")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_forge_sim)

    p = sub.add_parser("param-search", help="rank (N, lam_bar, h) candidates")
    _common(p)
    p.add_argument("--target-lam", type=int, default=47)
    p.add_argument("--h-min", type=int, default=2)
    p.add_argument("--h-max", type=int, default=10)
    p.add_argument("--n-values", default="4096,8192,16384")
    p.add_argument("--probe-list-size", type=int, default=1024)
    p.add_argument("--no-probe", action="store_true", help="skip timing probes")
    p.set_defaults(func=cmd_param_search)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = ap.parse_args(argv)
    if getattr(args, "config", None):
        sp = ap._subparsers._group_actions[0].choices[args.command]
        try:
            sp.set_defaults(**_coerce(sp, load_config(args.config)))
        except (OSError, ValueError) as e:
            ap.error(str(e))
        args = ap.parse_args(argv)
    if args.command == "forge-sim" and args.t is None and args.t_eff is None:
        args.t = 1032193
    try:
        return args.func(args)
    except (EncodingError, he.HEError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
