"""Command-line experiment runner writing CSV tables."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import contextmanager

import numpy as np

from .core import FIT_PRESETS, PRESETS, config_from_dict, load_config, required_ul_snr_db
from .mdp import baseline_policies, estimate_lifespan, run_episode, depletion_cycles
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger("feedcell")


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


@contextmanager
def _sink(path):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def write_csv(path, header, rows):
    with _sink(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _int_list(s):
    return [int(x) for x in s.split(",") if x.strip()]


def _cfg(args, L=None, M=None):
    cfg = load_config(args.config, args.preset)
    if L is not None or M is not None:
        L = cfg.L if L is None else L
        d = {"L": L, "M": L if M is None else M}
        cfg = config_from_dict(d, base=cfg)
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit_surface(args):
    lo, hi, st = args.eta_min, args.eta_max, args.eta_step
    if st <= 0 or hi < lo:
        raise SystemExit("invalid grid: need eta-step > 0 and eta-max >= eta-min")
    grid = lo + st * np.arange(int(np.floor((hi - lo) / st + 1e-9)) + 1)
    a_vals = _int_list(args.a_values)
    if not a_vals or min(a_vals) < 1:
        raise SystemExit("invalid grid: a values must be >= 1")
    rows = []
    for name in sorted(FIT_PRESETS):
        fit = FIT_PRESETS[name]
        for e in grid:
            for a in a_vals:
                rows.append((name, float(e), a, float(required_ul_snr_db(e, a, fit))))
    write_csv(args.out, ["fit", "eta_fb_db", "a", "eta_req_db"], rows)


def cmd_power(args):
    from .power import expected_power, forward_expected_power, mc_expected_power
    cfg = _cfg(args, L=1, M=max(1, args.a_max))
    rng = np.random.default_rng(args.seed)
    codes = sorted(cfg.forward_thresholds)
    base = {c: forward_expected_power(cfg, 0, c) for c in codes}
    rows = []
    for c in codes:
        mc, se = mc_expected_power(cfg, 0, 0, args.samples, rng, code=c)
        rows.append((f"forward-{c}", 0, base[c], mc, se, mc / base[c] - 1.0) + tuple(0.0 for _ in codes))
    for a in range(1, args.a_max + 1):
        ep = expected_power(cfg, 0, a)
        mc, se = mc_expected_power(cfg, 0, a, args.samples, rng)
        rows.append(("feedback", a, ep, mc, se, mc / ep - 1.0) + tuple(1.0 - ep / base[c] for c in codes))
    write_csv(args.out, ["scheme", "a", "analytic_power", "mc_power", "mc_stderr", "mc_rel_diff"]
              + [f"reduction_vs_{c}" for c in codes], rows)


def _load_policy(name, cfg, checkpoint):
    if name in ("itpg", "dpfa"):
        if not checkpoint:
            raise SystemExit(f"policy {name!r} needs --checkpoint (train one with the train subcommand)")
        net, meta = load_checkpoint(checkpoint)
        kind = meta.get("kind")
        if kind != name:
            raise SystemExit(f"checkpoint holds a {kind!r} network, not {name!r}")
        if name == "itpg":
            from .itpg import IndexNet, ItpgPolicy
            if net.widths[-1] != cfg.M:
                raise SystemExit(f"checkpoint was trained for M={net.widths[-1]}, config has M={cfg.M}")
            return ItpgPolicy(IndexNet(cfg.M, mlp=net, urgency=meta.get("urgency", 0.0)), cfg,
                              literal_zero=meta.get("literal_zero", False))
        from .dpfa import DpConfig, DpPolicy, DpTrainer
        if meta.get("L") != cfg.L or meta.get("M") != cfg.M:
            raise SystemExit("dpfa checkpoint does not match the configured L, M")
        tr = DpTrainer(cfg, DpConfig(hidden=tuple(net.widths[1:-1]), prune=meta.get("prune", False),
                                     value_scale=meta["value_scale"]))
        tr.online.mlp = net
        return DpPolicy(tr)
    pols = baseline_policies(cfg)
    if name not in pols:
        raise SystemExit(f"unknown policy {name!r}; choose from {sorted(pols) + ['itpg', 'dpfa']}")
    return pols[name]


def cmd_lifespan(args):
    rows = []
    names = args.policy.split(",") if args.policy else None
    for L in _int_list(args.L):
        cfg = _cfg(args, L=L, M=args.M)
        for name in names or sorted(baseline_policies(cfg)):
            pol = _load_policy(name, cfg, args.checkpoint)
            est = estimate_lifespan(pol, cfg, args.episodes, np.random.default_rng([args.seed, L]))
            rows.append((name, L, cfg.M, args.episodes, est.mean, est.ci_low, est.ci_high))
    write_csv(args.out, ["policy", "L", "M", "episodes", "mean_T", "ci_low", "ci_high"], rows)


def cmd_energy_trace(args):
    cfg = _cfg(args, L=args.L[0] if isinstance(args.L, list) else int(args.L), M=args.M)
    rows = []
    for name in (args.policy or "nofeedback-turbo").split(","):
        pol = _load_policy(name, cfg, args.checkpoint)
        traj = run_episode(pol, cfg, np.random.default_rng(args.seed))
        trace = traj.energy_trace()
        dep = depletion_cycles(traj)
        for t, row in enumerate(trace):
            for l, e in enumerate(row):
                rows.append((name, t, l, float(e), float(dep[l])))
    write_csv(args.out, ["policy", "cycle", "device", "energy", "projected_depletion_cycle"], rows)


def cmd_train(args):
    if not args.out or args.out == "-":
        raise SystemExit("train needs --out for the checkpoint")
    cfg = _cfg(args, L=int(args.L), M=args.M)
    rng = np.random.default_rng(args.seed)
    if args.policy in (None, "itpg"):
        from .itpg import ItpgConfig, itpg_train
        tcfg = ItpgConfig(method=args.method)
        pol, tlog = itpg_train(cfg, args.episodes, rng, tcfg)
        meta = {"kind": "itpg", "L": cfg.L, "M": cfg.M, "literal_zero": tcfg.literal_zero,
                "urgency": pol.net.urgency, "config": cfg.to_json_dict()}
        net = pol.net.mlp
        header = ["update", "episodes", "mean_T", "mean_shaped_return", "seconds"]
        rows = tlog.rows
    elif args.policy == "dpfa":
        from .dpfa import dp_train
        pol, tr = dp_train(cfg, args.episodes, rng)
        meta = {"kind": "dpfa", "L": cfg.L, "M": cfg.M, "prune": tr.dcfg.prune,
                "value_scale": tr.scale, "config": cfg.to_json_dict()}
        net = tr.online.mlp
        header = ["iteration", "mean_residual", "mean_T", "seconds"]
        rows = tr.log
    else:
        raise SystemExit("train supports --policy itpg or dpfa")
    save_checkpoint(args.out, net, meta)
    write_csv(args.out + ".log.csv", header, rows)


def cmd_oracle_check(args):
    from .oracle import OracleGrids, oracle_suite
    cfg = _cfg(args, L=1, M=args.M or 4)
    rep = oracle_suite(cfg, OracleGrids())
    rows = [(name, val, "pass" if ok else "fail") for name, val, ok in rep.lines()]
    write_csv(args.out, ["check", "value", "result"], rows)
    return 0 if rep.passed() else 1


def build_parser():
    p = argparse.ArgumentParser(prog="feedcell", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON file with CellConfig overrides")
        sp.add_argument("--preset", default="calibrated", choices=sorted(PRESETS))
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output path (default stdout)")
        sp.add_argument("--episodes", type=int, default=100)
        sp.add_argument("--samples", type=int, default=1_000_000)
        sp.add_argument("--policy", default=None)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = common(sub.add_parser("fit-surface", help="required UL SNR over a grid"))
    sp.add_argument("--eta-min", type=float, default=-10.0)
    sp.add_argument("--eta-max", type=float, default=40.0)
    sp.add_argument("--eta-step", type=float, default=1.0)
    sp.add_argument("--a-values", default="1,2,3,4,5")
    sp.set_defaults(func=cmd_fit_surface)

    sp = common(sub.add_parser("power", help="average transmit power per allocation"))
    sp.add_argument("--a-max", type=int, default=5)
    sp.set_defaults(func=cmd_power)

    sp = common(sub.add_parser("lifespan", help="mean lifespan per policy and cell size"))
    sp.add_argument("--L", default="2,4,8")
    sp.add_argument("--M", type=int, default=None, help="feedback subcarriers (default M = L)")
    sp.add_argument("--checkpoint", default=None)
    sp.set_defaults(func=cmd_lifespan)

    sp = common(sub.add_parser("energy-trace", help="per-cycle device energies of one episode"))
    sp.add_argument("--L", type=int, default=4)
    sp.add_argument("--M", type=int, default=None)
    sp.add_argument("--checkpoint", default=None)
    sp.set_defaults(func=cmd_energy_trace)

    sp = common(sub.add_parser("train", help="train an ITPG or DP-FA policy"))
    sp.add_argument("--L", type=int, default=4)
    sp.add_argument("--M", type=int, default=None)
    sp.add_argument("--method", default="reinforce", choices=["reinforce", "ppo"])
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("oracle-check", help="structural checks on the quantized oracle"))
    sp.add_argument("--M", type=int, default=4)
    sp.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    rc = args.func(args)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
