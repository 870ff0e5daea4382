"""two-settle command line interface.

Subcommands: solve-rt, solve-da, simulate, sweep-traders, baseline,
empirics, selftest.  Exit codes: 0 success, 1 validation error, 2 numerical
non-convergence (a diagnostics file is written next to the outputs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import __version__
from . import config as cfgmod
from . import da_eq, empirics, report, settlement
from .curves import ConventionalCurve, EffectiveRTCurve
from .rt_sfe import MODE_SFE, clear_rt_all, solve_rt_sfe
from .scenarios import MarketScenario

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NONCONVERGENCE = 2


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return max(1, args.workers)
    return max(1, int(os.environ.get("TWO_SETTLE_WORKERS", "1")))


def _outdir(cfg, args):
    out = args.outdir or cfg["output"]["directory"]
    return report.ensure_dir(out)


def _load_cfg(args):
    if getattr(args, "config", None):
        return cfgmod.load_config(args.config)
    return cfgmod.default_config()


def _meta(cfg):
    return {"config_hash": cfgmod.config_hash(cfg)}


def cmd_solve_rt(args) -> int:
    cfg = _load_cfg(args)
    with open(args.scenario) as fh:
        payload = json.load(fh)
    scen = MarketScenario(
        demand_path=np.asarray(payload["scenario"]["demand"], dtype=float),
        capacity_paths=np.asarray(payload["scenario"]["capacities"], dtype=float),
    )
    da = payload["da"]
    outcome = da_eq.DAOutcome(
        clearing_price=da["p_f"],
        lse_demand=da["d_l"],
        supplier_quantity=da["s_at_pf"],
        conventional_quantity=da["c_at_pf"],
        virtual_total=da.get("virtual_total", 0.0),
        n_suppliers=scen.capacity_paths.shape[0],
    )
    conv = cfg["market"]["conventional"]
    curve = ConventionalCurve(conv["family"], conv["a"], conv["p_c"], conv["alpha"])
    from .rt_sfe import residual_state

    rs = residual_state(scen, outcome)
    sfe = solve_rt_sfe(rs, EffectiveRTCurve(curve, outcome.clearing_price))
    prices = clear_rt_all(sfe, rs)
    out = _outdir(cfg, args)
    hi = sfe.breakpoints[-1] * 1.1 if sfe.mode == MODE_SFE and len(sfe.breakpoints) else max(
        prices.max(), 1.0
    )
    grid = np.linspace(0.0, hi, 200)
    vals = np.asarray(sfe.value(grid))
    rows = []
    caps = rs.residual_caps
    for p, v in zip(grid, vals):
        per = [min(v, c) if c > 0 else 0.0 for c in caps]
        rows.append([p, sum(per) + 0.0] + per)
    cols = ["price", "aggregate_quantity"] + [f"supplier_{i+1}" for i in range(len(caps))]
    report.write_csv(os.path.join(out, "rt_curve.csv"), cols, rows, _meta(cfg))
    report.write_json(
        os.path.join(out, "rt_summary.json"),
        {
            "mode": {0: "sfe", 1: "no_rt", 2: "competitive", 3: "conventional_only"}[sfe.mode],
            "constants": sfe.constants,
            "breakpoints": sfe.breakpoints,
            "gamma0": sfe.gamma0,
            "truncation_index": sfe.truncation_index,
            "residual_caps": rs.residual_caps,
            "clearing_prices": prices,
        },
        _meta(cfg),
    )
    if "png" in cfg["output"]["formats"]:
        report.curve_figure(grid, vals, os.path.join(out, "rt_curve.png"),
                            breakpoints=sfe.breakpoints, title="stitched RT supply function")
    print(f"wrote rt_curve.csv, rt_summary.json to {out}")
    return EXIT_OK


def _equilibrium_payload(eq):
    return {
        "supply_constant": eq.supply_constant,
        "clearing_price": eq.outcome.clearing_price,
        "lse_demand": eq.outcome.lse_demand,
        "supplier_quantity": eq.outcome.supplier_quantity,
        "conventional_quantity": eq.outcome.conventional_quantity,
        "virtual_total": eq.outcome.virtual_total,
        "expected_rt_price": eq.expected_rt_price,
        "expected_rt_price_se": eq.expected_rt_price_se,
        "price_sensitivity": eq.price_sensitivity,
        "gap": eq.gap,
        "trader_count": "inf" if eq.trader_count == da_eq.INF_TRADERS else eq.trader_count,
        "per_trader_quantity": eq.per_trader_quantity,
    }


def cmd_solve_da(args) -> int:
    cfg = _load_cfg(args)
    setup = cfgmod.build_setup(cfg)
    n_v = cfgmod.trader_count(cfg)
    eq = da_eq.solve_equilibrium(setup, n_v)
    out = _outdir(cfg, args)
    report.write_json(os.path.join(out, "da_equilibrium.json"), _equilibrium_payload(eq), _meta(cfg))
    if eq.supply_grid.size:
        rows = [list(r) for r in eq.supply_grid]
        report.write_csv(os.path.join(out, "da_curve.csv"), ["price", "quantity"], rows, _meta(cfg))
        if "png" in cfg["output"]["formats"]:
            report.curve_figure(
                eq.supply_grid[:, 0], eq.supply_grid[:, 1],
                os.path.join(out, "da_curve.png"), title="renewable DA supply function",
            )
    print(f"wrote da_equilibrium.json to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    setup = cfgmod.build_setup(cfg)
    n_v = cfgmod.trader_count(cfg)
    eq = da_eq.solve_equilibrium(setup, n_v)
    n = args.n_scenarios or min(len(setup.scenarios), 1000)
    scen = setup.scenarios.head(n)
    n_traders = 0 if eq.trader_count in (0, da_eq.INF_TRADERS) else int(eq.trader_count)
    reports = settlement.settle_batch(
        setup,
        eq.outcome,
        scen,
        n_traders=n_traders,
        per_trader_quantity=eq.per_trader_quantity,
        workers=_workers(args),
    )
    out = _outdir(cfg, args)
    rows = []
    for i, r in enumerate(reports):
        for t in range(len(r.p_s)):
            rows.append([i, t, int(r.case[t]), r.p_f, r.p_s[t], "lse",
                         r.lse_da_payment[t] + r.lse_rt_payment[t]])
            for j in range(r.supplier_da_revenue.shape[0]):
                rows.append([i, t, int(r.case[t]), r.p_f, r.p_s[t], f"supplier_{j+1}",
                             -(r.supplier_da_revenue[j, t] + r.supplier_rt_revenue[j, t]
                               - r.supplier_penalty[j, t])])
            rows.append([i, t, int(r.case[t]), r.p_f, r.p_s[t], "conventional",
                         -(r.conventional_da_revenue[t] + r.conventional_rt_revenue[t])])
            rows.append([i, t, int(r.case[t]), r.p_f, r.p_s[t], "traders",
                         r.trader_da_payment[t] - r.trader_rt_revenue[t]])
    report.write_csv(
        os.path.join(out, "settlements.csv"),
        ["scenario", "t", "case", "p_f", "p_s", "participant", "net_payment"],
        rows,
        _meta(cfg),
    )
    agg = {
        "equilibrium": _equilibrium_payload(eq),
        "scenarios_settled": len(reports),
        "lse_mean_cost": float(np.mean([r.lse_total_cost() for r in reports])),
        "lse_mean_savings": float(np.mean([r.aggregates["lse_total_savings"] for r in reports])),
        "max_cash_imbalance": float(max(r.aggregates["max_cash_imbalance"] for r in reports)),
        "case2_share": float(np.mean([r.aggregates["case2_steps"] / len(r.p_s) for r in reports])),
    }
    report.write_json(os.path.join(out, "simulate_summary.json"), agg, _meta(cfg))
    if "png" in cfg["output"]["formats"]:
        report.settlement_figure(reports, os.path.join(out, "settlements.png"))
    print(f"settled {len(reports)} scenarios -> {out}")
    return EXIT_OK


def cmd_sweep_traders(args) -> int:
    cfg = _load_cfg(args)
    setup = cfgmod.build_setup(cfg)
    counts = []
    for tok in args.counts.split(","):
        tok = tok.strip()
        counts.append(da_eq.INF_TRADERS if tok in ("inf", "Inf") else int(tok))
    if setup.n_suppliers == 0:
        mode = cfg["numerics"]["expectation_mode"]
        rows = [da_eq.vanilla_equilibrium(setup, int(n), mode=mode) if np.isfinite(n) else
                {"n_v": n, "d_l": np.nan, "b": 0.0,
                 "p_f": da_eq.vanilla_alignment_price(setup, mode=mode),
                 "e_ps": da_eq.vanilla_alignment_price(setup, mode=mode), "gap": 0.0}
                for n in counts]
    else:
        rows = da_eq.gap_sweep(setup, counts)
    out = _outdir(cfg, args)
    report.write_csv(
        os.path.join(out, "sweep.csv"),
        ["n_v", "p_f", "e_ps", "gap", "d_l", "b"],
        [["inf" if not np.isfinite(r["n_v"]) else int(r["n_v"]),
          r["p_f"], r["e_ps"], r["gap"], r["d_l"], r["b"]] for r in rows],
        _meta(cfg),
    )
    report.write_json(os.path.join(out, "sweep_summary.json"), {"rows": rows}, _meta(cfg))
    if "png" in cfg["output"]["formats"]:
        report.sweep_figure(rows, os.path.join(out, "sweep.png"))
    print(f"wrote sweep.csv ({len(rows)} rows) to {out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _load_cfg(args)
    if args.a is not None:
        cfg["market"]["conventional"]["a"] = args.a
    if args.p_c is not None:
        cfg["market"]["conventional"]["p_c"] = args.p_c
    if args.demand:
        fam, _, rest = args.demand.partition(":")
        lo, hi = (float(x) for x in rest.split(","))
        cfg["scenario"]["demand"] = {"family": fam, "lo": lo, "hi": hi, "rho": 0.0}
    cfg["market"]["renewables_enabled"] = False
    cfg = cfgmod.validate_config(cfg)
    if args.mode:
        cfg["numerics"]["expectation_mode"] = args.mode
    setup = cfgmod.build_setup(cfg)
    q, p_f, e_ps = da_eq.baseline_no_renewables(setup)
    out = _outdir(cfg, args)
    report.write_json(
        os.path.join(out, "baseline.json"),
        {"q_star": q, "p_f": p_f, "expected_rt_price": e_ps, "gap": e_ps - p_f,
         "mode": cfg["numerics"]["expectation_mode"]},
        _meta(cfg),
    )
    print(json.dumps({"q_star": report.fmt(q), "p_f": report.fmt(p_f),
                      "e_ps": report.fmt(e_ps)}))
    return EXIT_OK


def cmd_empirics(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, args)
    window = empirics.StudyWindow.around(args.golive, args.pre, args.post)
    meta = _meta(cfg)
    summary = {"golive": str(args.golive)}
    if args.prices:
        prices, rejects = empirics.ingest_csv(args.prices, tz=args.tz, strict=args.strict)
        if len(rejects):
            rejects.to_csv(os.path.join(out, "prices_rejects.csv"), index=False)
        table, s = empirics.spread_table(prices, window)
        rows = [list(r) for r in table.itertuples(index=False)]
        report.write_csv(os.path.join(out, "spreads.csv"), list(table.columns), rows, meta)
        table.assign(metric="spread").to_csv(os.path.join(out, "spreads_long.csv"), index=False)
        summary["spreads"] = s
        if "png" in cfg["output"]["formats"]:
            report.spread_figure(table, os.path.join(out, "spreads.png"))
    if args.loads:
        loads, rejects = empirics.ingest_csv(args.loads, tz=args.tz, strict=args.strict)
        if len(rejects):
            rejects.to_csv(os.path.join(out, "loads_rejects.csv"), index=False)
        rtable, s = empirics.demand_ratio_table(loads, window)
        rows = [list(r) for r in rtable.itertuples(index=False)]
        report.write_csv(os.path.join(out, "ratios.csv"), list(rtable.columns), rows, meta)
        rtable.assign(metric="ratio").to_csv(os.path.join(out, "ratios_long.csv"), index=False)
        summary["ratios"] = s
        if "png" in cfg["output"]["formats"]:
            report.ratio_figure(rtable, os.path.join(out, "ratios.png"))
    if args.prices:
        # data-dependent comparison against the published patterns
        s = summary["spreads"]
        summary["comparison"] = {
            "pre_spreads_positive_except": s["pre_hours_nonpositive"],
            "pct_decrease_post_base": s["pct_decrease_post_base"],
        }
        if args.loads:
            summary["comparison"]["pre_ratio_band"] = summary["ratios"]["pre_ratio_band"]
    report.write_json(os.path.join(out, "summary.json"), summary, meta)
    print(f"wrote empirics outputs to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .acceptance import run_all

    results = run_all(fast=args.fast, echo=print)
    n_pass = sum(r.passed for r in results)
    print(f"\n{n_pass}/{len(results)} acceptance criteria passed")
    return EXIT_OK if n_pass == len(results) else EXIT_NONCONVERGENCE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="two-settle", description=__doc__)
    p.add_argument("--version", action="version", version=f"two-settle {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (defaults apply otherwise)")
        sp.add_argument("--outdir", help="output directory (overrides config)")
        sp.add_argument("--workers", type=int, help="scenario-level parallelism (or TWO_SETTLE_WORKERS)")

    sp = sub.add_parser("solve-rt", help="solve one real-time stitched SFE")
    sp.add_argument("--scenario", required=True, help="JSON file with scenario + DA outcome")
    common(sp)
    sp.set_defaults(fn=cmd_solve_rt)

    sp = sub.add_parser("solve-da", help="solve the day-ahead equilibrium")
    common(sp)
    sp.set_defaults(fn=cmd_solve_da)

    sp = sub.add_parser("simulate", help="equilibrium solve plus settled scenarios")
    sp.add_argument("--n-scenarios", type=int, help="scenarios to settle (default min(n, 1000))")
    common(sp)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("sweep-traders", help="equilibrium table across trader counts")
    sp.add_argument("--counts", default="0,2,4,8,16,32,64", help="comma list; 'inf' allowed")
    common(sp)
    sp.set_defaults(fn=cmd_sweep_traders)

    sp = sub.add_parser("baseline", help="no-renewables baseline (LSE vs conventional)")
    sp.add_argument("--a", type=float, help="conventional slope")
    sp.add_argument("--p-c", type=float, help="conventional threshold price")
    sp.add_argument("--demand", help="e.g. uniform:0,1")
    sp.add_argument("--mode", choices=["semi_analytic", "monte_carlo"])
    common(sp)
    sp.set_defaults(fn=cmd_baseline)

    sp = sub.add_parser("empirics", help="pre/post spread and demand-ratio tables")
    sp.add_argument("--prices", help="price CSV (timestamp,market,zone,value)")
    sp.add_argument("--loads", help="load CSV (same schema)")
    sp.add_argument("--golive", required=True, help="virtual trading go-live date")
    sp.add_argument("--pre", required=True, help="pre-window start")
    sp.add_argument("--post", required=True, help="post-window end")
    sp.add_argument("--tz", help="market time zone for tz-aware inputs")
    sp.add_argument("--strict", action="store_true", help="escalate >1%% rejects to an error")
    common(sp)
    sp.set_defaults(fn=cmd_empirics)

    sp = sub.add_parser("selftest", help="run the acceptance suite")
    sp.add_argument("--fast", action="store_true", help="reduced desk scale")
    common(sp)
    sp.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    import jsonschema

    from .rt_sfe import RTSolveError

    warnings.filterwarnings("ignore", message=".*TBB.*")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError, jsonschema.ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RTSolveError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except da_eq.DAConvergenceError as exc:
        outdir = getattr(args, "outdir", None) or "."
        try:
            report.ensure_dir(outdir)
            report.write_json(
                os.path.join(outdir, "diagnostics.json"),
                {"error": str(exc), "history": list(getattr(exc, "history", []))},
            )
        except OSError:
            pass
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
