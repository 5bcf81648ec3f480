"""Command line front end: ``pamlab <subcommand> ...``.

Exit codes: 0 on success, 1 on domain or usage errors, 2 when a
certification or convergence step fails.
"""
from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from .campaigns import CampaignConfig, localisation_record, run_campaign
from .errors import CertificationError, ConvergenceError, DomainError
from .evolution import evolve, write_snapshot
from .lattice import PotentialField, ball_count, box_order_stats
from .laws import LawsContext, cdf_Y, density_p, joint_cdf_Y1Y2, normalization
from .spectral import principal_pair, write_profile
from .variational import argmax_top2, scaling


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route usage errors to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=_json_default))


def _field(args) -> PotentialField:
    if args.alpha <= args.d:
        raise DomainError(f"need alpha > d, got alpha={args.alpha}, d={args.d}")
    return PotentialField(args.seed, args.alpha, args.d)


def cmd_sample(args) -> int:
    field = _field(args)
    st = box_order_stats(field, args.R)
    _emit(dict(seed=args.seed, d=args.d, alpha=args.alpha, R=args.R, n_sites=ball_count(args.d, args.R),
               max1=st.max1, argmax1=st.argmax1, max2=st.max2, argmax2=st.argmax2, gap=st.max1 - st.max2))
    return 0


def cmd_argmax(args) -> int:
    if args.mode == "field":
        res = argmax_top2(_field(args), args.t, args.delta)
    else:
        rng = np.random.default_rng(args.seed)
        res = argmax_top2(None, args.t, args.delta, mode="exceedance", rng=rng, d=args.d, alpha=args.alpha)
    sc = scaling(args.t, args.d, args.alpha)
    _emit(dict(mode=res.mode, t=res.t, Z1=res.Z1, psi1=res.psi1, xi1=res.xi1, Z2=res.Z2, psi2=res.psi2,
               xi2=res.xi2, y1=res.psi1 / sc.a_t, y2=res.psi2 / sc.a_t,
               x_norm=sum(abs(c) for c in res.Z1) / sc.r_t, searched_radius=res.searched_radius,
               tail_probability=res.tail_probability, delta=args.delta))
    return 0


def cmd_solve(args) -> int:
    field = _field(args)
    st = evolve(field, args.R, t=args.t, tol=args.tol, method=args.method)
    if args.output:
        write_snapshot(st, args.output)
    i = int(np.argmax(st.w))
    _emit(dict(t=st.t, R=args.R, method=st.method, steps=st.steps, log_mass=st.log_mass,
               argmax_w=st.sites[i], max_w=float(st.w[i]), n_sites=len(st.w)))
    return 0


def cmd_spectrum(args) -> int:
    field = _field(args)
    pair = principal_pair(field, args.R, tol=args.tol)
    if args.output:
        write_profile(pair, args.output)
    _emit(dict(R=args.R, lam=pair.lam, norm_site=pair.norm_site, residual=pair.residual,
               l2_norm_sq=pair.l2_norm_sq, iterations=pair.iterations, method=pair.method,
               xi_max=float(pair.xi.max())))
    return 0


def cmd_laws(args) -> int:
    ctx = LawsContext.make(args.d, args.alpha)
    out = dict(d=args.d, alpha=args.alpha, q=ctx.q, mu=ctx.mu)
    if args.x is not None:
        out["p"] = [density_p(x, ctx) for x in args.x]
    if args.y is not None:
        out["cdf_Y"] = [cdf_Y(y, ctx) for y in args.y]
    if args.y1 is not None or args.y2 is not None:
        if args.y1 is None or args.y2 is None or len(args.y1) != len(args.y2):
            raise DomainError("--y1 and --y2 must be given together with equal lengths")
        out["joint_cdf"] = [joint_cdf_Y1Y2(a, b, ctx) for a, b in zip(args.y1, args.y2)]
    if args.check_normalization:
        val, err = normalization(ctx)
        print(f"∫p = {val:.9f} ± {max(err, abs(val - 1.0)):.1e}")
        return 0 if abs(val - 1.0) <= 1e-6 else 2
    _emit(out)
    return 0


def cmd_localize(args) -> int:
    cfg = CampaignConfig(kind="localisation", d=args.d, alpha=args.alpha, seed_start=args.seed, seed_count=1,
                         t_grid=[args.t], delta=args.delta, outer_factor=args.outer_factor)
    rec = localisation_record(cfg, args.seed, float(args.t))
    _emit(rec)
    if rec["ok"] != 1:
        print(f"localize failed: {rec['error']}", file=sys.stderr)
        return 2
    return 0


def cmd_campaign(args) -> int:
    cfg = CampaignConfig.load(args.config)
    if args.output:
        cfg.output = args.output
    res = run_campaign(cfg)
    _emit(res.summary)
    return 0


def _common(p, seed=True):
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--alpha", type=float, default=4.0)
    if seed:
        p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pamlab", description="Parabolic Anderson model lab with Pareto potential.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("sample", help="order statistics of the field on a ball")
    _common(p)
    p.add_argument("--R", type=int, default=100)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("argmax", help="certified top two maximisers of Psi_t")
    _common(p)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--mode", choices=["field", "exceedance"], default="field")
    p.set_defaults(func=cmd_argmax)

    p = sub.add_parser("solve", help="solve the equation on a box")
    _common(p)
    p.add_argument("--R", type=int, default=50)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--method", choices=["rk4", "uniformization"], default="rk4")
    p.add_argument("--output", help="CSV snapshot path")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("spectrum", help="principal Dirichlet eigenpair on a box")
    _common(p)
    p.add_argument("--R", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--output", help="CSV profile path")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("laws", help="evaluate the limit laws")
    _common(p, seed=False)
    p.add_argument("--x", type=float, nargs="+", help="points |x| for the density p")
    p.add_argument("--y", type=float, nargs="+", help="points for cdf_Y")
    p.add_argument("--y1", type=float, nargs="+")
    p.add_argument("--y2", type=float, nargs="+")
    p.add_argument("--check-normalization", action="store_true")
    p.set_defaults(func=cmd_laws)

    p = sub.add_parser("localize", help="full single-seed pipeline, JSON record")
    _common(p)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--outer-factor", type=float, default=2.0)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("campaign", help="config-driven campaign")
    p.add_argument("--config", required=True, help="JSON file mirroring CampaignConfig")
    p.add_argument("--output", help="output base path (overrides the config)")
    p.set_defaults(func=cmd_campaign)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if any(isinstance(v, float) and not math.isfinite(v) for v in vars(args).values()):
            raise DomainError("numeric arguments must be finite")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (CertificationError, ConvergenceError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (DomainError, OSError, json.JSONDecodeError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
