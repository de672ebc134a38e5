"""Command-line surface: reproducible runs, JSON/CSV artifacts.

Every artifact embeds the merged configuration and the master seed; apart
from the timestamp field, reports are byte-identical for identical
configuration and seed. Exit codes: 0 success, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from fractions import Fraction

import numpy as np

from . import birkhoff as bk
from . import dynamics as dy
from . import kamlab as kl
from . import nlsham as nh
from .hamcore import Hamiltonian, State, evaluate

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def subseed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def emit(payload: dict, out: str | None):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


REQUIRED = object()


def _merge_config(args, keys):
    """File config < command-line flags; returns the merged dict."""
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg.update(json.load(fh))
    merged = {}
    missing = []
    for key, default in keys.items():
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            merged[key] = cli_val
        elif key in cfg:
            merged[key] = cfg[key]
        elif default is REQUIRED:
            missing.append(key)
        else:
            merged[key] = default
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")
    return merged


class ConfigError(ValueError):
    pass


def _taylor(s) -> nh.NonlinearitySpec:
    try:
        if isinstance(s, (list, tuple)):
            return nh.NonlinearitySpec.from_strings([str(x) for x in s])
        return nh.NonlinearitySpec.from_strings(str(s).split(","))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad nonlinearity data {s!r}: {exc}") from exc


def _int_list(s):
    try:
        if isinstance(s, (list, tuple)):
            return [int(v) for v in s]
        return [int(v) for v in str(s).split(",") if v != ""]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {s!r}") from exc


def _frac_list(s):
    try:
        if isinstance(s, (list, tuple)):
            return [Fraction(str(v)) for v in s]
        return [Fraction(v) for v in str(s).split(",") if v != ""]
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad rational list {s!r}") from exc


def _policy(name: str, c: float) -> bk.ThresholdPolicy:
    if name == "all-nonresonant":
        return bk.ThresholdPolicy.all_nonresonant()
    if name == "q9":
        return bk.ThresholdPolicy.q9(c=c)
    raise ConfigError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_build_hamiltonian(args):
    cfg = _merge_config(
        args, {"f_taylor": "1", "K": 6, "rmax": 2, "seed": 0, "out": None}
    )
    spec = _taylor(cfg["f_taylor"])
    h = nh.build_nls_hamiltonian(spec, int(cfg["K"]), int(cfg["rmax"]))
    emit(
        {
            "command": "build-hamiltonian",
            "config": {k: cfg[k] for k in ("f_taylor", "K", "rmax", "seed")},
            "timestamp": _timestamp(),
            "terms": len(h),
            "hamiltonian": h.to_dict(),
        },
        cfg["out"],
    )
    return 0


def cmd_normal_form(args):
    cfg = _merge_config(
        args,
        {
            "f_taylor": "1",
            "K": 6,
            "order": 4,
            "policy": "all-nonresonant",
            "policy_c": 1.0,
            "seed": 0,
            "out": None,
            "include_hamiltonian": False,
        },
    )
    spec = _taylor(cfg["f_taylor"])
    order = int(cfg["order"])
    h = nh.build_nls_hamiltonian(spec, int(cfg["K"]), max(order // 2, 2))
    res = bk.birkhoff_normal_form(h, order, _policy(cfg["policy"], float(cfg["policy_c"])))
    two_site = bk.integrable_two_site_table(
        bk.extract_integrable_part(res.normal_form, 6)
    )
    payload = {
        "command": "normal-form",
        "config": {
            k: cfg[k] for k in ("f_taylor", "K", "order", "policy", "policy_c", "seed")
        },
        "timestamp": _timestamp(),
        "records": res.records,
        "normalFormTerms": len(res.normal_form),
        "generators": [
            {"degree": d, "terms": len(chi)} for d, chi in res.generators
        ],
        "twoSiteRatios": sorted(
            {str(c * (k - l) ** 2) for (k, l), c in two_site.items()}
        ),
    }
    if cfg["include_hamiltonian"]:
        payload["hamiltonian"] = res.normal_form.to_dict()
    emit(payload, cfg["out"])
    return 0


def cmd_verify_divisors(args):
    cfg = _merge_config(args, {"q": 2, "N": 30, "bound": 0, "seed": 0, "out": None})
    q, N, bound = int(cfg["q"]), int(cfg["N"]), int(cfg["bound"])
    implication = bk.verify_quasi_resonant_implication(q, N, bound)
    lower = bk.verify_divisor_lower_bound(q, N)
    emit(
        {
            "command": "verify-divisors",
            "config": {"q": q, "N": N, "bound": bound, "seed": cfg["seed"]},
            "timestamp": _timestamp(),
            "implication": implication.to_dict(),
            "lowerBound": lower.to_dict(),
        },
        cfg["out"],
    )
    return 0


def cmd_wick_check(args):
    cfg = _merge_config(
        args, {"p": 2, "K": 8, "samples": 100, "symbolic": "auto", "seed": 0, "out": None}
    )
    p, K, samples = int(cfg["p"]), int(cfg["K"]), int(cfg["samples"])
    rng = np.random.default_rng(subseed(int(cfg["seed"]), "wick-check"))
    residual = 0.0
    for _ in range(samples):
        st = State.random(K, rng, norm=0.5, support=K // 2)
        residual = max(residual, nh.wick_identity_residual(p, K, st))
    block = nh.wick_hamiltonian(p, K)
    over = nh.overpairing_report(block)
    mode = str(cfg["symbolic"])
    do_symbolic = mode == "on" or (mode == "auto" and p <= 3 and K <= 4)
    symbolic_empty = None
    if do_symbolic:
        symbolic_empty = len(nh.wick_identity_defect(p, K)) == 0
    emit(
        {
            "command": "wick-check",
            "config": {"p": p, "K": K, "samples": samples, "seed": cfg["seed"]},
            "timestamp": _timestamp(),
            "maxResidual": residual,
            "symbolicIdentityEmpty": symbolic_empty,
            "coefficientBound": str(block.coefficient_bound()),
            "maxTableCoefficient": str(block.max_table_coeff()[1]),
            "boundViolations": len(block.table_violations()),
            "overPairing": over.to_dict(),
        },
        cfg["out"],
    )
    return 0


def cmd_open(args):
    cfg = _merge_config(
        args,
        {
            "f_taylor": "1",
            "K": 4,
            "rmax": 2,
            "order": None,
            "sites": REQUIRED,
            "xi": REQUIRED,
            "y_order": 2,
            "eps": "1/10",
            "seed": 0,
            "out": None,
            "include_hamiltonian": False,
        },
    )
    sites = _int_list(cfg["sites"])
    xi = _frac_list(cfg["xi"])
    spec = _taylor(cfg["f_taylor"])
    K = int(cfg["K"])
    eps = Fraction(str(cfg["eps"]))
    h = nh.build_nls_hamiltonian(spec, K, int(cfg["rmax"])).rescale_amplitude(eps)
    if cfg["order"] is not None:
        h = bk.birkhoff_normal_form(h, int(cfg["order"])).normal_form
    opening = kl.OpeningSpec.make(sites, xi, y_order=int(cfg["y_order"]))
    aah = kl.open_sites(h, opening)
    fmap = kl.frequency_map(aah, eps, window=range(-K, K + 1))
    payload = {
        "command": "open",
        "config": {
            k: str(cfg[k]) if cfg[k] is not None else None
            for k in ("f_taylor", "K", "rmax", "order", "sites", "xi", "y_order", "eps", "seed")
        },
        "timestamp": _timestamp(),
        "terms": len(aah),
        "classes": {
            cls: len(kl.project(aah, cls)) for cls in ("int", "ajet", "nor", "rem")
        },
        "frequencyMap": fmap.to_dict(),
    }
    if cfg["include_hamiltonian"]:
        payload["opened"] = aah.to_dict()
    emit(payload, cfg["out"])
    return 0


def cmd_kam_sample(args):
    cfg = _merge_config(
        args,
        {
            "sites": "1,2",
            "xi_min": 0.05,
            "xi_max": 0.15,
            "base": None,
            "eps": "1",
            "d": 0,
            "k_box": 2,
            "ext_modes": "",
            "b_l1_max": 4,
            "gamma": 1e-3,
            "alpha": None,
            "r": 0.5,
            "nu": 0.75,
            "samples": 100000,
            "seed": 0,
            "out": None,
        },
    )
    sites = tuple(_int_list(cfg["sites"]))
    ext_modes = tuple(_int_list(cfg["ext_modes"])) if cfg["ext_modes"] else ()
    eps = Fraction(str(cfg["eps"]))
    if cfg["base"] is not None:
        vals = _frac_list(cfg["base"])
        base = {j: v for j, v in zip(sites + ext_modes, vals)}
    else:
        base = {j: Fraction(j * j) / eps**2 for j in sites + ext_modes}
    fmap = kl.FrequencyMap.synthetic(sites, sites + ext_modes, base, eps=eps)
    scfg = kl.SamplingConfig(
        sites=sites,
        xi_min=float(cfg["xi_min"]),
        xi_max=float(cfg["xi_max"]),
        freq_map=fmap,
        d=int(cfg["d"]),
        k_box=int(cfg["k_box"]),
        ext_modes=ext_modes,
        b_l1_max=int(cfg["b_l1_max"]),
        gamma=float(cfg["gamma"]),
        alpha=None if cfg["alpha"] is None else float(cfg["alpha"]),
        r=float(cfg["r"]),
        nu=float(cfg["nu"]),
        samples=int(cfg["samples"]),
        seed=subseed(int(cfg["seed"]), "kam-sample"),
    )
    rep = kl.small_divisor_bad_measure(scfg)
    emit(
        {
            "command": "kam-sample",
            "config": {"masterSeed": cfg["seed"], "base": {str(j): str(b) for j, b in base.items()}},
            "timestamp": _timestamp(),
            "report": rep.to_dict(),
        },
        cfg["out"],
    )
    return 0


def cmd_twist(args):
    cfg = _merge_config(
        args,
        {
            "f_taylor": "1",
            "K": 4,
            "rmax": 2,
            "order": 4,
            "sites": "0",
            "xi": "1/8",
            "y_order": 2,
            "eps": "1/10",
            "h": 1e-6,
            "delta": 1.0,
            "s0": 2.0,
            "seed": 0,
            "out": None,
            "matrix_out": None,
        },
    )
    sites = _int_list(cfg["sites"])
    xi = _frac_list(cfg["xi"])
    eps = Fraction(str(cfg["eps"]))
    K = int(cfg["K"])
    spec = _taylor(cfg["f_taylor"])
    h = nh.build_nls_hamiltonian(spec, K, int(cfg["rmax"])).rescale_amplitude(eps)
    nf = bk.birkhoff_normal_form(h, int(cfg["order"])).normal_form
    aah = kl.open_sites(nf, kl.OpeningSpec.make(sites, xi, y_order=int(cfg["y_order"])))
    fmap = kl.frequency_map(aah, eps, window=range(-K, K + 1))
    rep = kl.lambda_lipschitz_matrix(
        fmap, h=float(cfg["h"]), delta=float(cfg["delta"]), s0=float(cfg["s0"])
    )
    margin, ok = kl.twist_check(rep.matrix, float(eps))
    if cfg["matrix_out"]:
        with open(cfg["matrix_out"], "w") as fh:
            fh.write("j\\k," + ",".join(str(k) for k in rep.ks) + "\n")
            for j, row in zip(rep.js, rep.matrix):
                fh.write(str(j) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    emit(
        {
            "command": "twist",
            "config": {
                k: str(cfg[k])
                for k in ("f_taylor", "K", "order", "sites", "xi", "eps", "h", "delta", "s0", "seed")
            },
            "timestamp": _timestamp(),
            "margin": margin,
            "twistPass": ok,
            "maxFdError": rep.max_fd_error,
            "fitConstant": rep.fit_constant,
            "lipschitz": rep.to_dict(),
        },
        cfg["out"],
    )
    return 0


def cmd_sparsity_check(args):
    cfg = _merge_config(
        args, {"sequence_file": REQUIRED, "lengths": None, "seed": 0, "out": None}
    )
    with open(cfg["sequence_file"]) as fh:
        seq = json.load(fh)
    if not isinstance(seq, list):
        raise ConfigError("sequence file must hold a JSON list of integers")
    lengths = _int_list(cfg["lengths"]) if cfg["lengths"] else list(range(1, len(seq) + 1))
    trend = kl.sparsity_trend(seq, lengths)
    increments = [b[1] - a[1] for a, b in zip(trend, trend[1:])]
    emit(
        {
            "command": "sparsity-check",
            "config": {"sequenceFile": cfg["sequence_file"], "lengths": lengths, "seed": cfg["seed"]},
            "timestamp": _timestamp(),
            "value": trend[-1][1],
            "trend": [{"P": p, "value": v} for p, v in trend],
            "increments": increments,
        },
        cfg["out"],
    )
    return 0


def cmd_simulate(args):
    cfg = _merge_config(
        args,
        {
            "model": "1",
            "K": 16,
            "dt": 1e-3,
            "T": 10.0,
            "amplitude": 0.1,
            "profile": "exp",
            "store_every": 100,
            "seed": 0,
            "out": None,
            "csv_out": None,
        },
    )
    spec = _taylor(cfg["model"])
    K = int(cfg["K"])
    rng = np.random.default_rng(subseed(int(cfg["seed"]), "simulate"))
    if cfg["profile"] == "exp":
        u0 = State.zeros(K)
        for k in range(-K, K + 1):
            u0[k] = np.exp(-abs(k)) * np.exp(2j * np.pi * rng.uniform())
        u0.data *= float(cfg["amplitude"]) / np.sqrt(u0.mass)
    elif cfg["profile"] == "random":
        u0 = State.random(K, rng, norm=float(cfg["amplitude"]))
    else:
        raise ConfigError(f"unknown profile {cfg['profile']!r}")
    traj = dy.integrate_nls(
        spec, u0, float(cfg["dt"]), float(cfg["T"]), store_every=int(cfg["store_every"])
    )
    h = nh.build_nls_hamiltonian(spec, K, max(spec.max_power() + 1, 2))
    drift = dy.action_drift(traj, h=h)
    if cfg["csv_out"]:
        traj.write_csv(cfg["csv_out"])
    emit(
        {
            "command": "simulate",
            "config": {
                k: cfg[k]
                for k in ("model", "K", "dt", "T", "amplitude", "profile", "store_every", "seed")
            },
            "timestamp": _timestamp(),
            "drift": drift.to_dict(),
        },
        cfg["out"],
    )
    return 0


def cmd_experiment(args):
    if args.kind != "invariance":
        raise ConfigError(f"unknown experiment {args.kind!r}")
    cfg = _merge_config(
        args,
        {
            "f_taylor": "1",
            "K": 8,
            "order": 6,
            "eps": 1e-2,
            "xi": None,
            "T": 50.0,
            "dt": 2e-3,
            "store_every": 250,
            "required_factor": 10.0,
            "flow_steps": 8,
            "seed": 7,
            "out": None,
        },
    )
    xi = cfg["xi"]
    if xi is None:
        xi = {0: 1.0, 1: 0.5}
    elif isinstance(xi, dict):
        xi = {int(k): float(v) for k, v in xi.items()}
    else:
        pairs = [p.split(":") for p in str(xi).split(",")]
        xi = {int(k): float(v) for k, v in pairs}
    icfg = dy.InvarianceConfig(
        f_taylor=tuple(str(cfg["f_taylor"]).split(",")),
        K=int(cfg["K"]),
        order=int(cfg["order"]),
        eps=float(cfg["eps"]),
        xi=xi,
        T=float(cfg["T"]),
        dt=float(cfg["dt"]),
        store_every=int(cfg["store_every"]),
        seed=subseed(int(cfg["seed"]), "invariance"),
        required_factor=float(cfg["required_factor"]),
        flow_steps=int(cfg["flow_steps"]),
    )
    rep = dy.invariance_experiment(icfg)
    emit(
        {
            "command": "experiment invariance",
            "config": {"masterSeed": cfg["seed"]},
            "timestamp": _timestamp(),
            "report": rep.to_dict(),
        },
        cfg["out"],
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="nlskam",
        description="Normal forms and KAM diagnostics for NLS on the circle",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="write the JSON report here (default stdout)")

    p = sub.add_parser("build-hamiltonian", help="expand the model Hamiltonian")
    common(p)
    p.add_argument("--f-taylor", dest="f_taylor", help="comma list of f^(m)(0), e.g. '1' or '1,1'")
    p.add_argument("--K", type=int)
    p.add_argument("--rmax", type=int)
    p.set_defaults(func=cmd_build_hamiltonian)

    p = sub.add_parser("normal-form", help="Birkhoff normal form")
    common(p)
    p.add_argument("--f-taylor", dest="f_taylor")
    p.add_argument("--K", type=int)
    p.add_argument("--order", type=int)
    p.add_argument("--policy", choices=["all-nonresonant", "q9"])
    p.add_argument("--policy-c", dest="policy_c", type=float)
    p.add_argument("--include-hamiltonian", dest="include_hamiltonian", action="store_const", const=True)
    p.set_defaults(func=cmd_normal_form)

    p = sub.add_parser("verify-divisors", help="exhaustive divisor surveys")
    common(p)
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--bound", type=int)
    p.set_defaults(func=cmd_verify_divisors)

    p = sub.add_parser("wick-check", help="Wick identity, bounds and over-pairing")
    common(p)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--symbolic", choices=["auto", "on", "off"])
    p.set_defaults(func=cmd_wick_check)

    p = sub.add_parser("open", help="action-angle opening of a site set")
    common(p)
    p.add_argument("--sites", help="comma list, e.g. '0,1'")
    p.add_argument("--xi", help="comma list of rationals, e.g. '1/8,1/16'")
    p.add_argument("--y-order", dest="y_order", type=int)
    p.add_argument("--f-taylor", dest="f_taylor")
    p.add_argument("--K", type=int)
    p.add_argument("--rmax", type=int)
    p.add_argument("--order", type=int, help="normal-form order before opening")
    p.add_argument("--eps", help="rational scale, e.g. '1/10'")
    p.add_argument("--include-hamiltonian", dest="include_hamiltonian", action="store_const", const=True)
    p.set_defaults(func=cmd_open)

    p = sub.add_parser("kam-sample", help="small-divisor bad-set sampling")
    common(p)
    p.add_argument("--sites")
    p.add_argument("--xi-min", dest="xi_min", type=float)
    p.add_argument("--xi-max", dest="xi_max", type=float)
    p.add_argument("--base", help="comma list of base frequencies per site/ext mode")
    p.add_argument("--eps")
    p.add_argument("--d", type=int)
    p.add_argument("--k-box", dest="k_box", type=int)
    p.add_argument("--ext-modes", dest="ext_modes")
    p.add_argument("--b-l1-max", dest="b_l1_max", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--r", type=float)
    p.add_argument("--nu", type=float)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_kam_sample)

    p = sub.add_parser("twist", help="Lipschitz matrix and twist margin")
    common(p)
    p.add_argument("--f-taylor", dest="f_taylor")
    p.add_argument("--K", type=int)
    p.add_argument("--rmax", type=int)
    p.add_argument("--order", type=int)
    p.add_argument("--sites")
    p.add_argument("--xi")
    p.add_argument("--y-order", dest="y_order", type=int)
    p.add_argument("--eps")
    p.add_argument("--h", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--s0", type=float)
    p.add_argument("--matrix-out", dest="matrix_out", help="CSV for the matrix")
    p.set_defaults(func=cmd_twist)

    p = sub.add_parser("sparsity-check", help="sparsity functional of a site sequence")
    common(p)
    p.add_argument("--sequence-file", dest="sequence_file")
    p.add_argument("--lengths", help="comma list of truncation lengths")
    p.set_defaults(func=cmd_sparsity_check)

    p = sub.add_parser("simulate", help="split-step simulation and drift report")
    common(p)
    p.add_argument("--model", help="comma list of f^(m)(0)")
    p.add_argument("--K", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--profile", choices=["exp", "random"])
    p.add_argument("--store-every", dest="store_every", type=int)
    p.add_argument("--csv-out", dest="csv_out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="composite experiments")
    p.add_argument("kind", choices=["invariance"])
    common(p)
    p.add_argument("--f-taylor", dest="f_taylor")
    p.add_argument("--K", type=int)
    p.add_argument("--order", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--xi", help="site:value comma list, e.g. '0:1.0,1:0.5'")
    p.add_argument("--T", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--store-every", dest="store_every", type=int)
    p.add_argument("--required-factor", dest="required_factor", type=float)
    p.add_argument("--flow-steps", dest="flow_steps", type=int)
    p.set_defaults(func=cmd_experiment)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, dy.DivergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
