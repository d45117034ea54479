"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime or overflow
error, 4 resource error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .brownian import make_lattice
from .density import kde_1d, kde_2d, log_grid, padded_rect_grid, read_density_csv, silverman_bandwidth, write_density_csv
from .divergence import pinsker_margin, relative_entropies, total_variation
from .errors import ConfigurationError, SdentropyError
from .experiments import (
    RunRecorder,
    default_config,
    load_config,
    run_experiment,
    validate_config,
)
from .integrators import SchemeKind, simulate_coupled
from .models import GbmParams, GlParams, gbm_model, tamed_gl_model

log = logging.getLogger("sdentropy")


def _config(args, fallback: str | None = None) -> dict:
    if args.config:
        cfg = load_config(args.config)
    elif fallback:
        cfg = default_config(fallback)
    else:
        raise ConfigurationError("--config is required for this command")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.paper_literal:
        cfg["paper_literal"] = True
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _print_report(result) -> None:
    rep = getattr(result, "report", None)
    if rep is not None:
        for r in rep.rows:
            print("  ".join(f"{k}={v:.6g}" for k, v in r.items()))
        print(f"slope({rep.fit_metric}) = {rep.slope:.4f}   intercept = {rep.intercept:.4f}   "
              f"residual_max = {rep.residual_max:.3g}")
    elif hasattr(result, "euler_slope"):
        print(f"euler slope = {result.euler_slope:.4f}   milstein slope = {result.milstein_slope:.4f}")
    elif hasattr(result, "inverse"):
        for p, res in result.inverse.items():
            print(f"E|G^-1|^{p:g}: exponent = {res.exponent:.4f}   envelope_ok = {res.envelope_ok}")
        print(f"E|J-I|^{result.jacobian.p:g}: exponent = {result.jacobian.exponent:.4f}")


def cmd_run(args, fallback=None, kinds=None):
    cfg = _config(args, fallback)
    if kinds and cfg["kind"] not in kinds:
        raise ConfigurationError(f"this command runs {kinds}, config has kind={cfg['kind']!r}")
    out = _out(args, f"runs/{cfg['kind']}")
    result = run_experiment(cfg, out)
    _print_report(result)
    print(f"wrote {out}")
    return 0


def _write_terminals(path, terminals, meta):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write(",".join(["x", "y"][: terminals.shape[1]]) + "\n")
        np.savetxt(fh, terminals, delimiter=",", fmt="%.17g")


def _read_terminals(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        meta = json.loads(first[2:]) if first.startswith("# ") else {}
        if meta:
            fh.readline()
        return np.loadtxt(fh, delimiter=",", ndmin=2), meta


def cmd_simulate(args):
    cfg = _config(args)
    if cfg["kind"] not in ("gbm_entropy", "gl_entropy", "strong_order"):
        raise ConfigurationError("simulate needs a gbm_entropy, gl_entropy or strong_order config")
    validate_config(cfg)
    if cfg["kind"] == "gl_entropy":
        model, x0 = tamed_gl_model(GlParams(**cfg["model"])), cfg["x0"]
    else:
        p = GbmParams(**cfg["model"])
        model, x0 = gbm_model(p), [p.x0]
    scheme = SchemeKind(args.scheme)
    ladder = cfg["ladder"]
    h_fine = 2.0 ** -max(ladder)
    lattice = make_lattice(cfg["seed"], cfg["M"], float(cfg["T"]), h_fine, model.m)
    runs = [(scheme, 2 ** (max(ladder) - k)) for k in ladder]
    out = _out(args, "runs/simulate")
    rec = RunRecorder(cfg, out)
    with rec.stage("simulate"):
        ens = simulate_coupled(model, runs, lattice, x0, workers=int(cfg.get("threads") or 1),
                               overflow_tolerance=cfg.get("overflow_tolerance", 1e-4))
    for k, e in zip(ladder, ens):
        meta = {"model": model.label, "scheme": scheme.value, "h": e.h, "T": e.T, "seed": e.seed, "M": e.n_paths}
        _write_terminals(rec.path(f"terminals_{scheme.value}_k{k:02d}.csv"), e.valid_terminals, meta)
    rec.finish()
    print(f"wrote {len(ens)} ensembles to {out}")
    return 0


def cmd_density(args):
    cfg = _config(args)
    if not args.input:
        raise ConfigurationError("density needs --input <terminals.csv>")
    samples, meta = _read_terminals(args.input)
    out = _out(args, "runs/density")
    out.mkdir(parents=True, exist_ok=True)
    bw = cfg.get("bandwidth", "silverman")
    if samples.shape[1] == 1:
        g = cfg["grid"]
        grid = log_grid(float(g["lo"]), float(g["hi"]), int(g["n"]))
        bw = silverman_bandwidth(samples[:, 0]) if bw == "silverman" else float(bw)
        est = kde_1d(samples[:, 0], bw, grid)
    else:
        if bw == "silverman":
            bw = [silverman_bandwidth(samples[:, i]) for i in range(2)]
        grid = padded_rect_grid(samples, bw, cfg["grid"]["n"], pad=float(cfg["grid"].get("pad", 4.0)),
                                max_nodes=cfg.get("max_grid_nodes", 40_000))
        est = kde_2d(samples, bw, grid)
    target = out / (Path(args.input).stem + "_density.csv")
    write_density_csv(est, target, {k: meta[k] for k in ("seed", "h", "scheme", "model") if k in meta})
    print(f"wrote {target} (mass {est.mass:.6f})")
    return 0


def cmd_divergence(args):
    if not (args.p and args.q):
        raise ConfigurationError("divergence needs --p <density.csv> and --q <density.csv>")
    p, q = read_density_csv(args.p), read_density_csv(args.q)
    eps = args.epsilon
    kl = relative_entropies(p, q, eps)
    res = {
        "KL_raw": kl["KL_raw"].value,
        "KL_normalized": kl["KL_normalized"].value,
        "TV": total_variation(p, q).value,
        "pinsker_margin": pinsker_margin(p, q, eps),
        "epsilon": eps,
    }
    text = json.dumps(res, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "divergence.json").write_text(text + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the configured seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="worker threads for simulation and KDE")
    common.add_argument("--paper-literal", action="store_true",
                        help="GBM: use a Milstein ensemble at h_ref with KDE as the reference")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sdentropy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate terminal ensembles for every ladder step")
    s.add_argument("--scheme", choices=[k.value for k in SchemeKind], default="euler")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("density", parents=[common], help="KDE of a terminals file on the configured grid")
    s.add_argument("--input", help="terminals CSV written by 'simulate'")
    s.set_defaults(func=cmd_density)

    s = sub.add_parser("divergence", parents=[common], help="KL / TV / Pinsker margin of two density files")
    s.add_argument("--p", help="density CSV (numerical)")
    s.add_argument("--q", help="density CSV (reference)")
    s.add_argument("--epsilon", type=float, default=1e-10)
    s.set_defaults(func=cmd_divergence)

    s = sub.add_parser("convergence", parents=[common], help="run a gbm_entropy, gl_entropy or strong_order config")
    s.set_defaults(func=lambda a: cmd_run(a, kinds=("gbm_entropy", "gl_entropy", "strong_order")))

    s = sub.add_parser("malliavin", parents=[common], help="Malliavin matrix and Jacobian scaling probes")
    s.set_defaults(func=lambda a: cmd_run(a, fallback="malliavin_probe", kinds=("malliavin_probe",)))

    s = sub.add_parser("reproduce-fig1", parents=[common], help="GBM relative-entropy convergence")
    s.add_argument("--desk", action="store_true", help="use the M = 10^5 desk-scale configuration")
    s.set_defaults(func=lambda a: cmd_run(a, fallback="fig1_desk" if a.desk else "gbm_entropy",
                                          kinds=("gbm_entropy",)))

    s = sub.add_parser("reproduce-fig2", parents=[common], help="tamed Ginzburg-Landau relative-entropy convergence")
    s.add_argument("--desk", action="store_true", help="use the M = 10^5 desk-scale configuration")
    s.set_defaults(func=lambda a: cmd_run(a, fallback="fig2_desk" if a.desk else "gl_entropy",
                                          kinds=("gl_entropy",)))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SdentropyError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
