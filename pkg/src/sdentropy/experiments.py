"""Configuration-driven experiment runners and their file outputs.

Each runner returns an in-memory result and, when given an output
directory, writes plain CSV plus JSON summaries and a ``manifest.json``
listing every data file with its SHA-256. Data files carry no timestamps,
so an identical configuration reproduces identical hashes.
"""

from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .brownian import make_lattice, step_count
from .density import (
    DEFAULT_MAX_NODES,
    rect_grid_2d,
    DensityEstimate,
    kde_1d,
    kde_2d,
    log_grid,
    padded_rect_grid,
    silverman_bandwidth,
    write_density_csv,
)
from .divergence import (
    ConvergenceReport,
    fit_convergence_rate,
    relative_entropies,
    total_variation,
    wasserstein1_1d,
)
from .errors import ConfigurationError, DegenerateDataError, ResourceError
from .integrators import SchemeKind, simulate_coupled
from .malliavin import (
    ScalingProbeResult,
    inverse_moment_probe,
    jacobian_deviation_probe,
)
from .models import (
    GbmParams,
    GlParams,
    additive_model,
    elliptic_demo_model,
    gbm_exact_terminal,
    gbm_model,
    gbm_smoothed_density,
    tamed_gl_model,
)

log = logging.getLogger(__name__)

__all__ = [
    "KINDS",
    "load_config",
    "default_config",
    "validate_config",
    "config_digest",
    "estimate_seconds",
    "run_experiment",
    "run_gbm_entropy",
    "run_gl_entropy",
    "run_strong_order",
    "run_malliavin_probe",
    "emit_plot_data",
    "RunRecorder",
    "sha256_file",
]

KINDS = ("gbm_entropy", "gl_entropy", "strong_order", "malliavin_probe")

# seconds per (path x step x state dimension), measured on one core
_STEP_COST = 2.5e-7
_KERNEL_COST = 1.5e-8


# --- configuration -------------------------------------------------------------


def _shipped(name: str) -> dict:
    text = resources.files("sdentropy").joinpath("configs", name).read_text(encoding="utf-8")
    return yaml.safe_load(text)


def default_config(kind_or_name: str) -> dict:
    """A shipped configuration, by experiment kind or by file stem (e.g. ``fig1_desk``)."""
    names = {
        "gbm_entropy": "fig1.yaml",
        "gl_entropy": "fig2.yaml",
        "strong_order": "strong_order.yaml",
        "malliavin_probe": "malliavin.yaml",
    }
    return _shipped(names.get(kind_or_name, f"{kind_or_name}.yaml"))


def _deep_update(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> dict:
    """Read a YAML config; missing keys are filled from the shipped default for its kind."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigurationError(f"{path}: 'kind' must be one of {KINDS}, got {kind!r}")
    return _deep_update(default_config(kind), raw)


def config_digest(cfg: dict) -> str:
    canon = {k: v for k, v in cfg.items() if k not in ("out", "threads")}
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _hs(exponents) -> list[float]:
    return [2.0 ** -int(k) for k in exponents]


def estimate_seconds(cfg: dict) -> float:
    """Rough single-core wall time of a run; used by the budget guard."""
    kind = cfg["kind"]
    T = float(cfg.get("T", 1.0))
    M = int(cfg.get("M", 0))
    if kind in ("gbm_entropy", "gl_entropy", "strong_order"):
        d = 2 if kind == "gl_entropy" else 1
        steps = sum(T / h for h in _hs(cfg["ladder"]))
        if kind == "strong_order":
            steps *= 2
        fine_exp = cfg.get("h_ref") if _needs_fine_reference(cfg) else max(cfg["ladder"])
        fine_steps = T * 2.0 ** int(fine_exp)
        sim = M * (steps + 2 * fine_steps) * d * _STEP_COST
        kde = 0.0
        if kind == "gbm_entropy":
            kde = M * cfg["grid"]["n"] * (len(cfg["ladder"]) + 1) * _KERNEL_COST
        elif kind == "gl_entropy":
            kde = M * sum(cfg["grid"]["n"]) * (len(cfg["ladder"]) + 1) * _KERNEL_COST * 4
        return sim + kde
    mp = cfg["probe"]
    steps = 2 ** (int(mp["n_times"]) - 1)
    return (len(mp["p"]) + 2) * int(mp["M"]) * steps * 40 * _STEP_COST


def _needs_fine_reference(cfg: dict) -> bool:
    if cfg["kind"] == "gl_entropy":
        return True
    if cfg["kind"] == "gbm_entropy":
        return cfg.get("paper_literal", False) or cfg.get("reference") == "milstein_ensemble"
    return False


def validate_config(cfg: dict) -> None:
    """Collect every problem in ``cfg`` and raise once, before any compute."""
    errs = []
    kind = cfg.get("kind")
    if kind not in KINDS:
        raise ConfigurationError(f"'kind' must be one of {KINDS}, got {kind!r}")
    seed = cfg.get("seed")
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        errs.append(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    T = cfg.get("T", 1.0)
    if not (isinstance(T, (int, float)) and T > 0):
        errs.append(f"T must be positive, got {T!r}")
        T = None

    if kind in ("gbm_entropy", "gl_entropy", "strong_order"):
        M = cfg.get("M")
        if not isinstance(M, int) or M < 10:
            errs.append(f"M must be an integer >= 10, got {M!r}")
        ladder = cfg.get("ladder")
        if not isinstance(ladder, list) or not all(isinstance(k, int) and k >= 0 for k in ladder):
            errs.append(f"ladder must be a list of nonnegative integer exponents k (h = 2^-k), got {ladder!r}")
            ladder = None
        else:
            if len(ladder) < 3:
                errs.append(f"ladder has {len(ladder)} step sizes; need >= 3 rows for a slope")
            if len(set(ladder)) != len(ladder) or ladder != sorted(ladder):
                errs.append("ladder exponents must be strictly increasing (h strictly decreasing)")
        if T is not None and ladder:
            for k in ladder:
                try:
                    step_count(T, 2.0**-k)
                except ConfigurationError as e:
                    errs.append(str(e))
        if _needs_fine_reference(cfg):
            h_ref = cfg.get("h_ref")
            if not isinstance(h_ref, int):
                errs.append(f"h_ref must be an integer exponent (h_ref = 2^-k), got {h_ref!r}")
            elif ladder and h_ref <= max(ladder):
                errs.append(f"h_ref = 2^-{h_ref} must be finer than every ladder step (max k = {max(ladder)})")
        thr = cfg.get("overflow_tolerance", 1e-4)
        if not (isinstance(thr, (int, float)) and 0 <= thr < 1):
            errs.append(f"overflow_tolerance must lie in [0, 1), got {thr!r}")

    model = cfg.get("model", {})
    if kind in ("gbm_entropy", "strong_order"):
        try:
            GbmParams(**model)
        except (TypeError, ConfigurationError) as e:
            errs.append(f"model: {e}")
    elif kind == "gl_entropy":
        try:
            GlParams(**model)
        except (TypeError, ConfigurationError) as e:
            errs.append(f"model: {e}")

    if kind == "gbm_entropy":
        g = cfg.get("grid", {})
        if g.get("kind", "log") != "log":
            errs.append("gbm_entropy needs grid.kind = log")
        if not (isinstance(g.get("lo"), (int, float)) and g.get("lo") > 0):
            errs.append(f"grid.lo must be positive, got {g.get('lo')!r}")
        if not (isinstance(g.get("hi"), (int, float)) and g.get("hi", 0) > g.get("lo", 0)):
            errs.append("grid.hi must exceed grid.lo")
        if not (isinstance(g.get("n"), int) and g.get("n") >= 2):
            errs.append(f"grid.n must be an integer >= 2, got {g.get('n')!r}")
        bw = cfg.get("bandwidth")
        if not (bw == "silverman" or (isinstance(bw, (int, float)) and bw > 0)):
            errs.append(f"bandwidth must be a positive number or 'silverman', got {bw!r}")
        if cfg.get("exact_reference", "coupled_kde") not in ("coupled_kde", "smoothed_pdf"):
            errs.append(f"exact_reference must be coupled_kde or smoothed_pdf, got {cfg.get('exact_reference')!r}")
        if cfg.get("reference") not in ("exact_law", "milstein_ensemble"):
            errs.append(f"reference must be exact_law or milstein_ensemble, got {cfg.get('reference')!r}")
    if kind == "gl_entropy":
        g = cfg.get("grid", {})
        n = g.get("n")
        if not (isinstance(n, list) and len(n) == 2 and all(isinstance(v, int) and v >= 2 for v in n)):
            errs.append(f"grid.n must be two integers >= 2, got {n!r}")
        else:
            cap = cfg.get("max_grid_nodes", DEFAULT_MAX_NODES)
            if n[0] * n[1] > cap:
                raise ResourceError(f"{n[0] * n[1]} grid nodes exceed the cap of {cap}")
        bw = cfg.get("bandwidth")
        ok = bw == "silverman" or (isinstance(bw, list) and len(bw) == 2 and all(
            isinstance(v, (int, float)) and v > 0 for v in bw))
        if not ok:
            errs.append(f"bandwidth must be two positive numbers or 'silverman', got {bw!r}")
        x0 = cfg.get("x0")
        if not (isinstance(x0, list) and len(x0) == 2):
            errs.append(f"x0 must be a two-component list, got {x0!r}")
    if kind in ("gbm_entropy", "gl_entropy"):
        eps = cfg.get("epsilon")
        if not (isinstance(eps, (int, float)) and eps > 0):
            errs.append(f"epsilon must be positive, got {eps!r}")
    if kind == "malliavin_probe":
        mp = cfg.get("probe", {})
        if mp.get("model") not in ("elliptic", "additive"):
            errs.append(f"probe.model must be 'elliptic' or 'additive', got {mp.get('model')!r}")
        if not (isinstance(mp.get("M"), int) and mp.get("M") >= 10):
            errs.append("probe.M must be an integer >= 10")
        if not (isinstance(mp.get("n_times"), int) and mp.get("n_times") >= 4):
            errs.append("probe.n_times must be an integer >= 4")
        if not (isinstance(mp.get("h_exponent"), int) and mp.get("h_exponent") >= 1):
            errs.append("probe.h_exponent must be a positive integer")
        ps = mp.get("p")
        if not (isinstance(ps, list) and ps and all(isinstance(p, (int, float)) and p >= 1 for p in ps)):
            errs.append(f"probe.p must be a nonempty list of orders >= 1, got {ps!r}")
        jp = mp.get("jacobian_p", 2)
        if not (isinstance(jp, int) and jp >= 2 and jp % 2 == 0):
            errs.append(f"probe.jacobian_p must be an even integer >= 2, got {jp!r}")

    if errs:
        raise ConfigurationError("invalid configuration:\n  - " + "\n  - ".join(errs))

    budget = float(cfg.get("budget_minutes", 30)) * 60
    est = estimate_seconds(cfg)
    if est > budget:
        raise ResourceError(
            f"estimated run time {est / 60:.1f} min exceeds the {budget / 60:.0f} min budget; "
            f"reduce M (now {cfg.get('M', cfg.get('probe', {}).get('M'))}) by a factor of "
            f"{math.ceil(est / budget)} or drop the finest ladder steps"
        )


# --- output helpers ------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> None:
    """Comma-separated, LF line endings, floats in shortest round-trip form."""
    lines = [",".join(columns)]
    for r in rows:
        vals = [r.get(c) for c in columns] if isinstance(r, dict) else list(r)
        lines.append(",".join(_fmt(v) for v in vals))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


class RunRecorder:
    """Stage timer and file inventory for one run; writes ``manifest.json``."""

    def __init__(self, cfg: dict, out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir) if out_dir is not None else None
        self.stages: dict[str, float] = {}
        self.files: list[Path] = []
        self.started = _dt.datetime.now(_dt.timezone.utc)
        if self.out is not None:
            try:
                self.out.mkdir(parents=True, exist_ok=True)
            except OSError as e:
                raise OSError(f"cannot create output directory {self.out}: {e}") from e

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        log.info("stage %s started", name)
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0
            log.info("stage %s done in %.2fs", name, self.stages[name])

    def path(self, name: str) -> Optional[Path]:
        if self.out is None:
            return None
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def finish(self) -> Optional[dict]:
        if self.out is None:
            return None
        manifest = {
            "config_digest": config_digest(self.cfg),
            "config": self.cfg,
            "tool_version": __version__,
            "numpy_version": np.__version__,
            "started_utc": self.started.isoformat(),
            "finished_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "stage_seconds": self.stages,
            "files": {
                str(p.relative_to(self.out)): sha256_file(p) for p in sorted(set(self.files))
            },
        }
        write_json(self.out / "manifest.json", manifest)
        return manifest


def emit_plot_data(report: ConvergenceReport, out_dir, recorder: Optional[RunRecorder] = None) -> list[Path]:
    """Write ``convergence.csv``, ``fit.json`` and ``reference-lines.csv``.

    The guide lines pass through the observed value at the largest ``h``
    with slopes one and two.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write to {out}: {e}") from e
    names = ["convergence.csv", "fit.json", "reference-lines.csv"]
    paths = [recorder.path(n) if recorder is not None and recorder.out == out else out / n for n in names]
    cols = ["h"] + [c for c in ("KL_raw", "KL_normalized", "TV", "W1") if c in report.rows[0]]
    write_csv(paths[0], cols, report.rows)
    summary = {
        "fit_metric": report.fit_metric,
        "slope": report.slope,
        "intercept": report.intercept,
        "residual_max": report.residual_max,
        "reference": report.reference,
        "other_slopes": report.extra_slopes,
    }
    write_json(paths[1], summary)
    h0 = report.rows[0]["h"]
    v0 = report.rows[0][report.fit_metric]
    lines = [{"h": r["h"], "first_order": v0 * (r["h"] / h0), "second_order": v0 * (r["h"] / h0) ** 2}
             for r in report.rows]
    write_csv(paths[2], ["h", "first_order", "second_order"], lines)
    return paths


def _finish_report(rows, fit_metric, reference) -> ConvergenceReport:
    slope, intercept, resid = fit_convergence_rate([(r["h"], r[fit_metric]) for r in rows])
    extra = {}
    for m in ("KL_raw", "TV", "W1"):
        if m in rows[0] and m != fit_metric:
            try:
                extra[m] = fit_convergence_rate([(r["h"], r[m]) for r in rows])[0]
            except Exception:  # nonpositive raw KL cannot be fitted in log-log
                extra[m] = None
    return ConvergenceReport(rows, fit_metric, slope, intercept, resid, reference, extra)


def _threads(cfg) -> int:
    t = cfg.get("threads")
    return int(t) if t else 1


def _reference_seed(seed: int) -> int:
    return (seed ^ 0x9E3779B97F4A7C15) & ((1 << 64) - 1)


# --- runners -------------------------------------------------------------------


@dataclass
class EntropyRun:
    report: ConvergenceReport
    densities: dict
    reference: DensityEstimate
    terminals: dict = field(default_factory=dict)
    manifest: Optional[dict] = None


def run_gbm_entropy(cfg: dict, out_dir=None) -> EntropyRun:
    """Relative entropy of Euler-Maruyama KDEs against a GBM reference, per step size."""
    cfg = copy.deepcopy(cfg)
    if cfg.get("paper_literal"):
        cfg["reference"] = "milstein_ensemble"
    validate_config(cfg)
    p = GbmParams(**cfg["model"])
    if p.sigma == 0:
        raise DegenerateDataError("sigma = 0 gives a point-mass law; a KDE comparison is meaningless")
    T, M, seed, eps = float(cfg["T"]), cfg["M"], cfg["seed"], float(cfg["epsilon"])
    hs = _hs(cfg["ladder"])
    workers = _threads(cfg)
    rec = RunRecorder(cfg, out_dir)
    model = gbm_model(p)
    literal = cfg["reference"] == "milstein_ensemble"
    coupled = cfg.get("coupled", True)
    h_fine = 2.0 ** -cfg["h_ref"] if literal else min(hs)

    with rec.stage("simulate"):
        lattice = make_lattice(seed, M, T, h_fine, 1)
        runs = [(SchemeKind.EULER_MARUYAMA, int(round(h / h_fine))) for h in hs]
        if literal and coupled:
            runs.append((SchemeKind.MILSTEIN, 1))
        ens = simulate_coupled(model, runs, lattice, [p.x0], workers=workers,
                               overflow_tolerance=cfg.get("overflow_tolerance", 1e-4))
        if literal and not coupled:
            ref_lattice = make_lattice(_reference_seed(seed), M, T, h_fine, 1)
            ref_ens = simulate_coupled(model, [(SchemeKind.MILSTEIN, 1)], ref_lattice, [p.x0], workers=workers)[0]
            ref_samples = ref_ens.valid_terminals[:, 0]
        elif literal:
            ref_samples = ens.pop().valid_terminals[:, 0]
        else:
            ref_lattice = lattice if coupled else make_lattice(_reference_seed(seed), M, T, h_fine, 1)
            ref_samples = gbm_exact_terminal(p, T, ref_lattice.endpoints(workers)[:, 0])

    g = cfg["grid"]
    grid = log_grid(float(g["lo"]), float(g["hi"]), int(g["n"]))
    bw = cfg["bandwidth"]
    bw = silverman_bandwidth(ref_samples) if bw == "silverman" else float(bw)
    with rec.stage("density"):
        if literal:
            ref = kde_1d(ref_samples, bw, grid, workers=workers)
            ref_desc = {"kind": "milstein_ensemble", "h_ref": h_fine, "coupled": coupled}
        elif cfg.get("exact_reference", "coupled_kde") == "smoothed_pdf":
            ref = DensityEstimate(grid, gbm_smoothed_density(p, T, grid.axes[0], bw), bw, M)
            ref_desc = {"kind": "exact_law", "density": "smoothed_pdf", "coupled": False}
        else:
            ref = kde_1d(ref_samples, bw, grid, workers=workers)
            ref_desc = {"kind": "exact_law", "density": "coupled_kde", "coupled": coupled}
        dens = {e.h: kde_1d(e.valid_terminals[:, 0], bw, grid, workers=workers) for e in ens}

    rows = []
    with rec.stage("divergence"):
        for e in ens:
            kl = relative_entropies(dens[e.h], ref, eps)
            rows.append({
                "h": e.h,
                "KL_raw": kl["KL_raw"].value,
                "KL_normalized": kl["KL_normalized"].value,
                "TV": total_variation(dens[e.h], ref).value,
                "W1": wasserstein1_1d(e.valid_terminals[:, 0], ref_samples).value,
            })
    ref_desc.update({"epsilon": eps, "bandwidth": bw, "grid": dict(g), "M": M, "seed": seed})
    report = _finish_report(rows, "KL_normalized", ref_desc)
    for r in rows:
        if not r["KL_normalized"] > 0:
            log.warning("nonpositive KL_normalized at h=%g", r["h"])

    manifest = None
    if out_dir is not None:
        with rec.stage("write"):
            emit_plot_data(report, out_dir, rec)
            meta = {"seed": seed, "model": model.label, "T": T}
            for k, e in zip(cfg["ladder"], ens):
                write_density_csv(dens[e.h], rec.path(f"densities/euler_k{k:02d}.csv"),
                                  dict(meta, scheme="euler", h=e.h))
            write_density_csv(ref, rec.path("densities/reference.csv"), dict(meta, reference=ref_desc["kind"]))
        manifest = rec.finish()
    return EntropyRun(report, dens, ref, {e.h: e.terminals for e in ens}, manifest)


def run_gl_entropy(cfg: dict, out_dir=None) -> EntropyRun:
    """Relative entropy of 2D Euler-Maruyama KDEs against a fine Milstein KDE."""
    cfg = copy.deepcopy(cfg)
    validate_config(cfg)
    p = GlParams(**cfg["model"])
    x0 = [float(v) for v in cfg["x0"]]
    T, M, seed, eps = float(cfg["T"]), cfg["M"], cfg["seed"], float(cfg["epsilon"])
    hs = _hs(cfg["ladder"])
    h_ref = 2.0 ** -cfg["h_ref"]
    workers = _threads(cfg)
    coupled = cfg.get("coupled", True)
    rec = RunRecorder(cfg, out_dir)
    model = tamed_gl_model(p)
    tol = cfg.get("overflow_tolerance", 1e-4)

    with rec.stage("simulate"):
        lattice = make_lattice(seed, M, T, h_ref, 2)
        runs = [(SchemeKind.EULER_MARUYAMA, int(round(h / h_ref))) for h in hs]
        if coupled:
            runs.append((SchemeKind.MILSTEIN, 1))
        ens = simulate_coupled(model, runs, lattice, x0, workers=workers, overflow_tolerance=tol)
        if coupled:
            ref_ens = ens.pop()
        else:
            ref_lattice = make_lattice(_reference_seed(seed), M, T, h_ref, 2)
            ref_ens = simulate_coupled(model, [(SchemeKind.MILSTEIN, 1)], ref_lattice, x0,
                                       workers=workers, overflow_tolerance=tol)[0]
    ref_samples = ref_ens.valid_terminals

    bw = cfg["bandwidth"]
    if bw == "silverman":
        bw = [silverman_bandwidth(ref_samples[:, i]) for i in range(2)]
    bw = (float(bw[0]), float(bw[1]))
    g = cfg["grid"]
    cap = cfg.get("max_grid_nodes", DEFAULT_MAX_NODES)
    with rec.stage("density"):
        if g.get("lo") is not None and g.get("hi") is not None:
            grid = rect_grid_2d(g["lo"], g["hi"], g["n"], max_nodes=cap)
        else:
            grid = padded_rect_grid(ref_samples, bw, g["n"], pad=float(g.get("pad", 4.0)), max_nodes=cap)
        ref = kde_2d(ref_samples, bw, grid)
        dens = {e.h: kde_2d(e.valid_terminals, bw, grid) for e in ens}

    rows = []
    with rec.stage("divergence"):
        for e in ens:
            kl = relative_entropies(dens[e.h], ref, eps)
            rows.append({
                "h": e.h,
                "KL_raw": kl["KL_raw"].value,
                "KL_normalized": kl["KL_normalized"].value,
                "TV": total_variation(dens[e.h], ref).value,
            })
    ref_desc = {"kind": "milstein_ensemble", "h_ref": h_ref, "coupled": coupled, "epsilon": eps,
                "bandwidth": list(bw), "grid_shape": list(grid.shape),
                "grid_lo": [float(a[0]) for a in grid.axes], "grid_hi": [float(a[-1]) for a in grid.axes],
                "M": M, "seed": seed}
    report = _finish_report(rows, "KL_normalized", ref_desc)

    manifest = None
    if out_dir is not None:
        with rec.stage("write"):
            emit_plot_data(report, out_dir, rec)
            meta = {"seed": seed, "model": model.label, "T": T}
            for k, e in zip(cfg["ladder"], ens):
                write_density_csv(dens[e.h], rec.path(f"densities/euler_k{k:02d}.csv"),
                                  dict(meta, scheme="euler", h=e.h))
            write_density_csv(ref, rec.path("densities/reference.csv"), dict(meta, reference="milstein", h=h_ref))
        manifest = rec.finish()
    return EntropyRun(report, dens, ref, {e.h: e.terminals for e in ens}, manifest)


@dataclass
class StrongOrderRun:
    rows: list
    euler_slope: float
    milstein_slope: float
    manifest: Optional[dict] = None


def run_strong_order(cfg: dict, out_dir=None) -> StrongOrderRun:
    """RMS terminal error of Euler and Milstein against the exact GBM solution on one lattice."""
    cfg = copy.deepcopy(cfg)
    validate_config(cfg)
    p = GbmParams(**cfg["model"])
    T, M, seed = float(cfg["T"]), cfg["M"], cfg["seed"]
    hs = _hs(cfg["ladder"])
    h_fine = min(hs)
    workers = _threads(cfg)
    rec = RunRecorder(cfg, out_dir)
    model = gbm_model(p)
    with rec.stage("simulate"):
        lattice = make_lattice(seed, M, T, h_fine, 1).materialize(workers)
        runs = [(s, int(round(h / h_fine))) for h in hs for s in (SchemeKind.EULER_MARUYAMA, SchemeKind.MILSTEIN)]
        ens = simulate_coupled(model, runs, lattice, [p.x0], workers=workers)
        exact = gbm_exact_terminal(p, T, lattice.endpoints()[:, 0])
    rows = []
    for i, h in enumerate(hs):
        eu, mi = ens[2 * i].terminals[:, 0], ens[2 * i + 1].terminals[:, 0]
        se_e, se_m = (eu - exact) ** 2, (mi - exact) ** 2
        rows.append({
            "h": h,
            "rms_euler": math.sqrt(se_e.mean()),
            "rms_milstein": math.sqrt(se_m.mean()),
            "mse_euler_stderr": se_e.std(ddof=1) / math.sqrt(M),
            "mse_milstein_stderr": se_m.std(ddof=1) / math.sqrt(M),
            "weak_mean_euler": abs(eu.mean() - exact.mean()),
            "weak_second_euler": abs((eu**2).mean() - (exact**2).mean()),
        })
    es = fit_convergence_rate([(r["h"], r["rms_euler"]) for r in rows])[0]
    ms = fit_convergence_rate([(r["h"], r["rms_milstein"]) for r in rows])[0]
    manifest = None
    if out_dir is not None:
        with rec.stage("write"):
            cols = list(rows[0].keys())
            write_csv(rec.path("strong_order.csv"), cols, rows)
            write_json(rec.path("fit.json"), {"euler_slope": es, "milstein_slope": ms, "M": M, "seed": seed,
                                              "model": model.label})
        manifest = rec.finish()
    return StrongOrderRun(rows, es, ms, manifest)


@dataclass
class MalliavinRun:
    inverse: dict
    jacobian: ScalingProbeResult
    manifest: Optional[dict] = None


def _probe_model(name: str):
    if name == "elliptic":
        return elliptic_demo_model()
    return additive_model()


def run_malliavin_probe(cfg: dict, out_dir=None) -> MalliavinRun:
    """Inverse-moment scaling of the Malliavin matrix and ``|J - I|`` moment scaling."""
    cfg = copy.deepcopy(cfg)
    validate_config(cfg)
    mp = cfg["probe"]
    model = _probe_model(mp["model"])
    h = 2.0 ** -mp["h_exponent"]
    times = [h * 2**j for j in range(mp["n_times"])]
    y0 = [float(mp.get("y0", 0.0))]
    seed = cfg["seed"]
    rec = RunRecorder(cfg, out_dir)
    inverse = {}
    with rec.stage("inverse_moment"):
        for p in mp["p"]:
            inverse[p] = inverse_moment_probe(model, p, times, mp["M"], seed, h=h, y0=y0)
    with rec.stage("jacobian_deviation"):
        jac = jacobian_deviation_probe(model, times, mp["M"], seed + 1, p=mp.get("jacobian_p", 2), h=h, y0=y0)
    manifest = None
    if out_dir is not None:
        with rec.stage("write"):
            summary = {}
            for p, res in list(inverse.items()) + [("J", jac)]:
                name = f"inverse_moment_p{p:g}.csv" if p != "J" else f"jacobian_deviation_p{jac.p:g}.csv"
                write_csv(rec.path(name), ["t_minus_a", "estimate", "stderr"], res.rows)
                summary[name] = {"quantity": res.quantity, "p": res.p, "exponent": res.exponent,
                                 "intercept": res.intercept, "sample_count": res.sample_count,
                                 "envelope_constant": res.envelope_constant, "envelope_ok": res.envelope_ok,
                                 "model": model.label}
            write_json(rec.path("probe_summary.json"), summary)
        manifest = rec.finish()
    return MalliavinRun(inverse, jac, manifest)


_RUNNERS = {
    "gbm_entropy": run_gbm_entropy,
    "gl_entropy": run_gl_entropy,
    "strong_order": run_strong_order,
    "malliavin_probe": run_malliavin_probe,
}


def run_experiment(cfg: dict, out_dir=None):
    return _RUNNERS[cfg["kind"]](cfg, out_dir)
