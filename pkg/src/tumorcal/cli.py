"""Command-line pipeline: phantom -> segment -> calibrate -> predict -> metrics.

Every subcommand reads inputs from, and writes one output directory into, an
explicit ``--run-dir``.  Outputs are staged in a temporary directory and
renamed into place, each with a ``manifest.json`` recording the resolved
configuration, seeds, input/output digests and source fingerprints.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from importlib import resources
from pathlib import Path

from . import __version__
from .errors import NumericalError, TumorCalError, ValidationError

log = logging.getLogger("tumorcal")

THREADS_ENV = "TUMORCAL_THREADS"
_BLAS_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


# ---------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    from .forward import SolverConfig
    from .inversion import NewtonConfig
    from .phantom import PhantomSpec
    from .prior import RegionHyper
    from dataclasses import asdict

    return {
        "method": "bayes",
        "noise_var": 3.9e-3,
        "likelihood_half": True,
        "hyper": RegionHyper.defaults().to_dict(),
        "solver": asdict(SolverConfig()),
        "newton": asdict(NewtonConfig()),
        "posterior": {
            "rank": None,
            "oversample": 10,
            "power_iters": 1,
            "threshold": 0.1,
            "rank_cap": None,
            "seed": 0,
            "variance_samples": 1000,
        },
        "split": {"train_days": None, "test_day": None},
        "predict": {"n_samples": 250, "cutoff": 0.5, "seed": 0},
        "metrics": {"cutoff": 0.5, "data_cutoff": 0.5},
        "phantom": PhantomSpec().to_dict(),
        "truth": {"kind": "prior", "seed": 1, "bump_center": None, "bump_radius": 2.0, "bump_amplitude": [0.4, 0.2]},
        "segment": {
            "downsample": 1,
            "band_halfwidth": 0.6,
            "iterations": 300,
            "smoothing_sigma": 1.5,
            "max_step": 0.5,
            "tol": 1e-4,
            "max_retries": 4,
        },
        "prior_samples": {"n": 10, "seed": 0, "robin": True},
        "pcp": {"n": 50000, "burn_in": 0.2, "step": 0.1, "seed": 0, "adapt_start": 500, "adapt_interval": 100, "dr_shrink": 0.2},
        "search": {"rho_gm": [2.0, 4.0, 6.0, 8.0, 10.0], "k": [0.5, 0.75, 1.0], "sigma_noise": None},
    }


def load_schema() -> dict:
    return json.loads(resources.files("tumorcal").joinpath("data/config.schema.json").read_text())


def validate_config(cfg: dict) -> None:
    """Check a user configuration against the shipped schema.  The message of
    the raised error starts with the dotted path of the offending key."""
    import jsonschema

    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    path = [str(p) for p in err.absolute_path]
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(set(err.instance) - allowed)
        raise ValidationError(f"config key {'.'.join(path + extra[:1])}: unknown key")
    raise ValidationError(f"config key {'.'.join(path) or '<root>'}: {err.message}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(path) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path}: invalid JSON at line {exc.lineno}") from None
        except OSError as exc:
            raise ValidationError(f"config {path}: {exc.strerror}") from None
        if not isinstance(user, dict):
            raise ValidationError("config must be a JSON object")
        validate_config(user)
    return _merge(default_config(), user)


# ---------------------------------------------------------------------------
# run directories and manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_TIMESTAMP_KEYS = ("started", "finished")


def input_digest(path) -> str:
    """File digest; upstream manifests are hashed without their timestamps so
    that rerunning an upstream step does not change downstream manifests."""
    path = Path(path)
    if path.name != "manifest.json":
        return sha256_file(path)
    m = json.loads(path.read_text())
    for k in _TIMESTAMP_KEYS:
        m.pop(k, None)
    return hashlib.sha256(json.dumps(m, sort_keys=True).encode()).hexdigest()


def code_fingerprints(modules) -> dict:
    """Digest of each module's source file."""
    import importlib

    out = {}
    for name in modules:
        mod = importlib.import_module(f"tumorcal.{name}")
        out[name] = sha256_file(mod.__file__)
    return out


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunOutput:
    """Temporary staging directory that becomes ``run_dir/name`` on commit."""

    def __init__(self, run_dir: Path, name: str):
        if not name or Path(name).name != name or name.startswith("."):
            raise ValidationError(f"output name must be a plain directory name, got {name!r}")
        self.run_dir = run_dir
        self.target = run_dir / name
        self.path = Path(tempfile.mkdtemp(prefix=f".{name}.tmp-", dir=run_dir))
        self.inputs: dict = {}
        self.seeds: dict = {}
        self.settings: dict = {}
        self.code_path: list = ["grid"]

    def file(self, rel) -> Path:
        p = self.path / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, rel, obj) -> None:
        self.file(rel).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def add_input(self, path: Path) -> None:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for p in files:
            self.inputs[str(p.relative_to(self.run_dir) if p.is_relative_to(self.run_dir) else p)] = input_digest(p)

    def commit(self, subcommand: str, argv: list, config: dict, started: str) -> None:
        outputs = {
            str(p.relative_to(self.path)): sha256_file(p)
            for p in sorted(self.path.rglob("*"))
            if p.is_file()
        }
        manifest = {
            "tool": "tumorcal",
            "version": __version__,
            "subcommand": subcommand,
            "argv": argv,
            "config": config,
            "inputs": self.inputs,
            "outputs": outputs,
            "seeds": self.seeds,
            "settings": self.settings,
            "code_path": code_fingerprints(sorted(set(self.code_path))),
            "started": started,
            "finished": _now(),
        }
        self.write_json("manifest.json", manifest)
        if self.target.exists():
            trash = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.old-", dir=self.run_dir))
            os.replace(self.target, trash / "old")
            shutil.rmtree(trash)
        os.replace(self.path, self.target)

    def abort(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


def day_tag(day: float) -> str:
    return format(float(day), "g")


# ---------------------------------------------------------------------------
# bundle I/O


class Bundle:
    """Subject data directory: mask, labels, u0 and observation fields."""

    def __init__(self, path: Path, labels_path: Path | None = None):
        from .grid import read_grid, read_labels, read_scalar_field
        from .phantom import ObservationSeries

        self.path = path
        if not path.is_dir():
            raise ValidationError(f"input directory {path} does not exist")
        self.grid = read_grid(path / "mask.txt")
        self.labels = read_labels(labels_path or path / "labels.txt", self.grid)
        self.u0 = read_scalar_field(path / "u0.txt", self.grid)
        meta = _read_json(path / "observations.json")
        days = [float(d) for d in meta["days"]]
        fields = [read_scalar_field(path / f, self.grid) for f in meta["files"]]
        self.observations = ObservationSeries(tuple(days), fields)
        self.t0 = float(meta.get("t0", days[0]))

    def split(self, cfg: dict):
        """(t0, training days, testing day) from the config; by default all
        days after t0 but the last are training days and the last is held out."""
        later = [d for d in self.observations.days if d > self.t0]
        sp = cfg["split"]
        test = sp["test_day"] if sp["test_day"] is not None else (later[-1] if len(later) > 1 else None)
        train = sp["train_days"] if sp["train_days"] is not None else [d for d in later if d != test]
        return self.t0, tuple(float(d) for d in train), (None if test is None else float(test))


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}") from None


def _hyper(cfg):
    from .prior import RegionHyper

    return RegionHyper.from_dict(cfg["hyper"])


def _solver(cfg):
    from .forward import SolverConfig

    return SolverConfig(**cfg["solver"])


def _newton(cfg):
    from .inversion import NewtonConfig

    return NewtonConfig(**cfg["newton"])


def _write_obs(out: RunOutput, obs, prefix="obs_day_"):
    from .grid import write_scalar_field

    files = []
    for d, f in zip(obs.days, obs.fields):
        name = f"{prefix}{day_tag(d)}.txt"
        write_scalar_field(f, out.file(name))
        files.append(name)
    return files


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args, cfg, out: RunOutput):
    from .grid import write_array, write_labels, write_mask, write_scalar_field
    from .phantom import (
        PhantomSpec,
        draw_truth_fields,
        make_brain_phantom,
        offprior_truth_fields,
        synthesize_observations,
    )
    from .prior import build_prior

    spec = PhantomSpec.from_dict(cfg["phantom"])
    ph = make_brain_phantom(spec)
    g = ph.grid
    hyper = _hyper(cfg)
    tr = cfg["truth"]
    if tr["kind"] == "prior":
        truth = draw_truth_fields(build_prior(g, ph.labels, hyper), tr["seed"])
    else:
        center = tr["bump_center"] or spec.tumor_center
        truth = offprior_truth_fields(g, ph.labels, hyper, center, tr["bump_radius"], tuple(tr["bump_amplitude"]))
    obs = synthesize_observations(g, truth, ph.u0, spec.days, spec.noise_var, spec.seed, _solver(cfg))

    write_mask(g, out.file("mask.txt"))
    write_labels(ph.labels, out.file("labels.txt"))
    write_scalar_field(ph.u0, out.file("u0.txt"))
    write_scalar_field(truth.logD, out.file("truth_logD.txt"))
    write_scalar_field(truth.logG, out.file("truth_logG.txt"))
    write_array(out.file("subject_image.txt"), "SFIELD", ph.subject_image, g.hx, g.hy)
    write_array(out.file("atlas_image.txt"), "SFIELD", ph.atlas_image, g.hx, g.hy)
    write_array(out.file("atlas_labels.txt"), "LABELS", ph.atlas_labels, g.hx, g.hy)
    write_array(out.file("true_disp_x.txt"), "SFIELD", ph.true_displacement[..., 0], g.hx, g.hy)
    write_array(out.file("true_disp_y.txt"), "SFIELD", ph.true_displacement[..., 1], g.hx, g.hy)
    files = _write_obs(out, obs)
    out.write_json("observations.json", {"days": list(obs.days), "files": files, "t0": obs.days[0]})
    out.write_json("phantom.json", {"spec": spec.to_dict(), "n_cells": g.n_cells, "truth": tr})
    out.seeds.update({"truth": tr["seed"], "noise": spec.seed})
    out.code_path += ["phantom", "prior", "forward", "registration"]
    log.info("phantom: %d brain cells, days %s", g.n_cells, list(obs.days))


def cmd_segment(args, cfg, out: RunOutput):
    import numpy as np
    from scipy import ndimage

    from .grid import Region, read_array, read_grid, read_labels, write_array, write_labels
    from .metrics import dice
    from .registration import DemonsParams, demons, downsample_image, transfer_labels

    src = args.run_dir / args.input
    out.add_input(src / "mask.txt")
    for name in ("subject_image.txt", "atlas_image.txt", "atlas_labels.txt"):
        out.add_input(src / name)
    grid = read_grid(src / "mask.txt")
    subject = read_array(src / "subject_image.txt", "SFIELD")[1]
    atlas = read_array(src / "atlas_image.txt", "SFIELD")[1]
    atlas_labels = read_array(src / "atlas_labels.txt", "LABELS")[1]
    sc = cfg["segment"]
    p = DemonsParams(sc["iterations"], sc["smoothing_sigma"], sc["max_step"], sc["tol"], sc["max_retries"])
    f = int(sc["downsample"])
    if f > 1:
        res = demons(downsample_image(subject, f, f), downsample_image(atlas, f, f), p)
        small = res.displacement
        disp = np.empty(subject.shape + (2,))
        for c in range(2):
            z = ndimage.zoom(small[..., c], f, order=1, mode="nearest")
            disp[..., c] = f * z[: subject.shape[0], : subject.shape[1]]
    else:
        res = demons(subject, atlas, p)
        disp = res.displacement
    labels = transfer_labels(atlas_labels, disp, grid, sc["band_halfwidth"])
    write_labels(labels, out.file("labels.txt"))
    write_array(out.file("disp_x.txt"), "SFIELD", disp[..., 0], grid.hx, grid.hy)
    write_array(out.file("disp_y.txt"), "SFIELD", disp[..., 1], grid.hx, grid.hy)
    report = {"iterations": res.iterations, "mse_trace": res.mse_trace}
    if (src / "labels.txt").exists():
        ref = read_labels(src / "labels.txt", grid)
        report["dice_vs_reference"] = {
            r.name: dice(labels.mask_of(r), ref.mask_of(r)) for r in (Region.GM, Region.WM, Region.INTERFACE)
        }
    out.write_json("segment.json", report)
    out.code_path += ["registration", "metrics"]


def cmd_sample_prior(args, cfg, out: RunOutput):
    import numpy as np

    from .grid import ScalarField, write_scalar_field
    from .prior import build_prior, exact_marginal_variance, pointwise_marginal_variance

    b = Bundle(args.run_dir / args.input, _labels_path(args))
    out.add_input(b.path / "mask.txt")
    out.add_input(b.path / "labels.txt" if args.labels is None else args.run_dir / args.labels)
    ps = cfg["prior_samples"]
    prior = build_prior(b.grid, b.labels, _hyper(cfg), robin=ps["robin"])
    rng = np.random.default_rng(ps["seed"])
    s = prior.mean[:, None] + prior.fluctuations(rng, ps["n"])
    n = b.grid.n_cells
    for i in range(ps["n"]):
        write_scalar_field(ScalarField.from_vector(b.grid, s[:n, i]), out.file(f"samples/logD_{i:04d}.txt"))
        write_scalar_field(ScalarField.from_vector(b.grid, s[n:, i]), out.file(f"samples/logG_{i:04d}.txt"))
    write_scalar_field(ScalarField.from_vector(b.grid, prior.meanD.vector), out.file("mean_logD.txt"))
    write_scalar_field(ScalarField.from_vector(b.grid, prior.meanG.vector), out.file("mean_logG.txt"))
    # exact marginal variances are cheap at phantom sizes; Monte Carlo beyond
    for name, op in (("logD", prior.opD), ("logG", prior.opG)):
        if b.grid.n_cells <= 2500:
            var = exact_marginal_variance(op)
        else:
            var = pointwise_marginal_variance(op, 1000, ps["seed"] + 1)
        write_scalar_field(var, out.file(f"var_{name}.txt"))
    out.seeds["prior_samples"] = ps["seed"]
    out.code_path += ["prior"]


def _labels_path(args):
    return None if getattr(args, "labels", None) is None else args.run_dir / args.labels


def cmd_forward(args, cfg, out: RunOutput):
    from .forward import ParameterFields, solve_forward
    from .grid import read_scalar_field, write_scalar_field

    b = Bundle(args.run_dir / args.input)
    out.add_input(b.path / "mask.txt")
    out.add_input(b.path / "u0.txt")
    tdir = args.run_dir / args.theta if args.theta else b.path
    prefix = args.theta_prefix
    files = [tdir / f"{prefix}logD.txt", tdir / f"{prefix}logG.txt"]
    for f in files:
        out.add_input(f)
    theta = ParameterFields(*(read_scalar_field(f, b.grid) for f in files))
    days = [b.t0] + sorted(float(d) for d in (args.days or b.observations.days) if float(d) > b.t0)
    traj = solve_forward(b.grid, theta, b.u0, days, _solver(cfg))
    for d, f in zip(days, traj.at_days()):
        write_scalar_field(f, out.file(f"u_day_{day_tag(d)}.txt"))
    out.write_json("forward.json", {"days": days, "n_steps": len(traj.dts)})
    out.settings["solver"] = cfg["solver"]
    out.code_path += ["forward"]


def _context(b: Bundle, cfg, train_days):
    from .inversion import MisfitContext

    return MisfitContext(
        b.grid, b.observations.subset(train_days), b.u0, cfg["noise_var"], _solver(cfg), b.t0, cfg["likelihood_half"]
    )


def cmd_calibrate(args, cfg, out: RunOutput):
    from .baselines import PCP_NAMES, calibrate_pcp, pcp_dram_config, shp_hyper
    from .grid import ScalarField, write_labels, write_mask, write_scalar_field
    from .inversion import compute_map, laplace_posterior, pointwise_posterior_variance
    from .prior import build_prior

    method = args.method or cfg["method"]
    b = Bundle(args.run_dir / args.input, _labels_path(args))
    out.add_input(b.path)
    if args.labels:
        out.add_input(args.run_dir / args.labels)
    t0, train, test = b.split(cfg)
    ctx = _context(b, cfg, train)
    hyper = _hyper(cfg)
    out.settings.update({"method": method, "solver": cfg["solver"], "train_days": list(train), "test_day": test})
    context = {"bundle": args.input, "labels": args.labels, "train_days": list(train), "test_day": test, "method": method}
    write_mask(b.grid, out.file("mask.txt"))
    write_labels(b.labels, out.file("labels.txt"))
    out.code_path += ["forward", "prior", "inversion"]

    if method == "pcp":
        pc = cfg["pcp"]
        dcfg = pcp_dram_config(hyper, pc["step"], adapt_start=pc["adapt_start"], adapt_interval=pc["adapt_interval"], dr_shrink=pc["dr_shrink"])
        chain = calibrate_pcp(ctx, b.labels, hyper, pc["n"], pc["seed"], dcfg)
        with open(out.file("chain.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(PCP_NAMES) + ["log_post", "stage"])
            for x, lp, st in zip(chain.samples, chain.log_post, chain.stage):
                w.writerow([repr(float(v)) for v in x] + [repr(float(lp)), int(st)])
        out.write_json("summary.json", chain.summary(pc["burn_in"], list(PCP_NAMES)))
        out.write_json("context.json", context)
        out.seeds["pcp"] = pc["seed"]
        out.settings["pcp"] = pc
        out.code_path += ["baselines"]
        return

    if method == "shp":
        hyper = shp_hyper(hyper)
        out.code_path += ["baselines"]
    prior = build_prior(b.grid, b.labels, hyper)
    theta, rep = compute_map(ctx, prior, _newton(cfg))
    out.write_json("convergence.json", rep.to_dict())
    if not rep.converged:
        log.warning("Newton-CG stopped without converging: %s", rep.reason)
    pc = cfg["posterior"]
    lrp = laplace_posterior(
        ctx, prior, theta, pc["rank"], pc["oversample"], pc["power_iters"], pc["seed"], pc["threshold"], pc["rank_cap"]
    )
    varD, varG = pointwise_posterior_variance(lrp, pc["variance_samples"], pc["seed"] + 1)
    write_scalar_field(theta.logD, out.file("map_logD.txt"))
    write_scalar_field(theta.logG, out.file("map_logG.txt"))
    write_scalar_field(varD, out.file("var_logD.txt"))
    write_scalar_field(varG, out.file("var_logG.txt"))
    n = b.grid.n_cells
    for i in range(lrp.rank):
        write_scalar_field(ScalarField.from_vector(b.grid, lrp.V[:n, i]), out.file(f"V/logD_{i:04d}.txt"))
        write_scalar_field(ScalarField.from_vector(b.grid, lrp.V[n:, i]), out.file(f"V/logG_{i:04d}.txt"))
    out.write_json("eigenvalues.json", {"eigenvalues": [float(v) for v in lrp.eigenvalues], "rank": lrp.rank,
                                        "orthonormality_residual": lrp.orthonormality_residual()})
    out.write_json("hyper.json", hyper.to_dict())
    out.write_json("context.json", context)
    out.seeds["posterior"] = pc["seed"]
    out.settings.update({"newton": cfg["newton"], "posterior": pc, "newton_iterations": rep.iterations})


def _load_posterior(cal: Path, run_dir: Path, cfg):
    import numpy as np

    from .forward import ParameterFields
    from .grid import read_scalar_field
    from .inversion import LowRankPosterior
    from .prior import RegionHyper, build_prior

    ctxj = _read_json(cal / "context.json")
    if ctxj["method"] == "pcp":
        raise ValidationError("prediction from a PCP chain is not supported; use the chain CSV")
    b = Bundle(run_dir / ctxj["bundle"], cal / "labels.txt")
    hyper = RegionHyper.from_dict(_read_json(cal / "hyper.json"))
    prior = build_prior(b.grid, b.labels, hyper)
    theta = ParameterFields(read_scalar_field(cal / "map_logD.txt", b.grid), read_scalar_field(cal / "map_logG.txt", b.grid))
    lam = np.array(_read_json(cal / "eigenvalues.json")["eigenvalues"], float)
    cols = []
    for i in range(len(lam)):
        vD = read_scalar_field(cal / f"V/logD_{i:04d}.txt", b.grid).vector
        vG = read_scalar_field(cal / f"V/logG_{i:04d}.txt", b.grid).vector
        cols.append(np.concatenate([vD, vG]))
    V = np.column_stack(cols) if cols else np.zeros((prior.dim, 0))
    return b, ctxj, LowRankPosterior(theta, lam, V, prior)


def cmd_predict(args, cfg, out: RunOutput):
    from .grid import write_scalar_field
    from .inversion import predict
    from .metrics import compare, nta, tumor_indicator

    cal = args.run_dir / args.input
    out.add_input(cal)
    b, ctxj, lrp = _load_posterior(cal, args.run_dir, cfg)
    out.add_input(b.path)
    ctx = _context(b, cfg, ctxj["train_days"])
    pc = cfg["predict"]
    horizon = args.horizon if args.horizon else [ctxj["test_day"]]
    if any(h is None for h in horizon):
        raise ValidationError("no horizon given and the calibration has no held-out day")
    n = pc["n_samples"] if args.n_samples is None else args.n_samples
    ens = predict(lrp, ctx, horizon, n, pc["cutoff"], pc["seed"])
    report = {"horizon": list(ens.days), "n_samples": n, "cutoff": pc["cutoff"], "metrics": {}}
    for d in ens.days:
        tag = day_tag(d)
        write_scalar_field(ens.map_field(d), out.file(f"map_day_{tag}.txt"))
        write_scalar_field(ens.exceedance_probability(d), out.file(f"exceedance_day_{tag}.txt"))
        for i in range(ens.n_samples):
            write_scalar_field(ens.sample_field(i, d), out.file(f"samples/day_{tag}_{i:04d}.txt"))
        if d in b.observations.days:
            data = b.observations.at(d)
            samples = [ens.sample_field(i, d) for i in range(ens.n_samples)]
            mc = cfg["metrics"]
            rep = compare(ens.map_field(d), data, pc["cutoff"], mc["data_cutoff"], samples)
            report["metrics"][tag] = rep.to_dict()
            if ens.n_samples >= 2:
                vals = [nta(tumor_indicator(s, pc["cutoff"]), b.grid) for s in samples]
                _write_kde(out, f"kde_nta_day_{tag}.csv", vals)
    out.write_json("prediction.json", report)
    out.seeds["predict"] = pc["seed"]
    out.settings.update({"solver": cfg["solver"], "predict": pc})
    out.code_path += ["forward", "prior", "inversion", "metrics"]


def _write_kde(out: RunOutput, name: str, values):
    from .errors import DegenerateData
    from .metrics import kde

    try:
        x, dens = kde(values)
    except DegenerateData as exc:
        out.write_json(name.replace(".csv", ".json"), {"degenerate": str(exc)})
        return
    with open(out.file(name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "density"])
        for a, b in zip(x, dens):
            w.writerow([repr(float(a)), repr(float(b))])


def cmd_metrics(args, cfg, out: RunOutput):
    from .grid import read_grid, read_scalar_field
    from .metrics import compare, nta, tumor_indicator

    grid = read_grid(args.run_dir / args.mask)
    out.add_input(args.run_dir / args.mask)
    out.add_input(args.run_dir / args.model)
    out.add_input(args.run_dir / args.data)
    model = read_scalar_field(args.run_dir / args.model, grid)
    data = read_scalar_field(args.run_dir / args.data, grid)
    mc = cfg["metrics"]
    samples = []
    if args.ensemble:
        edir = args.run_dir / args.ensemble
        out.add_input(edir)
        files = sorted(edir.glob(args.ensemble_glob))
        if not files:
            raise ValidationError(f"no ensemble fields matching {args.ensemble_glob} in {edir}")
        samples = [read_scalar_field(f, grid) for f in files]
    rep = compare(model, data, mc["cutoff"], mc["data_cutoff"], samples)
    out.write_json("metrics.json", rep.to_dict())
    if len(samples) >= 2:
        _write_kde(out, "kde_nta.csv", [nta(tumor_indicator(s, mc["cutoff"]), grid) for s in samples])
    out.code_path += ["metrics"]


def cmd_gridsearch(args, cfg, out: RunOutput):
    import numpy as np

    from .hypersearch import SearchSpace, SubjectBundle, grid_search

    sc = cfg["search"]
    sigma = sc["sigma_noise"] or list(np.geomspace(0.015, 0.5, 4))
    space = SearchSpace(tuple(sc["rho_gm"]), tuple(sc["k"]), tuple(sigma))
    subjects = []
    for name in args.subjects:
        b = Bundle(args.run_dir / name)
        out.add_input(b.path)
        t0, train, test = b.split(cfg)
        if test is None:
            raise ValidationError(f"subject {name} has no held-out day")
        subjects.append(
            SubjectBundle(b.grid, b.labels, b.u0, b.observations, train, test, _hyper(cfg), _solver(cfg), t0, name)
        )
    res = grid_search(space, subjects, workers=args.threads or 1, cutoff=cfg["metrics"]["cutoff"],
                      data_cutoff=cfg["metrics"]["data_cutoff"])
    out.write_json("search.json", res.to_dict())
    out.file("search.csv").write_text(res.to_csv())
    out.settings.update({"space": space.to_dict(), "newton": cfg["newton"], "solver": cfg["solver"]})
    out.code_path += ["forward", "prior", "inversion", "metrics", "hypersearch"]


COMMANDS = {
    "phantom": cmd_phantom,
    "segment": cmd_segment,
    "sample-prior": cmd_sample_prior,
    "forward": cmd_forward,
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "metrics": cmd_metrics,
    "gridsearch": cmd_gridsearch,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", type=Path, required=True, help="directory holding all inputs and outputs")
    common.add_argument("--config", type=Path, help="JSON configuration (validated against the shipped schema)")
    common.add_argument("--out", help="output directory name inside the run directory")
    common.add_argument("--threads", type=int, default=None, help=f"worker cap (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tumorcal", description="Bayesian calibration of a reaction-diffusion tumour model.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common], help="synthetic subject, truth fields and noisy observations")

    s = sub.add_parser("segment", parents=[common], help="atlas registration and label transfer")
    s.add_argument("--input", default="phantom")

    s = sub.add_parser("sample-prior", parents=[common], help="draw prior parameter fields")
    s.add_argument("--input", default="phantom")
    s.add_argument("--labels", help="labels file overriding the bundle's")

    s = sub.add_parser("forward", parents=[common], help="solve the tumour model")
    s.add_argument("--input", default="phantom")
    s.add_argument("--theta", help="directory with the parameter fields (default: the input bundle)")
    s.add_argument("--theta-prefix", default="truth_", help="file prefix of <prefix>logD.txt / <prefix>logG.txt")
    s.add_argument("--days", type=float, nargs="+")

    s = sub.add_parser("calibrate", parents=[common], help="MAP + Laplace posterior, or a baseline")
    s.add_argument("--input", default="phantom")
    s.add_argument("--labels", help="labels file overriding the bundle's, e.g. segment/labels.txt")
    s.add_argument("--method", choices=("bayes", "shp", "pcp"))

    s = sub.add_parser("predict", parents=[common], help="posterior-predictive ensemble")
    s.add_argument("--input", default="calibrate")
    s.add_argument("--horizon", type=float, nargs="+")
    s.add_argument("--n-samples", type=int)

    s = sub.add_parser("metrics", parents=[common], help="compare a model field with data")
    s.add_argument("--mask", required=True, help="MASK file defining the grid")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ensemble", help="directory with sample fields")
    s.add_argument("--ensemble-glob", default="*.txt")

    s = sub.add_parser("gridsearch", parents=[common], help="hyperparameter grid search with Pareto selection")
    s.add_argument("--subjects", nargs="+", default=["phantom"])
    return p


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be >= 1")
    return n


def _one_line(exc: BaseException) -> str:
    return " ".join(f"{type(exc).__name__}: {exc}".split())


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    out = None
    try:
        args.threads = _threads(args)
        for var in _BLAS_ENV:
            os.environ.setdefault(var, str(args.threads))
        if not args.run_dir.is_dir():
            if args.command != "phantom":
                raise ValidationError(f"run directory {args.run_dir} does not exist")
            args.run_dir.mkdir(parents=True)
        cfg = resolve_config(args.config)
        started = _now()
        out = RunOutput(args.run_dir, args.out or args.command)
        if args.config is not None:
            out.add_input(args.config)
        COMMANDS[args.command](args, cfg, out)
        out.settings["threads"] = args.threads
        out.commit(args.command, argv, cfg, started)
        return 0
    except (ValidationError, NumericalError, OSError, KeyError, ArithmeticError, TumorCalError) as exc:
        err = exc
    code = 1 if isinstance(err, (ValidationError, OSError, KeyError)) else 2
    if out is not None:
        out.abort()
        _error_report(args, err, code)
    print(f"tumorcal: error: {_one_line(err)}", file=sys.stderr)
    return code


def _error_report(args, exc, code):
    """Diagnostics of a failed run, next to where the output would have gone."""
    try:
        path = args.run_dir / f"{args.out or args.command}.error.json"
        path.write_text(json.dumps({"exit_code": code, "type": type(exc).__name__, "message": str(exc)}, indent=2) + "\n")
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
