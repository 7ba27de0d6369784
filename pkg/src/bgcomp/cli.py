"""Command-line front end: simulate | fit | estimate | replicate | validate.

Each command takes an optional JSON config plus flag overrides (flags win),
writes its outputs under --outdir together with a manifest JSON recording the
config hash and seed, and logs line-delimited JSON to standard error.
Exit codes: 0 success, 1 runtime/numeric failure, 2 config error.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from .gcomputation import ContrastRequest, mixed_ate, subgroup_contrast
from .inference import FitError, McmcConfig, PosteriorDraws, fit_mglmm
from .model import LongDataset, ModelSpec, SpecError, validate_dataset
from .simulate import (DgpConfig, dgp_model_spec, dgp_truth, simulate_dgp,
                       simulate_mglmm, truth_to_json, warn_if_rho_ignored)
from .study import GridSpec, run_grid


class ConfigError(ValueError):
    pass


def _log(event, **kv):
    rec = {"ts": round(time.time(), 3), "event": event}
    rec.update(kv)
    print(json.dumps(rec), file=sys.stderr)


def _load_config(path, allowed):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _merged(config, args, keys):
    """Flag values override config values; None flags fall through."""
    out = dict(config)
    for k in keys:
        val = getattr(args, k, None)
        if val is not None:
            out[k] = val
    return out


def _config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_manifest(outdir, command, cfg, extra=None):
    doc = {"command": command, "config": cfg, "config_hash": _config_hash(cfg),
           "seed": cfg.get("seed", 0)}
    if extra:
        doc.update(extra)
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=str)
    return path


def _ensure_outdir(cfg):
    outdir = cfg.get("outdir", ".")
    os.makedirs(outdir, exist_ok=True)
    return outdir


def _require(cfg, key):
    if key not in cfg or cfg[key] is None:
        raise ConfigError(f"missing required option: {key}")
    return cfg[key]


def _load_spec(cfg):
    path = _require(cfg, "spec")
    if not os.path.exists(path):
        raise ConfigError(f"spec file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
        return ModelSpec.from_dict(doc)
    except (SpecError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid model spec: {e}") from e


def _load_data(cfg):
    path = _require(cfg, "data")
    if not os.path.exists(path):
        raise ConfigError(f"dataset not found: {path}")
    return LongDataset.from_csv(path)


# ---------------------------------------------------------------------------
# commands


SIM_KEYS = ("outdir", "seed", "dgp", "n", "sA", "rho", "nu", "T", "spec",
            "truth")


def cmd_simulate(cfg):
    outdir = _ensure_outdir(cfg)
    seed = int(cfg.get("seed", 0))
    if cfg.get("dgp", True):
        dc = DgpConfig(n=int(_require(cfg, "n")), s_A=float(cfg.get("sA", 0.0)),
                       rho=float(cfg.get("rho", 0.0)),
                       nu=cfg.get("nu", "per_dose"), seed=seed)
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ignored = warn_if_rho_ignored(dc)
        if ignored:
            _log("warning", message="s_A = 0: rho has no effect and is ignored")
        data = simulate_dgp(dc)
        spec = dgp_model_spec(dc)
        truth = dgp_truth(dc)
    else:
        spec = _load_spec(cfg)
        with open(_require(cfg, "truth")) as fh:
            tdoc = json.load(fh)
        from .model import ParamsDraw
        truth = ParamsDraw(np.array(tdoc["beta_Y"]), float(tdoc["sigma"]),
                           np.array(tdoc["beta_M"]), np.array(tdoc["beta_A"]),
                           np.array(tdoc["G"])).check(spec)
        data = simulate_mglmm(spec, truth, int(_require(cfg, "n")),
                              int(cfg.get("T", 2)), seed)
    data_path = os.path.join(outdir, "dataset.csv")
    data.to_csv(data_path)
    with open(os.path.join(outdir, "truth.json"), "w") as fh:
        fh.write(truth_to_json(spec, truth, seed))
    _write_manifest(outdir, "simulate", cfg, {"n_subjects": len(data)})
    _log("done", command="simulate", dataset=data_path, n=len(data))
    return 0


FIT_KEYS = ("outdir", "seed", "data", "spec", "v", "n_warmup", "n_draws",
            "thin")


def cmd_fit(cfg):
    outdir = _ensure_outdir(cfg)
    spec = _load_spec(cfg)
    if "v" in cfg and cfg["v"] is not None:
        spec = spec.with_v(float(cfg["v"]))
    data = _load_data(cfg)
    mcmc = McmcConfig(n_warmup=int(cfg.get("n_warmup", 2000)),
                      n_draws=int(cfg.get("n_draws", 2000)),
                      thin=int(cfg.get("thin", 1)),
                      seed=int(cfg.get("seed", 0)))
    draws = fit_mglmm(data, spec, mcmc)
    csv_path = os.path.join(outdir, "posterior.csv")
    man_path = os.path.join(outdir, "posterior_manifest.json")
    draws.save(csv_path, man_path)
    _write_manifest(outdir, "fit", cfg,
                    {"v": spec.v,
                     "treatment_block_enabled": spec.q_treatment > 0,
                     "acceptance": {k: float(r)
                                    for k, r in draws.acceptance.items()}})
    _log("done", command="fit", posterior=csv_path,
         acceptance=draws.acceptance)
    return 0


EST_KEYS = ("outdir", "seed", "data", "spec", "posterior", "regimes", "tau",
            "vlist", "subgroup", "mixed")


def cmd_estimate(cfg):
    outdir = _ensure_outdir(cfg)
    spec = _load_spec(cfg)
    data = _load_data(cfg)
    regimes = _require(cfg, "regimes")
    if isinstance(regimes, str):
        regimes = tuple(regimes.split(","))
    if len(regimes) != 2:
        raise ConfigError("regimes must name exactly two regimes")
    tau = int(cfg.get("tau", 2))
    vlist = cfg.get("vlist", [spec.v])
    if isinstance(vlist, str):
        vlist = [float(x) for x in vlist.split(",")]
    seed = int(cfg.get("seed", 0))
    post_path = _require(cfg, "posterior")
    subgroup = None
    if cfg.get("subgroup"):
        with open(cfg["subgroup"]) as fh:
            subgroup = tuple((str(row["id"]), int(row["h"]))
                             for row in json.load(fh))
    for v in vlist:
        spec_v = spec.with_v(float(v))
        if os.path.isdir(post_path):
            csv = os.path.join(post_path, f"posterior_v{v}.csv")
        else:
            csv = post_path
        if not os.path.exists(csv):
            raise ConfigError(f"posterior draws not found: {csv}")
        draws = PosteriorDraws.load(csv)
        if subgroup is None:
            sg = tuple((rec.id, 0) for rec in data)
        else:
            sg = subgroup
        req = ContrastRequest(data=data, spec=spec_v, subgroup=sg,
                              regimes=tuple(regimes), tau=tau, v=float(v),
                              draws=draws, seed=seed)
        res = subgroup_contrast(req)
        tag = f"v{v}"
        res.save(os.path.join(outdir, f"contrast_samples_{tag}.csv"),
                 os.path.join(outdir, f"contrast_summary_{tag}.csv"),
                 os.path.join(outdir, f"contrast_manifest_{tag}.json"))
        _log("contrast", v=v, mean=[float(x) for x in res.mean])
    _write_manifest(outdir, "estimate", cfg)
    _log("done", command="estimate")
    return 0


REP_KEYS = ("outdir", "seed", "settings", "shat_list", "scenario",
            "replicates", "n", "n_warmup", "n_draws", "tau")


def cmd_replicate(cfg):
    outdir = _ensure_outdir(cfg)
    try:
        settings = tuple((float(s), float(r))
                         for s, r in _require(cfg, "settings"))
        shat_list = tuple(float(s) for s in _require(cfg, "shat_list"))
        grid = GridSpec(settings=settings, shat_list=shat_list,
                        scenario=cfg.get("scenario", "per_dose"),
                        replicates=int(cfg.get("replicates", 20)),
                        n=int(cfg.get("n", 500)),
                        mcmc=McmcConfig(int(cfg.get("n_warmup", 1000)),
                                        int(cfg.get("n_draws", 1000))),
                        seed=int(cfg.get("seed", 0)),
                        tau=int(cfg.get("tau", 2)))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid grid: {e}") from e

    def progress(rec):
        _log("replicate", **rec)

    result = run_grid(grid, progress=progress)
    result.save(outdir, manifest={"command": "replicate",
                                  "config_hash": _config_hash(cfg),
                                  "seed": grid.seed})
    _write_manifest(outdir, "replicate", cfg,
                    {"failures": result.failures,
                     "attempted": result.attempted})
    _log("done", command="replicate", failures=result.failures)
    return 0


VAL_KEYS = ("outdir", "data", "spec", "seed")


def cmd_validate(cfg):
    spec = _load_spec(cfg)
    data = _load_data(cfg)
    problems = validate_dataset(data, spec)
    for p in problems:
        _log("violation", subject=p.subject, interval=p.interval,
             message=p.message)
    _log("done", command="validate", violations=len(problems))
    return 0 if not problems else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bgcomp",
        description="Bayesian g-computation for dynamic treatment regimes "
                    "with mixed-effects outcome models")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker parallelism (execution is currently "
                             "serial; accepted for interface stability)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--outdir")
    p.add_argument("--seed", type=int)
    p.add_argument("--dgp", action="store_true", default=None,
                   help="use the built-in benchmark generating process")
    p.add_argument("--n", type=int)
    p.add_argument("--sA", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--nu", choices=["per_dose", "null"])
    p.add_argument("--T", type=int)
    p.add_argument("--spec")
    p.add_argument("--truth")

    p = sub.add_parser("fit", help="sample the posterior for a dataset")
    p.add_argument("--config")
    p.add_argument("--outdir")
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--spec")
    p.add_argument("--v", type=float)
    p.add_argument("--n-warmup", dest="n_warmup", type=int)
    p.add_argument("--n-draws", dest="n_draws", type=int)
    p.add_argument("--thin", type=int)

    p = sub.add_parser("estimate", help="regime contrasts from fitted draws")
    p.add_argument("--config")
    p.add_argument("--outdir")
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--spec")
    p.add_argument("--posterior")
    p.add_argument("--regimes")
    p.add_argument("--tau", type=int)
    p.add_argument("--vlist")
    p.add_argument("--subgroup")

    p = sub.add_parser("replicate", help="run the simulation-study grid")
    p.add_argument("--config")
    p.add_argument("--outdir")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenario", choices=["per_dose", "null"])
    p.add_argument("--replicates", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--n-warmup", dest="n_warmup", type=int)
    p.add_argument("--n-draws", dest="n_draws", type=int)
    p.add_argument("--tau", type=int)

    p = sub.add_parser("validate", help="check a dataset against a spec")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--spec")

    return parser


_KEYS = {"simulate": SIM_KEYS, "fit": FIT_KEYS, "estimate": EST_KEYS,
         "replicate": REP_KEYS, "validate": VAL_KEYS}
_RUNNERS = {"simulate": cmd_simulate, "fit": cmd_fit, "estimate": cmd_estimate,
            "replicate": cmd_replicate, "validate": cmd_validate}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    keys = _KEYS[args.command]
    try:
        cfg = _load_config(getattr(args, "config", None), keys)
        cfg = _merged(cfg, args, keys)
        return _RUNNERS[args.command](cfg)
    except ConfigError as e:
        _log("config_error", message=str(e))
        return 2
    except (FitError, SpecError, ValueError, RuntimeError, OSError) as e:
        _log("error", kind=type(e).__name__, message=str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
