"""Command-line entry point: simulate, fit, select, predict, auc, classify.

Failures print one JSON object on stderr, e.g.
{"error": "SchemaError", "message": "..."} and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .errors import JlcmError
from .inference import (
    assign_labels,
    auc_ipcw,
    dic,
    class_weights,
    membership_from_state,
    predictive_survival,
    risk_scores,
    summarize,
)
from .simulation import SimDesign, simulate_dataset
from .workflow import BASIC, TIME_VARYING, best_by, fit_model, select_models, time_free_design

log = logging.getLogger("tvjlcm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_range(text: str) -> list[int]:
    """'1..3' -> [1, 2, 3]; '1,3' -> [1, 3]."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            out = list(range(int(lo), int(hi) + 1))
        else:
            out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad range {text!r}") from None
    if not out or min(out) < 1:
        raise UsageError(f"range {text!r} must list class counts >= 1")
    return out


def parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


# ----------------------------------------------------------------------
# configuration plumbing
# ----------------------------------------------------------------------

_OVERRIDES = {
    "k": "K",
    "seed": "seed",
    "iterations": "iterations",
    "burn_in": "burn_in",
    "schema": "schema",
    "n_steps": "n_steps",
    "theta_steps": "theta_steps",
    "dic_variant": "dic_variant",
}


def _add_run_flags(p, k_range=False):
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--schema", help="column schema: generic (default) or aids")
    if k_range:
        p.add_argument("--k", "--k-range", dest="k_range", default="1..3", help="time-varying class counts, e.g. 1..3")
    else:
        p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--n-steps", dest="n_steps", type=int)
    p.add_argument("--theta-steps", dest="theta_steps", type=int)
    p.add_argument("--dic-variant", dest="dic_variant", choices=("conditional", "marginal"))
    p.add_argument("--unconstrained", action="store_true", help="estimate xi for every class")


def _run_config(args) -> io.RunConfig:
    cfg = io.RunConfig.from_file(args.config) if getattr(args, "config", None) else io.RunConfig()
    changes = {dst: getattr(args, src) for src, dst in _OVERRIDES.items() if getattr(args, src, None) is not None}
    if getattr(args, "data", None):
        changes["data"] = args.data
    if getattr(args, "unconstrained", False):
        changes["reference_class_constraint"] = False
    return replace(cfg, **changes)


def _load(path, schema):
    if not path:
        raise UsageError("--data is required (or set data = ... in the config)")
    return io.load_dataset(path, schema)


def _load_chain_and_data(args):
    chain = io.load_chain(args.chain)
    data = _load(args.data, args.schema)
    if chain.meta.get("variant") == BASIC:
        data = time_free_design(data)
    chain.spec.check(data)
    return chain, data


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_simulate(args) -> dict:
    design = SimDesign(n_subjects=args.n, seed=args.seed, study_end=args.study_end)
    data, truth = simulate_dataset(design)
    io.write_dataset(data, args.out, labels=truth.r)
    if args.truth:
        io.write_truth(truth, args.truth)
    return {"subjects": data.N, "rows": data.n, "censoring": float(1 - data.event.mean())}


def cmd_fit(args) -> dict:
    cfg = _run_config(args)
    data = _load(cfg.data, cfg.schema)
    variant = BASIC if args.basic else TIME_VARYING
    spec_data = time_free_design(data) if args.basic else data
    spec = replace(cfg.model_spec(spec_data), subject_level_labels=args.basic)
    fit = fit_model(
        data,
        cfg.K,
        variant,
        config=cfg.mcmc_config(),
        reference_class_constraint=cfg.reference_class_constraint,
        n_steps=cfg.n_steps,
        priors=cfg.priors(spec),
    )
    fit.chain.meta["variant"] = variant
    io.persist_chain(fit.chain, args.chain or cfg.chain_out, dic_variant=cfg.dic_variant)
    summary = summarize(fit.chain)
    summary.to_frame().to_csv(args.summary or cfg.summary_out, index=False, float_format=io.FLOAT_FMT)
    d = dic(fit.data, fit.chain, fit.spec, variant=cfg.dic_variant)
    return {"dic": d.dic, "p_d": d.p_d, "acceptance": fit.chain.acceptance_rates()}


def cmd_select(args) -> dict:
    cfg = _run_config(args)
    data = _load(cfg.data, cfg.schema)
    truth = io.read_true_labels(cfg.data) if args.error_rate else None
    rows, _ = select_models(
        data,
        tv_range=parse_range(args.k_range),
        basic_range=parse_range(args.basic_k) if args.basic_k else (),
        config=cfg.mcmc_config(),
        true_labels=truth,
        dic_variant=cfg.dic_variant,
        reference_class_constraint=cfg.reference_class_constraint,
    )
    io.write_table(
        args.out,
        ["model", "K", "DIC", "pD", "mean_deviance", "error_rate"],
        [[r.variant, r.K, r.dic, r.p_d, r.mean_deviance, r.error_rate] for r in rows],
    )
    best = best_by(rows, "dic")
    out = {"best_dic": f"{best.variant} K={best.K}"}
    if truth is not None:
        b = best_by(rows, "error_rate")
        out["best_error_rate"] = f"{b.variant} K={b.K}"
    return out


def cmd_predict(args) -> dict:
    chain, data = _load_chain_and_data(args)
    state = chain.posterior_mean()
    horizons = parse_floats(args.dt)
    ids = [s.strip() for s in args.subjects.split(",")] if args.subjects else None
    keep = np.arange(data.N)
    if ids is not None:
        lookup = {str(s): i for i, s in enumerate(data.subject_ids)}
        missing = [s for s in ids if s not in lookup]
        if missing:
            raise JlcmError(f"unknown subject ids: {', '.join(missing)}")
        keep = np.array([lookup[s] for s in ids])
    w = class_weights(data, state, chain.spec, args.t, args.weighting)
    rows = []
    for dt in horizons:
        s = predictive_survival(data, state, chain.spec, args.t, dt, weights=w)
        rows += [[data.subject_ids[i], args.t, dt, float(s[i])] for i in keep]
    io.write_table(args.out, ["subject", "t", "dt", "survival"], rows)
    if args.trajectories:
        fitted = data.X2 @ state.beta.T + np.einsum("nq,nq->n", data.Z, state.u[data.subject])[:, None]
        probs = membership_from_state(data, state, chain.spec)
        sel = np.isin(data.subject, keep)
        header = ["subject", "visit_time", "observed"] + [f"fitted_class{k + 1}" for k in range(chain.spec.K)]
        header += [f"prob_class{k + 1}" for k in range(chain.spec.K)]
        io.write_table(
            args.trajectories,
            header,
            [
                [data.subject_ids[data.subject[r]], float(data.visit_time[r]), float(data.y[r])]
                + [float(v) for v in fitted[r]]
                + [float(v) for v in probs[r]]
                for r in np.flatnonzero(sel)
            ],
        )
    return {"subjects": int(keep.size), "horizons": len(horizons)}


def cmd_auc(args) -> dict:
    chain, data = _load_chain_and_data(args)
    state = chain.posterior_mean()
    risk = risk_scores(data, state, chain.spec, args.t, args.dt, args.weighting)
    auc = auc_ipcw(risk, data.followup, data.event, args.t, args.dt)
    if args.out:
        io.write_table(args.out, ["t", "dt", "auc"], [[args.t, args.dt, auc]])
    return {"t": args.t, "dt": args.dt, "auc": auc}


def cmd_classify(args) -> dict:
    chain, data = _load_chain_and_data(args)
    probs = membership_from_state(data, chain.posterior_mean(), chain.spec)
    hard = assign_labels(probs)
    header = ["subject", "visit_time"] + [f"prob_class{k + 1}" for k in range(chain.spec.K)] + ["class"]
    io.write_table(
        args.out,
        header,
        [
            [data.subject_ids[data.subject[r]], float(data.visit_time[r])] + [float(v) for v in probs[r]] + [int(hard[r]) + 1]
            for r in range(data.n)
        ],
    )
    return {"rows": data.n, "class_counts": np.bincount(hard, minlength=chain.spec.K).tolist()}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tvjlcm", description="Time-varying joint latent class models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="draw a synthetic two-class dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--study-end", dest="study_end", type=float, default=1.5)
    s.add_argument("--out", required=True)
    s.add_argument("--truth")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run the sampler and write chain + summary")
    f.add_argument("--data")
    _add_run_flags(f)
    f.add_argument("--basic", action="store_true", help="subject-level labels, time-free membership")
    f.add_argument("--chain")
    f.add_argument("--summary")
    f.set_defaults(func=cmd_fit)

    sel = sub.add_parser("select", help="fit a range of K and tabulate DIC / error rate")
    sel.add_argument("--data")
    _add_run_flags(sel, k_range=True)
    sel.add_argument("--basic-k", dest="basic_k", help="basic-model class counts, e.g. 1..4")
    sel.add_argument("--error-rate", dest="error_rate", action="store_true", help="score against a true_class column")
    sel.add_argument("--out", required=True)
    sel.set_defaults(func=cmd_select)

    for name, func, help_ in (
        ("predict", cmd_predict, "dynamic survival curves"),
        ("auc", cmd_auc, "IPCW AUC at (t, dt)"),
        ("classify", cmd_classify, "posterior class probabilities"),
    ):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--chain", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--schema")
        if name != "classify":
            c.add_argument("--weighting", choices=("final", "landmark"), default="final", help="class weights for the survival mixture")
        if name == "predict":
            c.add_argument("--subjects", help="comma-separated ids (default all)")
            c.add_argument("--t", type=float, default=0.5)
            c.add_argument("--dt", default="0,0.1,0.2,0.3")
            c.add_argument("--trajectories", help="also write observed and fitted responses")
            c.add_argument("--out", required=True)
        elif name == "auc":
            c.add_argument("--t", type=float, default=0.5)
            c.add_argument("--dt", type=float, default=0.3)
            c.add_argument("--out")
        else:
            c.add_argument("--out", required=True)
        c.set_defaults(func=func)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except UsageError as exc:
        return _fail("UsageError", str(exc), 2)
    except JlcmError as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps({"command": args.command, **result}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
