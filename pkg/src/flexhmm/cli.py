"""Command-line surface: fit models from CSV data and a YAML model file,
then decode, predict, compute residuals, run predictive checks, simulate,
or suggest starting values, each writing plain CSV/JSON outputs.

Exit codes: 0 success, 1 usage or validation error, 2 fit did not converge
(outputs are still written).  All floating-point output carries 17
significant digits so files round-trip bitwise through reload.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np
import pandas as pd
import yaml

from .data import Dataset, load_csv, write_csv
from .frame import ModelFrame, ParameterSet
from .inference import (
    PredictionRequest,
    posterior_predictive_check,
    predict,
    pseudo_residuals,
    simulate_ci,
    state_probs,
    viterbi,
)
from .likelihood import FitResult, fit, suggest_initial
from .model import load_spec, with_options
from .simulate import SimConfig, _covariate_names_used, simulate

FMT = "%.17g"


class CliError(Exception):
    """Validation problem worth a clean message instead of a traceback."""


def _f(x) -> str:
    v = float(x)
    if np.isnan(v):
        return "NA"
    return FMT % v


# --------------------------------------------------------------------------
# shared input handling


def _apply_option_flags(spec, args):
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        over["method"] = args.method
    if getattr(args, "max_iter", None) is not None:
        over["max_iter"] = args.max_iter
    if getattr(args, "tol", None) is not None:
        over["tol"] = args.tol
    if getattr(args, "n_post", None) is not None:
        over["n_post"] = args.n_post
    return with_options(spec, **over) if over else spec


def _load_spec(args):
    if not args.spec:
        raise CliError("this command needs --spec <model.yaml>")
    if not os.path.exists(args.spec):
        raise CliError(f"spec file not found: {args.spec}")
    return _apply_option_flags(load_spec(args.spec), args)


def _load_data(args, spec) -> Dataset:
    if not args.data:
        raise CliError("this command needs --data <data.csv>")
    if not os.path.exists(args.data):
        raise CliError(f"data file not found: {args.data}")
    covs = sorted(_covariate_names_used(spec))
    return load_csv(args.data, spec.response_names, covs, categorical=spec.categorical)


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# estimates and covariance files


def _write_estimates(path, res: FitResult) -> None:
    """All views of the fitted parameters, one labelled row per scalar.

    Blocks: natural-scale transition probabilities, initial distribution,
    and observation parameters at the first data row; link-scale
    coefficients (coeff_fe); penalty weights (lambda) with the implied
    random-effect standard deviations (sd_re = 1/sqrt(lambda)); penalized
    coefficients (coeff_re); initial-distribution logits (delta0).
    """
    fr = res.frame
    est = res.estimates
    K = res.spec.K
    lines = ["block,name,value"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        tpm = predict(res, PredictionRequest(what="tpm", n_post=0))
        delta = predict(res, PredictionRequest(what="delta", n_post=0))
        obspar = predict(res, PredictionRequest(what="obspar", n_post=0))
    for i in range(K):
        for j in range(K):
            lines.append(f"tpm,S{i + 1}>S{j + 1},{_f(tpm[0, i, j])}")
    for k in range(K):
        lines.append(f"delta,state{k + 1},{_f(delta[0, k])}")
    for var, pars in obspar.items():
        for pname, mat in pars.items():
            for k in range(K):
                lines.append(f"obspar,{var}.{pname}.state{k + 1},{_f(mat[0, k])}")
    for name, v in zip(fr.alpha_names, est.alpha):
        lines.append(f"coeff_fe,{name},{_f(v)}")
    lams = np.exp(np.asarray(est.log_lambda, dtype=float))
    for name, lam in zip(fr.lambda_names, lams):
        lines.append(f"lambda,{name},{_f(lam)}")
    for name, lam in zip(fr.lambda_names, lams):
        if ".re(" in name:
            base = name[: -len(".lambda")]
            lines.append(f"sd_re,{base}.sd,{_f(1.0 / np.sqrt(lam))}")
    for name, v in zip(fr.beta_names, est.beta):
        lines.append(f"coeff_re,{name},{_f(v)}")
    for name, v in zip(fr.delta_names, est.delta0_logits):
        lines.append(f"delta0,{name},{_f(v)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_estimates(path, fr: ModelFrame) -> ParameterSet:
    if not os.path.exists(path):
        raise CliError(f"parameter file not found: {path}")
    rows = pd.read_csv(path, dtype=str, keep_default_na=False)
    for col in ("block", "name", "value"):
        if col not in rows.columns:
            raise CliError(f"{path} is not an estimates file (missing column {col!r})")
    by_block: dict = {}
    for _, r in rows.iterrows():
        by_block.setdefault(r["block"], {})[r["name"]] = r["value"]

    def take(block, names, transform=float):
        got = by_block.get(block, {})
        vals = np.zeros(len(names))
        for i, name in enumerate(names):
            if name not in got:
                raise CliError(
                    f"{path} lacks {block} entry {name!r}; was it written by "
                    "'fit' for this model?"
                )
            vals[i] = transform(got[name])
        return vals

    alpha = take("coeff_fe", fr.alpha_names)
    loglam = take("lambda", fr.lambda_names, lambda s: float(np.log(float(s))))
    beta = take("coeff_re", fr.beta_names)
    delta = take("delta0", fr.delta_names)
    return ParameterSet(alpha, beta, loglam, delta, dict(fr.init.fix_share_map))


def _write_covariance(path, res: FitResult) -> None:
    names = list(res.covariance_names)
    J = res.joint_covariance
    lines = ["name," + ",".join(names)]
    for name, row in zip(names, J):
        lines.append(name + "," + ",".join(_f(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _free_from_joint(fr: ModelFrame, joint: np.ndarray) -> np.ndarray:
    """Recover the internal [beta, free outer] covariance from the joint
    (all-coefficients) matrix written by fit."""
    p_beta = fr.p_beta
    p_free = fr.free_of(fr.outer_full(fr.init)).size
    idx = np.full(p_beta + p_free, -1, dtype=int)
    idx[:p_beta] = fr.p_alpha + np.arange(p_beta)
    for i in range(len(fr.outer_names)):
        if not fr.psi_fixed[i] and fr.psi_root[i] == i:
            row = i if i < fr.p_alpha else p_beta + i
            idx[p_beta + fr.psi_map[i]] = row
    if np.any(idx < 0):
        raise CliError("covariance file does not match this model's layout")
    return joint[np.ix_(idx, idx)]


def _read_covariance(path, fr: ModelFrame):
    rows = pd.read_csv(path, dtype=str, keep_default_na=False)
    names = list(rows.columns[1:])
    expect = list(fr.alpha_names + fr.beta_names + fr.lambda_names + fr.delta_names)
    if names != expect:
        raise CliError(f"{path} does not match this model's parameter layout")
    J = rows.iloc[:, 1:].to_numpy(dtype=float)
    return _free_from_joint(fr, J)


def _result_from_params(spec, d: Dataset, args) -> FitResult:
    """Reassemble enough of a fit result from files to run the post-fit
    commands; the covariance is picked up from covariance.csv next to the
    parameter file when present."""
    if not getattr(args, "params", None):
        raise CliError(
            "this command needs fitted parameters; run 'fit' first and pass "
            "--params <outdir>/estimates.csv"
        )
    fr = ModelFrame(spec, d)
    est = _read_estimates(args.params, fr)
    free_cov = None
    cov_path = os.path.join(os.path.dirname(os.path.abspath(args.params)), "covariance.csv")
    if os.path.exists(cov_path):
        free_cov = _read_covariance(cov_path, fr)
    return FitResult(
        spec=spec,
        estimates=est,
        marginal_loglik=float("nan"),
        convergence={"status": "loaded", "source": args.params},
        joint_covariance=None,
        covariance_names=tuple(
            fr.alpha_names + fr.beta_names + fr.lambda_names + fr.delta_names
        ),
        frame=fr,
        free_covariance=free_cov,
        anchor_outer=None,
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    spec = _load_spec(args)
    d = _load_data(args, spec)
    res = fit(spec, d)
    out = _out_dir(args)
    _write_estimates(os.path.join(out, "estimates.csv"), res)
    if res.joint_covariance is not None:
        _write_covariance(os.path.join(out, "covariance.csv"), res)
    report = dict(res.convergence)
    report.update(
        {
            "converged": res.converged,
            "marginal_loglik": res.marginal_loglik,
            "n_states": spec.K,
            "n_rows": d.n_rows,
            "n_series": len(d.series),
        }
    )
    with open(os.path.join(out, "convergence.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    if not res.converged:
        print(
            f"fit did not converge: {res.convergence.get('message', '')}",
            file=sys.stderr,
        )
        return 2
    return 0


def cmd_decode(args) -> int:
    spec = _load_spec(args)
    d = _load_data(args, spec)
    res = _result_from_params(spec, d, args)
    paths = viterbi(spec, d, res.estimates, frame=res.frame)
    probs = state_probs(spec, d, res.estimates, frame=res.frame)
    out = _out_dir(args)
    ids = list(d.frame["ID"])
    flat = np.concatenate(paths)
    lines = ["ID,row,state"]
    for i in range(d.n_rows):
        lines.append(f"{ids[i]},{i},{int(flat[i])}")
    with open(os.path.join(out, "states.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    head = ",".join(f"state{k + 1}" for k in range(spec.K))
    lines = [f"ID,row,{head}"]
    for i in range(d.n_rows):
        vals = ",".join(_f(v) for v in probs[i])
        lines.append(f"{ids[i]},{i},{vals}")
    with open(os.path.join(out, "stateprobs.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def _prediction_rows(args, spec):
    if args.newdata:
        if not os.path.exists(args.newdata):
            raise CliError(f"newdata file not found: {args.newdata}")
        raw = pd.read_csv(args.newdata, dtype=str, keep_default_na=False)
        cols = {}
        for c in raw.columns:
            vals = list(raw[c])
            if c in spec.categorical or c == "ID":
                cols[c] = np.asarray(vals, dtype=object)
            else:
                cols[c] = np.asarray(
                    [float("nan") if v in ("", "NA") else float(v) for v in vals]
                )
        return cols
    if args.rows:
        return np.asarray([int(s) for s in args.rows.split(",")], dtype=int)
    return None


def _flatten_ci(what, K, spec, pt, lo, hi):
    """(name, row, mean, lcl, ucl) tuples for predictions.csv."""
    rows = []
    if what == "tpm":
        n = pt.shape[0]
        for r in range(n):
            for i in range(K):
                for j in range(K):
                    rows.append(
                        (f"S{i + 1}>S{j + 1}", r, pt[r, i, j], lo[r, i, j], hi[r, i, j])
                    )
    elif what == "delta":
        for r in range(pt.shape[0]):
            for k in range(K):
                rows.append((f"state{k + 1}", r, pt[r, k], lo[r, k], hi[r, k]))
    else:
        for var in pt:
            for pname in pt[var]:
                a, b, c = pt[var][pname], lo[var][pname], hi[var][pname]
                for r in range(a.shape[0]):
                    for k in range(K):
                        rows.append(
                            (
                                f"{var}.{pname}.state{k + 1}",
                                r,
                                a[r, k],
                                b[r, k],
                                c[r, k],
                            )
                        )
    return rows


def cmd_predict(args) -> int:
    spec = _load_spec(args)
    d = _load_data(args, spec)
    res = _result_from_params(spec, d, args)
    rows = _prediction_rows(args, spec)
    n_post = args.n_post if args.n_post is not None else spec.options.n_post
    request = PredictionRequest(
        what=args.what, rows=rows, n_post=n_post, level=args.level
    )
    if n_post > 0 and res.free_covariance is None:
        raise CliError(
            "interval prediction needs covariance.csv next to the parameter "
            "file; refit, or pass --n-post 0 for point predictions"
        )
    rng = np.random.default_rng(spec.options.seed)
    if n_post > 0:
        pt, lo, hi = simulate_ci(res, request, rng=rng)
    else:
        pt = predict(res, request)
        lo = hi = pt
    out = _out_dir(args)
    lines = ["what,name,row,mean,lcl,ucl"]
    for name, r, m, l, u in _flatten_ci(args.what, spec.K, spec, pt, lo, hi):
        lines.append(f"{args.what},{name},{r},{_f(m)},{_f(l)},{_f(u)}")
    with open(os.path.join(out, "predictions.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def cmd_residuals(args) -> int:
    spec = _load_spec(args)
    d = _load_data(args, spec)
    res = _result_from_params(spec, d, args)
    z = pseudo_residuals(
        spec, d, res.estimates, frame=res.frame, seed=spec.options.seed
    )
    out = _out_dir(args)
    ids = list(d.frame["ID"])
    names = list(spec.response_names)
    lines = ["ID,row," + ",".join(names)]
    for i in range(d.n_rows):
        vals = ",".join(_f(z[v][i]) for v in names)
        lines.append(f"{ids[i]},{i},{vals}")
    with open(os.path.join(out, "residuals.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def cmd_check(args) -> int:
    spec = _load_spec(args)
    d = _load_data(args, spec)
    res = _result_from_params(spec, d, args)
    outcomes = posterior_predictive_check(
        res, stat=args.stat, n_sims=args.n_sims, seed=spec.options.seed
    )
    out = _out_dir(args)
    lines = ["variable,stat,n_sims,observed,tail"]
    for var, r in outcomes.items():
        lines.append(f"{var},{args.stat},{args.n_sims},{_f(r.observed)},{_f(r.tail)}")
    with open(os.path.join(out, "check.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0


def cmd_simulate(args) -> int:
    spec = _load_spec(args)
    if not args.lengths:
        raise CliError("simulate needs --lengths, e.g. --lengths 1000 or 500,500")
    lengths = tuple(int(s) for s in args.lengths.split(","))
    table = None
    if args.data:
        if not os.path.exists(args.data):
            raise CliError(f"data file not found: {args.data}")
        raw = pd.read_csv(args.data, dtype=str, keep_default_na=False)
        table = {}
        for c in raw.columns:
            vals = list(raw[c])
            if c in spec.categorical or c == "ID":
                table[c] = np.asarray(vals, dtype=object)
            else:
                table[c] = np.asarray(
                    [float("nan") if v in ("", "NA") else float(v) for v in vals]
                )
    config = SimConfig(
        spec, None, covariate_table=table, series_lengths=lengths, seed=spec.options.seed
    )
    if getattr(args, "params", None):
        from .data import from_arrays
        from .simulate import _resolve_layout

        cols, labels, lens = _resolve_layout(config)
        ids = []
        for lab, T in zip(labels, lens):
            ids += [lab] * T
        scaffold = from_arrays(
            {name: np.full(sum(lens), 0.5) for name in spec.response_names},
            cols,
            series_ids=ids,
            categorical=tuple(spec.categorical),
        )
        config.theta = _read_estimates(args.params, ModelFrame(spec, scaffold))
    dsim = simulate(config)
    out = _out_dir(args)
    write_csv(dsim, os.path.join(out, "simulated.csv"))
    return 0


def cmd_suggest(args) -> int:
    spec = _load_spec(args)
    d = _load_data(args, spec)
    vals = suggest_initial(spec, d, seed=spec.options.seed)
    doc = {
        var: {p: [float(x) for x in tup] for p, tup in per.items()}
        for var, per in vals.items()
    }
    text = yaml.safe_dump(doc, sort_keys=False)
    out = _out_dir(args)
    with open(os.path.join(out, "suggest_init.yaml"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="CSV data file")
    common.add_argument("--spec", help="YAML model file")
    common.add_argument("--out", help="output directory (default: current)")
    common.add_argument("--seed", type=int, help="override the model file's seed")
    common.add_argument("--threads", type=int, help="cap numeric thread pools")
    common.add_argument(
        "--method", choices=["nelder-mead", "quasi-newton"], help="outer optimizer"
    )
    common.add_argument("--max-iter", type=int, dest="max_iter", help="outer iteration cap")
    common.add_argument("--tol", type=float, help="outer convergence tolerance")
    common.add_argument(
        "--n-post", type=int, dest="n_post", help="parameter draws for intervals"
    )

    ap = _Parser(
        prog="flexhmm",
        description="Covariate-dependent hidden Markov models: fit, decode, "
        "predict, residuals, check, simulate, suggest-init.",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="estimate parameters").set_defaults(
        func=cmd_fit
    )
    p = sub.add_parser(
        "decode", parents=[common], help="most likely state path and state probabilities"
    )
    p.add_argument("--params", help="estimates.csv from a previous fit")
    p.set_defaults(func=cmd_decode)
    p = sub.add_parser(
        "predict", parents=[common], help="transition/initial/observation parameters"
    )
    p.add_argument("--params", help="estimates.csv from a previous fit")
    p.add_argument(
        "--what", choices=["tpm", "delta", "obspar"], default="tpm", help="quantity"
    )
    p.add_argument("--rows", help="comma-separated training row indices")
    p.add_argument("--newdata", help="CSV of covariate values to predict at")
    p.add_argument("--level", type=float, default=0.95, help="interval level")
    p.set_defaults(func=cmd_predict)
    p = sub.add_parser("residuals", parents=[common], help="pseudo-residuals")
    p.add_argument("--params", help="estimates.csv from a previous fit")
    p.set_defaults(func=cmd_residuals)
    p = sub.add_parser("check", parents=[common], help="posterior predictive check")
    p.add_argument("--params", help="estimates.csv from a previous fit")
    p.add_argument("--stat", default="mean", help="statistic (mean, sd, median, q<p>, lag1, zero_prop)")
    p.add_argument("--n-sims", type=int, dest="n_sims", default=200, help="simulated datasets")
    p.set_defaults(func=cmd_check)
    p = sub.add_parser("simulate", parents=[common], help="draw a dataset from the model")
    p.add_argument("--params", help="simulate at fitted values instead of the file's initials")
    p.add_argument("--lengths", help="comma-separated series lengths")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser(
        "suggest-init", parents=[common], help="cluster-based observation starting values"
    )
    p.set_defaults(func=cmd_suggest)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
