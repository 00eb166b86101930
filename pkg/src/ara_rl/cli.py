"""Command-line front end.

Subcommands::

    ara-rl oracle ENV [--gamma 0.99,0.999] [--family all|control-limit] [--out DIR]
    ara-rl validate ENV_OR_MODEL_JSON
    ara-rl run CONFIG [--seed N] [--reps N] [--threads N] [--out DIR] [--snapshots]
    ara-rl report RESULTS_DIR

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 validation
failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .environments import EnvSpecError, control_limit_family, parse_env, queue_length_mean
from .harness import ConfigError, config_from_dict, run_experiment
from .mdp import MdpModel, ModelError, StationaryPolicy, check_model
from .oracle import (
    DivergenceError,
    MultichainError,
    PolicyCapError,
    action_values,
    bias,
    blackwell_classify,
    closed_classes,
    count_policies,
    discounted_values,
    enumerate_policies,
    gain,
    stationary_distribution,
)
from . import report as rep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INVALID = 0, 2, 3, 4
DETAIL_MAX_STATES = 16


@dataclass
class RunManifest:
    config_path: str
    output_dir: str
    version: str
    timings: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    seed: int | None = None
    replications: int | None = None
    failures: list = field(default_factory=list)

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        missing = [f for f in self.files if not (out / f).exists()]
        if missing:
            raise RuntimeError(f"manifest lists missing files: {missing}")
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# -- oracle ------------------------------------------------------------------

def _policy_name(model: MdpModel, pol: StationaryPolicy, family_limit: int | None = None) -> str:
    if family_limit is not None:
        return f"L={family_limit}"
    parts = [
        f"{model.state_labels[s]}:{model.action_labels[a]}"
        for s, a in enumerate(pol.choice) if len(model.actions[s]) > 1
    ]
    return " ".join(parts) or "(no choices)"


def _parse_gammas(text: str) -> list[float]:
    try:
        gammas = [float(g) for g in text.split(",") if g.strip()]
    except ValueError:
        raise ConfigError([f"--gamma must be a comma-separated list of numbers, got {text!r}"]) from None
    bad = [g for g in gammas if not 0.0 <= g < 1.0]
    if bad:
        raise ConfigError([f"discount factors must lie in [0, 1), got {bad}"])
    return gammas


def _fmt_row(cells, widths):
    return "  ".join(str(c).rjust(w) for c, w in zip(cells, widths))


def _aligned(header, body) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    return "\n".join(_fmt_row(r, widths) for r in [header, *body])


def cmd_oracle(args) -> int:
    model = parse_env(args.env)
    gammas = _parse_gammas(args.gamma)
    if args.family == "control-limit":
        if "queue_length" not in model.meta:
            raise ConfigError(["--family control-limit needs a queueing environment (mm1:...)"])
        policies = control_limit_family(model)
        names = [_policy_name(model, p, L) for L, p in enumerate(policies)]
    else:
        policies = enumerate_policies(model, cap=args.cap)
        names = [_policy_name(model, p) for p in policies]
    qcol = "queue_length" in model.meta

    detail_rows, summary_rows, text = [], [], []
    text.append(f"{model.name or args.env}: {model.n_states} states, {count_policies(model)} deterministic policies, "
                f"{len(policies)} evaluated")
    for k, (pol, name) in enumerate(zip(policies, names)):
        rho = gain(model, pol)
        h = bias(model, pol)
        hq = action_values(model, h, 1.0, rho)
        vs = [discounted_values(model, pol, g) for g in gammas]
        vq = [action_values(model, v, g) for v, g in zip(vs, gammas)]
        qlen = queue_length_mean(model, stationary_distribution(model, pol)) if qcol else None
        summary_rows.append((k, name, rho) + ((qlen,) if qcol else ()))
        body = []
        for s in range(model.n_states):
            for a in model.actions[s]:
                row = (k, name, model.state_labels[s], model.action_labels[a], int(pol[s] == a), rho,
                       float(h[s]), float(hq[s, a])) + tuple(float(q[s, a]) for q in vq)
                detail_rows.append(row)
                body.append([model.state_labels[s], model.action_labels[a], "*" if pol[s] == a else "",
                             f"{hq[s, a]:.6f}"] + [f"{q[s, a]:.6f}" for q in vq])
        if model.n_states <= DETAIL_MAX_STATES:
            text += ["", f"policy {k} [{name}]  gain {rho:.6f}"]
            text.append(_aligned(["state", "action", "pol", "bias"] + [f"V({g:g})" for g in gammas], body))

    report = blackwell_classify(model, policies)
    idx = {p: i for i, p in enumerate(policies)}
    opt_rows = [
        (idx[p], names[idx[p]], report.gains[p], int(p in report.gain_optimal),
         int(p in report.bias_optimal), int(p in report.blackwell))
        for p in policies
    ]
    header = ["policy", "name", "gain"] + (["queue_length"] if qcol else [])
    text += ["", "summary"]
    text.append(_aligned(header + ["gain_opt", "bias_opt", "blackwell"], [
        [str(r[0]), r[1], f"{r[2]:.6f}"] + ([f"{r[3]:.6f}"] if qcol else []) + [str(x) for x in o[3:]]
        for r, o in zip(summary_rows, opt_rows)
    ]))
    fmt = lambda ps: ", ".join(names[idx[p]] for p in ps)
    text += [
        "",
        f"gain-optimal ({report.gain_value:.6f}): {fmt(report.gain_optimal)}",
        f"bias-optimal: {fmt(report.bias_optimal)}",
        f"Blackwell-optimal (discount grid {', '.join(f'{g:g}' for g in report.gamma_grid)}): {fmt(report.blackwell)}",
    ]
    print("\n".join(text))

    if args.out:
        t0 = time.perf_counter()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rep.write_csv(out / "oracle_values.csv",
                      ["policy", "name", "state", "action", "on_policy", "gain", "state_bias", "bias"]
                      + [f"V_{g:g}" for g in gammas], detail_rows)
        rep.write_csv(out / "oracle_policies.csv", header, summary_rows)
        rep.write_csv(out / "oracle_optimality.csv",
                      ["policy", "name", "gain", "gain_optimal", "bias_optimal", "blackwell"], opt_rows)
        (out / "oracle.txt").write_text("\n".join(text) + "\n")
        RunManifest(
            args.env, str(out), version_string(),
            timings={"write": time.perf_counter() - t0},
            files=["oracle_values.csv", "oracle_policies.csv", "oracle_optimality.csv", "oracle.txt"],
        ).write(out)
    return EXIT_OK


# -- validate ----------------------------------------------------------------

def _load_model(spec: str) -> MdpModel:
    p = Path(spec)
    if spec.endswith(".json") or p.is_file():
        return MdpModel.from_json(p.read_text())
    return parse_env(spec)


def randomized_transition_matrix(model: MdpModel) -> np.ndarray:
    """Transition matrix when every state picks its actions uniformly at random."""
    P = np.zeros((model.n_states, model.n_states))
    for s, acts in enumerate(model.actions):
        for a in acts:
            for b in model.branches(s, a):
                P[s, b.next_state] += b.p / len(acts)
    return P


def cmd_validate(args) -> int:
    try:
        model = _load_model(args.env)
    except ModelError as exc:
        print(f"{args.env}: {len(exc.violations)} invariant violation(s)")
        for v in exc.violations:
            print(f"  - {v}")
        return EXIT_INVALID
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"{args.env}: malformed model file ({exc!r})")
        return EXIT_INVALID
    problems = check_model(model)
    n_pairs = sum(len(a) for a in model.actions)
    print(f"{model.name or args.env}: {model.n_states} states, {n_pairs} state-action pairs")
    for v in problems:
        print(f"  - {v}")

    n_pol = count_policies(model)
    multichain = []
    if n_pol <= args.cap or "queue_length" in model.meta:
        if n_pol <= args.cap:
            policies, how = enumerate_policies(model, args.cap), "enumerated"
        else:
            policies, how = control_limit_family(model), "control-limit family"
        for pol in policies:
            try:
                stationary_distribution(model, pol)
            except MultichainError as exc:
                multichain.append(f"policy {pol.choice}: {exc}")
        print(f"unichain: {len(policies) - len(multichain)}/{len(policies)} policies ({how})")
    else:
        # too many policies to enumerate: check the chain of the uniformly
        # randomizing policy, i.e. that exploration reaches one recurrent class
        classes = closed_classes(randomized_transition_matrix(model))
        if len(classes) > 1:
            multichain.append(f"uniformly randomizing policy has {len(classes)} closed classes")
        print(f"unichain: {n_pol} policies exceed --cap; uniformly randomizing policy "
              f"{'has one recurrent class' if not multichain else 'is multichain'}")
    for msg in multichain[:10]:
        print(f"  - {msg}")
    clean = not problems and not multichain
    print("clean" if clean else "validation failed")
    return EXIT_OK if clean else EXIT_INVALID


# -- run / report ------------------------------------------------------------

def _resolve_config(path: str) -> Path:
    p = Path(path)
    if p.is_file():
        return p
    name = p.name if p.suffix == ".json" else f"{p.name}.json"
    bundled = resources.files("ara_rl") / "configs" / name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError([f"config file {path!r} not found (bundled: gridworld, mm1, printer_mail)"])


def bundled_configs() -> list[str]:
    return sorted(p.name for p in (resources.files("ara_rl") / "configs").iterdir() if p.name.endswith(".json"))


def _write_report_files(out: Path, rows: list[dict], title: str, state_label, alpha: float) -> list[str]:
    files = []
    rep.write_csv(out / "aggregate.csv", ["algorithm", "metric", "mean", "stddev", "n"], rep.aggregate(rows))
    files.append("aggregate.csv")
    for m, res in rep.significance_tests(rows, alpha).items():
        name = f"pairwise_{m}.csv"
        rep.write_csv(out / name, ["algorithm_a", "algorithm_b", "p", "adjusted_p"], rep.pairwise_rows(res))
        files.append(name)
    (out / "report.md").write_text(rep.render_markdown(rows, title, state_label, alpha))
    files.append("report.md")
    return files


def cmd_run(args) -> int:
    t0 = time.perf_counter()
    path = _resolve_config(args.config)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    if not isinstance(d, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    if args.seed is not None:
        d["seed"] = args.seed
    if args.reps is not None:
        d["replications"] = args.reps
    cfg = config_from_dict(d)
    out = Path(args.out or Path("results") / (cfg.name or path.stem))
    out.mkdir(parents=True, exist_ok=True)
    t1 = time.perf_counter()

    result = run_experiment(cfg, threads=args.threads, alpha=args.alpha)
    t2 = time.perf_counter()

    files = ["config.json", "results.csv"]
    (out / "config.json").write_text(json.dumps(d, indent=2, ensure_ascii=False) + "\n")
    rows = result.rows()
    rep.write_rows(out / "results.csv", rows)
    files += _write_report_files(out, rows, cfg.name or path.stem, cfg.report_state, args.alpha)
    if args.snapshots:
        (out / "snapshots").mkdir(exist_ok=True)
        for label, reps in result.results.items():
            for r in reps:
                name = f"snapshots/{label.replace(' ', '_').replace('/', '_')}_rep{r.replication}.json"
                (out / name).write_text(json.dumps(r.learner.snapshot()) + "\n")
                files.append(name)
    manifest = RunManifest(
        str(path), str(out), version_string(),
        timings={"setup": t1 - t0, "run": t2 - t1, "write": time.perf_counter() - t2},
        files=files, seed=cfg.seed, replications=cfg.replications,
        failures=[list(f) for f in result.failures],
    )
    manifest.write(out)
    print((out / "report.md").read_text())
    print(f"wrote {len(files)} files and manifest.json to {out}")
    if result.failures:
        for label, r, msg in result.failures:
            print(f"replication {r} of {label} failed: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args) -> int:
    t0 = time.perf_counter()
    out = Path(args.results)
    csv_path = out / "results.csv"
    if not csv_path.is_file():
        raise ConfigError([f"{csv_path} not found"])
    rows = rep.read_rows(csv_path)
    title, state_label = out.name, None
    cfg_path = out / "config.json"
    if cfg_path.is_file():
        d = json.loads(cfg_path.read_text())
        title, state_label = d.get("name") or title, d.get("report_state")
    files = _write_report_files(out, rows, title, state_label, args.alpha)
    old = out / "manifest.json"
    prev = json.loads(old.read_text()) if old.is_file() else {}
    RunManifest(
        prev.get("config_path", str(cfg_path)), str(out), version_string(),
        timings={**prev.get("timings", {}), "report": time.perf_counter() - t0},
        files=sorted(set(prev.get("files", [])) | set(files)),
        seed=prev.get("seed"), replications=prev.get("replications"), failures=prev.get("failures", []),
    ).write(out)
    print((out / "report.md").read_text())
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ara-rl", description="Average-reward-adjusted RL experiments and exact oracles.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", help="exact gain/bias/discounted values per policy and the optimality sets")
    p.add_argument("env", help="environment name, e.g. three-state, printer-mail, gridworld:2, mm1:5,5,12,1,20")
    p.add_argument("--gamma", default="0.99", help="comma-separated discount factors (default 0.99)")
    p.add_argument("--family", choices=("all", "control-limit"), default="all")
    p.add_argument("--cap", type=int, default=100_000, help="maximum number of policies to enumerate")
    p.add_argument("--out", help="directory for CSV and text output")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("validate", help="check model invariants and unichain structure")
    p.add_argument("env", help="environment name or path to a model JSON file")
    p.add_argument("--cap", type=int, default=100_000)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config", help=f"config path or bundled name ({', '.join(bundled_configs())})")
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int, help="override the number of replications")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="output directory (default results/<name>)")
    p.add_argument("--alpha", type=float, default=0.05, help="false discovery rate for grouping")
    p.add_argument("--snapshots", action="store_true", help="also write learned tables as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="re-render the markdown report from results.csv")
    p.add_argument("results", help="output directory of a previous run")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnvSpecError, PolicyCapError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except (MultichainError, DivergenceError) as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    except Exception as exc:  # anything unexpected is a runtime failure
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
