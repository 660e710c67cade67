"""Command line driver: synthesize, evaluate, verify, sweep and export heatmaps.

Usage::

    robustcomm [--preset paper-2agent] [--config cfg.json] [--seed 0] [--out runs/x] synth
    robustcomm --out runs/x eval
    robustcomm --out runs/x sweep --policy md
    robustcomm --out runs/x heatmap
    robustcomm verify

Settings are resolved as built-in defaults <- preset <- config file <- flags.
The resolved configuration is written to ``config.json`` next to the
artifacts together with a hash that every JSON output repeats.

Config schema (JSON, every key optional)::

    {
      "seed": 0,
      "environment": {"kind": "two_agent" | "three_agent" | "custom",
                      "slip": 0.05, "collision_radius": 1,
                      "slip_model": "uniform-other-destinations",
                      "grid": {GridSpec fields, only for kind = custom}},
      "synthesis":   {"delta", "beta", "max_iters", "cap", "linearization_clamp",
                      "convergence_tol", "init", "warmup_iters", "backend",
                      "lp_backend": "clarabel" | "highs"},
      "evaluation":  {"n_rollouts", "q_grid", "max_steps", "backend",
                      "bound_p", "bound_q"},
      "verify":      {"random_games", "horizon"}
    }
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import executor as ex
from . import fixtures
from .gridworld import GridSpec, build_game, three_agent_spec, two_agent_spec
from .infometrics import (CommModel, bound_report, bounds_summary, check_lemma_inequalities,
                          enumerate_path_distribution, exact_total_correlation)
from .markov_game import JointGame, prepare
from .occupancy import (SolverError, occupancy_from_policy, policy_from_occupancy,
                        read_occupancy_csv, solve_baseline_lp, value_and_length_from_occupancy,
                        write_heatmap_csv, write_occupancy_csv)
from .synthesis import SynthesisConfig, synthesize_min_dependency, total_correlation_bound

log = logging.getLogger("robustcomm")

POLICIES = ("base", "md")

DEFAULTS = {
    "seed": 0,
    "environment": {"kind": "two_agent", "slip": 0.05, "collision_radius": 1,
                    "slip_model": "uniform-other-destinations", "grid": None},
    "synthesis": {**SynthesisConfig().to_dict(), "lp_backend": "clarabel"},
    "evaluation": {"n_rollouts": 10_000, "q_grid": list(ex.DEFAULT_Q_GRID),
                   "max_steps": ex.DEFAULT_MAX_STEPS, "backend": None,
                   "bound_p": 0.1, "bound_q": 0.5},
    "verify": {"random_games": 4, "horizon": 12},
}

PRESETS = {
    "paper-2agent": {"environment": {"kind": "two_agent"}, "synthesis": {"max_iters": 100}},
    "paper-3agent": {"environment": {"kind": "three_agent"}, "synthesis": {"max_iters": 50}},
}


class ConfigError(ValueError):
    pass


# -- configuration --------------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(preset: str | None = None, path=None, seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        with p.open() as fh:
            cfg = _merge(cfg, json.load(fh))
    if seed is not None:
        cfg["seed"] = int(seed)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    env = cfg["environment"]
    if env["kind"] not in ("two_agent", "three_agent", "custom"):
        raise ConfigError(f"unknown environment kind {env['kind']!r}")
    if env["kind"] == "custom" and not env.get("grid"):
        raise ConfigError("custom environment needs a 'grid' section")
    ev = cfg["evaluation"]
    if int(ev["n_rollouts"]) < 1 or int(ev["max_steps"]) < 1:
        raise ConfigError("n_rollouts and max_steps must be >= 1")
    if any(not 0.0 <= float(q) <= 1.0 for q in ev["q_grid"]):
        raise ConfigError("q_grid entries must lie in [0, 1]")
    for key in ("bound_p", "bound_q"):
        if not 0.0 <= float(ev[key]) <= 1.0:
            raise ConfigError(f"{key} must lie in [0, 1]")
    if ev["backend"] not in (None,) + ex.BACKENDS:
        raise ConfigError(f"unknown rollout backend {ev['backend']!r}")
    syn = cfg["synthesis"]
    if syn["delta"] < 0 or syn["beta"] < 0 or syn["max_iters"] < 0:
        raise ConfigError("delta, beta and max_iters must be nonnegative")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_environment(cfg: dict) -> JointGame:
    env = cfg["environment"]
    kw = {"slip_model": env["slip_model"], "collision_radius": env["collision_radius"]}
    if env["kind"] == "two_agent":
        spec = two_agent_spec(env["slip"], **kw)
    elif env["kind"] == "three_agent":
        spec = three_agent_spec(env["slip"], **kw)
    else:
        spec = GridSpec.from_dict({"slip": env["slip"], **kw, **env["grid"]})
    return prepare(build_game(spec))


def synthesis_config(cfg: dict) -> SynthesisConfig:
    d = {k: v for k, v in cfg["synthesis"].items() if k != "lp_backend"}
    return SynthesisConfig(**d)


# -- artifact io -------------------------------------------------------------------------

def _dump_json(path: Path, obj) -> None:
    with path.open("w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_policy_csv(path, policy: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["joint_state", "joint_action", "prob"])
        for s, a in zip(*np.nonzero(policy > 0)):
            w.writerow([int(s), int(a), repr(float(policy[s, a]))])


def read_policy_csv(path, game: JointGame) -> np.ndarray:
    pi = np.zeros((game.n_states_total, game.n_actions_total))
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            pi[int(row["joint_state"]), int(row["joint_action"])] = float(row["prob"])
    return pi


def _artifact(out: Path, kind: str, name: str) -> Path:
    return out / {"policy": f"{name}_policy.csv", "occupancy": f"{name}_occupancy.csv",
                  "heatmap": f"heatmap_{name}.csv", "sweep": f"sweep_{name}.csv",
                  "eval": f"eval_{name}.json"}[kind]


def load_policy(out: Path, game: JointGame, name: str):
    """(policy, occupancy) of a stored artifact; the occupancy is recomputed if missing."""
    p_path = _artifact(out, "policy", name)
    if not p_path.exists():
        raise FileNotFoundError(f"missing policy artifact {p_path}; run `synth` first")
    pi = read_policy_csv(p_path, game)
    o_path = _artifact(out, "occupancy", name)
    x = read_occupancy_csv(o_path, game) if o_path.exists() else occupancy_from_policy(game, pi)
    return pi, x


def _policy_summary(game, name, x, cfg) -> dict:
    v, l = value_and_length_from_occupancy(game, x)
    c_bar = total_correlation_bound(game, x)
    ev = cfg["evaluation"]
    return {"policy": name, "v_full": v, "l_full": l, "C_bar": c_bar,
            "bounds": bounds_summary(v, c_bar, l, ev["bound_p"], ev["bound_q"])}


# -- commands ----------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path, policies=POLICIES) -> int:
    game = build_environment(cfg)
    h = config_hash(cfg)
    summary = {"config_hash": h, "environment": game.name, "policies": []}
    status = 0
    t0 = time.perf_counter()
    try:
        lp = solve_baseline_lp(game, backend=cfg["synthesis"]["lp_backend"])
        log.info("baseline LP value %.6f (%.1f s)", lp.value, time.perf_counter() - t0)
        pb = policy_from_occupancy(game, lp.x)
        write_policy_csv(_artifact(out, "policy", "base"), pb)
        write_occupancy_csv(_artifact(out, "occupancy", "base"), game, lp.x)
        write_heatmap_csv(_artifact(out, "heatmap", "base"), game, lp.x)
        summary["policies"].append(_policy_summary(game, "base", lp.x, cfg))
        if "md" in policies:
            def progress(rec):
                log.info("iter %3d  obj %.6f  v %.4f  C_bar %.4f", rec.iter, rec.objective,
                         rec.v_full, rec.C_bar)
            pm, trace, xm = synthesize_min_dependency(game, synthesis_config(cfg), callback=progress)
            trace.to_csv(out / "trace.csv")
            write_policy_csv(_artifact(out, "policy", "md"), pm)
            write_occupancy_csv(_artifact(out, "occupancy", "md"), game, xm)
            write_heatmap_csv(_artifact(out, "heatmap", "md"), game, xm)
            summary["policies"].append(_policy_summary(game, "md", xm, cfg))
            summary["trace_status"] = trace.status
    except SolverError as err:
        log.error("solver failure: %s", err)
        summary["error"] = str(err)
        status = 3
    _dump_json(out / "summary.json", summary)
    for p in summary["policies"]:
        print(f"{p['policy']:5s} v_full={p['v_full']:.5f} l_full={p['l_full']:.3f} "
              f"C_bar={p['C_bar']:.4f}")
    return status


def _eval_one(game, cfg, out, name, backend):
    pi, x = load_policy(out, game, name)
    ev, seed = cfg["evaluation"], cfg["seed"]
    n, steps = int(ev["n_rollouts"]), int(ev["max_steps"])
    tables = ex.build_tables(game, pi)
    s = _policy_summary(game, name, x, cfg)
    v, l, c_bar = s["v_full"], s["l_full"], s["C_bar"]

    def run(comm):
        return ex.estimate_success(game, pi, comm, n, seed, steps, backend, tables=tables)

    full, none = run(CommModel.full()), run(CommModel.none())
    pers = run(CommModel.bernoulli_persistent(ev["bound_p"]))
    rows = ex.sweep_dropout(game, pi, ev["q_grid"], n, seed, steps, backend,
                            path=_artifact(out, "sweep", name))
    checks = [bound_report("thm1", v, c_bar, l, None, none.rate, none.stderr, comm=CommModel.none()),
              bound_report("thm2", v, c_bar, l, ev["bound_p"], pers.rate, pers.stderr,
                           comm=CommModel.bernoulli_persistent(ev["bound_p"]))]
    for r in rows:
        checks.append(bound_report("thm3", v, c_bar, l, r["q"], r["rate"], r["stderr"],
                                   comm=CommModel.bernoulli_intermittent(r["q"])))
    report = {**s, "config_hash": config_hash(cfg),
              "rollouts": {"full": full.to_dict(), "none": none.to_dict(),
                           "persistent_p": pers.to_dict()},
              "sweep": rows, "bound_checks": [c.to_dict() for c in checks]}
    _dump_json(_artifact(out, "eval", name), report)
    print(f"{name:5s} full={full.rate:.4f}±{full.stderr:.4f} none={none.rate:.4f}±{none.stderr:.4f} "
          f"bounds_ok={all(c.satisfied for c in checks)}")
    return report


def cmd_eval(cfg: dict, out: Path, policies=POLICIES) -> int:
    game = build_environment(cfg)
    backend = cfg["evaluation"]["backend"]
    found = [p for p in policies if _artifact(out, "policy", p).exists()]
    if not found:
        log.error("no policy artifacts in %s; run `synth` first", out)
        return 2
    for name in found:
        _eval_one(game, cfg, out, name, backend)
    return 0


def cmd_sweep(cfg: dict, out: Path, policies=POLICIES) -> int:
    game = build_environment(cfg)
    ev = cfg["evaluation"]
    done = 0
    for name in policies:
        try:
            pi, _ = load_policy(out, game, name)
        except FileNotFoundError as err:
            log.warning("%s", err)
            continue
        rows = ex.sweep_dropout(game, pi, ev["q_grid"], int(ev["n_rollouts"]), cfg["seed"],
                                int(ev["max_steps"]), ev["backend"],
                                path=_artifact(out, "sweep", name))
        for r in rows:
            print(f"{name:5s} q={r['q']:.2f} rate={r['rate']:.4f} stderr={r['stderr']:.4f}")
        done += 1
    return 0 if done else 2


def cmd_heatmap(cfg: dict, out: Path, policies=POLICIES) -> int:
    game = build_environment(cfg)
    done = 0
    for name in policies:
        try:
            _, x = load_policy(out, game, name)
        except FileNotFoundError as err:
            log.warning("%s", err)
            continue
        write_heatmap_csv(_artifact(out, "heatmap", name), game, x)
        done += 1
    return 0 if done else 2


def verify_fixtures(cfg: dict):
    """(name, game, policy) triples checked by ``verify``."""
    items = [("coin1", fixtures.coordinated_coin(1)), ("coin2", fixtures.coordinated_coin(2))]
    items = [(n, g, fixtures.coin_policy(g)) for n, g in items]
    g = fixtures.two_line()
    items.append(("two_line", g, fixtures.product_policy(g, [np.array([[1.0], [1.0]])] * 2)))
    g = fixtures.slip_line(0.9)
    go = np.array([[1.0, 0.0], [1.0, 0.0]])
    items.append(("slip_line_go", g, fixtures.product_policy(g, [go, go])))
    rng = np.random.default_rng(cfg["seed"])
    k = 0
    while k < int(cfg["verify"]["random_games"]):
        g = prepare(fixtures.random_game(rng, n_agents=2, max_states=3, max_actions=2,
                                         acyclic=True, min_actions=2))
        if g.terminal_mask[g.joint_initial]:
            continue
        items.append((f"random{k}", g, fixtures.random_policy(g, rng, deterministic_frac=0.3)))
        k += 1
    return items


def run_verify(cfg: dict) -> dict:
    horizon = int(cfg["verify"]["horizon"])
    p, q = cfg["evaluation"]["bound_p"], cfg["evaluation"]["bound_q"]
    out = {"config_hash": config_hash(cfg), "fixtures": [], "all_satisfied": True}
    for name, game, pi in verify_fixtures(cfg):
        game = prepare(game)
        x = occupancy_from_policy(game, pi)
        v, l = value_and_length_from_occupancy(game, x)
        C = exact_total_correlation(game, pi, horizon)
        lem = check_lemma_inequalities(game, pi, horizon=horizon, name=name,
                                       t_loss_values=list(range(6)) + [math.inf],
                                       q_values=(0.1, 0.5, 0.9), history_seeds=range(4))
        exact = {c: enumerate_path_distribution(game, pi, m, horizon).success_probability
                 for c, m in (("none", CommModel.none()),
                              ("persistent", CommModel.bernoulli_persistent(p)),
                              ("intermittent", CommModel.bernoulli_intermittent(q)))}
        bounds = [bound_report("thm1", v, C, l, None, exact["none"], 0.0),
                  bound_report("thm2", v, C, l, p, exact["persistent"], 0.0),
                  bound_report("thm3", v, C, l, q, exact["intermittent"], 0.0)]
        ok = lem.all_satisfied and all(b.satisfied for b in bounds)
        out["all_satisfied"] &= ok
        out["fixtures"].append({
            "name": name, "v_full": v, "l_full": l, "C": C, "exact_success": exact,
            "lemma_cases": len(lem.cases), "lemma_violations": json.loads(
                json.dumps([c.__dict__ for c in lem.violations()], default=str)),
            "bounds": [b.to_dict() for b in bounds], "satisfied": ok})
        print(f"{name:14s} C={C:.6f} cases={len(lem.cases):3d} "
              f"{'ok' if ok else 'VIOLATED'}")
    return out


def cmd_verify(cfg: dict, out: Path) -> int:
    report = run_verify(cfg)
    _dump_json(out / "verify.json", report)
    if not report["all_satisfied"]:
        for f in report["fixtures"]:
            if not f["satisfied"]:
                print(json.dumps(f, indent=2, default=str), file=sys.stderr)
        return 1
    return 0


COMMANDS = {"synth": cmd_synth, "eval": cmd_eval, "sweep": cmd_sweep, "heatmap": cmd_heatmap,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--config", help="JSON config file")
    glob.add_argument("--preset", choices=sorted(PRESETS))
    glob.add_argument("--seed", type=int)
    glob.add_argument("--out", help="artifact directory (default: runs/<config hash>)")
    glob.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="robustcomm", parents=[glob],
                                 description="Minimum-dependency joint policies under lossy communication.")
    sub = ap.add_subparsers(dest="command", required=True)
    # repeat globals on subcommands without clobbering values given before them
    sub_glob = argparse.ArgumentParser(add_help=False)
    for a in glob._actions:
        kw = {"help": a.help, "default": argparse.SUPPRESS}
        if a.nargs == 0:
            kw["action"] = "store_true"
        else:
            kw.update(type=a.type, choices=a.choices)
        sub_glob.add_argument(*a.option_strings, dest=a.dest, **kw)
    for name, helptext in (("synth", "baseline LP + minimum-dependency synthesis"),
                           ("eval", "Monte Carlo evaluation with theorem bounds"),
                           ("sweep", "success rate over the dropout grid"),
                           ("heatmap", "per-agent occupancy heatmap CSVs"),
                           ("verify", "lemma and theorem suites on built-in fixtures")):
        sp = sub.add_parser(name, parents=[sub_glob], help=helptext)
        if name != "verify":
            sp.add_argument("--policy", choices=POLICIES + ("all",), default="all")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.preset, args.config, args.seed)
    except (ConfigError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path("runs") / config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "config.json", {"config": cfg, "config_hash": config_hash(cfg)})
    fn = COMMANDS[args.command]
    if args.command == "verify":
        return fn(cfg, out)
    policies = POLICIES if args.policy == "all" else (args.policy,)
    try:
        return fn(cfg, out, policies)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
