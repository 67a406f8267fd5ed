"""Command line entry point: verify, simulate, describe, label, robustness."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .actions import ActionPair, feasible_actions
from .decision import HeuristicMaker, RemoteMaker, ScriptedMaker, describe
from .errors import NoLabelError, ReachGuardError
from .failsafe import fail_safe_plan, is_invariably_safe
from .ltlf import format_formula, parse_formula
from .prediction import MODES, SET_BASED, predict
from .reach import ReachContext, compute_reachable_sets, extract_corridor, verify
from .rules import robustness_margin, rule_formulas
from .scenario import RULE_IDS, load_scenario, parse_state

log = logging.getLogger("reachguard")

EXIT_OK, EXIT_NEGATIVE, EXIT_INPUT = 0, 1, 2

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "verify": {"pair": None, "formula": None, "rules": "", "prediction": SET_BASED, "horizon": None,
               "corridor": False},
    "simulate": {"setting": 1, "agent": "mock", "prediction": SET_BASED, "rules": "", "seeds": None,
                 "repeats": 1, "duration": 30, "jobs": 1, "unguarded": False, "kappa": 3, "log_dir": None,
                 "endpoint": None, "model": None, "replay": None},
    "describe": {"kappa": 3, "command": None, "rules": None, "criticality": False},
    "label": {},
    "robustness": {"rules": ",".join(RULE_IDS)},
}


class InputError(Exception):
    pass


def _rules(text: Optional[str]) -> List[str]:
    if text is None:
        return []
    items = text if isinstance(text, list) else [r.strip() for r in str(text).split(",")]
    out = [r for r in items if r]
    for r in out:
        if r not in RULE_IDS:
            raise InputError(f"unknown rule id {r!r}; expected a subset of {','.join(RULE_IDS)}")
    return out


def _emit(payload: Any, out: Optional[str]) -> None:
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _existing(path: Optional[str], what: str) -> str:
    if not path:
        raise InputError(f"--{what} is required")
    if not Path(path).is_file():
        raise InputError(f"{what} file {path!r} not found")
    return path


# ---------------------------------------------------------------- commands


def cmd_verify(o: Dict[str, Any]) -> int:
    sc = load_scenario(_existing(o.get("scenario"), "scenario"))
    if o["prediction"] not in MODES:
        raise InputError(f"unknown prediction mode {o['prediction']!r}")
    rules = _rules(o["rules"]) if o["rules"] else list(sc.rules_enabled)
    h = int(o["horizon"]) if o["horizon"] is not None else sc.horizon
    occs = predict(sc, o["prediction"], h)
    ctx = ReachContext(sc, occs, h)
    formulas = rule_formulas(sc.rule_config, rules, [ob.id for ob in sc.obstacles])
    results = []
    if o["formula"]:
        formula = parse_formula(o["formula"])
        res = compute_reachable_sets(sc, formula, context=ctx)
        entry = {"formula": format_formula(formula), "verified": res.verified,
                 "first_empty_step": res.first_empty_step, "node_counts": res.node_counts()}
        if o["corridor"] and res.verified:
            entry["corridor"] = extract_corridor(res).to_dict()
        results.append(entry)
    else:
        feas = feasible_actions(sc)
        pairs = [ActionPair.parse(p) for p in (o["pair"] or [])] or feas.pairs()
        for pair in pairs:
            if pair not in feas:
                raise InputError(f"action pair {pair} is not feasible in this scenario")
            results.append(verify(sc, pair, formulas, context=ctx).to_dict(corridor=o["corridor"]))
    any_ok = any(r["verified"] for r in results)
    report: Dict[str, Any] = {"prediction": o["prediction"], "rules": rules, "horizon": h,
                              "results": results, "verified_any": any_ok}
    if not any_ok:
        plan = fail_safe_plan(sc.ego, sc.current_lane(), sc.ego_params, sc.dt, sc.ego_shape)
        fs = plan.to_dict()
        if o["prediction"] == SET_BASED:
            fs["invariably_safe"] = is_invariably_safe(plan, occs, h)
        report["fail_safe"] = fs
    _emit(report, o.get("out"))
    return EXIT_OK if any_ok else EXIT_NEGATIVE


def _read_seeds(path: Optional[str]) -> List[int]:
    if path is None:
        return list(range(10))
    text = Path(_existing(path, "seeds")).read_text()
    try:
        data = json.loads(text)
        seeds = data if isinstance(data, list) else data["seeds"]
    except (json.JSONDecodeError, KeyError, TypeError):
        seeds = text.split()
    try:
        return [int(s) for s in seeds]
    except ValueError:
        raise InputError(f"seeds file {path!r} must hold integers") from None


def _make_maker(o: Dict[str, Any], repeat: int):
    agent = o["agent"]
    if agent == "mock":
        return HeuristicMaker(seed=repeat)
    if agent.startswith("scripted:"):
        return ScriptedMaker.from_file(_existing(agent.split(":", 1)[1], "script"))
    if agent == "remote":
        if not o.get("endpoint") or not o.get("model"):
            raise InputError("--agent remote needs --endpoint and --model")
        return RemoteMaker(o["endpoint"], o["model"], replay_path=o.get("replay"),
                           replay=bool(o.get("replay")) and Path(o["replay"]).exists())
    raise InputError(f"unknown agent {agent!r}; expected mock, scripted:FILE or remote")


def run_task(task: Dict[str, Any]) -> str:
    """One episode; returns the serialized log (picklable for process pools)."""
    from .sim import GuardedAgent, HighwayEnv, UnguardedAgent, run_episode

    o = task["options"]
    maker = _make_maker(o, task["repeat"])
    if o["unguarded"]:
        agent = UnguardedAgent(maker, o["kappa"])
    else:
        agent = GuardedAgent(maker, o["prediction"], task["rules"], o["kappa"])
    env = HighwayEnv.setting(task["setting"], seed=task["seed"])
    info = {"setting": task["setting"], "repeat": task["repeat"], "agent": o["agent"],
            "prediction": o["prediction"], "guarded": not o["unguarded"]}
    return run_episode(env, agent, o["duration"], task["rules"], info).dumps()


def cmd_simulate(o: Dict[str, Any]) -> int:
    from .sim import EpisodeLog, compute_metrics

    rules = _rules(o["rules"])
    if o["prediction"] not in MODES:
        raise InputError(f"unknown prediction mode {o['prediction']!r}")
    setting = int(o["setting"])
    if setting not in (1, 2, 3):
        raise InputError("--setting must be 1, 2 or 3")
    _make_maker(o, 0)  # validate agent options before spawning work
    seeds = _read_seeds(o["seeds"])
    tasks = [{"options": o, "setting": setting, "seed": s, "repeat": r, "rules": rules}
             for s in seeds for r in range(int(o["repeats"]))]
    jobs = max(1, int(o["jobs"]))
    if jobs > 1 and not o["agent"].startswith("scripted"):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            texts = list(pool.map(run_task, tasks))
    else:
        texts = [run_task(t) for t in tasks]
    logs = [EpisodeLog.loads(t) for t in texts]
    if o.get("log_dir"):
        d = Path(o["log_dir"])
        d.mkdir(parents=True, exist_ok=True)
        for t, text in zip(tasks, texts):
            (d / f"setting{setting}_seed{t['seed']}_rep{t['repeat']}.jsonl").write_text(text)
    metrics = compute_metrics(logs, rules or RULE_IDS)
    report = {"setting": setting, "agent": o["agent"], "prediction": o["prediction"], "rules": rules,
              "guarded": not o["unguarded"], "seeds": seeds, "repeats": int(o["repeats"]),
              "metrics": metrics.to_dict()}
    _emit(report, o.get("out"))
    return EXIT_OK


def cmd_describe(o: Dict[str, Any]) -> int:
    sc = load_scenario(_existing(o.get("scenario"), "scenario"))
    rules = _rules(o["rules"]) if o["rules"] is not None else None
    bundle = describe(sc, int(o["kappa"]), o["command"], criticality=bool(o["criticality"]), rules=rules)
    _emit(bundle.to_dict(), o.get("out"))
    return EXIT_OK


def cmd_label(o: Dict[str, Any]) -> int:
    from .actions import label_trajectory

    sc = load_scenario(_existing(o.get("scenario"), "scenario"))
    path = _existing(o.get("trajectory"), "trajectory")
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None
    states = data.get("states") if isinstance(data, dict) else data
    if not isinstance(states, list):
        raise InputError(f"{path}: expected a list of states")
    traj = [parse_state(st, f"states[{i}]") for i, st in enumerate(states)]
    try:
        pair = label_trajectory(traj, sc.network, sc.ego_params, sc.ego_shape)
    except NoLabelError as exc:
        _emit({"pair": None, "error": str(exc)}, o.get("out"))
        return EXIT_NEGATIVE
    _emit({"pair": pair.to_json(), "text": str(pair)}, o.get("out"))
    return EXIT_OK


def cmd_robustness(o: Dict[str, Any]) -> int:
    from .sim import EpisodeLog

    lg = EpisodeLog.load(_existing(o.get("log"), "log"))
    rules = _rules(o["rules"])
    if not lg.steps:
        raise InputError("episode log has no recorded steps")
    sc = lg.scenario()
    series = {r: robustness_margin(r, lg, sc.rule_config, sc) for r in rules}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", *rules])
    for i, st in enumerate(lg.steps):
        w.writerow([st.step, *(repr(series[r][i]) for r in rules)])
    _emit(buf.getvalue(), o.get("out"))
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "describe": cmd_describe,
    "label": cmd_label,
    "robustness": cmd_robustness,
}


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--config", help="JSON file with option defaults (flags win)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--out", help="write the report here instead of stdout")

    p = argparse.ArgumentParser(prog="reachguard", description=__doc__)
    sub = p.add_subparsers(dest="subcommand", required=True)

    v = sub.add_parser("verify", parents=[common], argument_default=S, help="verify action pairs on a scenario")
    v.add_argument("--scenario")
    v.add_argument("--pair", action="append", help="LON,LAT; repeatable; default: all feasible pairs")
    v.add_argument("--formula", help="verify a raw formula instead of action pairs")
    v.add_argument("--rules", help="comma-separated rule ids, e.g. R_G1,R_G2,R_G3")
    v.add_argument("--prediction", choices=MODES)
    v.add_argument("--horizon", type=int)
    v.add_argument("--corridor", action="store_true")

    s = sub.add_parser("simulate", parents=[common], argument_default=S, help="closed-loop highway episodes")
    s.add_argument("--setting", type=int, choices=[1, 2, 3])
    s.add_argument("--agent", help="mock | scripted:FILE | remote")
    s.add_argument("--prediction", choices=MODES)
    s.add_argument("--rules")
    s.add_argument("--seeds", help="file with integer seeds (JSON list or whitespace separated)")
    s.add_argument("--repeats", type=int)
    s.add_argument("--duration", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--kappa", type=int)
    s.add_argument("--unguarded", action="store_true", help="execute the top-ranked pair without verification")
    s.add_argument("--log-dir", help="directory for per-episode JSON-lines logs")
    s.add_argument("--endpoint")
    s.add_argument("--model")
    s.add_argument("--replay", help="remote maker replay file")

    d = sub.add_parser("describe", parents=[common], argument_default=S, help="emit the prompt blocks")
    d.add_argument("--scenario")
    d.add_argument("--kappa", type=int)
    d.add_argument("--command")
    d.add_argument("--rules")
    d.add_argument("--criticality", action="store_true")

    lb = sub.add_parser("label", parents=[common], argument_default=S, help="label a recorded trajectory")
    lb.add_argument("--scenario")
    lb.add_argument("--trajectory")

    r = sub.add_parser("robustness", parents=[common], argument_default=S, help="per-rule margin series as CSV")
    r.add_argument("--log")
    r.add_argument("--rules")
    return p


def resolve_options(command: str, ns: argparse.Namespace) -> Dict[str, Any]:
    """Defaults < config file (top level, then the command's section) < explicit flags."""
    flags = {k: v for k, v in vars(ns).items() if k != "subcommand"}
    opts = dict(DEFAULTS[command])
    cfg_path = flags.get("config")
    if cfg_path:
        try:
            cfg = json.loads(Path(_existing(cfg_path, "config")).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config {cfg_path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise InputError(f"config {cfg_path}: expected a JSON object")
        section = cfg.get(command, {})
        top = {k.replace("-", "_"): v for k, v in cfg.items() if k not in COMMANDS}
        opts.update(top)
        opts.update({k.replace("-", "_"): v for k, v in section.items()})
    opts.update(flags)
    return opts


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        opts = resolve_options(ns.subcommand, ns)
        logging.basicConfig(level=getattr(logging, str(opts.get("log_level", "WARNING")).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return COMMANDS[ns.subcommand](opts)
    except (InputError, ReachGuardError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
