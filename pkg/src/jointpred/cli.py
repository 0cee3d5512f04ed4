"""Command-line experiment runner.

    jointpred run CONFIG [--threads N] [--output-dir PATH] [--seed S]
    jointpred validate CONFIG
    jointpred list

Configs are YAML documents checked against ``schemas/config.schema.json``.
Exit codes: 0 success, 2 config error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import bandit, metrics, seqpred
from .envs import (EnvModel, RecommenderInstance, coin_agents, informative_arm_env, marginal_vs_joint_pair,
                   table1_instance)
from .prob_core import FinitePmf, RngStream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUTPUT_DIR_ENV = "JOINTPRED_OUTPUT_DIR"
TRACE_HEADER = "replication,t,action,reward,step_regret,cum_regret"
EXPERIMENTS = ("bandit", "metrics", "recommender", "seqpred")
SUMMARY_SCHEMAS = {"bandit": "bandit_summary.schema.json", "recommender": "recommender_summary.schema.json"}


class ConfigError(Exception):
    """Invalid config; ``field`` is a dotted path and ``line`` is 1-based when known."""

    def __init__(self, message: str, field: str = "", line: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line

    def __str__(self):
        where = self.field or "<config>"
        if self.line is not None:
            where += f" (line {self.line})"
        return f"{where}: {self.args[0]}"


def load_schema(name: str) -> dict:
    return json.loads(resources.files("jointpred").joinpath("schemas", name).read_text())


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def _node_line(node, path) -> int | None:
    """Line of the YAML node at ``path`` (or its deepest existing ancestor)."""
    line = None
    for key in path:
        if node is None:
            break
        line = node.start_mark.line + 1
        nxt = None
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        node = nxt
    if node is not None:
        line = node.start_mark.line + 1
    return line


def _dotted(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def _schema_errors(data, root) -> list[ConfigError]:
    validator = jsonschema.Draft202012Validator(load_schema("config.schema.json"))
    errs = []
    for e in sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path))):
        if e.context:
            e = jsonschema.exceptions.best_match(e.context)
        path = list(e.absolute_path)
        if e.validator == "additionalProperties":
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            if extra:
                path = path + [extra[0]]
                errs.append(ConfigError(f"unknown key {extra[0]!r}", _dotted(path), _node_line(root, path)))
                continue
        errs.append(ConfigError(e.message, _dotted(path), _node_line(root, path)))
    return errs


def load_config(path) -> tuple[dict, yaml.Node]:
    """Parse and schema-check a config file; raises ConfigError."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"YAML syntax error: {exc.problem}", str(path),
                          None if mark is None else mark.line + 1) from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", str(path), 1)
    errs = _schema_errors(data, root)
    if errs:
        raise errs[0] if len(errs) == 1 else _MultiConfigError(errs)
    return data, root


class _MultiConfigError(ConfigError):
    def __init__(self, errors):
        super().__init__("; ".join(str(e) for e in errors), errors[0].field, errors[0].line)
        self.errors = errors

    def __str__(self):
        return "\n".join(str(e) for e in self.errors)


@dataclass
class Experiment:
    """A validated, fully built experiment ready to run."""

    kind: str
    seed: int
    spec: object
    raw: dict


def _env_model(block: dict, root, base) -> EnvModel:
    kind = block["kind"]
    try:
        if kind == "independent_beta":
            K = block["K"]
            for name in ("alpha", "beta"):
                v = block.get(name, 1.0)
                if isinstance(v, list) and len(v) != K:
                    raise ConfigError(f"expected {K} values, got {len(v)}", _dotted(base + [name]),
                                      _node_line(root, base + [name]))
            return EnvModel.independent_beta(K, block.get("alpha", 1.0), block.get("beta", 1.0))
        if kind == "informative_arm":
            return informative_arm_env(block["K"], block.get("delta", 1e-6))
        return EnvModel.finite_hypothesis(block["weights"], block["hypotheses"])
    except ValueError as exc:
        raise ConfigError(str(exc), _dotted(base), _node_line(root, base)) from exc


def build_experiment(data: dict, root, seed_override: int | None = None) -> Experiment:
    """Turn a schema-valid config into runnable objects; raises ConfigError on semantic problems."""
    kind = data["experiment"]
    seed = int(data.get("seed", 0) if seed_override is None else seed_override)
    if not (0 <= seed < 2 ** 64):
        raise ConfigError("seed must be a 64-bit unsigned integer", "seed", _node_line(root, ["seed"]))
    block = data.get(kind, {}) or {}
    if kind == "bandit":
        env = _env_model(block["env"], root, ["bandit", "env"])
        agent = block.get("agent", {})
        try:
            spec = bandit.BanditConfig(
                env_model=env, policy=block["policy"], agent_kind=agent.get("kind", "exact_posterior"),
                T=block["T"], tau=block.get("tau", 16), variant=block.get("variant", "posterior_sample"),
                n_replications=block.get("replications", 1000), master_seed=seed,
                n_members=agent.get("n_members", 10), resample_threshold=agent.get("resample_threshold", 0.5),
                greedy_tie_break=block.get("greedy_tie_break", "random"), epsilon=block.get("epsilon", 0.0),
                block_size=block.get("block_size", bandit.BLOCK_SIZE))
        except ValueError as exc:
            field = "bandit.agent.kind" if "requires" in str(exc) else "bandit"
            raise ConfigError(str(exc), field, _node_line(root, field.split("."))) from exc
    elif kind == "recommender":
        try:
            if {"movies", "user_types", "weights"} & set(block):
                spec = RecommenderInstance(
                    movies=np.array(block.get("movies", table1_instance().movies.tolist()), dtype=float),
                    type_weights=np.array(block.get("weights", [0.5, 0.5]), dtype=float),
                    user_types=np.array(block.get("user_types", table1_instance().user_types.tolist()),
                                        dtype=float),
                    K_select=block.get("K_select", 2))
            else:
                spec = table1_instance()
                if "K_select" in block:
                    spec = RecommenderInstance(spec.movies, spec.type_weights, spec.user_types, block["K_select"])
        except ValueError as exc:
            raise ConfigError(str(exc), "recommender", _node_line(root, ["recommender"])) from exc
    elif kind == "metrics":
        sc = block["scenario"]
        p_values = sc.get("p_values", [1.0, 0.0])
        weights = sc.get("weights", [2.0 / 3.0, 1.0 / 3.0])
        if len(p_values) != len(weights):
            raise ConfigError("p_values and weights must have equal length", "metrics.scenario",
                              _node_line(root, ["metrics", "scenario"]))
        try:
            prior = FinitePmf(list(map(float, p_values)), weights)
        except ValueError as exc:
            raise ConfigError(str(exc), "metrics.scenario.weights",
                              _node_line(root, ["metrics", "scenario", "weights"])) from exc
        spec = {"prior": prior, "horizon": sc.get("horizon", 0), "tau": block.get("tau", 2),
                "agents": block.get("agents", ["agent1", "agent2", "bayes"]),
                "mc_samples": block.get("mc_samples", 10000),
                "universality": block.get("universality", {})}
    else:
        spec = _build_seqpred(block, root)
    return Experiment(kind, seed, spec, data)


def _build_seqpred(block: dict, root) -> dict:
    prob = block.get("problem", {"kind": "coin", "T": 3})
    try:
        if prob["kind"] == "coin":
            problem = seqpred.coin_problem(prob["T"], prob.get("p_heads_env", 2.0 / 3.0))
        else:
            problem = seqpred.SeqPredProblem(np.array(prob["weights"], dtype=float),
                                             np.array(prob["label_probs"], dtype=float))
    except ValueError as exc:
        raise ConfigError(str(exc), "seqpred.problem", _node_line(root, ["seqpred", "problem"])) from exc
    ag = block.get("agent", {"kind": "perfect_memory"})
    try:
        if ag["kind"] == "perfect_memory":
            agent = seqpred.perfect_memory_agent(problem)
        elif ag["kind"] == "amnesiac":
            agent = seqpred.amnesiac_agent(problem)
        else:
            agent = seqpred.IncrementalAgent(np.array(ag["init"], dtype=float), np.array(ag["kernel"], dtype=float),
                                             np.array(ag["predictor"], dtype=float))
        if agent.kernel.shape[0] != problem.T or agent.kernel.shape[2] != problem.n_labels:
            raise ValueError("agent shapes do not match the problem's horizon and label count")
    except ValueError as exc:
        raise ConfigError(str(exc), "seqpred.agent", _node_line(root, ["seqpred", "agent"])) from exc
    return {"problem": problem, "agent": agent, "lemma3_candidates": block.get("lemma3_candidates", 10),
            "random_instances": block.get("random_instances", {})}


# ---------------------------------------------------------------------------
# Runners; each returns {filename: bytes}
# ---------------------------------------------------------------------------

def _finite(x):
    """JSON-safe value: non-finite floats become the strings 'inf', '-inf', 'nan'."""
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _json_bytes(obj, schema_name: str) -> bytes:
    obj = _finite(obj)
    jsonschema.validate(obj, load_schema(schema_name))
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def trace_csv(result: bandit.BanditResult) -> bytes:
    """Long-format trace; actions are reported 1-indexed."""
    lines = [TRACE_HEADER]
    T = result.config.T
    cum = np.cumsum(result.step_regret, axis=1)
    for r in range(result.n_replications):
        acts = (result.actions[r] + 1).tolist()
        rews = result.rewards[r].tolist()
        regs = result.step_regret[r].tolist()
        cr = cum[r].tolist()
        lines.extend(f"{r},{t},{acts[t]},{rews[t]},{regs[t]:.17g},{cr[t]:.17g}" for t in range(T))
    return ("\n".join(lines) + "\n").encode()


def run_bandit_experiment(exp: Experiment, threads: int) -> dict:
    cfg: bandit.BanditConfig = exp.spec
    write_trace = exp.raw["bandit"].get("write_trace", True)
    _progress(f"bandit: {cfg.policy} K={cfg.env_model.K} T={cfg.T} reps={cfg.n_replications}")
    res = bandit.run_bandit(cfg, threads=threads, keep_traces=write_trace)
    summary = {"experiment": "bandit", "env": cfg.env_model.to_dict(), "variant": cfg.variant,
               "greedy_tie_break": cfg.greedy_tie_break, **res.summary()}
    out = {"summary.json": _json_bytes(summary, SUMMARY_SCHEMAS["bandit"])}
    if write_trace:
        out["trace.csv"] = trace_csv(res)
    return out


def run_recommender_experiment(exp: Experiment, threads: int) -> dict:
    inst: RecommenderInstance = exp.spec
    sel = marginal_vs_joint_pair(inst)
    cert = metrics.recommender_certificate(inst)
    summary = {
        "experiment": "recommender",
        "enjoy_probs": inst.enjoy_probs().tolist(),
        "marginal_probs": inst.marginal_probs().tolist(),
        "marginal_pair": [i + 1 for i in sel.marginal_pair],
        "joint_pair": [i + 1 for i in sel.joint_pair],
        "marginal_success": sel.marginal_success,
        "joint_success": sel.joint_success,
        "marginal_miss": 1.0 - sel.marginal_success,
        "joint_miss": 1.0 - sel.joint_success,
        "certificate": {"gap": cert.gap, "bound": cert.bound, "holds": cert.holds},
    }
    return {"summary.json": _json_bytes(summary, SUMMARY_SCHEMAS["recommender"])}


def _metrics_agent(name: str, prior: FinitePmf):
    a1, a2 = coin_agents()
    if name == "agent1":
        return metrics.fixed_agent(a1)
    if name == "agent2":
        return metrics.fixed_agent(a2)
    return metrics.bayes_coin_agent(prior)


def run_metrics_experiment(exp: Experiment, threads: int) -> dict:
    s = exp.spec
    out_agents = {}
    for i, name in enumerate(s["agents"]):
        _progress(f"metrics: agent {name}")
        sc = metrics.coin_scenario(s["prior"], _metrics_agent(name, s["prior"]), s["tau"], s["horizon"])
        ex = metrics.exact_metrics(sc)
        mc = metrics.mc_cross_entropy(sc, s["mc_samples"], RngStream(exp.seed, i))
        joint = sc.agent(() if s["horizon"] == 0 else (1,) * s["horizon"], s["tau"])
        out_agents[name] = {**ex, "mc_d_ce": {"mean": mc.mean, "se": mc.se, "n": mc.n, "n_infinite": mc.n_infinite},
                            "p_all_zeros": joint[(0,) * s["tau"]]}
    result = {"experiment": "metrics", "seed": exp.seed, "tau": s["tau"], "horizon": s["horizon"],
              "agents": out_agents}
    uni = s["universality"]
    if uni:
        block = {}
        if uni.get("recommender", False):
            c = metrics.recommender_certificate(table1_instance())
            block["recommender"] = {"gap": c.gap, "bound": c.bound, "holds": c.holds}
        n = uni.get("random_instances", 0)
        if n:
            holds = 0
            for k in range(n):
                dp, post, ag = metrics.random_decision_problem(RngStream(exp.seed, 1000 + k),
                                                               uni.get("max_actions", 5), uni.get("max_tau", 3))
                holds += metrics.universality_gap(dp, post, ag).holds
            block["random"] = {"count": n, "holds": holds, "all_hold": holds == n}
        result["universality"] = block
    return {"metrics.json": _json_bytes(result, "metrics.schema.json")}


def _random_seqpred_task(args):
    seed, k, opts = args
    rng = RngStream(seed, k)
    problem, agent = seqpred.random_instance(rng, opts.get("max_envs", 3), opts.get("max_states", 4),
                                             opts.get("max_T", 4), opts.get("n_labels", 2),
                                             predictor="random" if k % 2 == 0 else "induced")
    joint = seqpred.enumerate_joint(problem, agent)
    checks = [seqpred.verify_theorem1(problem, agent, t, joint) for t in range(problem.T)]
    n_cand = opts.get("lemma3_candidates", 5)
    g = rng.generator
    lemma = [seqpred.verify_lemma3(problem, agent, t,
                                   [g.dirichlet(np.ones(problem.n_labels), size=agent.n_states)
                                    for _ in range(n_cand)], joint).holds
             for t in range(problem.T)]
    return all(c.holds for c in checks), all(c.data_processing for c in checks), all(lemma)


def run_seqpred_experiment(exp: Experiment, threads: int) -> dict:
    s = exp.spec
    problem, agent = s["problem"], s["agent"]
    joint = seqpred.enumerate_joint(problem, agent)
    ckl = seqpred.cumulative_kl(problem, agent, joint=joint)
    rng = RngStream(exp.seed, 0)
    lemma = []
    for t in range(problem.T):
        cands = [rng.generator.dirichlet(np.ones(problem.n_labels), size=agent.n_states)
                 for _ in range(s["lemma3_candidates"])]
        chk = seqpred.verify_lemma3(problem, agent, t, cands, joint)
        lemma.append({"t": t, "induced_kl": chk.induced_kl,
                      "min_candidate_kl": min(chk.candidate_kls) if chk.candidate_kls else None,
                      "holds": chk.holds})
    result = {
        "experiment": "seqpred", "seed": exp.seed, "T": problem.T,
        "n_envs": problem.n_envs, "n_states": agent.n_states,
        "cumulative_kl": {"total": ckl.total, "per_step": list(ckl.per_step),
                          "infinite_steps": list(ckl.infinite_steps)},
        "theorem1": [seqpred.verify_theorem1(problem, agent, t, joint).to_dict() for t in range(problem.T)],
        "lemma3": lemma,
    }
    opts = s["random_instances"]
    n = opts.get("count", 0)
    if n:
        _progress(f"seqpred: {n} random instances on {threads} thread(s)")
        tasks = [(exp.seed, 1 + k, opts) for k in range(n)]
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            flags = list(pool.map(_random_seqpred_task, tasks))
        result["random_instances"] = {
            "count": n,
            "theorem1_holds": sum(f[0] for f in flags),
            "data_processing_holds": sum(f[1] for f in flags),
            "lemma3_holds": sum(f[2] for f in flags),
        }
    return {"seqpred.json": _json_bytes(result, "seqpred.schema.json")}


RUNNERS = {"bandit": run_bandit_experiment, "metrics": run_metrics_experiment,
           "recommender": run_recommender_experiment, "seqpred": run_seqpred_experiment}


def run_experiment(exp: Experiment, threads: int = 1) -> dict:
    return RUNNERS[exp.kind](exp, threads)


def resolve_output_dir(cli_value: str | None, data: dict, config_path) -> Path:
    """--output-dir beats the environment variable, which beats the config's output.dir."""
    if cli_value:
        return Path(cli_value)
    if os.environ.get(OUTPUT_DIR_ENV):
        return Path(os.environ[OUTPUT_DIR_ENV])
    if data.get("output", {}).get("dir"):
        return Path(data["output"]["dir"])
    return Path("results") / Path(config_path).stem


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _progress(msg: str):
    print(msg, file=sys.stderr, flush=True)


def describe_schema() -> str:
    """Human-readable summary of the config schema per experiment kind."""
    schema = load_schema("config.schema.json")
    defs = schema["$defs"]
    lines = ["experiment kinds: " + ", ".join(EXPERIMENTS), "",
             "top level: experiment (required), seed (0..2^64-1), output.dir, <kind> block", ""]

    def fmt(spec):
        if "enum" in spec:
            return "one of " + ", ".join(map(str, spec["enum"]))
        if "$ref" in spec:
            return spec["$ref"].rsplit("/", 1)[-1]
        if "oneOf" in spec:
            return " | ".join(fmt(s) for s in spec["oneOf"])
        t = spec.get("type", "object")
        lo = spec.get("minimum", spec.get("exclusiveMinimum"))
        hi = spec.get("maximum")
        rng = f" in [{lo}, {hi}]" if lo is not None and hi is not None else (f" >= {lo}" if lo is not None else "")
        return f"{t}{rng}"

    for kind in EXPERIMENTS:
        lines.append(f"[{kind}]")
        for name, spec in defs[kind]["properties"].items():
            req = " (required)" if name in defs[kind].get("required", []) else ""
            lines.append(f"  {name}: {fmt(spec)}{req}")
            for sub, subspec in spec.get("properties", {}).items():
                lines.append(f"    {sub}: {fmt(subspec)}")
        lines.append("")
    lines.append("[env kinds]")
    for alt in defs["env"]["oneOf"]:
        props = alt["properties"]
        lines.append(f"  {props['kind']['const']}: " + ", ".join(
            f"{k}: {fmt(v)}" for k, v in props.items() if k != "kind"))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointpred", description="Joint-prediction experiment runner")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--threads", type=int, default=1, help="maximum worker threads (results do not depend on it)")
    r.add_argument("--output-dir", default=None, help=f"result directory (overrides ${OUTPUT_DIR_ENV})")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.add_argument("--seed", type=int, default=None)
    sub.add_parser("list", help="list experiment kinds and their config fields")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        print(describe_schema())
        return EXIT_OK
    try:
        data, root = load_config(args.config)
        exp = build_experiment(data, root, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"{args.config}: valid {exp.kind} config")
        return EXIT_OK
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        files = run_experiment(exp, args.threads)
        out_dir = resolve_output_dir(args.output_dir, data, args.config)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, content in files.items():
            (out_dir / name).write_bytes(content)
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name in sorted(files):
        print(out_dir / name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
