"""Command line entry point: ``kgrefine {synth,mine,poison,refine,eval}``.

Every option can come from a flag, from a JSON ``--config`` file, or from
the built-in default, in that order of precedence.  Config files group keys
by section, for example::

    {"seed": 3, "train": {"learning_rate": 0.05}, "em": {"rounds": 2}}

Unknown keys are rejected before any work starts.  Exit codes: 0 success,
2 unreadable or malformed input, 3 invalid input or configuration,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from . import em
from . import embedding as emb
from . import evaluation as ev
from . import rules as rl
from . import synth
from .graph import (GraphError, ParseError, Triplet, ValidationError, Vocab, build_graph, load_graph,
                    read_triple_file, write_triple_file)

log = logging.getLogger("kgrefine")

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 2, 3, 4
SCORE_CHUNK = 4096


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Option:
    dest: str
    section: str | None  # None: top-level config key
    default: Any
    help: str
    type: Callable | None = None
    choices: tuple | None = None
    nargs: str | None = None
    required: bool = False

    @property
    def key(self) -> str:
        return f"{self.section}.{self.dest}" if self.section else self.dest


def _opt(dest, section, default, help, **kw) -> Option:
    return Option(dest, section, default, help, **kw)


SEED = _opt("seed", None, 0, "random seed", type=int)
THREADS = _opt("threads", None, 1, "worker threads for scoring and ranking; results do not depend on it", type=int)
TIMESTAMP = _opt("timestamp", None, None, "timestamp string recorded in the report (omitted by default "
                 "so reruns are byte-identical)", type=str)

TRAIN = [
    _opt("score_kind", "train", "transe", "embedding score function", choices=("transe", "distmult", "complex")),
    _opt("dim", "train", 30, "embedding dimension (complex coordinates for ComplEx)", type=int),
    _opt("gamma", "train", 1.0, "TransE margin", type=float),
    _opt("learning_rate", "train", 0.01, "embedding SGD learning rate", type=float),
    _opt("epochs", "train", 100, "warm-start training epochs", type=int),
    _opt("negatives_per_positive", "train", 5, "sampled corruptions per positive", type=int),
    _opt("batch_size", "train", 512, "mini-batch size", type=int),
]
EM = [
    _opt("rounds", "em", 3, "EM rounds; 0 gives the embedding-only baseline", type=int),
    _opt("delta", "em", 0.5, "distillation threshold on the rule conditional (inclusive)", type=float),
    _opt("mix_lambda", "em", 1.0, "weight of P_rule in the mixed score", type=float),
    _opt("learning_rate_w", "em", 1e-3, "rule-weight learning rate", type=float),
    _opt("epochs_w", "em", 50, "rule-weight gradient steps per M-step", type=int),
    _opt("retrain_epochs", "em", 20, "embedding epochs per E-step", type=int),
    _opt("weight_init", "em", "precision", "initial rule weights: mined precision or the file's weights",
         choices=("precision", "given")),
    _opt("negative_repeats", "em", None, "copies of each distilled-false candidate per epoch "
         "(default: negatives_per_positive)", type=int),
    _opt("mode", "em", "biogrer", "final score: biogrer (Q) or biogrer-star (Q + lambda P)",
         choices=("biogrer", "biogrer-star")),
]
MINING = [
    _opt("beta", "mining", 0.3, "minimum precision for supporting rules", type=float),
    _opt("min_support", "mining", 3, "minimum grounding support", type=int),
    _opt("kinds", "mining", ["transitive", "symmetric", "block", "conflict"], "rule kinds to mine",
         nargs="+", choices=("transitive", "symmetric", "block", "conflict")),
]

SUMMARIES = {
    "synth": "generate a synthetic graph with planted rules and a labelled candidate split",
    "mine": "mine transitive, symmetric, block and conflict rules from an observed graph",
    "poison": "sample random unobserved triplets as poisons, optionally with an audit sheet",
    "refine": "run EM refinement and write a verdict per candidate",
    "eval": "evaluate refined scores (ptd) or a trained model's link ranking (mtp)",
}

COMMANDS: dict[str, list[Option]] = {
    "synth": [
        _opt("out", "paths", None, "output directory", type=str, required=True),
        _opt("preset", "synth", "acceptance", "generator preset", choices=("acceptance", "small")),
        _opt("split_seed", "synth", 0, "seed of the held-out split", type=int),
        _opt("holdout", "synth", None, "held-out true triplets (default: as many as noise triplets)", type=int),
        _opt("entity_count", "synth", None, "override the preset's entity count", type=int),
        _opt("relation_count", "synth", None, "override the preset's relation count", type=int),
        _opt("base_density", "synth", None, "override the preset's edges per head entity", type=float),
        _opt("noise_rate", "synth", None, "override the preset's noise fraction", type=float),
        _opt("community_size", "synth", None, "override the preset's community size", type=int),
        _opt("violation_share", "synth", None, "override the preset's share of rule-violating noise",
             type=float),
        _opt("seed", None, None, "generator seed (default: the preset's seed)", type=int),
    ],
    "mine": [
        _opt("graph", "paths", None, "observed triple file", type=str, required=True),
        _opt("out", "paths", None, "output rules file", type=str, required=True),
        *MINING,
    ],
    "poison": [
        _opt("graph", "paths", None, "observed triple file", type=str, required=True),
        _opt("out", "paths", None, "output triple file of poisons", type=str, required=True),
        _opt("exclude", "paths", [], "triple files the poisons must avoid", type=str, nargs="+"),
        _opt("audit_out", "paths", None, "audit sample file (default: <out>.audit.tsv)", type=str),
        _opt("n", "eval", 10000, "number of poisons", type=int),
        _opt("audit", "eval", 0, "size of the manual-audit sample (0: none)", type=int),
        SEED,
    ],
    "refine": [
        _opt("graph", "paths", None, "observed triple file", type=str, required=True),
        _opt("candidates", "paths", None, "candidate triple file(s)", type=str, nargs="+", required=True),
        _opt("rules", "paths", None, "rules file", type=str, required=True),
        _opt("out", "paths", None, "output scores TSV", type=str, required=True),
        _opt("manifest", "paths", None, "run manifest (default: <out>.manifest.json)", type=str),
        _opt("model_out", "paths", None, "save the refined embedding model here", type=str),
        *TRAIN, *EM, SEED, THREADS, TIMESTAMP,
    ],
    "eval": [
        _opt("task", "eval", None, "ptd (triplet classification) or mtp (filtered ranking)",
             choices=("ptd", "mtp"), required=True),
        _opt("out", "paths", None, "output report JSON", type=str, required=True),
        _opt("csv", "paths", None, "append metric rows to this CSV", type=str),
        _opt("run_name", "eval", "run", "run label in the CSV", type=str),
        _opt("scores", "paths", None, "[ptd] scores TSV written by refine", type=str),
        _opt("positives", "paths", None, "[ptd] true triplets", type=str),
        _opt("negatives", "paths", None, "[ptd] false triplet file(s)", type=str, nargs="+"),
        _opt("threshold", "eval", None, "[ptd] decision threshold (default: the one in the scores file)",
             type=float),
        _opt("graph", "paths", None, "[mtp] observed triple file", type=str),
        _opt("model", "paths", None, "[mtp] model checkpoint", type=str),
        _opt("test", "paths", None, "[mtp] test triple file", type=str),
        _opt("ks", "eval", [1, 3, 10], "[mtp] Hits@K cut-offs", type=int, nargs="+"),
        SEED, THREADS, TIMESTAMP,
    ],
}


# -- argument parsing and config resolution ----------------------------------------

def _flag_name(dest: str) -> str:
    return "--" + dest.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgrefine", description="Knowledge graph refinement with "
                                     "embeddings and signed logic rules.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name, help=SUMMARIES[name], description=SUMMARIES[name])
        p.add_argument("--config", type=str, default=None, help="JSON config file (flags take precedence)")
        for o in options:
            kw: dict[str, Any] = {"dest": o.dest, "default": None}
            if o.type is not None:
                kw["type"] = o.type
            if o.choices is not None:
                kw["choices"] = o.choices
            if o.nargs is not None:
                kw["nargs"] = o.nargs
            if o.required:
                kw["help"] = o.help + " (required)"
            elif "(default:" in o.help or o.default is None:
                kw["help"] = o.help
            else:
                kw["help"] = f"{o.help} (default: {o.default})"
            p.add_argument(_flag_name(o.dest), **kw)
    return parser


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as e:
        raise CliError(f"cannot read config: {e}", EXIT_PARSE) from None
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON: {e}", EXIT_PARSE) from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: config must be a JSON object", EXIT_VALIDATION)
    return data


def _flatten(config: dict) -> dict:
    flat = {}
    for k, v in config.items():
        if isinstance(v, dict):
            for k2, v2 in v.items():
                flat[f"{k}.{k2}"] = v2
        else:
            flat[k] = v
    return flat


def resolve(command: str, args: argparse.Namespace) -> tuple[dict, dict]:
    """Effective settings and where each came from (``flag``, ``config`` or ``default``)."""
    options = COMMANDS[command]
    from_file = _flatten(_load_config(getattr(args, "config", None)))
    known = {o.key for o in options}
    unknown = sorted(set(from_file) - known)
    if unknown:
        raise CliError(f"unknown config key(s) for '{command}': {', '.join(unknown)}", EXIT_VALIDATION)
    values, sources = {}, {}
    for o in options:
        flag = getattr(args, o.dest, None)
        if flag is not None:
            values[o.dest], sources[o.dest] = flag, "flag"
        elif o.key in from_file:
            values[o.dest], sources[o.dest] = _coerce(o, from_file[o.key]), "config"
        else:
            values[o.dest], sources[o.dest] = o.default, "default"
        if o.required and values[o.dest] is None:
            raise CliError(f"'{command}' needs {_flag_name(o.dest)}", EXIT_VALIDATION)
    return values, sources


def _coerce(o: Option, value):
    try:
        if value is None:
            return None
        if o.nargs:
            if not isinstance(value, list):
                value = [value]
            value = [o.type(v) for v in value] if o.type else list(value)
            bad = [v for v in value if o.choices and v not in o.choices]
        else:
            value = o.type(value) if o.type else value
            bad = [value] if o.choices and value not in o.choices else []
    except (TypeError, ValueError):
        raise CliError(f"config key {o.key}: cannot interpret {value!r}", EXIT_VALIDATION) from None
    if bad:
        raise CliError(f"config key {o.key}: {bad[0]!r} not in {list(o.choices)}", EXIT_VALIDATION)
    return value


def _train_config(v: dict) -> emb.TrainConfig:
    return emb.TrainConfig(learning_rate=v["learning_rate"], epochs=v["epochs"],
                           negatives_per_positive=v["negatives_per_positive"], batch_size=v["batch_size"],
                           seed=v["seed"])


def _em_config(v: dict) -> em.EmConfig:
    return em.EmConfig(delta=v["delta"], rounds=v["rounds"], mix_lambda=v["mix_lambda"],
                       learning_rate_w=v["learning_rate_w"], epochs_w=v["epochs_w"],
                       retrain_epochs=v["retrain_epochs"], weight_init=v["weight_init"],
                       negative_repeats=v["negative_repeats"])


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_rows(paths) -> list[tuple[str, str, str]]:
    rows = []
    for p in [paths] if isinstance(paths, str) else paths:
        rows.extend(read_triple_file(p))
    return rows


def _chunked(fn, rows: np.ndarray, threads: int) -> np.ndarray:
    """Apply a row-wise scorer over fixed-size chunks; the chunking never depends on ``threads``."""
    if not len(rows):
        return np.zeros(0)
    chunks = [rows[i:i + SCORE_CHUNK] for i in range(0, len(rows), SCORE_CHUNK)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts)


# -- subcommands ------------------------------------------------------------------

def cmd_synth(v: dict) -> int:
    spec = synth.default_acceptance_spec() if v["preset"] == "acceptance" else synth.small_spec()
    for key in ("entity_count", "relation_count", "base_density", "noise_rate", "community_size",
                "violation_share", "seed"):
        if v[key] is not None:
            setattr(spec, key, v[key])
    sg = synth.generate(spec)
    problem = synth.ptd_split(sg, holdout=v["holdout"], seed=v["split_seed"])
    synth.write_synth(v["out"], sg, problem)
    noise = sum(1 for x in sg.labels.values() if x == 0)
    print(f"entities={sg.graph.entity_count} relations={sg.graph.relation_count} "
          f"triplets={len(sg.labels)} noise={noise} observed={len(problem.graph.observed_array)} "
          f"candidates={len(problem.graph.candidate_array)} planted={len(sg.planted)}")
    return EXIT_OK


def cmd_mine(v: dict) -> int:
    g = load_graph(v["graph"])
    kinds = tuple(rl.RuleKind(k) for k in v["kinds"])
    rules = rl.mine_rules(g, beta=v["beta"], min_support=v["min_support"], kinds=kinds)
    rl.write_rules(v["out"], rules, g.relations)
    for kind in rl.KIND_ORDER:
        print(f"{kind.value}\t{sum(1 for r in rules if r.kind is kind)}")
    print(f"total\t{len(rules)}")
    return EXIT_OK


def cmd_poison(v: dict) -> int:
    g = load_graph(v["graph"])
    exclude = []
    for row in _read_rows(v["exclude"]):
        if all(n in g.entities for n in (row[0], row[2])) and row[1] in g.relations:
            exclude.append(g.from_names(*row))
    poisons = ev.generate_poisons(g, v["n"], seed=v["seed"], exclude=exclude)
    write_triple_file(v["out"], (g.to_names(t) for t in poisons))
    if v["audit"]:
        audit_path = v["audit_out"] or str(v["out"]) + ".audit.tsv"
        ev.label_audit_sample(poisons, v["audit"], v["seed"], g, audit_path)
    print(f"poisons={len(poisons)}")
    return EXIT_OK


def cmd_refine(v: dict, sources: dict) -> int:
    obs = read_triple_file(v["graph"])
    if not obs:
        raise ValidationError(f"{v['graph']}: no triplets")
    g = build_graph(obs, _read_rows(v["candidates"]))
    if not len(g.candidate_array):
        raise ValidationError("no candidate triplets outside the observed set")
    rules = rl.read_rules(v["rules"], g.relations)
    train_cfg, em_cfg = _train_config(v), _em_config(v)
    mode = em.ScoreMode.parse(v["mode"])
    state, model, rules = em.run_refinement(g, rules, em_cfg, train_cfg, v["score_kind"], v["dim"], v["gamma"])
    cands = g.candidate_array
    threads = max(1, v["threads"])
    q = _chunked(model.probabilities, cands, threads)
    p = _chunked(lambda c: em.rule_probabilities(state, rules, g, c), cands, threads)
    score = q if mode is em.ScoreMode.Q_ONLY else q + v["mix_lambda"] * p
    threshold = em.decision_threshold(mode, v["mix_lambda"])
    with open(v["out"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# threshold={threshold!r} mode={mode.value}\n")
        fh.write("# head\trelation\ttail\tq\tp_rule\tscore\tverdict\n")
        for t, qi, pi, si in zip(cands, q.tolist(), p.tolist(), score.tolist()):
            verdict = "true" if si >= threshold else "false"
            fh.write("\t".join(g.to_names(t)) + f"\t{qi!r}\t{pi!r}\t{si!r}\t{verdict}\n")
    if v["model_out"]:
        emb.save_model(v["model_out"], model, g.entities, g.relations)
    manifest = {
        "command": "refine",
        "config": {k: v[k] for k in sorted(v)},
        "config_sources": sources,
        "counts": {"entities": g.entity_count, "relations": g.relation_count,
                   "observed": len(g.observed_array), "candidates": len(cands), "rules": len(rules),
                   "overlap_dropped": g.overlap_count,
                   "verdict_true": int(np.sum(score >= threshold))},
        "threshold": threshold,
        "rounds": state.history,
        "rules": [{"kind": r.kind.value, "relations": [g.relations.name(x) for x in r.pattern.relations],
                   "weight": r.weight} for r in rules],
        "timestamp": v["timestamp"],
    }
    _write_json(v["manifest"] or str(v["out"]) + ".manifest.json", manifest)
    print(f"candidates={len(cands)} verdict_true={manifest['counts']['verdict_true']} threshold={threshold}")
    return EXIT_OK


def _read_scores(path) -> tuple[dict, float | None]:
    scores, threshold = {}, None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if line.startswith("# threshold="):
                threshold = float(line.split()[1].partition("=")[2])
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise ParseError(path, lineno, line, expected=7)
            try:
                scores[tuple(parts[:3])] = float(parts[5])
            except ValueError:
                raise ParseError(path, lineno, line, expected=7) from None
    return scores, threshold


def cmd_eval(v: dict) -> int:
    task = v["task"]
    config = {k: v[k] for k in sorted(v) if k not in ("timestamp", "threads")}
    if task == "ptd":
        for key in ("scores", "positives", "negatives"):
            if not v[key]:
                raise CliError(f"eval ptd needs {_flag_name(key)}", EXIT_VALIDATION)
        scores, file_threshold = _read_scores(v["scores"])
        threshold = v["threshold"] if v["threshold"] is not None else (
            file_threshold if file_threshold is not None else 0.5)
        vocab_e, vocab_r = Vocab(), Vocab()
        table = {}
        for names, s in scores.items():
            table[(vocab_e.add(names[0]), vocab_r.add(names[1]), vocab_e.add(names[2]))] = s

        def ids(rows):
            out = []
            for h, r, t in rows:
                key = (vocab_e.id(h) if h in vocab_e else -1, vocab_r.id(r) if r in vocab_r else -1,
                       vocab_e.id(t) if t in vocab_e else -1)
                if key not in table:
                    raise CliError(f"no score for {h}\t{r}\t{t} in {v['scores']}", EXIT_PARSE)
                out.append(key)
            return out

        split = ev.EvalSplit(ids(_read_rows(v["positives"])), ids(_read_rows(v["negatives"])))
        report = ev.evaluate_ptd(split, lambda arr: np.array([table[tuple(map(int, x))] for x in arr]),
                                 threshold)
    else:
        for key in ("graph", "model", "test"):
            if not v[key]:
                raise CliError(f"eval mtp needs {_flag_name(key)}", EXIT_VALIDATION)
        model, ents, rels = emb.load_model(v["model"])
        known = set(ents.names)
        obs = read_triple_file(v["graph"])
        test = _read_rows(v["test"])
        for h, r, t in obs + test:
            if h not in known or t not in known or r not in rels:
                raise ValidationError(f"triplet {h}\t{r}\t{t} uses a name unknown to the model")
        g = build_graph(obs, (), ents, rels)
        tests = [Triplet(ents.id(h), rels.id(r), ents.id(t)) for h, r, t in test]
        report = ev.evaluate_mtp(g, tests, model, ks=tuple(v["ks"]), threads=max(1, v["threads"]))
    ev.write_report(v["out"], report, config, v["seed"], v["timestamp"])
    if v["csv"]:
        ev.append_csv(v["csv"], v["run_name"], report)
    print(json.dumps(report.metrics(), sort_keys=True))
    return EXIT_OK


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values, sources = resolve(args.command, args)
        if args.command == "refine":
            return cmd_refine(values, sources)
        return {"synth": cmd_synth, "mine": cmd_mine, "poison": cmd_poison, "eval": cmd_eval}[args.command](values)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except rl.ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ParseError, rl.RuleError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except synth.GenerationError as e:
        print(f"error: infeasible generator settings, constraint {e.constraint}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (em.DivergenceError, emb.TrainingError) as e:
        print(f"error: divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (GraphError, ev.EvalError, emb.SamplingError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
