"""Command-line entry point: generate, train, evaluate, ate, oracle.

Settings resolve as built-in defaults < ``--config`` JSON file < flags. The
config file may hold global keys (``seed``, ``output_dir``) and one nested
object per section (``train``, ``er``, ``query``, ``oracle``); unknown keys
are rejected. Exit codes: 0 success, 1 usage or I/O error, 2 training ran
but did not reach a valid bow-free graph.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .admg import AdmgGraph, f1_scores, is_bow_free_admg, write_edge_probabilities
from .datagen import ErSpec, gen_er_admg, gen_fork_collider, load_dataset, save_dataset, sidecar_path
from .inference import InterventionQuery, ate_report, estimate_ate, true_ate
from .oracle import TestConfig, classify_graph, verdict_report
from .trainer import (CHECKPOINT_FORMAT, LAGRANGIAN_RULES, REPORT_FORMAT, TrainConfig, load_checkpoint,
                      save_checkpoint, train, write_report)
from .variational import expected_f1, mode_graph

SECTIONS = ("train", "er", "query", "oracle")
GLOBAL_KEYS = ("seed", "output_dir")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    obj = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    unknown = sorted(set(obj) - set(GLOBAL_KEYS) - set(SECTIONS))
    if unknown:
        raise UsageError(f"{p}: unknown config keys: {', '.join(unknown)}")
    return obj


def _merge(file_cfg: dict, section: str, flags: dict) -> dict:
    out = dict(file_cfg.get(section, {}))
    if "seed" in file_cfg and section in ("train", "er", "oracle"):
        out.setdefault("seed", file_cfg["seed"])
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def manifest(command: str, argv, resolved: dict) -> dict:
    return {
        "command": command,
        "argv": list(argv),
        "config": resolved,
        "seed": resolved.get("seed"),
        "versions": {"nadmg": __version__, "checkpoint": CHECKPOINT_FORMAT, "report": REPORT_FORMAT,
                     "numpy": np.__version__},
    }


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _emit(obj, out, command, argv, resolved):
    text = json.dumps(obj, indent=2)
    print(text)
    if out:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        _write_json(out.with_suffix(".manifest.json"), manifest(command, argv, resolved))


# -- commands ----------------------------------------------------------------

def cmd_generate(args, file_cfg, argv) -> int:
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    if args.model == "fork-collider":
        n = 2000 if args.n is None else args.n
        ds = gen_fork_collider(n, seed)
        resolved = {"model": "fork-collider", "n": n, "seed": seed}
    else:
        er = _merge(file_cfg, "er", {"d": args.d, "e": args.e, "m": args.m, "n": args.n, "seed": args.seed})
        er.setdefault("seed", seed)
        missing = [k for k in ("d", "e", "m") if k not in er]
        if missing:
            raise UsageError(f"er model needs --{', --'.join(missing)}")
        spec = ErSpec(int(er["d"]), float(er["e"]), float(er["m"]), int(er.get("n", 5000)), int(er["seed"]))
        ds = gen_er_admg(spec)
        resolved = {"model": "er", **asdict(spec)}
    out = Path(args.out or Path(file_cfg.get("output_dir", ".")) / f"{args.model}-{seed}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    _write_json(out.with_suffix(".manifest.json"), manifest("generate", argv, resolved))
    g = ds.truth
    print(f"wrote {ds.num_samples}x{ds.num_nodes} to {out} (metadata {sidecar_path(out)})")
    print(f"truth: directed {g.directed_edges()} bidirected {g.bidirected_edges()}")
    return 0


def _train_flags(args) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(TrainConfig)}


def cmd_train(args, file_cfg, argv) -> int:
    ds = load_dataset(args.data)
    if ds.num_samples < 2:
        raise UsageError(f"{args.data}: need at least two rows of data")
    cfg = TrainConfig.from_dict(_merge(file_cfg, "train", _train_flags(args)))
    out = Path(args.out or file_cfg.get("output_dir", "run"))
    out.mkdir(parents=True, exist_ok=True)
    result = train(ds, cfg, log=None if args.quiet else (lambda r: print(json.dumps(r), file=sys.stderr)))
    save_checkpoint(out / "checkpoint.json", result.model, cfg, result.state)
    write_report(out / "report.jsonl", [{**r, "config": cfg.to_dict()} if k == 0 else r
                                        for k, r in enumerate(result.report)])
    pd, pb = result.model.edge_probabilities()
    write_edge_probabilities(out / "directed_probs.csv", pd)
    write_edge_probabilities(out / "bidirected_probs.csv", pb)
    _write_json(out / "manifest.json", manifest("train", argv, {"data": str(args.data), **cfg.to_dict()}))
    g = result.model.mode_graph()
    print(f"mode graph: directed {g.directed_edges()} bidirected {g.bidirected_edges()}")
    return 0 if is_bow_free_admg(g) else 2


def _load_truth(path) -> AdmgGraph:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"truth file not found: {p}")
    if p.suffix == ".csv":
        ds = load_dataset(p)
        if ds.truth is None:
            raise UsageError(f"{p}: dataset metadata has no truth graph")
        return ds.truth
    obj = json.loads(p.read_text(encoding="utf-8"))
    return AdmgGraph.from_json(obj.get("truth_graph", obj))


def cmd_evaluate(args, file_cfg, argv) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    truth = _load_truth(args.truth)
    if truth.num_nodes != model.num_observed:
        raise UsageError(f"truth has {truth.num_nodes} nodes but the model has {model.num_observed}")
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    e_d, e_b = expected_f1(model.q, truth, np.random.default_rng(seed), args.samples)
    g = mode_graph(model.q)
    m_d, m_b = f1_scores(g, truth)
    pd, pb = model.edge_probabilities()
    obj = {"expected_f1_d": e_d, "expected_f1_b": e_b, "mode_f1_d": m_d, "mode_f1_b": m_b,
           "num_samples": args.samples, "mode_graph": g.to_json(), "truth_graph": truth.to_json(),
           "directed_probabilities": pd.tolist(), "bidirected_probabilities": pb.tolist()}
    _emit(obj, args.out, "evaluate", argv, {"checkpoint": str(args.checkpoint), "truth": str(args.truth),
                                             "seed": seed, "samples": args.samples})
    return 0


def cmd_ate(args, file_cfg, argv) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    q = _merge(file_cfg, "query", {"treatment": args.treatment, "a": args.a, "b": args.b,
                                   "responses": None if args.responses is None else
                                   [int(r) for r in args.responses.split(",") if r.strip()],
                                   "num_graphs": args.graphs, "samples_per_graph": args.samples_per_graph})
    missing = [k for k in ("treatment", "a", "b", "responses") if k not in q]
    if missing:
        raise UsageError(f"ate needs {', '.join('--' + k for k in missing)}")
    unknown = sorted(set(q) - {f.name for f in fields(InterventionQuery)})
    if unknown:
        raise UsageError(f"unknown query keys: {', '.join(unknown)}")
    query = InterventionQuery(int(q["treatment"]), float(q["a"]), float(q["b"]), tuple(q["responses"]),
                              int(q.get("num_graphs", 1000)), int(q.get("samples_per_graph", 2)))
    d = model.num_observed
    if not 0 <= query.treatment < d or any(not 0 <= r < d for r in query.responses):
        raise UsageError(f"query indices out of range for a {d}-variable model")
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    est = estimate_ate(model, query, np.random.default_rng(seed), cfg.gumbel_temperature)
    truth = None
    if args.data:
        ds = load_dataset(args.data)
        if ds.sem is not None:
            truth = true_ate(ds.sem, query, np.random.default_rng(seed))
    obj = ate_report(query, est, truth)
    _emit(obj, args.out, "ate", argv, {"checkpoint": str(args.checkpoint), "seed": seed, **asdict(query)})
    return 0


def cmd_oracle(args, file_cfg, argv) -> int:
    ds = load_dataset(args.data)
    oc = _merge(file_cfg, "oracle", {"alpha": args.alpha, "permutations": args.permutations,
                                     "sample_cap": args.sample_cap, "seed": args.seed})
    unknown = sorted(set(oc) - {f.name for f in fields(TestConfig)})
    if unknown:
        raise UsageError(f"unknown oracle keys: {', '.join(unknown)}")
    cfg = TestConfig(**oc)
    graph, verdicts = classify_graph(ds.x, cfg)
    _emit(verdict_report(graph, verdicts, cfg), args.out, "oracle", argv, {"data": str(args.data), **asdict(cfg)})
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nadmg", description="Bow-free ADMG discovery and effect estimation.")
    parser.add_argument("--version", action="version", version=f"nadmg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--model", choices=["fork-collider", "er"], required=True)
    g.add_argument("--d", type=int)
    g.add_argument("--e", type=float)
    g.add_argument("--m", type=float)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--config")

    t = sub.add_parser("train", help="fit the model to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--quiet", action="store_true")
    for f in fields(TrainConfig):
        typ = {"int": int, "str": str}.get(f.type, float)
        choices = LAGRANGIAN_RULES if f.name == "lagrangian_rule" else None
        t.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=typ, default=None, choices=choices)

    e = sub.add_parser("evaluate", help="structure metrics against a truth graph")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--truth", required=True, help="dataset CSV with metadata, or graph JSON")
    e.add_argument("--samples", type=int, default=100)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--config")

    a = sub.add_parser("ate", help="posterior-averaged treatment effect")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--treatment", type=int)
    a.add_argument("--a", type=float)
    a.add_argument("--b", type=float)
    a.add_argument("--responses", help="comma-separated indices")
    a.add_argument("--graphs", type=int)
    a.add_argument("--samples-per-graph", type=int)
    a.add_argument("--data", help="dataset whose generating SEM gives the true ATE")
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.add_argument("--config")

    o = sub.add_parser("oracle", help="pairwise independence-test structure verdicts")
    o.add_argument("--data", required=True)
    o.add_argument("--alpha", type=float)
    o.add_argument("--permutations", type=int)
    o.add_argument("--sample-cap", type=int)
    o.add_argument("--seed", type=int)
    o.add_argument("--out")
    o.add_argument("--config")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "ate": cmd_ate,
            "oracle": cmd_oracle}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        file_cfg = load_config(args.config)
        return COMMANDS[args.command](args, file_cfg, argv)
    except (FileNotFoundError, UsageError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"nadmg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
