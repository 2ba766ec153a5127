"""Command-line entry point.

Subcommands cover the full workflow: dataset synthesis, topology search,
final training, evaluation, the ablation harness, the random-tree
benchmark, and gradient verification. Every command is deterministic for
a fixed seed, echoes its effective configuration into the run directory,
and uses the exit codes 0 (ok), 1 (usage), 2 (data error), 3 (check
failure).

Option values resolve in order: command-line flag, then FACETREE_* env
var, then --config file, then the built-in default.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import pipeline, topology
from .graph import (LandmarkSet, TraversalSequence, medoid_root, num_edges,
                    preorder_traverse, prim_mst, tree_to_dot)
from .neural import GRADCHECK_COMPONENTS, component_gradient_checks

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3

ENV_PREFIX = "FACETREE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we use 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_pairs(text: str):
    """'1-6,3-8' -> ((1, 6), (3, 8))"""
    pairs = []
    for chunk in text.split(","):
        a, sep, b = chunk.partition("-")
        if not sep:
            raise argparse.ArgumentTypeError(f"bad pair {chunk!r}, expected i-j")
        pairs.append((int(a), int(b)))
    return tuple(pairs)


def _parse_fractions(text: str):
    vals = tuple(float(v) for v in text.split(","))
    if not vals:
        raise argparse.ArgumentTypeError("empty fraction list")
    return vals


def _parse_opt_int(text: str):
    return None if text.strip() == "" else int(text)


# (type parser, default, help) per section/key; CLI flags mirror the keys
SCHEMA = {
    "run": {
        "seed": (int, 0, "master random seed"),
        "threads": (int, 1, "worker cap for parallel candidate evaluation"),
    },
    "synth": {
        "classes": (int, 3, "number of classes"),
        "landmarks": (int, 10, "landmarks per sample"),
        "per_class": (int, 200, "samples per class"),
        "signal_pairs": (_parse_pairs, ((1, 6), (3, 8)), "signal pairs as i-j,i-j"),
        "displacement": (float, 0.08, "class offset magnitude"),
        "pair_jitter": (float, 0.10, "common-mode pair shift sigma"),
        "noise": (float, 0.015, "iid coordinate noise sigma"),
        "image_size": (int, 48, "square image side"),
        "blob_sigma": (float, 2.2, "blob radius in pixels"),
        "blob_amplitude": (float, 0.55, "base blob brightness"),
        "texture_contrast": (float, 0.5, "class brightness swing on signal landmarks"),
        "image_noise": (float, 0.02, "pixel noise sigma"),
        "split": (_parse_fractions, (0.8, 0.0, 0.2), "train,val,test fractions"),
    },
    "swarm": {
        "size": (int, 12, "particles"),
        "iterations": (int, 40, "evaluation rounds"),
        "inertia": (float, 0.729, "velocity inertia"),
        "cognitive": (float, 1.49445, "pull toward personal best"),
        "social": (float, 1.49445, "pull toward global best"),
        "velocity_clamp": (float, 0.5, "velocity cap as fraction of range"),
        "inner_epochs": (int, 5, "stream-training epochs per candidate"),
        "inner_patience": (_parse_opt_int, 2, "early-stop patience per candidate"),
        "cooperative_block": (_parse_opt_int, None, "rotating dimension block size"),
    },
    "train": {
        "epochs": (int, 50, "training epochs"),
        "batch_size": (int, 32, "minibatch size"),
        "lr": (float, 1e-3, "learning rate"),
        "beta1": (float, 0.9, "first-momentum decay"),
        "beta2": (float, 0.99, "second-momentum decay"),
        "focal_gamma": (float, 2.0, "focal focusing parameter"),
        "focal_alpha": (float, 0.25, "focal balance weight"),
        "hidden_size": (int, 32, "LSTM hidden width"),
        "fusion_size": (int, 32, "fusion encoder width"),
        "encoder": (str, "random-projection", "patch encoder kind"),
        "encoder_dim": (int, 64, "patch encoding width"),
        "patch_size": (int, 17, "patch side in pixels"),
        "val_fraction": (float, 0.2, "validation share carved from train"),
    },
}


def _load_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    values: dict[tuple[str, str], str] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise UsageError(f"{path}: unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise UsageError(f"{path}: unknown key {key!r} in section [{section}]")
            values[(section, key)] = raw
    return values


def _resolve(args, sections) -> dict[str, dict]:
    """Merge defaults, config file, env vars, and flags for `sections`."""
    file_values = _load_config_file(args.config) if args.config else {}
    out: dict[str, dict] = {}
    for section in sections:
        out[section] = {}
        for key, (parse, default, _help) in SCHEMA[section].items():
            value = default
            if (section, key) in file_values:
                value = _parse_raw(parse, file_values[(section, key)], section, key)
            env_name = f"{ENV_PREFIX}_{section.upper()}_{key.upper()}"
            if env_name in os.environ:
                value = _parse_raw(parse, os.environ[env_name], section, key)
            flag = getattr(args, f"{section}__{key}", None)
            if flag is not None:
                value = flag
            out[section][key] = value
    return out


def _parse_raw(parse, raw: str, section: str, key: str):
    try:
        return parse(raw)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"bad value for {section}.{key}: {exc}") from exc


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}-{b}" for a, b in value)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_effective_config(out_dir, resolved: dict) -> None:
    lines = []
    for section in sorted(resolved):
        lines.append(f"[{section}]")
        for key in sorted(resolved[section]):
            lines.append(f"{key} = {_format_value(resolved[section][key])}")
        lines.append("")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective-config.ini"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))


def _add_section_flags(parser, sections) -> None:
    for section in sections:
        for key, (parse, _default, help_text) in SCHEMA[section].items():
            parser.add_argument(f"--{key.replace('_', '-')}",
                                dest=f"{section}__{key}", type=parse,
                                default=None, help=f"[{section}] {help_text}")


def _train_config(resolved, mode: str = "full", patience=None) -> pipeline.TrainConfig:
    t = resolved["train"]
    return pipeline.TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
        beta1=t["beta1"], beta2=t["beta2"], focal_gamma=t["focal_gamma"],
        focal_alpha=t["focal_alpha"], seed=resolved["run"]["seed"],
        hidden_size=t["hidden_size"], fusion_size=t["fusion_size"],
        encoder=t["encoder"], encoder_dim=t["encoder_dim"],
        patch_size=t["patch_size"], mode=mode,
        val_fraction=t["val_fraction"], patience=patience,
    )


def _swarm_config(resolved) -> topology.SwarmConfig:
    s = resolved["swarm"]
    return topology.SwarmConfig(
        swarm_size=s["size"], iterations=s["iterations"], inertia=s["inertia"],
        cognitive=s["cognitive"], social=s["social"],
        velocity_clamp=s["velocity_clamp"], seed=resolved["run"]["seed"],
        inner_epochs=s["inner_epochs"], patience=s["inner_patience"],
        cooperative_block=s["cooperative_block"],
    )


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_tree_file(path, n: int) -> TraversalSequence:
    with open(path, "r", encoding="utf-8") as fh:
        info = json.load(fh)
    tokens = tuple(int(t) for t in info["tokens"])
    seq = TraversalSequence(tokens)
    if seq.length != 2 * n - 1:
        raise data_mod.FormatError(
            f"{path}: sequence length {seq.length} does not fit {n} landmarks")
    return seq


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    resolved = _resolve(args, ("run", "synth"))
    s = resolved["synth"]
    cfg = data_mod.SynthConfig(
        classes=s["classes"], landmarks=s["landmarks"], per_class=s["per_class"],
        signal_pairs=s["signal_pairs"], displacement=s["displacement"],
        pair_jitter=s["pair_jitter"], noise=s["noise"], image_size=s["image_size"],
        blob_sigma=s["blob_sigma"], blob_amplitude=s["blob_amplitude"],
        texture_contrast=s["texture_contrast"], image_noise=s["image_noise"],
        seed=resolved["run"]["seed"],
    )
    manifest = data_mod.synth_generate(cfg)
    manifest = data_mod.split(manifest, s["split"], resolved["run"]["seed"])
    data_mod.save_dataset(manifest, args.out)
    _write_effective_config(args.out, resolved)
    counts = {tag: int(manifest.indices(tag).size) for tag in data_mod.SPLIT_TAGS}
    print(f"wrote {manifest.size} samples ({counts['train']} train / "
          f"{counts['val']} val / {counts['test']} test) to {args.out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    resolved = _resolve(args, ("run", "swarm", "train"))
    manifest = data_mod.load_dataset(args.data)
    swarm_cfg = _swarm_config(resolved)
    train_cfg = _train_config(resolved)
    result = topology.optimize_topology(manifest, swarm_cfg, train_cfg,
                                        workers=resolved["run"]["threads"])
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(args.out, resolved)
    _write_text(os.path.join(args.out, "history.jsonl"), result.history.to_jsonl())
    report = result.report
    best = {
        "score": report.score,
        "fused_loss": report.fused_loss,
        "structure_loss": report.structure_loss,
        "texture_loss": report.texture_loss,
        "root": report.tree.root,
        "edges": [list(e) for e in report.tree.edges],
        "tokens": list(report.sequence.tokens),
        "weights": [float(v) for v in result.weights],
    }
    _write_text(os.path.join(args.out, "best.json"),
                json.dumps(best, indent=2, sort_keys=True) + "\n")
    # snapshot trees rendered at the mean train-split landmark positions
    mean_coords = np.clip(
        manifest.coords()[manifest.indices("train")].mean(axis=0), 0.0, 1.0)
    layout = LandmarkSet(mean_coords)
    by_iteration = {r.iteration: r for r in result.history.records}
    from .graph import SpanningTree
    for it in swarm_cfg.snapshot_iterations:
        record = by_iteration.get(it)
        if record is None:
            continue
        tree = SpanningTree.from_edges(layout.n, record.edges, report.tree.root)
        _write_text(os.path.join(args.out, f"tree-iter-{it:04d}.dot"),
                    tree_to_dot(tree, layout))
    for r in result.history.records:
        print(f"iteration {r.iteration}: best objective {r.best_score:.6f}")
    print(f"best tree edges: {best['edges']}")
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = _resolve(args, ("run", "train"))
    manifest = data_mod.load_dataset(args.data)
    n = manifest.landmark_count
    if args.tree:
        sequence = _load_tree_file(args.tree, n)
    elif args.random_tree:
        rng = np.random.default_rng(pipeline.derive_seed(resolved["run"]["seed"],
                                                         "random-tree"))
        root = medoid_root(LandmarkSet(
            manifest.coords()[manifest.indices("train")].mean(axis=0)))
        sequence = preorder_traverse(prim_mst(n, rng.uniform(size=num_edges(n)), root))
    else:
        raise UsageError("provide --tree FILE or --random-tree")
    cfg = _train_config(resolved)
    trained, curves = pipeline.train(manifest, sequence, cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(args.out, resolved)
    pipeline.save_model(os.path.join(args.out, "checkpoint.npz"), trained)
    _write_text(os.path.join(args.out, "curves.csv"), pipeline.curves_csv(curves))
    final_train = curves["train"][-1]
    final_val = curves["val"][-1] if curves["val"] else float("nan")
    print(f"trained {cfg.epochs} epochs: train loss {final_train:.6f}, "
          f"val loss {final_val:.6f}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.npz')}")
    return EXIT_OK


def _report_csv(report: pipeline.EvalReport) -> str:
    lines = ["metric,value", f"recognition_rate,{report.recognition_rate!r}"]
    f1 = report.f1_scores()
    support = report.support
    for c in range(report.confusion.shape[0]):
        lines.append(f"f1_class_{c},{float(f1[c])!r}")
        lines.append(f"support_class_{c},{int(support[c])}")
    return "\n".join(lines) + "\n"


def _confusion_csv(report: pipeline.EvalReport) -> str:
    return "\n".join(",".join(str(int(v)) for v in row)
                     for row in report.confusion) + "\n"


def cmd_eval(args) -> int:
    resolved = _resolve(args, ("run",))
    manifest = data_mod.load_dataset(args.data)
    trained = pipeline.load_model(args.checkpoint)
    tag = None if args.split == "all" else args.split
    report = pipeline.evaluate(trained, manifest, tag)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(args.out, resolved)
    _write_text(os.path.join(args.out, "report.csv"), _report_csv(report))
    _write_text(os.path.join(args.out, "confusion.csv"), _confusion_csv(report))
    print(f"recognition rate: {report.recognition_rate:.2f}")
    f1 = report.f1_scores()
    for c, (score, count) in enumerate(zip(f1, report.support)):
        flag = "  (no support)" if count == 0 else ""
        print(f"class {c}: f1 {score:.4f}, support {int(count)}{flag}")
    print("confusion matrix (rows true, columns predicted):")
    for row in report.confusion:
        print("  " + " ".join(f"{int(v):4d}" for v in row))
    return EXIT_OK


def cmd_ablate(args) -> int:
    resolved = _resolve(args, ("run", "train"))
    manifest = data_mod.load_dataset(args.data)
    sequence = _load_tree_file(args.tree, manifest.landmark_count)
    cfg = _train_config(resolved)
    report = pipeline.ablate(manifest, sequence, cfg, eval_tag=args.split)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(args.out, resolved)
    lines = ["removed,recognition_rate,drop"]
    for rec in report.as_records():
        lines.append(f"{rec['removed']},{rec['recognition_rate']!r},{rec['drop']!r}")
    _write_text(os.path.join(args.out, "ablation.csv"), "\n".join(lines) + "\n")
    print(f"full model recognition rate: {report.full_recognition_rate:.2f}")
    print("(variants b-d reuse the learned tree; variant a draws a random one)")
    for rec in report.as_records():
        print(f"removed {rec['removed']}: rr {rec['recognition_rate']:.2f} "
              f"(drop {rec['drop']:.2f})")
    return EXIT_OK


def cmd_bench(args) -> int:
    resolved = _resolve(args, ("run", "train"))
    manifest = data_mod.load_dataset(args.data)
    cfg = _train_config(resolved)
    result = pipeline.bench_random_trees(manifest, cfg, count=args.count,
                                         seed=resolved["run"]["seed"],
                                         eval_tag=args.split)
    os.makedirs(args.out, exist_ok=True)
    _write_effective_config(args.out, resolved)
    lines = ["tree,recognition_rate,edges"]
    for k, (rate, tree) in enumerate(zip(result.rates, result.trees)):
        edges = ";".join(f"{i}-{j}" for i, j in tree.edges)
        lines.append(f"{k},{rate!r},{edges}")
    _write_text(os.path.join(args.out, "random-trees.csv"), "\n".join(lines) + "\n")
    for k, rate in enumerate(result.rates):
        print(f"tree {k}: rr {rate:.2f}")
    s = result.summary()
    print(f"random trees: min {s['min']:.2f}, median {s['median']:.2f}, "
          f"max {s['max']:.2f}, spread {s['spread']:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    resolved = _resolve(args, ("run",))
    errors = component_gradient_checks(eps=args.eps, seed=resolved["run"]["seed"],
                                       corrupt=args.corrupt)
    print(f"central differences at eps={args.eps!r}, threshold {args.threshold!r}")
    failed = []
    for name in GRADCHECK_COMPONENTS:
        err = errors[name]
        status = "ok" if err < args.threshold else "FAIL"
        print(f"{name}: max relative error {err:.3e} {status}")
        if err >= args.threshold:
            failed.append(name)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_effective_config(args.out, resolved)
        lines = ["component,max_relative_error"]
        lines += [f"{name},{errors[name]!r}" for name in GRADCHECK_COMPONENTS]
        _write_text(os.path.join(args.out, "gradcheck.csv"), "\n".join(lines) + "\n")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="facetree",
                     description="Tree-topology learning over 2-D landmarks with "
                                 "a two-stream sequence classifier.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sections, need_out=True):
        p.add_argument("--config", default=None, help="INI config file")
        if need_out:
            p.add_argument("--out", required=True, help="run directory for artifacts")
        _add_section_flags(p, sections)

    p = sub.add_parser("synth", parents=[], help="generate a planted-signal dataset")
    common(p, ("run", "synth"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("optimize", help="search for a tree topology")
    p.add_argument("--data", required=True, help="dataset directory")
    common(p, ("run", "swarm", "train"))
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("train", help="train on a frozen traversal")
    p.add_argument("--data", required=True)
    p.add_argument("--tree", default=None, help="best.json from optimize")
    p.add_argument("--random-tree", action="store_true",
                   help="use a seeded random tree instead")
    common(p, ("run", "train"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    common(p, ("run",))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="component-removal study")
    p.add_argument("--data", required=True)
    p.add_argument("--tree", required=True, help="best.json from optimize")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    common(p, ("run", "train"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-random-trees",
                       help="topology sensitivity across random trees")
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    common(p, ("run", "train"))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--corrupt", default=None, choices=list(GRADCHECK_COMPONENTS),
                   help="testing hook: corrupt one analytic gradient")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--out", default=None, help="optional run directory")
    _add_section_flags(p, ("run",))
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"facetree: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except data_mod.FormatError as exc:
        print(f"facetree: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"facetree: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"facetree: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
