"""Command-line entry point: gen-synth | train | eval-sts | eval-transfer | ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .checkpoint import FORMAT_VERSION, Checkpoint
from .data import SynthSpec, gen_synth, load_manifest, load_nli, load_sts, write_nli, write_probe_jsonl, write_sts
from .errors import CembError, DataError, UsageError
from .evaluation import EvalReport, eval_sts_tasks, eval_transfer, format_table
from .losses import Hyperparams
from .training import AUGMENT, CE_ONLY, COMBINED, TrainConfig, train

log = logging.getLogger("cemb")

MODE_NAMES = {"ce": CE_ONLY, "augment": AUGMENT, "combined": COMBINED}
# toy encoders are trained from scratch, so the synth preset raises lr/epochs above the fine-tuning defaults
PRESETS = {
    "finetune": {"learning_rate": 2e-5, "epochs": 1},
    "synth": {"learning_rate": 1e-3, "epochs": 3},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _cap(text: str):
    if text.lower() == "all":
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive int or 'all', got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive int or 'all', got {text!r}")
    return value


def _bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="NLI JSONL training file")
    p.add_argument("--mode", choices=sorted(MODE_NAMES), default="combined")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="SCL weight (default 0.5 in combined mode)")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--n-pos", type=_cap, default=None, help="positive cap per anchor, int or 'all'")
    p.add_argument("--n-neg", type=_cap, default=None, help="negative cap per anchor, int or 'all'")
    p.add_argument("--normalize", type=_bool, default=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="finetune",
                   help="lr/epoch defaults; explicit --lr/--epochs win")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-grad-norm", type=float, default=None)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--max-seq-len", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cemb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cemb {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a synthetic NLI corpus, STS file and probe task")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--topics", type=int, default=4)
    g.add_argument("--premises", type=int, default=50, help="training premises per topic")
    g.add_argument("--hypotheses", type=int, default=3, help="hypotheses per premise")
    g.add_argument("--sts-premises", type=int, default=20, help="held-out STS premises per topic")
    g.add_argument("--probe", type=int, default=50, help="probe sentences per topic")
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train an encoder and write a checkpoint")
    _add_train_flags(t)
    t.add_argument("--out", required=True, help="checkpoint path")

    s = sub.add_parser("eval-sts", help="weighted Spearman on STS TSV files")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, nargs="+", help="one TSV per STS task")
    s.add_argument("--report", required=True, help="JSON report path; a .txt table is written beside it")

    e = sub.add_parser("eval-transfer", help="10-fold logistic probes from a task manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--tasks", required=True, help="task manifest JSON")
    e.add_argument("--report", required=True)
    e.add_argument("--seed", type=int, default=0)

    a = sub.add_parser("ablate", help="train+evaluate the cross product of a hyperparameter grid")
    _add_train_flags(a)
    a.add_argument("--grid", required=True, help='JSON (inline or file) e.g. {"lambda": [0.1, 0.3]}')
    a.add_argument("--sts", required=True, nargs="+", help="STS TSV files")
    a.add_argument("--tasks", default=None, help="optional probe task manifest")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--parallel", type=int, default=1, help="worker processes (default serial)")
    return parser


def resolve_train_config(args) -> TrainConfig:
    mode = MODE_NAMES[args.mode]
    if mode != COMBINED and args.lam not in (None, 0.0):
        raise UsageError(f"--lambda {args.lam} conflicts with --mode {args.mode} (pure cross-entropy)")
    lam = 0.5 if args.lam is None else args.lam
    if mode != COMBINED:
        lam = 0.0
    preset = PRESETS[args.preset]
    return TrainConfig(
        mode=mode,
        hyperparams=Hyperparams(lam=lam, tau=args.tau, n_pos_cap=args.n_pos, n_neg_cap=args.n_neg,
                                normalize_embeddings=args.normalize),
        batch_size=args.batch_size,
        epochs=args.epochs if args.epochs is not None else preset["epochs"],
        learning_rate=args.lr if args.lr is not None else preset["learning_rate"],
        warmup_fraction=args.warmup,
        max_grad_norm=args.max_grad_norm,
        seed=args.seed,
        d_model=args.d_model, n_layers=args.layers, n_heads=args.heads, d_ff=args.d_ff,
        max_seq_len=args.max_seq_len, dropout_rate=args.dropout,
    )


def write_manifest(path: Path, command: str, argv, **details) -> None:
    manifest = {"command": command, "argv": list(argv), "version": __version__,
                "checkpoint_format": FORMAT_VERSION, **details}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_report(report: EvalReport, path: Path, row_name: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    path.with_suffix(".txt").write_text(report.to_table(row_name), encoding="utf-8")


def _sts_tasks(paths) -> dict:
    tasks = {}
    for p in paths:
        name = Path(p).stem
        if name in tasks:
            raise UsageError(f"duplicate STS task name {name!r}")
        tasks[name] = load_sts(p)
    return tasks


def cmd_gen_synth(args, argv) -> None:
    spec = SynthSpec(n_topics=args.topics, premises_per_topic=args.premises, hypotheses_per_premise=args.hypotheses,
                     sts_premises_per_topic=args.sts_premises, probe_per_topic=args.probe, seed=args.seed)
    corpus = gen_synth(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nli(corpus.train, out / "train.jsonl")
    write_sts(corpus.sts, out / "sts.tsv")
    write_probe_jsonl(corpus.probe, out / "probe.jsonl")
    tasks = {"tasks": [{"name": corpus.probe.name, "path": "probe.jsonl", "n_classes": corpus.probe.n_classes}]}
    (out / "tasks.json").write_text(json.dumps(tasks, indent=2) + "\n", encoding="utf-8")
    spec_dict = {k: v for k, v in asdict(spec).items() if k != "themes"}
    write_manifest(out / "manifest.json", "gen-synth", argv, synth=spec_dict,
                   outputs=["train.jsonl", "sts.tsv", "probe.jsonl", "tasks.json"])
    print(f"wrote {len(corpus.train)} NLI pairs, {len(corpus.sts)} STS pairs, "
          f"{len(corpus.probe.examples)} probe examples to {out}")


def cmd_train(args, argv) -> None:
    config = resolve_train_config(args)
    corpus = load_nli(args.data)
    ckpt = train(corpus, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    write_manifest(Path(f"{out}.manifest.json"), "train", argv, config=config.to_dict(), seed=config.seed,
                   data=str(args.data), steps=ckpt.step)
    print(f"trained {ckpt.step} steps ({config.mode}, lambda={config.effective_lambda}); checkpoint -> {out}")


def cmd_eval_sts(args, argv) -> None:
    ckpt = Checkpoint.load(args.ckpt)
    report = eval_sts_tasks(_sts_tasks(args.data), ckpt)
    path = Path(args.report)
    _write_report(report, path, Path(args.ckpt).stem)
    write_manifest(Path(f"{path}.manifest.json"), "eval-sts", argv, ckpt=str(args.ckpt), data=list(args.data))
    print(report.to_table(Path(args.ckpt).stem), end="")


def cmd_eval_transfer(args, argv) -> None:
    ckpt = Checkpoint.load(args.ckpt)
    report = eval_transfer(load_manifest(args.tasks), ckpt, seed=args.seed)
    path = Path(args.report)
    _write_report(report, path, Path(args.ckpt).stem)
    write_manifest(Path(f"{path}.manifest.json"), "eval-transfer", argv, ckpt=str(args.ckpt),
                   tasks=str(args.tasks), seed=args.seed)
    print(report.to_table(Path(args.ckpt).stem), end="")


GRID_KEYS = {"lambda": "lam", "tau": "tau", "n-pos": "n_pos", "n_pos": "n_pos", "n-neg": "n_neg", "n_neg": "n_neg"}


def parse_grid(text: str) -> list[dict]:
    """Cross product of a {"lambda": [...], "tau": [...], "n-pos": [...], "n-neg": [...]} grid."""
    source = Path(text)
    raw = source.read_text(encoding="utf-8") if not text.lstrip().startswith("{") and source.exists() else text
    try:
        grid = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--grid is not valid JSON: {exc.msg}") from None
    if not isinstance(grid, dict) or not grid:
        raise UsageError("--grid must be a nonempty JSON object")
    axes = []
    for key, values in grid.items():
        if key not in GRID_KEYS:
            raise UsageError(f"unknown grid key {key!r}; expected one of lambda, tau, n-pos, n-neg")
        if not isinstance(values, list) or not values:
            raise UsageError(f"grid values for {key!r} must be a nonempty list")
        if GRID_KEYS[key] in ("n_pos", "n_neg"):
            values = [_cap(str(v)) for v in values]
        axes.append([(GRID_KEYS[key], v) for v in values])
    return [dict(combo) for combo in itertools.product(*axes)]


def run_name(config: TrainConfig) -> str:
    hp = config.hyperparams
    policy = config.policy.name
    if config.mode == CE_ONLY:
        return "ce-baseline"
    if config.mode == AUGMENT:
        return f"{policy}-augment"
    return f"{policy}-lambda{hp.lam:g}-tau{hp.tau:g}"


def _ablation_run(config: TrainConfig, corpus, sts_tasks, probe_tasks, ckpt_path):
    ckpt = train(corpus, config)
    ckpt.save(ckpt_path)
    sts = eval_sts_tasks(sts_tasks, ckpt)
    transfer = eval_transfer(probe_tasks, ckpt) if probe_tasks else None
    return sts, transfer


def cmd_ablate(args, argv) -> None:
    grid = parse_grid(args.grid)
    base_args = vars(args).copy()
    configs = []
    for point in grid:
        merged = argparse.Namespace(**{**base_args, **point})
        configs.append(resolve_train_config(merged))
    corpus = load_nli(args.data)
    sts_tasks = _sts_tasks(args.sts)
    probe_tasks = load_manifest(args.tasks) if args.tasks else []
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    names = [run_name(c) for c in configs]
    paths = [out / "checkpoints" / f"{i:03d}-{n}.ckpt" for i, n in enumerate(names)]
    jobs = [(c, corpus, sts_tasks, probe_tasks, p) for c, p in zip(configs, paths)]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_ablation_run, *zip(*jobs)))
    else:
        results = [_ablation_run(*job) for job in jobs]

    rows = []
    for point, config, name, path, (sts, transfer) in zip(grid, configs, names, paths, results):
        rows.append({"name": name, "grid_point": {k: v for k, v in point.items()}, "config": config.to_dict(),
                     "checkpoint": str(path.relative_to(out)), "sts": sts.to_dict(),
                     "transfer": transfer.to_dict() if transfer else None})
    (out / "ablation.json").write_text(json.dumps({"rows": rows}, indent=2) + "\n", encoding="utf-8")
    text = "STS (weighted Spearman x100)\n" + format_table(names, [r[0] for r in results])
    if probe_tasks:
        text += "\nTransfer (probe accuracy)\n" + format_table(names, [r[1] for r in results])
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    write_manifest(out / "manifest.json", "ablate", argv, grid=grid, base_config=configs[0].to_dict(),
                   data=str(args.data), sts=list(args.sts), tasks=args.tasks)
    print(text, end="")


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval-sts": cmd_eval_sts,
    "eval-transfer": cmd_eval_transfer,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, argv)
    except CembError as exc:
        print(f"cemb {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"cemb {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
