"""Command-line pipeline: gen-data, pretrain, finetune, eval, probe, report, fluctuation.

Exit codes: 0 success, 1 stage failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import checkpoint as ckpt_io
from .adapters import count_tunable
from .bias_eval import fluctuation, load_report, probe_positions, render_report
from .config import ConfigError, RunConfig, load_config
from .prompts import instance_text
from .tasks import (biased_distribution, gen_curriculum, gen_dataset, gen_instance, instance_seed,
                    load_dataset, permute_augment, save_dataset, uniform_distribution)

log = logging.getLogger("posbias")


class StageError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="posbias", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def staged(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", "-c", required=True, help="INI run configuration")
        return sp

    staged("gen-data", "write pretraining and permutation-augmented fine-tuning datasets")
    staged("pretrain", "train the base model on the slot-biased dataset")
    sp = staged("finetune", "train an adapter over the frozen base")
    sp.add_argument("--kind", choices=("LE", "PT", "LowRank"), help="override [adapter] kind")
    sp = staged("eval", "sweep truth positions through the base or an adapted model")
    sp.add_argument("--adapter", default="none", choices=("none", "LE", "PT", "LowRank"))
    sp = staged("probe", "probe a chat-completion endpoint")
    sp.add_argument("--strategy", default="zero-shot",
                    choices=("zero-shot", "few-shot", "hierarchical"))
    sp.add_argument("--shots", type=int, default=3)
    sp.add_argument("--groups", type=int, default=5)
    sp.add_argument("--n-per-slot", type=int, help="override [eval] n_per_slot")

    sp = sub.add_parser("report", help="re-render a report JSON as CSV files")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--run-id", default="report")

    sp = sub.add_parser("fluctuation", help="fluctuation (%%) of comma-separated accuracies")
    sp.add_argument("--accs", required=True)
    return p


def _artifact(cfg: RunConfig, name: str) -> Path:
    return cfg.run_dir / name


def _fresh(path: Path) -> Path:
    if path.exists():
        raise StageError(f"{path} already exists; run directories are append-only")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; run `{stage}` first")
    return path


def _sidecar(cfg: RunConfig, stage: str, **extra) -> None:
    meta_path = cfg.run_dir / "run_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"stages": []}
    meta["stages"].append({"stage": stage, "finished_at": time.time(),
                           "config": str(cfg.source) if cfg.source else None, **extra})
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")


def cmd_gen_data(cfg: RunConfig) -> str:
    pre = _fresh(_artifact(cfg, "data/pretrain.jsonl"))
    fin = _fresh(_artifact(cfg, "data/finetune.jsonl"))
    d = cfg.data
    if d.k_min is None or d.k_min == cfg.task.K:
        pre_data = gen_dataset(cfg.task, biased_distribution(cfg.task.K, d.head_prob),
                               d.n_pretrain, cfg.seed)
    else:
        pre_data = gen_curriculum(cfg.task, d.k_min, d.head_prob, d.n_pretrain, cfg.seed)
    save_dataset(pre, pre_data)
    src = gen_dataset(cfg.task, uniform_distribution(cfg.task.K), d.n_finetune, cfg.seed + 1)
    m = d.copies if d.copies is not None else cfg.task.K
    aug = permute_augment(src, m, d.scheme, cfg.seed + 2)
    save_dataset(fin, aug)
    _sidecar(cfg, "gen-data")
    return f"gen-data: {d.n_pretrain} pretraining, {len(aug)} augmented fine-tuning instances"


def cmd_pretrain(cfg: RunConfig) -> str:
    from .model import param_hash
    from .trainer import pretrain

    data = load_dataset(_need(_artifact(cfg, "data/pretrain.jsonl"), "gen-data"))
    out = _fresh(_artifact(cfg, "base.ckpt"))
    metrics = _fresh(_artifact(cfg, "metrics_pretrain.jsonl"))
    ck = pretrain(cfg.model, cfg.task, data, cfg.train, init_seed=cfg.model_seed,
                  metrics_path=metrics)
    ckpt_io.save(out, ck)
    _sidecar(cfg, "pretrain")
    return f"pretrain: {ck.step} steps, final loss {ck.meta['final_loss']:.4f}, hash {param_hash(ck.params)[:12]}"


def cmd_finetune(cfg: RunConfig, kind: str | None) -> str:
    from dataclasses import replace

    from .trainer import finetune

    spec = replace(cfg.adapter, kind=kind) if kind else cfg.adapter
    base = ckpt_io.load(_need(_artifact(cfg, "base.ckpt"), "pretrain"))
    data = load_dataset(_need(_artifact(cfg, "data/finetune.jsonl"), "gen-data"))
    out = _fresh(_artifact(cfg, f"adapter_{spec.kind}.ckpt"))
    metrics = _fresh(_artifact(cfg, f"metrics_finetune_{spec.kind}.jsonl"))
    ad = finetune(base, spec, cfg.task, data, cfg.finetune, init_seed=cfg.model_seed,
                  metrics_path=metrics)
    ckpt_io.save(out, ad)
    _sidecar(cfg, f"finetune:{spec.kind}")
    return (f"finetune {spec.kind}: {ad.step} steps, {count_tunable(spec, cfg.model)} tunable, "
            f"final loss {ad.meta['final_loss']:.4f}")


def cmd_eval(cfg: RunConfig, adapter: str) -> str:
    from .trainer import ModelPredictor

    base = ckpt_io.load(_need(_artifact(cfg, "base.ckpt"), "pretrain"))
    ad = None
    if adapter != "none":
        ad = ckpt_io.load(_need(_artifact(cfg, f"adapter_{adapter}.ckpt"), "finetune"))
    tag = f"eval_{'base' if ad is None else adapter}"
    out_dir = cfg.run_dir / "reports"
    if (out_dir / f"{tag}_report.json").exists():
        raise StageError(f"{out_dir / (tag + '_report.json')} already exists; run directories are append-only")
    pred = ModelPredictor(base, cfg.task, ad)
    rep = probe_positions(pred, cfg.task, cfg.eval.n_per_slot, cfg.eval.seed,
                          slots=cfg.eval.slots, provenance=f"{cfg.run_id}:{tag}")
    render_report(rep, out_dir, tag)
    _sidecar(cfg, tag)
    return (f"{tag}: mean accuracy {rep.mean_accuracy:.4f}, "
            f"fluctuation {rep.fluctuation:.2f}%")


def cmd_probe(cfg: RunConfig, args) -> str:
    from .probe import Strategy, run_probe
    from .prompts import Shot

    task = cfg.task
    n = args.n_per_slot or cfg.eval.n_per_slot
    slots = list(cfg.eval.slots or range(1, task.K + 1))
    by_slot = {
        c: [instance_text(gen_instance(task, c, instance_seed(cfg.eval.seed, c * 1_000_003 + i)), task)
            for i in range(n)]
        for c in slots
    }
    shots = ()
    if args.strategy == "few-shot":
        shots = tuple(
            Shot(instance_text(gen_instance(task, 1 + i % task.K, instance_seed(cfg.seed + 17, i)), task),
                 1 + i % task.K)
            for i in range(args.shots))
    strategy = Strategy(args.strategy, shots, args.groups)
    tag = f"probe_{args.strategy}"
    out_dir = cfg.run_dir / "reports"
    transcript = _fresh(cfg.run_dir / f"transcript_{args.strategy}.jsonl")
    rep = run_probe(cfg.probe, strategy, by_slot, task.K, transcript_path=transcript, seed=cfg.seed)
    render_report(rep, out_dir, tag)
    _sidecar(cfg, tag)
    return f"{tag}: mean accuracy {rep.mean_accuracy:.4f}, fluctuation {rep.fluctuation:.2f}%"


def cmd_report(args) -> str:
    rep = load_report(args.input)
    paths = render_report(rep, args.out, args.run_id)
    return f"report: wrote {', '.join(str(p) for p in paths.values())}"


def run(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    if args.command == "fluctuation":
        try:
            accs = [float(v) for v in args.accs.split(",") if v.strip()]
            print(f"{fluctuation(accs):.2f}")
        except ValueError as e:
            print(f"posbias fluctuation: {e}", file=sys.stderr)
            return 2
        return 0

    try:
        if args.command == "report":
            print(cmd_report(args))
            return 0
        try:
            cfg = load_config(args.config)
        except ConfigError as e:
            print(f"posbias: config error: {e}", file=sys.stderr)
            return 2
        if args.command == "gen-data":
            msg = cmd_gen_data(cfg)
        elif args.command == "pretrain":
            msg = cmd_pretrain(cfg)
        elif args.command == "finetune":
            msg = cmd_finetune(cfg, args.kind)
        elif args.command == "eval":
            msg = cmd_eval(cfg, args.adapter)
        else:
            msg = cmd_probe(cfg, args)
    except (StageError, OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"posbias {args.command}: {e}", file=sys.stderr)
        return 1
    print(msg)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
