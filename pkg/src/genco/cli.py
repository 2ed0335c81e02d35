"""``genco`` command line: synth | pretrain | finetune-cls | finetune-seg | eval | gradcheck | ablate | report.

Exit codes: 0 ok, 1 config error, 2 runtime error, 3 oracle failure. Errors go
to stderr as one line of JSON.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import numcore as nc
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("genco")

EXIT_CONFIG, EXIT_RUNTIME, EXIT_ORACLE = 1, 2, 3


class OracleFailure(RuntimeError):
    def __init__(self, message: str, details: dict):
        self.details = details
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, not argparse's exit status 2
    def error(self, message):
        raise ConfigError("<argv>", message)


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
    return path


def _out_dir(args, cfg: RunConfig, name: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output.dir) / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(cfg: RunConfig) -> dict:
    return {"config": cfg.resolved(), "seed": cfg.seed}


def _model_label(checkpoint) -> str:
    _, meta = nc.load_checkpoint(checkpoint)
    pc = meta.get("config", {})
    arm = "MoCo" if pc.get("no_generator") else "GenCo"
    widths = "-".join(str(w) for w in pc.get("encoder", {}).get("stage_widths", []))
    return f"{arm} encoder {widths}".strip()


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> dict:
    from .dataio import synth_dataset
    out = Path(args.out) if args.out else Path(cfg.data.path)
    synth_dataset(cfg.synth_spec(), out, provenance=_provenance(cfg))
    return {"task": "synth", "dataset": str(out), "spec": cfg.data.model_dump(), **_provenance(cfg)}


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    from .pretrain import pretrain_run
    out = _out_dir(args, cfg, "pretrain")
    data = args.data or cfg.data.path
    pcfg = cfg.pretrain_config(dataset=data)
    pretrain_run(pcfg, out, resume=args.resume, provenance=_provenance(cfg))
    summary = json.loads((out / "summary.json").read_text())
    epochs = summary["epochs"]
    metrics = {"task": "pretrain", "epochs": epochs, "checkpoint": "final",
               "first_epoch_loss": epochs[0]["mean_loss"] if epochs else None,
               "final_epoch_loss": epochs[-1]["mean_loss"] if epochs else None,
               **_provenance(cfg)}
    write_json(out / "metrics.json", metrics)
    return metrics


def cmd_finetune_cls(args, cfg: RunConfig) -> dict:
    from .dataio import load_dataset
    from .fewshot import run_classification_trials
    out = _out_dir(args, cfg, "finetune-cls")
    fs = cfg.fewshot
    k = args.k_shot or fs.k_shot
    res = run_classification_trials(args.checkpoint, load_dataset(args.data or cfg.data.path), fs.n_way, k,
                                    cfg.classifier_config(), cfg.seed, fs.trials, fs.query_per_class,
                                    out_dir=out, meta=_provenance(cfg))
    res.update(model=_model_label(args.checkpoint), checkpoint=str(args.checkpoint), **_provenance(cfg))
    write_json(out / "metrics.json", res)
    return res


def cmd_finetune_seg(args, cfg: RunConfig) -> dict:
    from .dataio import load_dataset
    from .fewshot import run_segmentation_trials
    out = _out_dir(args, cfg, "finetune-seg")
    fs = cfg.fewshot
    k = args.k_shot or fs.k_shot
    res = run_segmentation_trials(args.checkpoint, load_dataset(args.data or cfg.data.path), k,
                                  cfg.seg_config(), cfg.seed, fs.trials, out_dir=out, meta=_provenance(cfg))
    res.update(model=_model_label(args.checkpoint), checkpoint=str(args.checkpoint), **_provenance(cfg))
    write_json(out / "metrics.json", res)
    return res


def cmd_eval(args, cfg: RunConfig) -> dict:
    from .dataio import load_dataset
    from .fewshot import evaluate_finetuned_dir
    out = _out_dir(args, cfg, "eval")
    res = evaluate_finetuned_dir(args.checkpoint, load_dataset(args.data or cfg.data.path), args.finetuned,
                                 cfg.fewshot.query_per_class)
    res.update(model=_model_label(args.checkpoint), checkpoint=str(args.checkpoint),
               finetuned=str(args.finetuned), **_provenance(cfg))
    write_json(out / "metrics.json", res)
    return res


def cmd_gradcheck(args, cfg: RunConfig) -> dict:
    from .oracles import TOLERANCE, run_suite
    errors = run_suite(cfg.seed)
    for name, err in errors.items():
        print(f"{name}: max relative error {err:.3e}")
    res = {"task": "gradcheck", "tolerance": TOLERANCE, "max_relative_error": errors,
           "passed": all(e <= TOLERANCE for e in errors.values()), **_provenance(cfg)}
    if args.out:
        write_json(_out_dir(args, cfg, "gradcheck") / "metrics.json", res)
    if not res["passed"]:
        bad = {k: v for k, v in errors.items() if v > TOLERANCE}
        raise OracleFailure(f"gradient check exceeded tolerance {TOLERANCE}", bad)
    return res


def cmd_ablate(args, cfg: RunConfig) -> dict:
    from .dataio import load_dataset
    from .fewshot import run_classification_trials
    from .pretrain import pretrain_run
    from .report import ARMS, render_ablation
    out = _out_dir(args, cfg, "ablate")
    data_path = args.data or cfg.data.path
    dataset = load_dataset(data_path)
    prov = _provenance(cfg)
    moco = pretrain_run(cfg.pretrain_config(dataset=data_path, no_generator=True), out / "pretrain_moco",
                        dataset=dataset, provenance=prov)
    gen = pretrain_run(cfg.pretrain_config(dataset=data_path, no_generator=False), out / "pretrain_genco",
                       dataset=dataset, provenance=prov)
    arms = {"no_generator": (moco, False), "generator_pretrain_only": (gen, False), "genco": (gen, True)}
    fs = cfg.fewshot
    cells = {a: {} for a in ARMS}
    for k in fs.ablation_shots:
        for arm in ARMS:
            ckpt, enrich = arms[arm]
            r = run_classification_trials(ckpt, dataset, fs.n_way, k, cfg.classifier_config(enrich=enrich),
                                          cfg.seed, fs.trials, fs.query_per_class)
            cells[arm][str(k)] = {"mean": r["mean"], "std": r["std"], "trials": r["trials"]}
            log.info("ablate %s %d-shot: %.4f", arm, k, r["mean"])
    res = {"task": "ablation", "n_way": fs.n_way, "shots": list(fs.ablation_shots), "arms": list(ARMS),
           "cells": cells, **prov}
    write_json(out / "metrics.json", res)
    table = render_ablation(res)
    (out / "ablation.md").write_text(table)
    print(table, end="")
    return res


def cmd_report(args, cfg: RunConfig) -> dict:
    from .report import render_files
    text = render_files(args.metrics)
    print(text, end="")
    if args.out:
        out = _out_dir(args, cfg, "report")
        (out / "report.md").write_text(text)
    return {"task": "report"}


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune-cls": cmd_finetune_cls,
    "finetune-seg": cmd_finetune_seg, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="root seed, overrides the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="genco", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("pretrain", parents=[common], help="stage-1 contrastive pretraining")
    p.add_argument("--data", help="dataset directory (default: data.path)")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    for name, what in (("finetune-cls", "linear-head classification"), ("finetune-seg", "decoder segmentation")):
        p = sub.add_parser(name, parents=[common], help=f"few-shot {what} trials")
        p.add_argument("--checkpoint", required=True, help="pretraining checkpoint directory")
        p.add_argument("--data", help="dataset directory (default: data.path)")
        p.add_argument("--k-shot", type=int, help="overrides fewshot.k_shot")
    p = sub.add_parser("eval", parents=[common], help="re-score saved fine-tuned trials")
    p.add_argument("--checkpoint", required=True, help="pretraining checkpoint directory")
    p.add_argument("--finetuned", required=True, help="directory holding trial_XX checkpoints")
    p.add_argument("--data", help="dataset directory (default: data.path)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient oracle suite")
    p = sub.add_parser("ablate", parents=[common], help="three-arm generator ablation over 10/5/1 shots")
    p.add_argument("--data", help="dataset directory (default: data.path)")
    p = sub.add_parser("report", parents=[common], help="render metrics JSON to markdown")
    p.add_argument("metrics", nargs="+", help="metrics JSON files")
    return parser


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        nc.configure_threads()
        cfg = load_config(args.config, args.seed)
        k = getattr(args, "k_shot", None)
        if k is not None and k < 1:
            raise ConfigError("--k-shot", "must be positive")
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc.message, path=exc.path)
    except OracleFailure as exc:
        return _fail(EXIT_ORACLE, "oracle", str(exc), details=exc.details)
    except KeyboardInterrupt:
        return _fail(EXIT_RUNTIME, "runtime", "interrupted")
    except Exception as exc:  # anything else is a runtime failure
        return _fail(EXIT_RUNTIME, "runtime", str(exc) or type(exc).__name__, type=type(exc).__name__)
    return 0


if __name__ == "__main__":
    sys.exit(main())
