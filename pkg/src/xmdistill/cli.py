"""Command-line front end.

    xmdistill gen-data   --out data
    xmdistill pretrain   --config run.json --paths.dataset data/dataset.xmdd --out run
    xmdistill avg-ckpt   --paths.run_dir run --out run
    xmdistill probe      --paths.dataset data/dataset.xmdd --paths.checkpoint run/final.xmdc
    xmdistill fewshot    --paths.dataset ... --paths.checkpoint ... --fewshot.ks "[4,8,16,32]"
    xmdistill finetune   --paths.dataset ... --paths.checkpoint ... --train.total_steps 200
    xmdistill grad-check

Any config key can be given as ``--section.key value`` (JSON values, bare
strings allowed). Exit codes: 0 ok, 1 usage/config, 2 data or I/O, 3 numeric.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

from ._io import atomic_write_bytes, atomic_write_text
from .checkpoint import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint
from .config import COMMANDS, RunConfig, flags_to_layer, parse_config
from .data import generate_dataset, load_paired_dataset, write_paired_dataset
from .distill import encoder_from_checkpoint, log_line, pretrain
from .errors import ConfigError, ContractError, NumericError, XmdError
from .evaluation import MetricReport, run_finetune_head, run_probe
from .model import FileTeacher, StudentConfig, init_student
from .selfcheck import run_self_check

SIDECAR = "student_config.json"
EXIT_IO = 2


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def primary_metric(kind: str) -> str:
    return {"regression": "mae", "classification": "accuracy", "multihead": "exact_match"}[kind]


def emit_report(reports, path, csv_metrics=None) -> tuple:
    """Write reports as JSON lines to ``path`` and a ``k,seed,metric,value`` CSV beside it.

    ``csv_metrics`` restricts the CSV to the named metrics (one row per
    report each); by default every metric and variant metric gets a row.
    Returns ``(jsonl_path, csv_path)``.
    """
    if isinstance(reports, MetricReport):
        reports = [reports]
    reports = list(reports)
    if not reports:
        raise ContractError("refusing to write an empty report sweep")
    path = Path(path)
    csv_path = path.with_suffix(".csv")

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "seed", "metric", "value"])
    for rep in reports:
        prov = rep.provenance
        k = prov.get("k") if prov.get("k") is not None else "full"
        seed = prov.get("sample_seed") if prov.get("sample_seed") is not None else prov.get("seed")
        rows = dict(rep.metrics)
        for variant, metrics in sorted(rep.variants.items()):
            rows.update({f"{variant}.{m}": v for m, v in metrics.items()})
        for name in sorted(rows):
            if csv_metrics is None or name in csv_metrics:
                writer.writerow([k, "" if seed is None else seed, name, repr(float(rows[name]))])

    atomic_write_text(path, "".join(rep.to_json() + "\n" for rep in reports))
    atomic_write_text(csv_path, buf.getvalue())
    return path, csv_path


# encoder loading

def _student_config(cfg: RunConfig, checkpoint: Path | None) -> StudentConfig:
    """The sidecar beside a checkpoint wins unless student keys were given explicitly."""
    if checkpoint is not None and not any(k.startswith("student.") for k in cfg.explicit):
        sidecar = checkpoint.parent / SIDECAR
        if sidecar.exists():
            try:
                return StudentConfig(**json.loads(sidecar.read_text()))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{sidecar}: not a valid student config ({exc})") from None
    return cfg.student


def _load_encoder(cfg: RunConfig):
    ckpt_path = cfg.path("checkpoint")
    if cfg.get("eval.random_init"):
        student = _student_config(cfg, ckpt_path)
        return init_student(student, cfg.seed), {"checkpoint_step": None, "checkpoint_sha256": None}
    if ckpt_path is None:
        raise ConfigError("paths.checkpoint: required unless eval.random_init is true")
    student = _student_config(cfg, ckpt_path)
    blob = ckpt_path.read_bytes()
    ckpt = load_checkpoint(ckpt_path)
    prov = {"checkpoint_step": ckpt.step, "checkpoint_sha256": hashlib.sha256(blob).hexdigest()}
    return encoder_from_checkpoint(ckpt, student), prov


def _write_sidecar(out: Path, student: StudentConfig):
    atomic_write_text(out / SIDECAR, _dumps(student.to_dict()) + "\n")


# commands

def cmd_gen_data(cfg: RunConfig) -> dict:
    """Write a synthetic paired dataset (and optional held-out split)."""
    n, start, n_held = (cfg.get(f"data.{k}") for k in ("n_examples", "start", "heldout_examples"))
    if n < 1:
        raise ConfigError("data.n_examples: must be >= 1")
    out = {"dataset": str(cfg.out / "dataset.xmdd"), "n_examples": n}
    write_paired_dataset(cfg.out / "dataset.xmdd", generate_dataset(cfg.data, n, start))
    if n_held:
        write_paired_dataset(cfg.out / "heldout.xmdd", generate_dataset(cfg.data, n_held, start + n))
        out.update({"heldout": str(cfg.out / "heldout.xmdd"), "heldout_examples": n_held})
    return out


def cmd_pretrain(cfg: RunConfig) -> dict:
    """Distill teacher embeddings into a fresh student encoder."""
    dataset = load_paired_dataset(cfg.path("dataset"))
    heldout = load_paired_dataset(cfg.path("heldout")) if cfg.path("heldout") else None
    teacher = FileTeacher.from_dataset(dataset + (heldout or []))
    student = init_student(cfg.student, cfg.seed)
    _write_sidecar(cfg.out, cfg.student)
    result = pretrain(student, teacher, dataset, cfg.train, heldout=heldout, out_dir=cfg.out,
                      threads=cfg.threads, save_optimizer=cfg.get("train.save_optimizer"))
    final = Checkpoint(cfg.train.total_steps, dict(result.encoder.params), cfg.student.digest())
    save_checkpoint(cfg.out / "final.xmdc", final)
    summary = {"final": str(cfg.out / "final.xmdc"), "steps": cfg.train.total_steps,
               "checkpoints": len(result.checkpoints), "last_loss": result.log[-1]["loss"]}
    if result.temperature is not None:
        summary["tau"] = result.temperature
    return summary


def _checkpoint_sources(cfg: RunConfig) -> list:
    listed = cfg.get("paths.checkpoints")
    if listed:
        return [Path(p) for p in listed]
    run_dir = cfg.path("run_dir")
    if run_dir is None:
        raise ConfigError("paths.run_dir: required when paths.checkpoints is empty")
    found = sorted(run_dir.glob("ckpt_*.xmdc"))
    if not found:
        raise ConfigError(f"paths.run_dir: no ckpt_*.xmdc files in {run_dir}")
    return found[-cfg.train.average_last_k:]


def cmd_avg_ckpt(cfg: RunConfig) -> dict:
    """Average the last K checkpoints of a run."""
    sources = _checkpoint_sources(cfg)
    avg = average_checkpoints([load_checkpoint(p) for p in sources])
    target = cfg.out / "averaged.xmdc"
    save_checkpoint(target, avg)
    sidecar = sources[0].parent / SIDECAR
    if sidecar.exists() and sidecar.resolve() != (cfg.out / SIDECAR).resolve():
        atomic_write_bytes(cfg.out / SIDECAR, sidecar.read_bytes())
    load_checkpoint(target)
    return {"averaged": str(target), "sources": [p.name for p in sources], "step": avg.step}


def _probe_provenance(cfg: RunConfig, prov: dict) -> dict:
    return {**prov, "seed": cfg.seed, "ridge_target": cfg.get("ridge.target")}


def cmd_probe(cfg: RunConfig) -> dict:
    """Fit a ridge probe on frozen pooled embeddings."""
    encoder, prov = _load_encoder(cfg)
    dataset = load_paired_dataset(cfg.path("dataset"))
    report = run_probe(encoder, dataset, cfg.task, cfg.ridge, split_seed=cfg.get("eval.split_seed"),
                       ridge_target=cfg.get("ridge.target"), threads=cfg.threads,
                       provenance=_probe_provenance(cfg, prov))
    paths = emit_report(report, cfg.out / "probe.jsonl")
    return {"report": str(paths[0]), "metrics": report.metrics}


def cmd_fewshot(cfg: RunConfig) -> dict:
    """Sweep k-shot ridge probes over several sampling seeds."""
    encoder, prov = _load_encoder(cfg)
    dataset = load_paired_dataset(cfg.path("dataset"))
    reports = [
        run_probe(encoder, dataset, cfg.task, cfg.ridge, split_seed=cfg.get("eval.split_seed"), few_shot=spec,
                  ridge_target=cfg.get("ridge.target"), threads=cfg.threads,
                  provenance=_probe_provenance(cfg, prov))
        for spec in cfg.few_shot_specs()
    ]
    paths = emit_report(reports, cfg.out / "fewshot.jsonl", csv_metrics={primary_metric(cfg.task.kind)})
    return {"report": str(paths[0]), "csv": str(paths[1]), "runs": len(reports)}


def cmd_finetune(cfg: RunConfig) -> dict:
    """Train a task head, optionally updating the encoder."""
    encoder, prov = _load_encoder(cfg)
    dataset = load_paired_dataset(cfg.path("dataset"))
    report = run_finetune_head(encoder, dataset, cfg.task, cfg.train,
                               freeze_encoder=cfg.get("eval.freeze_encoder"),
                               split_seed=cfg.get("eval.split_seed"), threads=cfg.threads, provenance=prov)
    atomic_write_text(cfg.out / "finetune_log.jsonl", "".join(log_line(r) + "\n" for r in report.history))
    paths = emit_report(report, cfg.out / "finetune.jsonl")
    return {"report": str(paths[0]), "metrics": report.metrics, **report.variants}


def cmd_grad_check(cfg: RunConfig) -> dict:
    """Check analytic gradients against finite differences."""
    result = run_self_check()
    atomic_write_text(cfg.out / "gradcheck.json", _dumps(result) + "\n")
    for name, err in {**result["primitives"], "encoder_pool_mse": result["encoder_pool_mse"]}.items():
        print(f"{name:24s} {err:.3e}", file=sys.stderr)
    if not result["passed"]:
        raise NumericError(f"gradient check failed: max relative error {result['max_relative_error']:.3e} "
                           f"> {result['tolerance']:.0e}")
    return {"max_relative_error": result["max_relative_error"], "passed": True}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "fewshot": cmd_fewshot,
    "finetune": cmd_finetune,
    "avg-ckpt": cmd_avg_ckpt,
    "grad-check": cmd_grad_check,
}


def dispatch(cfg: RunConfig) -> dict:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return HANDLERS[cfg.command](cfg)


# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="run seed (default 0)")
    common.add_argument("--threads", type=int, help="embedding worker threads (default 1)")
    common.add_argument("--out", help="output directory (default ./out)")
    parser = _Parser(prog="xmdistill", description=__doc__.split("\n")[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], allow_abbrev=False,
                       help=HANDLERS[name].__doc__ or name.replace("-", " "))
    return parser


def _split_overrides(extra: list) -> list:
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{tok}: missing value")
            key, value = tok[2:], extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def main(argv=None) -> int:
    try:
        args, extra = build_parser().parse_known_args(argv)
        cfg = parse_config(args.command, args.config, flags_to_layer(_split_overrides(extra)),
                           {"seed": args.seed, "threads": args.threads, "out": args.out})
        summary = dispatch(cfg)
    except XmdError as exc:
        print(f"xmdistill: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"xmdistill: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(_dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
