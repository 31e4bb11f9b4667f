"""Command-line entry point wiring configs to every pipeline stage."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import yaml

from .core import Modality, make_class_table
from .data import load_manifest
from .errors import (
    AltsegError,
    CompatibilityError,
    ConfigError,
    FormatError,
    ProtocolError,
    TrainingDivergedError,
    ValidationError,
)
from .evaluate import RunReport, evaluate, render_report
from .experiment import (
    load_experiment_config,
    model_from_checkpoint,
    load_checkpoint,
    render_ablation,
    run_ablation,
    run_train,
)
from .prompts import (
    ClipTextEncoder,
    HashingTextEncoder,
    TemplateVariant,
    build_embedding_table,
    load_table,
    save_table,
)
from .synthetic import SyntheticSpec, gen_synthetic

# nonzero exit codes by error category
_EXIT_CODES = [
    (TrainingDivergedError, 6),
    (ProtocolError, 5),
    (FormatError, 4),
    (CompatibilityError, 3),
    (ConfigError, 2),
    (ValidationError, 2),
    (AltsegError, 1),
]


def _reports_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AltsegError as exc:
            click.echo(f"error: {exc}", err=True)
            for cls, code in _EXIT_CODES:
                if isinstance(exc, cls):
                    sys.exit(code)
            sys.exit(1)

    return wrapper


@click.group()
def main() -> None:
    """Unpaired CT/MR segmentation with text-conditioned dynamic heads."""


def _load_classes(path: Path):
    if path.suffix == ".jsonl":
        return load_manifest(path, check_files=False).class_table
    payload = yaml.safe_load(path.read_text())
    if not isinstance(payload, dict) or "names" not in payload:
        raise FormatError(f"{path}: expected a mapping with 'names' (and 'task_id')")
    return make_class_table(payload["names"], payload.get("task_id", path.stem))


def _make_encoder(encoder_id: str, d_txt: int):
    if encoder_id == "hash":
        return HashingTextEncoder(d_txt=d_txt)
    if encoder_id.startswith("clip"):
        _, _, model = encoder_id.partition(":")
        return ClipTextEncoder(model or "openai/clip-vit-base-patch32")
    raise ConfigError(f"unknown encoder {encoder_id!r} (use 'hash' or 'clip[:model]')")


@main.command("precompute-embeddings")
@click.option("--template", type=click.Choice(["v1", "v2", "v3", "one-hot"]), default="v3")
@click.option("--classes", "classes_path", required=True, type=click.Path(exists=True, path_type=Path),
              help="Manifest (.jsonl) or YAML/JSON file with task_id and names.")
@click.option("--encoder", default="hash", help="'hash', 'clip', or 'clip:<model-name>'.")
@click.option("--d-txt", default=512, show_default=True, help="Dimension for the hash encoder.")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path))
@_reports_errors
def precompute_embeddings(template, classes_path, encoder, d_txt, out_path):
    """Render prompts, embed them once, and write the binary cache."""
    variant = TemplateVariant[template.replace("-", "_").upper()]
    table = _load_classes(classes_path)
    provider = None if variant is TemplateVariant.ONE_HOT else _make_encoder(encoder, d_txt)
    emb = build_embedding_table(provider, variant, table)
    save_table(emb, out_path)
    click.echo(f"wrote {emb.num_classes * 2} vectors (d={emb.d_txt}) to {out_path}")


@main.command("gen-synthetic")
@click.option("--classes", default=3, show_default=True)
@click.option("--n-ct", default=6, show_default=True)
@click.option("--n-mr", default=6, show_default=True)
@click.option("--n-test-ct", default=2, show_default=True)
@click.option("--n-test-mr", default=2, show_default=True)
@click.option("--size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@_reports_errors
def gen_synthetic_cmd(classes, n_ct, n_mr, n_test_ct, n_test_mr, size, seed, out_dir):
    """Generate the unpaired synthetic phantom dataset."""
    spec = SyntheticSpec(
        num_classes=classes, n_ct=n_ct, n_mr=n_mr,
        n_test_ct=n_test_ct, n_test_mr=n_test_mr, size=size,
    )
    manifest = gen_synthetic(spec, seed=seed, out_dir=out_dir)
    click.echo(f"wrote {len(manifest.entries)} volumes under {out_dir}")


def _parse_overrides(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must look like key=value")
        key, raw = pair.split("=", 1)
        out[key] = yaml.safe_load(raw)
    return out


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--set", "overrides", multiple=True,
              help="Dotted config override, e.g. --set train.epochs=50 (beats file values).")
@click.option("--resume", "resume_from", type=click.Path(exists=True, path_type=Path), default=None)
@_reports_errors
def train_cmd(config_path, overrides, resume_from):
    """Run (or resume) a full training experiment."""
    cfg = load_experiment_config(config_path, _parse_overrides(overrides))
    result = run_train(cfg, resume_from=resume_from)
    last = result.epoch_losses[-1] if result.epoch_losses else {}
    click.echo(f"checkpoint: {result.checkpoint}")
    click.echo(f"final epoch loss: {last.get('loss'):.4f}" if last else "no epochs run")


@main.command("evaluate")
@click.option("--ckpt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--embeddings", "embeddings_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="Optional cache file to cross-check against the checkpoint.")
@click.option("--split", default="test", show_default=True)
@click.option("--mistaken-prompts", is_flag=True, default=False,
              help="Swap CT and MR prompts at prediction time (sensitivity check).")
@click.option("--out", "out_path", type=click.Path(path_type=Path), default=None)
@_reports_errors
def evaluate_cmd(ckpt, manifest_path, embeddings_path, split, mistaken_prompts, out_path):
    """Sliding-window evaluation of a checkpoint over a manifest split."""
    manifest = load_manifest(manifest_path)
    payload = load_checkpoint(ckpt)
    if payload["task_id"] != manifest.task_id or list(payload["class_names"]) != list(
        manifest.class_table.names
    ):
        raise CompatibilityError("checkpoint and manifest disagree on the class table")
    if embeddings_path is not None:
        load_table(embeddings_path, expected_classes=manifest.class_table)
    model = model_from_checkpoint(payload)

    from .data import PreprocessSpec

    spec = PreprocessSpec(patch_size=payload["train_config"]["patch_size"])
    report = evaluate(
        model, manifest, spec, split=split,
        mistaken_prompts=mistaken_prompts, config_hash=payload.get("config_hash"),
    )
    click.echo(render_report(report))
    if out_path is not None:
        report.save(out_path)
        click.echo(f"report written to {out_path}")


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--set", "overrides", multiple=True)
@click.option("--split", default="test", show_default=True)
@_reports_errors
def ablate_cmd(config_path, overrides, split):
    """Train the text x {alt, ct, mr} matrix and print the merged table."""
    cfg = load_experiment_config(config_path, _parse_overrides(overrides))
    cells = run_ablation(cfg, eval_split=split)
    table = render_ablation(cells)
    out = cfg.resolve(cfg.out_dir) / "ablation.json"
    out.write_text(json.dumps([c.__dict__ for c in cells], indent=2) + "\n")
    click.echo(table)
    click.echo(f"cell reports under {cfg.resolve(cfg.out_dir)}")


@main.command("report")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, path_type=Path))
@_reports_errors
def report_cmd(in_path):
    """Render a saved evaluation report as a per-class table."""
    click.echo(render_report(RunReport.load(in_path)))


if __name__ == "__main__":
    main()
