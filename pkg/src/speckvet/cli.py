"""Command-line entry points for every pipeline stage.

All commands are thin wrappers: simulation, training, evaluation, and the
service live in their own modules; this file only parses arguments, wires
files to functions, and prints summaries.
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from .baseline import BinaryHitNet
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import DatasetError, SpeckleDataset
from .evaluate import (
    DEFAULT_FLUENCE_FACTORS,
    run_fewshot_eval,
    run_fluence_sweep,
    run_masking_comparison,
    run_size_sweep,
)
from .fewshot import build_support_set, classify_pattern
from .model import EmbeddingNet, EmbeddingNetConfig, build_embedding_net
from .pipeline import AugmentConfig, SplitSpec, audit_leakage, expand_split, split_dataset, write_split_ids
from .simulate import ALL_CATEGORIES, DetectorGeometry, build_dataset
from .train import fit
from .triplet import TrainerConfig
from .service.state import ServiceConfig, ServiceState

CONFIG_TYPES = {
    "checkpoint_path": str,
    "shots": int,
    "label_set": "csv",
    "retrain_after": int,
    "host": str,
    "port": int,
    "spool_dir": str,
    "frame_size": int,
    "retrain_mode": str,
    "online_epochs": int,
    "online_batch": int,
    "augment_copies": int,
    "margin": float,
    "triplets_per_batch": int,
    "learning_rate": float,
    "seed": int,
}


def parse_flat_config(path: Path) -> dict:
    """key = value lines; # comments; values coerced per ServiceConfig field."""
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.UsageError(
                f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip().strip("\"'")
        if key not in CONFIG_TYPES:
            raise click.UsageError(
                f"{path}:{lineno}: unknown config key {key!r}; "
                f"expected one of {sorted(CONFIG_TYPES)}")
        kind = CONFIG_TYPES[key]
        try:
            if kind == "csv":
                values[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                values[key] = kind(value)
        except ValueError:
            raise click.UsageError(
                f"{path}:{lineno}: invalid value for {key!r}: {value!r}")
    return values


def _parse_categories(text: str) -> list:
    cats = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in cats if c not in ALL_CATEGORIES]
    if bad:
        raise click.UsageError(
            f"unknown categories {bad}; expected subset of {list(ALL_CATEGORIES)}")
    return cats


def _load_dataset(path: str) -> SpeckleDataset:
    try:
        return SpeckleDataset.load(path)
    except (FileNotFoundError, DatasetError) as exc:
        raise click.UsageError(f"cannot load dataset at {path}: {exc}")


def _load_model(path: str, expected=None):
    if not Path(path).exists():
        raise click.UsageError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    if expected is not None and not isinstance(model, expected):
        raise click.UsageError(
            f"{path} holds a {type(model).__name__}, expected {expected.__name__}")
    return model


@click.group()
def main():
    """Speckle-pattern simulation, embedding training, and classification."""


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Dataset directory to write.")
@click.option("--samples", default=10, show_default=True, help="Distinct particles.")
@click.option("--per-category", default=100, show_default=True, help="Frames per category per sample.")
@click.option("--categories", default="single,double", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--fluence-scale", default=1.0, show_default=True)
def simulate(out, samples, per_category, categories, seed, fluence_scale):
    """Render a deterministic speckle dataset directory."""
    cats = _parse_categories(categories)
    geometry = DetectorGeometry()
    patterns = build_dataset(samples, per_category, cats, geometry=geometry,
                             seed=seed, fluence_scale=fluence_scale)
    ds = SpeckleDataset.from_patterns(patterns, geometry=geometry, seed=seed)
    ds.save(out)
    click.echo(f"wrote {len(ds)} frames to {out}")


@main.command("train-offline")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", default=30, show_default=True)
@click.option("--batch-size", default=64, show_default=True)
@click.option("--margin", default=1.0, show_default=True)
@click.option("--triplets-per-batch", default=64, show_default=True)
@click.option("--learning-rate", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--train-frac", default=0.5, show_default=True)
@click.option("--val-frac", default=0.25, show_default=True)
@click.option("--test-frac", default=0.25, show_default=True)
@click.option("--augment-per-class", default=0, show_default=True,
              help="Expand the training split to this many frames per class (0 = off).")
@click.option("--metrics", type=click.Path(), default=None, help="JSONL metrics path.")
@click.option("--split-ids", type=click.Path(), default=None, help="Write split id files here.")
@click.option("--conv1", default=32, show_default=True, help="First conv layer channels.")
@click.option("--conv2", default=64, show_default=True, help="Second conv layer channels.")
@click.option("--fc-hidden", default=512, show_default=True)
@click.option("--embedding-dim", default=128, show_default=True)
def train_offline(data, out, epochs, batch_size, margin, triplets_per_batch,
                  learning_rate, seed, train_frac, val_frac, test_frac,
                  augment_per_class, metrics, split_ids, conv1, conv2,
                  fc_hidden, embedding_dim):
    """Split, optionally augment, train, and keep the best-validation model."""
    ds = _load_dataset(data)
    try:
        spec = SplitSpec(train_fraction=train_frac, val_fraction=val_frac,
                         test_fraction=test_frac, seed=seed)
        train_split, val_split, test_split = split_dataset(ds, spec)
        if augment_per_class > 0:
            train_split = expand_split(train_split, augment_per_class,
                                       AugmentConfig(), seed=seed)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    audit_leakage([train_split, val_split, test_split], ["train", "val", "test"])
    if split_ids:
        write_split_ids(split_ids, {"train": train_split, "val": val_split,
                                    "test": test_split})
    try:
        net_config = EmbeddingNetConfig(
            input_size=ds.frames.shape[1], conv1_out_channels=conv1,
            conv2_out_channels=conv2, fc_hidden=fc_hidden,
            embedding_dim=embedding_dim)
        net_config.validate()
    except ValueError as exc:
        raise click.UsageError(str(exc))
    model = build_embedding_net(net_config, seed=seed)
    config = TrainerConfig(margin=margin, batch_size=batch_size, epochs=epochs,
                           triplets_per_batch=triplets_per_batch, seed=seed)
    result = fit(model, train_split, val_split, config,
                 learning_rate=learning_rate, checkpoint_path=out,
                 metrics_path=metrics)
    if result.best_epoch < 0:
        raise click.ClickException(
            "validation loss was never finite, so no checkpoint was kept; "
            "the validation split needs at least 2 frames per (sample, label)")
    click.echo(f"best epoch {result.best_epoch} val_loss {result.best_val_loss:.6f} -> {out}")


@main.command("train-online")
@click.option("--spool", required=True, type=click.Path(exists=True),
              help="Labeled dataset directory (the service spool format).")
@click.option("--out", required=True, type=click.Path())
@click.option("--checkpoint", type=click.Path(), default=None,
              help="Warm-start checkpoint (omit with --from-scratch).")
@click.option("--from-scratch", is_flag=True, default=False)
@click.option("--epochs", default=3, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--margin", default=1.0, show_default=True)
@click.option("--triplets-per-batch", default=64, show_default=True)
@click.option("--learning-rate", default=1e-3, show_default=True)
@click.option("--augment-copies", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def train_online(spool, out, checkpoint, from_scratch, epochs, batch_size,
                 margin, triplets_per_batch, learning_rate, augment_copies, seed):
    """Fine-tune on a labeled spool with augmentation-derived positives."""
    from .optim import init_adam
    from .train import train_epoch

    if from_scratch == (checkpoint is not None):
        raise click.UsageError("give exactly one of --checkpoint or --from-scratch")
    spool_ds = _load_dataset(spool)
    classes = sorted(set(spool_ds.labels))
    if len(classes) < 2:
        raise click.UsageError(
            f"spool has labels {classes}; need at least 2 classes")
    counts = {c: spool_ds.labels.count(c) for c in classes}
    budget = max(counts.values()) * (1 + augment_copies)
    expanded = expand_split(spool_ds, budget, AugmentConfig(), seed=seed)
    model = build_embedding_net(seed=seed) if from_scratch else _load_model(checkpoint, EmbeddingNet)
    config = TrainerConfig(margin=margin, batch_size=min(batch_size, len(expanded)),
                           epochs=epochs, triplets_per_batch=triplets_per_batch,
                           seed=seed)
    adam = init_adam(model.named_parameters(), learning_rate=learning_rate)
    history = [train_epoch(model, expanded, config, adam, epoch)
               for epoch in range(epochs)]
    save_checkpoint(model, out, metadata={
        "mode": "online", "epochs": epochs, "spool_frames": len(spool_ds),
        "expanded_frames": len(expanded)})
    last = history[-1]
    click.echo(f"online fine-tune done; last epoch loss {last.mean_loss:.6f} -> {out}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--protocol", type=click.Choice(["fewshot", "fluence", "masking", "size"]),
              default="fewshot", show_default=True)
@click.option("--data", type=click.Path(), default=None,
              help="Dataset directory (fewshot and masking protocols).")
@click.option("--baseline", type=click.Path(), default=None,
              help="Baseline checkpoint (masking protocol).")
@click.option("--shots", default=5, show_default=True)
@click.option("--episodes", default=20, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="JSON report path.")
@click.option("--csv", "csv_path", type=click.Path(), default=None, help="CSV table path.")
@click.option("--samples", default=5, show_default=True, help="Particles (fluence/size).")
@click.option("--per-category", default=20, show_default=True)
@click.option("--categories", default="single,double", show_default=True)
@click.option("--factors", default=None, help="Comma-separated fluence factors.")
@click.option("--visible-fraction", default=0.25, show_default=True)
@click.option("--bins", default=20, show_default=True)
@click.option("--samples-per-bin", default=3, show_default=True)
def evaluate(checkpoint, protocol, data, baseline, shots, episodes, seed, out,
             csv_path, samples, per_category, categories, factors,
             visible_fraction, bins, samples_per_bin):
    """Run one evaluation protocol and write its report."""
    model = _load_model(checkpoint, EmbeddingNet)
    cats = _parse_categories(categories)
    try:
        if protocol == "fewshot":
            if not data:
                raise click.UsageError("--data is required for the fewshot protocol")
            report = run_fewshot_eval(model, _load_dataset(data), shots,
                                      n_episodes=episodes, seed=seed)
        elif protocol == "fluence":
            grid = DEFAULT_FLUENCE_FACTORS
            if factors:
                grid = [float(f) for f in factors.split(",")]
            report = run_fluence_sweep(model, samples, per_category, cats,
                                       shots_list=(shots,), factors=grid,
                                       n_episodes=episodes, seed=seed)
        elif protocol == "masking":
            if not data or not baseline:
                raise click.UsageError(
                    "--data and --baseline are required for the masking protocol")
            baseline_model = _load_model(baseline, BinaryHitNet)
            report = run_masking_comparison(model, baseline_model, _load_dataset(data),
                                            visible_fraction=visible_fraction,
                                            shots=shots, n_episodes=episodes, seed=seed)
        else:
            report = run_size_sweep(model, samples_per_bin, per_category, cats,
                                    shots=shots, n_episodes=episodes, seed=seed,
                                    bins=bins)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    report.save_json(out)
    if csv_path:
        report.save_csv(csv_path)
    click.echo(f"wrote {protocol} report to {out}")


@main.command("classify")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--support", required=True, type=click.Path(exists=True),
              help="Dataset directory providing the support frames.")
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True),
              help="Dataset directory of frames to classify.")
@click.option("--out", type=click.Path(), default=None, help="JSONL results path.")
def classify_cmd(checkpoint, support, input_dir, out):
    """Classify every input frame against a stored support set."""
    model = _load_model(checkpoint, EmbeddingNet)
    support_ds = _load_dataset(support)
    queries = _load_dataset(input_dir)
    support_set = build_support_set(
        model, support_ds.frames, support_ds.labels,
        source_ids=[r.frame_id for r in support_ds.records])
    lines = []
    for i in range(len(queries)):
        result = classify_pattern(model, queries.frames[i], support_set)
        lines.append({
            "frame_id": queries.records[i].frame_id,
            "predicted_label": result.predicted_label,
            "mean_distances": dict(result.mean_distances),
            "tie": result.tie,
        })
    text = "\n".join(json.dumps(line) for line in lines)
    if out:
        Path(out).write_text(text + "\n")
    click.echo(text)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Flat key = value config file; flags override.")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--shots", type=int, default=None)
@click.option("--labels", default=None, help="Comma-separated label set.")
@click.option("--retrain-after", type=int, default=None)
@click.option("--spool", type=click.Path(), default=None)
@click.option("--retrain-mode", type=click.Choice(["thread", "inline"]), default=None)
@click.option("--check", is_flag=True, default=False,
              help="Validate config and checkpoint, then exit.")
def serve(config_path, checkpoint, host, port, shots, labels, retrain_after,
          spool, retrain_mode, check):
    """Start the online classification service."""
    values = parse_flat_config(Path(config_path)) if config_path else {}
    overrides = {
        "checkpoint_path": checkpoint,
        "host": host,
        "port": port,
        "shots": shots,
        "label_set": tuple(labels.split(",")) if labels else None,
        "retrain_after": retrain_after,
        "spool_dir": spool,
        "retrain_mode": retrain_mode,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = ServiceConfig(**values)
        config.validate()
    except (TypeError, ValueError) as exc:
        raise click.UsageError(str(exc))
    if not config.checkpoint_path:
        raise click.UsageError("checkpoint_path is required (flag --checkpoint or config)")
    if not Path(config.checkpoint_path).exists():
        raise click.UsageError(f"checkpoint not found: {config.checkpoint_path}")
    state = ServiceState(config)
    if check:
        click.echo("config ok")
        return
    import uvicorn

    from .service.app import create_app

    app = create_app(config, state=state)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")


if __name__ == "__main__":
    main()
