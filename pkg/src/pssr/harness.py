"""Experiment orchestration: robustness tables, decomposition studies, sweeps, figures.

Every run persists a CSV of metric records, per-sample prediction dumps that
make each accuracy recomputable, and an atomically written JSON manifest with
config and input content hashes. Reruns under identical config + seeds
reproduce the accuracy fields exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attacks import AttackSpec, AdversarialBatch, bpda_pgd, run_attack, transfer_attack
from .cae import CAEConfig, CAEModel, load_cae, train_cae
from .data import DatasetSource, ImageBatch, load_arrays, stratified_indices_select, to_batches
from .models import load_checkpoint
from .pipeline import VARIANTS, DefendedPipeline
from .surgery import apply_surgery, compute_saliency, decompose_perturbation, make_masks, salient_fraction

log = logging.getLogger(__name__)

CAE_VARIANTS = ("cae_only", "ps_cae", "ps_cae_ard")


@dataclass
class ExperimentConfig:
    data_root: str
    classifier_checkpoint: str
    output_dir: str
    dataset: str = "mnist"
    backbone: str = "lenet5"
    variant: str = "ps_cae_ard"
    alpha: float = 1.5
    subset_size: int = 1000
    seeds: tuple[int, ...] = (0,)
    batch_size: int = 128
    attack_grid: tuple[AttackSpec, ...] = ()
    cae_checkpoints: dict = field(default_factory=dict)  # variant -> checkpoint path
    substitute_checkpoint: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds list must be non-empty")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.attack_grid:
            fams = ("fgsm", "bim", "mim", "pgd", "cw") if self.dataset == "mnist" else ("fgsm", "pgd")
            maker = AttackSpec.mnist_default if self.dataset == "mnist" else AttackSpec.cifar_default
            self.attack_grid = tuple(maker(f) for f in fams)

    def validate_checkpoints(self, variants: tuple[str, ...] | None = None) -> None:
        """Fail before any attack runs if a referenced checkpoint is missing."""
        missing = []
        if not Path(self.classifier_checkpoint).exists():
            missing.append(self.classifier_checkpoint)
        for v in variants or (self.variant,):
            if v in CAE_VARIANTS:
                path = self.cae_checkpoints.get(v)
                if path is None or not Path(path).exists():
                    missing.append(f"cae_checkpoints[{v}]={path}")
        if missing:
            raise FileNotFoundError(f"missing checkpoints: {missing}")


@dataclass
class MetricsRecord:
    experiment_id: str
    variant: str
    attack_family: str
    clean_accuracy: float  # percent
    robust_accuracy: float  # percent
    per_class_accuracy: list[float]
    mean_confidence_true: float  # percent
    wall_clock: float
    seed: int
    n_samples: int

    def __post_init__(self):
        for name in ("clean_accuracy", "robust_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load_subset(config: ExperimentConfig, seed: int, split: str = "test") -> ImageBatch:
    source = DatasetSource(config.dataset, Path(config.data_root), split)
    images, labels = load_arrays(source)
    if config.subset_size < images.shape[0]:
        images, labels = stratified_indices_select(
            images, labels, config.subset_size, source.num_classes, seed
        )
    return ImageBatch(images, labels)


def _build_pipeline(config: ExperimentConfig, variant: str) -> DefendedPipeline:
    classifier = load_checkpoint(config.classifier_checkpoint, expected_architecture=config.backbone)
    cae = load_cae(config.cae_checkpoints[variant]) if variant in CAE_VARIANTS else None
    return DefendedPipeline.from_variant(variant, classifier, cae, alpha=config.alpha)


def _evaluate(pipeline: DefendedPipeline, images: torch.Tensor, labels: torch.Tensor,
              num_classes: int):
    probs = pipeline.predict_probs(images)
    preds = probs.argmax(dim=1)
    correct = preds == labels
    acc = correct.float().mean().item() * 100
    per_class = []
    for c in range(num_classes):
        sel = labels == c
        per_class.append(correct[sel].float().mean().item() * 100 if sel.any() else float("nan"))
    conf_true = probs.gather(1, labels.unsqueeze(1)).mean().item() * 100
    return acc, per_class, conf_true, preds, probs


def _dump_cell(out_dir: Path, name: str, labels, preds, prob_true) -> None:
    cell_dir = out_dir / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)
    np.savez(cell_dir / f"{name}.npz", labels=labels.numpy(), preds=preds.numpy(),
             prob_true=prob_true.numpy())


def save_records_csv(path: Path, records: list[MetricsRecord]) -> None:
    fields = [f.name for f in MetricsRecord.__dataclass_fields__.values()]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in records:
            row = asdict(r)
            row["per_class_accuracy"] = json.dumps(row["per_class_accuracy"])
            writer.writerow(row)


def load_records_csv(path: Path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(MetricsRecord(
                experiment_id=row["experiment_id"],
                variant=row["variant"],
                attack_family=row["attack_family"],
                clean_accuracy=float(row["clean_accuracy"]),
                robust_accuracy=float(row["robust_accuracy"]),
                per_class_accuracy=json.loads(row["per_class_accuracy"]),
                mean_confidence_true=float(row["mean_confidence_true"]),
                wall_clock=float(row["wall_clock"]),
                seed=int(row["seed"]),
                n_samples=int(row["n_samples"]),
            ))
    return records


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, config: ExperimentConfig, extra: dict | None = None) -> Path:
    """Atomically written run manifest: config, version, input content hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for p in [config.classifier_checkpoint, config.substitute_checkpoint,
              *config.cae_checkpoints.values()]:
        if p and Path(p).exists():
            hashes[str(p)] = _sha256(p)
    cfg = asdict(config)
    cfg["attack_grid"] = [asdict(s) for s in config.attack_grid]
    payload = {
        "version": __version__,
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        "input_hashes": hashes,
        **(extra or {}),
    }
    final = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(payload, indent=2))
    os.replace(tmp, final)
    return final


# ---------------------------------------------------------------------------
# Robustness table (white-box, non-adaptive)
# ---------------------------------------------------------------------------


def _craft_grid(classifier, batch: ImageBatch, grid, seed: int) -> dict[str, AdversarialBatch]:
    """Adversarial batches per family, crafted white-box on the bare classifier."""
    out = {}
    for spec in grid:
        out[spec.family] = run_attack(classifier, batch, replace(spec, seed=spec.seed + seed))
    return out


def _table_records(config: ExperimentConfig, variant: str, pipeline: DefendedPipeline,
                   batch: ImageBatch, crafted: dict[str, AdversarialBatch], seed: int,
                   out_dir: Path, num_classes: int) -> list[MetricsRecord]:
    exp_id = f"{config.dataset}-{config.backbone}-{variant}-seed{seed}"
    records = []
    t0 = time.perf_counter()
    clean_acc, per_class, conf, preds, probs = _evaluate(pipeline, batch.images, batch.labels,
                                                         num_classes)
    wall = time.perf_counter() - t0
    _dump_cell(out_dir, f"{exp_id}-benign", batch.labels, preds,
               probs.gather(1, batch.labels.unsqueeze(1)).squeeze(1))
    records.append(MetricsRecord(exp_id, variant, "benign", clean_acc, clean_acc,
                                 per_class, conf, wall, seed, len(batch)))
    for family, adv in crafted.items():
        t0 = time.perf_counter()
        acc, per_class, conf, preds, probs = _evaluate(pipeline, adv.adv_images, adv.labels,
                                                       num_classes)
        wall = time.perf_counter() - t0
        _dump_cell(out_dir, f"{exp_id}-{family}", adv.labels, preds,
                   probs.gather(1, adv.labels.unsqueeze(1)).squeeze(1))
        records.append(MetricsRecord(exp_id, variant, family, clean_acc, acc,
                                     per_class, conf, wall, seed, len(batch)))
    return records


def run_robustness_table(config: ExperimentConfig,
                         variants: tuple[str, ...] | None = None) -> list[MetricsRecord]:
    """One record per (variant, attack) cell, persisted as CSV + JSON manifest.

    Attacks are crafted once per seed on the bare classifier and shared by all
    requested variants; pass variants to produce an ablation-style table.
    """
    variants = variants or (config.variant,)
    config.validate_checkpoints(variants)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classifier = load_checkpoint(config.classifier_checkpoint, expected_architecture=config.backbone)
    num_classes = classifier.num_classes
    pipelines = {v: _build_pipeline(config, v) for v in variants}
    records: list[MetricsRecord] = []
    for seed in config.seeds:
        batch = _load_subset(config, seed)
        crafted = _craft_grid(classifier, batch, config.attack_grid, seed)
        for v in variants:
            records.extend(_table_records(config, v, pipelines[v], batch, crafted, seed,
                                          out_dir, num_classes))
    save_records_csv(out_dir / "records.csv", records)
    write_manifest(out_dir, config, {"kind": "robustness_table", "variants": list(variants)})
    return records


def run_ablation(config: ExperimentConfig) -> list[MetricsRecord]:
    """Rows for baseline, +PS, +CAE, +PS&CAE, +PS&CAE&ARD across the attack grid."""
    return run_robustness_table(config, variants=VARIANTS)


# ---------------------------------------------------------------------------
# Exploratory decomposition (salient vs trivial attack components)
# ---------------------------------------------------------------------------


def run_exploratory_decomposition(config: ExperimentConfig) -> dict:
    """Accuracy and true-label confidence under full / salient / trivial attacks.

    Also reports the effect of dropping salient pixels from clean images,
    which should barely move clean accuracy. Per-sample predictions are
    dumped so every column can be re-derived.
    """
    config.validate_checkpoints(("baseline",))
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classifier = load_checkpoint(config.classifier_checkpoint, expected_architecture=config.backbone)
    pipeline = DefendedPipeline.from_variant("baseline", classifier)
    num_classes = classifier.num_classes
    seed = config.seeds[0]
    batch = _load_subset(config, seed)

    clean_acc, _, clean_conf, _, _ = _evaluate(pipeline, batch.images, batch.labels, num_classes)
    clean_masks = make_masks(compute_saliency(classifier, batch.images), config.alpha)
    clean_trivial = apply_surgery(batch.images, clean_masks).trivial_component
    clean_trivial_acc, _, clean_trivial_conf, preds, probs = _evaluate(
        pipeline, clean_trivial, batch.labels, num_classes)
    _dump_cell(out_dir, f"decomp-clean-trivial-seed{seed}", batch.labels, preds,
               probs.gather(1, batch.labels.unsqueeze(1)).squeeze(1))

    report = {
        "seed": seed,
        "n_samples": len(batch),
        "clean_accuracy": clean_acc,
        "clean_confidence_true": clean_conf,
        "clean_trivial_accuracy": clean_trivial_acc,
        "clean_trivial_confidence_true": clean_trivial_conf,
        "attacks": {},
    }
    for spec in config.attack_grid:
        adv = run_attack(classifier, batch, replace(spec, seed=spec.seed + seed))
        masks = make_masks(compute_saliency(classifier, adv.adv_images), config.alpha)
        comps = decompose_perturbation(batch.images, adv.adv_images, masks)
        row = {}
        for name, images in (("full", adv.adv_images),
                             ("salient", comps.salient_component),
                             ("trivial", comps.trivial_component)):
            acc, _, conf, preds, probs = _evaluate(pipeline, images, batch.labels, num_classes)
            row[f"{name}_accuracy"] = acc
            row[f"{name}_confidence_true"] = conf
            _dump_cell(out_dir, f"decomp-{spec.family}-{name}-seed{seed}", batch.labels, preds,
                       probs.gather(1, batch.labels.unsqueeze(1)).squeeze(1))
        report["attacks"][spec.family] = row
    (out_dir / "decomposition.json").write_text(json.dumps(report, indent=2))
    write_manifest(out_dir, config, {"kind": "exploratory_decomposition"})
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def run_alpha_sweep(config: ExperimentConfig, alphas: list[float],
                    families: tuple[str, ...] = ("pgd", "cw")) -> dict:
    """Trivial-component robust accuracy and salient-pixel fraction per threshold."""
    config.validate_checkpoints(("baseline",))
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classifier = load_checkpoint(config.classifier_checkpoint, expected_architecture=config.backbone)
    pipeline = DefendedPipeline.from_variant("baseline", classifier)
    seed = config.seeds[0]
    batch = _load_subset(config, seed)
    grid = {s.family: s for s in config.attack_grid}
    report = {"alphas": list(alphas), "seed": seed, "families": {}}
    for family in families:
        if family not in grid:
            continue
        adv = run_attack(classifier, batch, replace(grid[family], seed=grid[family].seed + seed))
        sal = compute_saliency(classifier, adv.adv_images)
        rows = []
        for alpha in alphas:
            masks = make_masks(sal, alpha)
            trivial = apply_surgery(adv.adv_images, masks).trivial_component
            acc, _, _, _, _ = _evaluate(pipeline, trivial, adv.labels, classifier.num_classes)
            rows.append({"alpha": alpha, "robust_accuracy": acc,
                         "salient_fraction": salient_fraction(masks)})
        report["families"][family] = rows
    (out_dir / "alpha_sweep.json").write_text(json.dumps(report, indent=2))
    write_manifest(out_dir, config, {"kind": "alpha_sweep"})
    return report


def run_k_sweep(config: ExperimentConfig, ks: list[int], cae_config: CAEConfig,
                train_size: int = 2000) -> dict:
    """Train a CAE per dropout-pass count k and report robust accuracy + wall-clock."""
    config.validate_checkpoints(("baseline",))
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classifier = load_checkpoint(config.classifier_checkpoint, expected_architecture=config.backbone)
    source = DatasetSource(config.dataset, Path(config.data_root), "train")
    images, labels = load_arrays(source)
    images, labels = stratified_indices_select(images, labels, train_size, source.num_classes,
                                               config.seeds[0])
    train_batches = to_batches(images, labels, batch_size=config.batch_size)
    eval_batch = _load_subset(config, config.seeds[0])
    pgd_spec = next((s for s in config.attack_grid if s.family == "pgd"),
                    AttackSpec.mnist_default("pgd"))
    channels = classifier.input_shape[0]
    report = {"ks": list(ks), "rows": []}
    for k in ks:
        cfg = replace(cae_config, k_dropout=k)
        t0 = time.perf_counter()
        cae = CAEModel.build(cfg, channels=channels, seed=cfg.seed)
        train_cae(cae, classifier, [AttackSpec.mnist_default("fgsm"), pgd_spec],
                  train_batches, cfg)
        wall = time.perf_counter() - t0
        defended = DefendedPipeline.from_variant("ps_cae_ard", classifier, cae, alpha=config.alpha)
        adv = run_attack(classifier, eval_batch, replace(pgd_spec, seed=config.seeds[0]))
        acc, _, _, _, _ = _evaluate(defended, adv.adv_images, adv.labels, classifier.num_classes)
        report["rows"].append({"k": k, "robust_accuracy": acc, "train_wall_clock": wall})
        log.info("k=%d: robust accuracy %.2f%% (train %.1fs)", k, acc, wall)
    (out_dir / "k_sweep.json").write_text(json.dumps(report, indent=2))
    write_manifest(out_dir, config, {"kind": "k_sweep"})
    return report


# ---------------------------------------------------------------------------
# Black-box transfer and adaptive BPDA
# ---------------------------------------------------------------------------


def run_adaptive_suite(config: ExperimentConfig, transfer_family: str = "fgsm") -> list[MetricsRecord]:
    """Transfer attack on baseline vs defended, plus BPDA and white-box PGD on the defended pipeline."""
    config.validate_checkpoints((config.variant,))
    if config.substitute_checkpoint is None:
        raise ValueError("adaptive suite requires substitute_checkpoint")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classifier = load_checkpoint(config.classifier_checkpoint, expected_architecture=config.backbone)
    substitute = load_checkpoint(config.substitute_checkpoint)
    defended = _build_pipeline(config, config.variant)
    baseline = DefendedPipeline.from_variant("baseline", classifier)
    num_classes = classifier.num_classes
    seed = config.seeds[0]
    batch = _load_subset(config, seed)
    grid = {s.family: s for s in config.attack_grid}
    transfer_spec = replace(grid.get(transfer_family) or AttackSpec.mnist_default(transfer_family),
                            seed=seed)
    pgd_spec = grid.get("pgd") or AttackSpec.mnist_default("pgd")
    bpda_spec = AttackSpec("bpda_pgd", eps=pgd_spec.eps, steps=pgd_spec.steps,
                           step_size=pgd_spec.step_size, random_start=pgd_spec.random_start,
                           seed=pgd_spec.seed + seed)

    records = []

    def _cell(pipeline, variant, family, adv_images, labels):
        t0 = time.perf_counter()
        acc, per_class, conf, preds, probs = _evaluate(pipeline, adv_images, labels, num_classes)
        clean_acc, _, _, _, _ = _evaluate(pipeline, batch.images, batch.labels, num_classes)
        exp_id = f"{config.dataset}-{config.backbone}-{variant}-seed{seed}"
        _dump_cell(out_dir, f"{exp_id}-{family}", labels, preds,
                   probs.gather(1, labels.unsqueeze(1)).squeeze(1))
        records.append(MetricsRecord(exp_id, variant, family, clean_acc, acc, per_class,
                                     conf, time.perf_counter() - t0, seed, len(batch)))

    transferred = transfer_attack(substitute, baseline, batch, transfer_spec)
    _cell(baseline, "baseline", f"transfer_{transfer_family}", transferred.adv_images, batch.labels)
    _cell(defended, config.variant, f"transfer_{transfer_family}", transferred.adv_images, batch.labels)

    whitebox = run_attack(classifier, batch, replace(pgd_spec, seed=pgd_spec.seed + seed))
    _cell(defended, config.variant, "pgd", whitebox.adv_images, batch.labels)

    adaptive = bpda_pgd(defended, batch, bpda_spec)
    _cell(defended, config.variant, "bpda_pgd", adaptive.adv_images, batch.labels)

    save_records_csv(out_dir / "adaptive_records.csv", records)
    write_manifest(out_dir, config, {"kind": "adaptive_suite"})
    return records


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

FIGURE_KINDS = ("grid", "sweep_curve", "confidence_bars", "feature_dump")


def emit_figures(payload, kind: str, out_dir) -> list[Path]:
    """Render figure-style artifacts with deterministic file names.

    grid: {"input", "saliency", "mask", "regenerated"} image arrays -> grid.png
    sweep_curve: {"x": [...], "series": {label: [...]}} -> sweep_curve.png
    confidence_bars: {"labels": [...], "values": [...]} -> confidence_bars.png
    feature_dump: {"features": [N,D], "labels": [N]} -> features.csv
    """
    if kind not in FIGURE_KINDS:
        raise ValueError(f"unknown figure kind {kind!r}")
    if payload is None or len(payload) == 0:
        raise ValueError("empty records: nothing to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if kind == "feature_dump":
        features = np.asarray(payload["features"])
        labels = np.asarray(payload["labels"])
        path = out_dir / "features.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([f"f{i}" for i in range(features.shape[1])] + ["label"])
            for row, lab in zip(features, labels):
                writer.writerow([f"{v:.6g}" for v in row] + [int(lab)])
        return [path]

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if kind == "grid":
        titles = payload.get("titles", ("input", "saliency", "trivial mask", "regenerated"))
        panels = list(zip(titles, (payload["input"], payload["saliency"],
                                   payload["mask"], payload["regenerated"])))
        n = len(payload["input"])
        fig, axes = plt.subplots(n, 4, figsize=(8, 2 * n), squeeze=False)
        for i in range(n):
            for j, (title, arr) in enumerate(panels):
                img = np.asarray(arr[i])
                if img.ndim == 3:
                    img = img.transpose(1, 2, 0).squeeze()
                axes[i][j].imshow(img, cmap="hot" if title == "saliency" else "gray",
                                  vmin=0, vmax=img.max() if title == "saliency" else 1)
                axes[i][j].set_axis_off()
                if i == 0:
                    axes[i][j].set_title(title)
        path = out_dir / "grid.png"
    elif kind == "sweep_curve":
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, ys in payload["series"].items():
            ax.plot(payload["x"], ys, marker="o", label=label)
        ax.set_xlabel(payload.get("xlabel", "alpha"))
        ax.set_ylabel(payload.get("ylabel", "robust accuracy (%)"))
        ax.legend()
        path = out_dir / "sweep_curve.png"
    else:  # confidence_bars
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(payload["values"])), payload["values"])
        ax.set_xticks(range(len(payload["labels"])))
        ax.set_xticklabels(payload["labels"], rotation=30, ha="right")
        ax.set_ylabel("true-label confidence (%)")
        path = out_dir / "confidence_bars.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
