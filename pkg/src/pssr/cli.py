"""Command-line interface: train targets, craft attacks, run surgery, train the
extrapolator, evaluate defenses, sweep hyperparameters, and render figures."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackSpec, load_adv_archive, run_attack, save_adv_archive
from .cae import CAEConfig, CAEModel, save_cae, train_cae
from .data import DatasetSource, load_arrays, stratified_indices_select, to_batches
from .harness import (ExperimentConfig, emit_figures, run_adaptive_suite, run_alpha_sweep,
                      run_exploratory_decomposition, run_k_sweep, run_robustness_table)
from .models import TrainConfig, build_model, load_checkpoint, save_checkpoint, train_classifier
from .pipeline import VARIANTS
from .surgery import apply_surgery, compute_saliency, make_masks

log = logging.getLogger("pssr")


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _check_device(device: str) -> str:
    if device != "cpu" and not torch.cuda.is_available():
        raise SystemExit(f"device {device!r} is not available")
    return device


def _train_batches(args, split: str = "train"):
    source = DatasetSource(args.dataset, Path(args.data_root), split)
    images, labels = load_arrays(source)
    if getattr(args, "subset", None):
        images, labels = stratified_indices_select(images, labels, args.subset,
                                                   source.num_classes, args.seed)
    return source, to_batches(images, labels, batch_size=args.batch_size, seed=args.seed)


def cmd_train_target(args) -> int:
    source, batches = _train_batches(args)
    val_source = DatasetSource(args.dataset, Path(args.data_root), "test")
    val_images, val_labels = load_arrays(val_source)
    val_batches = to_batches(val_images, val_labels, batch_size=256)
    model = build_model(args.arch, source.num_classes, source.image_shape, seed=args.seed)
    config = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed)
    history = train_classifier(model, batches, config, val_batches=val_batches)
    save_checkpoint(model, args.out, meta={"train_config": vars(args) | {"func": None},
                                           "clean_accuracy": history["clean_accuracy"]})
    print(f"saved {args.arch} to {args.out} (clean accuracy "
          f"{100 * history['clean_accuracy']:.2f}%)")
    return 0


def cmd_attack(args) -> int:
    model = load_checkpoint(args.checkpoint)
    source, batches = _train_batches(args, split=args.split)
    from .data import flatten_batches
    batch = flatten_batches(batches)
    base = (AttackSpec.mnist_default(args.family, seed=args.seed) if args.dataset == "mnist"
            else AttackSpec.cifar_default(args.family, seed=args.seed))
    overrides = {}
    if args.eps is not None:
        overrides["eps"] = args.eps
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.step_size is not None:
        overrides["step_size"] = args.step_size
    if args.norm is not None:
        overrides["norm"] = args.norm
    spec = replace(base, **overrides)
    result = run_attack(model, batch, spec)
    save_adv_archive(args.out, result)
    print(f"{spec.family}: {len(batch)} samples, attack success "
          f"{100 * result.success_mask.float().mean():.2f}%, archive -> {args.out}")
    return 0


def cmd_surgery(args) -> int:
    model = load_checkpoint(args.checkpoint)
    archive = load_adv_archive(args.archive)
    sal = compute_saliency(model, archive.adv_images)
    masks = make_masks(sal, args.alpha)
    comps = apply_surgery(archive.adv_images, masks)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savez(out_dir / "masks.npz", salient=masks.salient.numpy(), trivial=masks.trivial.numpy(),
             threshold=masks.threshold.numpy(), alpha=masks.alpha)
    n = min(args.panels, len(archive.labels))
    emit_figures(
        {
            "input": archive.adv_images[:n].numpy(),
            "saliency": sal.scores[:n].numpy(),
            "mask": masks.trivial[:n].numpy(),
            "regenerated": comps.trivial_component[:n].numpy(),
            "titles": ("input", "saliency", "trivial mask", "trivial component"),
        },
        "grid", out_dir,
    )
    print(f"masks + grid written under {out_dir}")
    return 0


def cmd_train_cae(args) -> int:
    cfg_dict = _load_json(args.config) if args.config else {}
    attack_dicts = cfg_dict.pop("attacks", None)
    config = CAEConfig(**cfg_dict)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    target = load_checkpoint(args.checkpoint)
    source, batches = _train_batches(args)
    if attack_dicts:
        specs = [AttackSpec(**d) for d in attack_dicts]
    else:
        maker = AttackSpec.mnist_default if args.dataset == "mnist" else AttackSpec.cifar_default
        specs = [maker("fgsm"), maker("pgd")]
    cae = CAEModel.build(config, channels=source.image_shape[0], seed=config.seed)
    history = train_cae(cae, target, specs, batches, config)
    save_cae(cae, args.out, meta={"history_tail": {k: v[-1] for k, v in history.items()}})
    print(f"saved extrapolator to {args.out} (final pixel loss {history['pixel'][-1]:.4f})")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    cfg = _load_json(args.config)
    if "attack_grid" in cfg:
        cfg["attack_grid"] = tuple(AttackSpec(**d) for d in cfg["attack_grid"])
    if "seeds" in cfg:
        cfg["seeds"] = tuple(cfg["seeds"])
    if args.out:
        cfg["output_dir"] = args.out
    if args.seed is not None:
        cfg["seeds"] = (args.seed,)
    return ExperimentConfig(**cfg)


def cmd_eval(args) -> int:
    config = _experiment_config(args)
    if args.mode == "table":
        records = run_robustness_table(config)
    elif args.mode == "ablation":
        records = run_robustness_table(config, variants=VARIANTS)
    elif args.mode == "adaptive":
        records = run_adaptive_suite(config)
    else:
        report = run_exploratory_decomposition(config)
        print(json.dumps(report, indent=2))
        return 0
    for r in records:
        print(f"{r.variant:12s} {r.attack_family:16s} robust {r.robust_accuracy:6.2f}% "
              f"(clean {r.clean_accuracy:6.2f}%, n={r.n_samples}, seed={r.seed})")
    return 0


def cmd_sweep(args) -> int:
    config = _experiment_config(args)
    if args.kind == "alpha":
        alphas = [float(a) for a in args.alphas.split(",")]
        report = run_alpha_sweep(config, alphas)
    else:
        ks = [int(k) for k in args.ks.split(",")]
        cae_cfg = CAEConfig(**_load_json(args.cae_config)) if args.cae_config else CAEConfig(epochs=args.cae_epochs)
        report = run_k_sweep(config, ks, cae_cfg, train_size=args.train_size)
    print(json.dumps(report, indent=2))
    return 0


def cmd_figures(args) -> int:
    out_dir = Path(args.out)
    if args.kind == "sweep_curve":
        report = _load_json(args.records)
        payload = {
            "x": report["alphas"],
            "series": {fam: [r["robust_accuracy"] for r in rows]
                       for fam, rows in report["families"].items()},
        }
    elif args.kind == "confidence_bars":
        report = _load_json(args.records)
        labels, values = [], []
        for fam, row in report["attacks"].items():
            for comp in ("full", "salient", "trivial"):
                labels.append(f"{fam}/{comp}")
                values.append(row[f"{comp}_confidence_true"])
        payload = {"labels": labels, "values": values}
    elif args.kind == "feature_dump":
        model = load_checkpoint(args.checkpoint)
        source = DatasetSource(args.dataset, Path(args.data_root), "test")
        images, labels = load_arrays(source)
        if args.subset:
            images, labels = stratified_indices_select(images, labels, args.subset,
                                                       source.num_classes, args.seed or 0)
        with torch.no_grad():
            feats = model.features(images)
        payload = {"features": feats.numpy(), "labels": labels.numpy()}
    else:
        raise SystemExit("grid figures are emitted by the surgery subcommand")
    paths = emit_figures(payload, args.kind, out_dir)
    print("\n".join(str(p) for p in paths))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pssr", description=__doc__)
    parser.add_argument("--device", default="cpu", help="compute device (cpu)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_data(p, split_flag=False):
        p.add_argument("--dataset", default="mnist", choices=["mnist", "cifar10", "cifar100"])
        p.add_argument("--data-root", required=True)
        p.add_argument("--subset", type=int, default=None, help="stratified subset size")
        p.add_argument("--batch-size", type=int, default=128)
        p.add_argument("--seed", type=int, default=0)
        if split_flag:
            p.add_argument("--split", default="test", choices=["train", "test"])

    p = sub.add_parser("train-target", help="train a clean classifier")
    common_data(p)
    p.add_argument("--arch", default="lenet5", choices=["lenet5", "resnet18_small", "substitute_mlp"])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("attack", help="craft adversarial examples")
    common_data(p, split_flag=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--family", required=True,
                   choices=["fgsm", "bim", "mim", "pgd", "cw"])
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--norm", default=None, choices=["linf", "l2"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("surgery", help="saliency masks + trivial components for an archive")
    p.add_argument("--archive", required=True, help="adversarial archive (.npz)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--panels", type=int, default=4, help="samples to render in the grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_surgery)

    p = sub.add_parser("train-cae", help="train the regeneration extrapolator")
    common_data(p)
    p.add_argument("--checkpoint", required=True, help="frozen target classifier")
    p.add_argument("--config", default=None, help="JSON with CAEConfig fields (+ optional attacks)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_cae)

    p = sub.add_parser("eval", help="robustness tables, ablations, decomposition, adaptive")
    p.add_argument("--config", required=True, help="JSON with ExperimentConfig fields")
    p.add_argument("--mode", default="table",
                   choices=["table", "ablation", "decomposition", "adaptive"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="threshold-alpha or dropout-k sweeps")
    p.add_argument("--kind", required=True, choices=["alpha", "k"])
    p.add_argument("--config", required=True)
    p.add_argument("--alphas", default="0.9,1.1,1.3,1.5,1.7,2.0")
    p.add_argument("--ks", default="1,2,3,4")
    p.add_argument("--cae-config", default=None)
    p.add_argument("--cae-epochs", type=int, default=5)
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("figures", help="render persisted reports as figures/CSV")
    p.add_argument("--kind", required=True,
                   choices=["sweep_curve", "confidence_bars", "feature_dump"])
    p.add_argument("--records", default=None, help="report JSON (sweep/decomposition)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", default="mnist")
    p.add_argument("--data-root", default=None)
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_figures)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _check_device(args.device)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
