"""Command-line entry point: generate, train, eval, ablate, augment-preview."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig, load_config, parse_pairs
from .core import dft2
from .datakit import (
    GENERATOR_VERSION, ConfigError, export_directory, generate_synthetic, load_directory, make_split,
)
from .esaug import OPS_BY_NAME, apply_intra, fourier_mix, style_mix
from .experiment import dataset_for, evaluate, load_matrix, run_ablation, run_experiment, write_jsonl
from .nn import load_checkpoint, save_checkpoint
from .trainer import accuracy, ensemble_predict, EnsembleModel


def _overrides(args) -> dict[str, str]:
    pairs = parse_pairs(args.set or [])
    for key in ("seed", "target_domain", "data_dir"):
        value = getattr(args, key, None)
        if value is not None:
            pairs[key] = str(value)
    return pairs


def _resolved_config(args) -> RunConfig:
    config = load_config(getattr(args, "config", None), _overrides(args))
    return config.validate()


def _write_resolved(config: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config-resolved.txt").write_text(config.to_text())


def cmd_generate(args) -> int:
    if args.seed is None:
        raise ConfigError("--seed is mandatory")
    ds = generate_synthetic(args.classes, args.per_domain, args.image_size, args.seed)
    out = Path(args.out)
    export_directory(ds, out, {"seed": args.seed, "per_domain": args.per_domain,
                               "image_size": args.image_size, "generator_version": GENERATOR_VERSION})
    config = RunConfig(seed=args.seed, classes=args.classes, per_domain=args.per_domain,
                       image_size=args.image_size, data_seed=args.seed, data_dir=str(out))
    _write_resolved(config, out)
    print(f"wrote {len(ds)} images to {out}")
    return 0


def _report_csv(dataset, ensemble, split, target: int) -> str:
    cols = []
    for d in range(dataset.domain_count):
        ids = dataset.domain_indices(d) if d == target else split.val[d]
        cols.append(accuracy(ensemble_predict(ensemble, dataset.images[ids]), dataset.labels[ids]))
    head = "held_out," + ",".join(dataset.domain_names) + ",avg\n"
    row = dataset.domain_names[target] + "," + ",".join(f"{c:.4f}" for c in cols) + f",{np.mean(cols):.4f}\n"
    return head + row


def cmd_train(args) -> int:
    config = _resolved_config(args)
    out = Path(args.out)
    _write_resolved(config, out)
    dataset = dataset_for(config)
    outcome = run_experiment(config, dataset)
    write_jsonl(out / "metrics.jsonl", outcome.result.log)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    ensemble = outcome.result.ensemble
    manifest = [f"members={ensemble.m}", f"in_channels={dataset.image_shape[0]}"]
    for i, params in enumerate(ensemble.members):
        save_checkpoint(params, ckpt / f"model_{i}.trpe")
        manifest.append(f"model_{i}=model_{i}.trpe best_epoch={ensemble.best_epoch[i]} "
                        f"best_val_acc={ensemble.best_val_acc[i]:.4f}")
    (ckpt / "manifest.txt").write_text("\n".join(manifest) + "\n")
    split = make_split(dataset, config.target_domain, config.val_fraction, config.seed)
    (out / "report.csv").write_text(_report_csv(dataset, ensemble, split, config.target_domain))
    if args.trace:
        write_jsonl(out / "trace.jsonl", ({"epoch": s.epoch, "model": s.model, "step": s.step,
                                           "anchors": list(s.anchors), "partners": list(s.partners)}
                                          for s in outcome.result.trace))
    acc = outcome.metrics.per_domain[config.target_domain]
    print(f"target {dataset.domain_names[config.target_domain]}: {acc:.2f}% top-1 ({ensemble.m} models)")
    return 0


def load_ensemble(run_dir: Path, config: RunConfig) -> EnsembleModel:
    ckpt = Path(run_dir) / "checkpoints"
    manifest = parse_pairs(line.split(" ", 1)[0] for line in (ckpt / "manifest.txt").read_text().splitlines())
    arch = config.arch(int(manifest.get("in_channels", 3)))
    members = [load_checkpoint(ckpt / f"model_{i}.trpe", arch) for i in range(int(manifest["members"]))]
    return EnsembleModel(members, [float("nan")] * len(members), [-1] * len(members))


def cmd_eval(args) -> int:
    run_dir = Path(args.ensemble)
    config = load_config(run_dir / "config-resolved.txt")
    if args.data:
        config = config.replace(data_dir=args.data)
    target = config.target_domain if args.target is None else args.target
    dataset = load_directory(config.data_dir, config.image_size) if config.data_dir else dataset_for(config)
    ensemble = load_ensemble(run_dir, config)
    metrics = evaluate(ensemble, dataset, target, config.seed, config.digest())
    payload = metrics.to_json()
    payload["target_name"] = dataset.domain_names[target]
    out = Path(args.out) if args.out else run_dir / "eval.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"target {payload['target_name']}: {metrics.per_domain[target]:.2f}% top-1 "
          f"over {metrics.counts[target]} samples")
    return 0


def cmd_ablate(args) -> int:
    if not args.seeds:
        raise ConfigError("--seeds is mandatory")
    seeds = [int(s) for s in args.seeds.split(",")]
    base = load_config(args.config, parse_pairs(args.set or [])).replace(seed=seeds[0])
    base.validate()
    out = Path(args.out)
    _write_resolved(base, out)
    dataset = dataset_for(base)
    targets = [int(t) for t in args.targets.split(",")] if args.targets else None
    title, cells = load_matrix(args.matrix)
    rows_path = out / "runs.jsonl"
    rows_path.write_text("")

    def record(rec):
        with open(rows_path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        status = f"{rec['acc']:.2f}" if "acc" in rec else rec["error"]
        print(f"[{rec['cell']}] seed={rec['seed']} target={rec['target']}: {status}", flush=True)

    report = run_ablation((title, cells), seeds, base, dataset, targets, args.workers, record)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.md").write_text(report.to_markdown())
    print(report.to_markdown())
    return 0 if not report.failures() else 1


def _read_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(arr, (2, 0, 1))


def _write_image(arr: np.ndarray, path: Path) -> None:
    pixels = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(np.transpose(pixels, (1, 2, 0)), mode="RGB").save(path)


def _amplitude_heatmap(image: np.ndarray, path: Path) -> None:
    amp = np.mean([np.fft.fftshift(dft2(ch).amplitude) for ch in image], axis=0)
    logamp = np.log1p(amp)
    span = logamp.max() - logamp.min()
    scaled = (logamp - logamp.min()) / span if span > 0 else np.zeros_like(logamp)
    Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L").save(path)


def cmd_augment_preview(args) -> int:
    if args.seed is None:
        raise ConfigError("--seed is mandatory")
    if args.op not in OPS_BY_NAME:
        raise ConfigError(f"unknown op {args.op!r}; choose from {', '.join(OPS_BY_NAME)}")
    image = _read_image(args.input)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    op = OPS_BY_NAME[args.op]
    if op.is_cross:
        if not args.partner:
            raise ConfigError(f"{op.name} needs --partner")
        partner = _read_image(args.partner)
        if partner.shape != image.shape:
            raise ConfigError("input and partner images differ in size")
        if op.name == "FourierMix":
            lam = args.lam if args.lam is not None else args.strength / 30.0
            result = fourier_mix(image, partner, lam)
            stem = out.with_suffix("")
            _amplitude_heatmap(image, Path(f"{stem}_amp_input.png"))
            _amplitude_heatmap(partner, Path(f"{stem}_amp_partner.png"))
            _amplitude_heatmap(fourier_mix(image, partner, lam, clamp=False), Path(f"{stem}_amp_mixed.png"))
        else:
            result = style_mix(image, partner)
    else:
        result = apply_intra(op, image, args.strength, rng, sign=args.sign)
    _write_image(result, out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triplee", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render the synthetic 4-domain benchmark to PNG folders")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-domain", type=int, default=600)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_generate)

    def add_config_args(q):
        q.add_argument("--config", help="key=value config file")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="train one ensemble with one held-out domain")
    add_config_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--data", dest="data_dir")
    p.add_argument("--target", dest="target_domain", type=int)
    p.add_argument("--trace", action="store_true", help="also write the per-step batch trace")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a held-out domain")
    p.add_argument("--ensemble", required=True, help="run directory written by train")
    p.add_argument("--data")
    p.add_argument("--target", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation matrix over seeds and held-out domains")
    add_config_args(p)
    p.add_argument("--matrix", required=True, help="built-in matrix name or cell file")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--targets", help="comma-separated held-out domains (default: all)")
    p.add_argument("--workers", type=int, help="parallel runs (default: TRIPLEE_THREADS or CPU count)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("augment-preview", help="apply one augmentation to a PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--op", required=True)
    p.add_argument("--strength", type=int, default=15)
    p.add_argument("--seed", type=int)
    p.add_argument("--sign", type=int, choices=(-1, 1))
    p.add_argument("--partner")
    p.add_argument("--lam", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment_preview)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
