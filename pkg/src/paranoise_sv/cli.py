"""Command-line entry points: train, eval, ablation, params, mix, synth."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_model
from .config import ConfigError, RunConfig, load_config
from .datapipe import (AudioFormatError, ManifestError, load_wav, mix_at_snr, read_manifest,
                       read_trials, save_wav, fit_noise)
from .dual_unet import Variant
from .evaluation import ConditionReport, expand_conditions, run_trials
from .model import ParaNoiseSV, count_parameters

log = logging.getLogger("paranoise_sv")


def cmd_train(args):
    from .train import train

    cfg = load_config(args.config)
    result = train(cfg, resume=args.resume)
    print(f"last checkpoint: {result.last_checkpoint}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return 0


def evaluate_checkpoint(ckpt, trials_path, conditions, snrs, noise_manifest=None, seed=None,
                        variant=None) -> ConditionReport:
    model, blob = load_model(ckpt, expected_variant=variant)
    run_cfg = blob["header"].get("run_config", {})
    noise_manifest = noise_manifest or run_cfg.get("data", {}).get("noise_manifest")
    conds = expand_conditions(conditions, snrs)
    noise = read_manifest(noise_manifest) if any(c.category for c in conds) else []
    seed = run_cfg.get("seed", 0) if seed is None else seed
    return run_trials(model, read_trials(trials_path), conds, noise, seed=seed,
                      label=f"[{model.variant.value}]")


def cmd_eval(args):
    snrs = [float(s) for s in args.snr.split(",")] if args.snr else None
    report = evaluate_checkpoint(args.ckpt, args.trials, args.conditions.split(","),
                                 snrs or (0, 5, 10, 15, 20), args.noise_manifest, args.seed,
                                 args.variant)
    out = Path(args.out or Path(args.ckpt).parent)
    report.write(out, args.stem, plot=args.plot)
    sys.stdout.write(report.to_table())
    return 0


def parameter_count(cfg: RunConfig) -> int:
    return count_parameters(ParaNoiseSV(cfg.model_config()))


def cmd_params(args):
    cfg = load_config(args.config)
    print(parameter_count(cfg))
    return 0


def run_ablation(cfg: RunConfig):
    """Train and evaluate every wiring variant under one seed; returns report rows."""
    from .train import train

    rows = []
    conds = list(cfg.eval.conditions)
    for variant in Variant:
        vcfg = cfg.replace(variant=variant.value, out_dir=str(Path(cfg.out_dir) / variant.value))
        result = train(vcfg)
        trials = cfg.data.trials
        row = {"variant": variant.value, "parameters": parameter_count(vcfg)}
        if trials:
            report = evaluate_checkpoint(result.best_checkpoint, trials, conds, cfg.eval.snrs,
                                         cfg.data.noise_manifest, cfg.seed)
            report.write(Path(vcfg.out_dir), "report", plot=cfg.eval.plot)
            row["eer_percent"] = {r.condition.name: round(100 * r.eer, 4) for r in report.results}
            row["avg_eer_percent"] = round(100 * report.average, 4)
        rows.append(row)
    return rows


def format_ablation(rows) -> str:
    conds = list(rows[0].get("eer_percent", {}))
    head = f"{'variant':<16}{'params':>12}" + "".join(f"{c:>12}" for c in conds)
    head += f"{'Avg.':>10}" if conds else ""
    lines = [head]
    for r in rows:
        line = f"{r['variant']:<16}{r['parameters']:>12,d}"
        if conds:
            line += "".join(f"{r['eer_percent'][c]:>12.2f}" for c in conds)
            line += f"{r['avg_eer_percent']:>10.2f}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def cmd_ablation(args):
    cfg = load_config(args.config)
    rows = run_ablation(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_mix(args):
    speech = load_wav(args.inp).astype(np.float64)
    noise, _ = fit_noise(load_wav(args.noise), len(speech), np.random.default_rng(args.seed))
    mixed, _ = mix_at_snr(speech, noise, args.snr)
    peak = np.abs(mixed).max()
    if peak > 1.0:
        mixed = mixed / peak
        log.warning("mixture peaked at %.3f; rescaled to avoid clipping", peak)
    save_wav(args.out, mixed, as_int16=not args.float)
    return 0


def cmd_synth(args):
    from .synth import generate_corpus

    layout = generate_corpus(args.out, args.speakers, args.utterances, args.duration,
                             seed=args.seed)
    print(f"wrote {layout.train_manifest}, {layout.noise_manifest}, {layout.trials}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="paranoise", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a YAML config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trial list under noise conditions")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--trials", required=True)
    e.add_argument("--conditions", default="clean",
                   help="comma list of clean, babble, music, noise, nonspeech or cat@snr")
    e.add_argument("--snr", help="comma list of SNRs for bare categories")
    e.add_argument("--noise-manifest")
    e.add_argument("--variant", help="fail unless the checkpoint holds this variant")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--stem", default="report")
    e.add_argument("--plot", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablation", help="train and compare the four wiring variants")
    a.add_argument("--config", required=True)
    a.set_defaults(func=cmd_ablation)

    c = sub.add_parser("params", help="print the trainable parameter count")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_params)

    m = sub.add_parser("mix", help="mix a noise file into speech at a given SNR")
    m.add_argument("--in", dest="inp", required=True)
    m.add_argument("--noise", required=True)
    m.add_argument("--snr", type=float, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--float", action="store_true", help="write 32-bit float samples")
    m.set_defaults(func=cmd_mix)

    s = sub.add_parser("synth", help="write the synthetic desk-scale corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=8)
    s.add_argument("--utterances", type=int, default=10)
    s.add_argument("--duration", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CheckpointError, ConfigError, ManifestError, AudioFormatError,
            FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
