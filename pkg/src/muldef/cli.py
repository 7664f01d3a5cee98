"""Command-line entry point.

    muldef train  --config CFG --out target.mdl
    muldef attack --config CFG --model target.mdl --out adv.adv
    muldef defend --config CFG --model target.mdl --out family/
    muldef eval   --config CFG --family family/ --out report/
    muldef repro  PRESET --out runs/PRESET

``CFG`` is a YAML file or a preset name. Every subcommand exits nonzero on
any error and rewrites byte-identical files when rerun with the same inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import attacks, config, nn, pipeline
from .defense import load_family, save_family
from .evaluation import emit_report

log = logging.getLogger("muldef")


def _common(p: argparse.ArgumentParser, needs_config: bool = True):
    if needs_config:
        p.add_argument("--config", required=True, help="YAML config file or preset name")
    p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--repeats", type=int, help="override the number of repeats")
    p.add_argument("--scale", choices=config.SCALES, default="desk",
                   help="dataset and architecture size used by presets (default: desk)")
    p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muldef", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the target model")
    _common(p)

    p = sub.add_parser("attack", help="craft an adversarial set against a model")
    _common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("defend", help="generate the model family from a trained target")
    _common(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("eval", help="evaluate a model family")
    _common(p)
    p.add_argument("--family", required=True)

    p = sub.add_parser("repro", help="run train, defend and eval for a preset")
    p.add_argument("preset", help=f"one of {', '.join(sorted(config.PRESETS))}")
    _common(p, needs_config=False)
    p.add_argument("--config", help="optional YAML overrides applied on top of the preset")
    return parser


def _load_config(args) -> config.ExperimentConfig:
    if args.command == "repro":
        if args.preset not in config.PRESETS:
            raise config.ConfigError(f"unknown preset {args.preset!r}; known presets: "
                                     f"{', '.join(sorted(config.PRESETS))}")
        if args.config:
            raw, lines = config._read_yaml(Path(args.config).read_text(), args.config)
            raw.pop("preset", None)
            merged = config._merge(config.preset(args.preset, args.scale), raw)
            cfg = config.from_mapping(merged, lines, args.config)
        else:
            cfg = config.load(args.preset, args.scale)
    else:
        cfg = config.load(args.config, args.scale)
    if args.seed is not None:
        if args.seed < 0:
            raise config.ConfigError("--seed must be nonnegative")
        cfg = pipeline.with_seed(cfg, args.seed)
    if args.repeats is not None:
        if args.repeats < 1:
            raise config.ConfigError("--repeats must be >= 1")
        cfg = dataclasses.replace(cfg, repeats=args.repeats)
    return cfg


def _need(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def cmd_train(cfg, args) -> Path:
    train, _ = pipeline.load_datasets(cfg)
    net, report = pipeline.train_target(cfg, train, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(nn.save(net))
    log.info("trained %s: %d epochs (%s), validation loss %.4f",
             net.id, report.epochs, report.stop_reason, report.val_loss)
    return out


def cmd_attack(cfg, args) -> Path:
    net = nn.load(_need(args.model, "model file").read_bytes())
    _, test = pipeline.load_datasets(cfg)
    eval_set, holdout = pipeline.split_evaluation(cfg, test, cfg.seed)
    adv = pipeline.attack_target(cfg, net, eval_set, holdout, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(attacks.save_adversarial(adv, seed=cfg.seed))
    log.info("%s %s set: %d examples, accuracy of %s %.4f", adv.scenario, adv.attack.name,
             len(adv), net.id, nn.accuracy(net, adv.x, adv.y))
    return out


def cmd_defend(cfg, args) -> Path:
    target = nn.load(_need(args.model, "model file").read_bytes())
    train, _ = pipeline.load_datasets(cfg)
    family = pipeline.build_family(cfg, target, train, cfg.seed)
    return save_family(family, args.out, seed=cfg.seed)


def cmd_eval(cfg, args) -> Path:
    fdir = _need(args.family, "family directory")
    _need(str(fdir / "manifest.json"), "family manifest")
    family = load_family(fdir)
    _, test = pipeline.load_datasets(cfg)
    eval_set, holdout = pipeline.split_evaluation(cfg, test, cfg.seed)
    report = pipeline.evaluate(cfg, family, eval_set, holdout, cfg.seed)
    emit_report(report, args.out)
    for k, v in sorted(report.summary.items()):
        if isinstance(v, float):
            log.info("%s = %.4f", k, v)
    return Path(args.out)


def cmd_repro(cfg, args) -> Path:
    summary = pipeline.run_experiment(cfg, args.out)
    for k, v in sorted(summary["mean"].items()):
        log.info("mean %s = %.4f", k, v)
    return Path(args.out)


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "defend": cmd_defend,
            "eval": cmd_eval, "repro": cmd_repro}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        with threadpool_limits(limits=args.threads):
            out = COMMANDS[args.command](cfg, args)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, nn.FormatError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
