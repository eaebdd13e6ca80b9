"""Command-line entry point: ``python -m dsd <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import data_synth
from ..adapt import TuneConfig, evaluate, few_shot_tune
from ..diffusion import ModelConfig, PretrainConfig, pretrain
from ..errors import ConfigError, DSDError, FormatError, UsageError
from ..scoring import HEAD_MODES, POOLINGS, ScoreConfig, score_pair
from .checkpoint import load_checkpoint, save_checkpoint
from .experiments import AXES, run_ablation
from .report import RunReport, canonical_json

log = logging.getLogger("dsd")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _add_score_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--noise", type=float, help="single noise level in (0, 1) (default 0.4)")
    g.add_argument("--ensemble", action="store_true", help="average levels 0.2, 0.4, 0.6, 0.8")
    p.add_argument("--layers", type=_int_list, help="comma-separated layer indices (default all)")
    p.add_argument("--heads", choices=HEAD_MODES, default="dynamic")
    p.add_argument("--pool", choices=POOLINGS, default="lse")
    p.add_argument("--lambda", dest="lam", type=float, default=5.0)
    p.add_argument("--draws", type=_positive_int, default=1, help="noise draws averaged per level")


def _score_config(args, calibration=(1.0, 0.0)) -> ScoreConfig:
    kw = dict(
        lam=args.lam,
        layer_set=args.layers,
        head_mode=args.heads,
        pooling=args.pool,
        noise_draws=args.draws,
        calibration=tuple(calibration),
    )
    if args.ensemble:
        return ScoreConfig.ensembled(**kw)
    return ScoreConfig(noise_levels=(0.4 if args.noise is None else args.noise,), **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsd", description="Cross-attention image-text matching on a toy diffusion model.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/eval splits")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-eval", type=int, default=500)
    p.add_argument("--candidates", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain", help="train the denoiser on positive pairs")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=PretrainConfig.steps)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=_positive_int, default=PretrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=PretrainConfig.lr)
    p.add_argument("--lr-final", type=float, default=PretrainConfig.lr_final)

    p = sub.add_parser("score", help="score one scene against one caption")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene-json", required=True, help="path to a scene JSON file, or the JSON itself")
    p.add_argument("--caption", required=True)
    p.add_argument("--prompts")
    _add_score_flags(p)

    p = sub.add_parser("tune", help="few-shot prompt tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shots", type=int, default=TuneConfig.shots)
    p.add_argument("--steps", type=int, default=TuneConfig.steps)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=TuneConfig.lr)
    p.add_argument("--batch-size", type=_positive_int, default=TuneConfig.batch_size)
    p.add_argument("--loss", choices=("binary", "multiclass"), default=TuneConfig.loss_mode)
    p.add_argument("--report")
    _add_score_flags(p)

    p = sub.add_parser("eval", help="top-1/top-5/per-slot accuracy on the eval split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    _add_score_flags(p)

    p = sub.add_parser("ablate", help="sweep one scoring axis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--report", required=True)
    _add_score_flags(p)
    return parser


def _load_scene(text: str) -> data_synth.Scene:
    path = Path(text)
    try:
        raw = path.read_text(encoding="utf-8") if path.exists() else text
        return data_synth.Scene.from_dict(json.loads(raw))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot read scene from {text!r}: {exc}") from None


def _load_prompts(path, model):
    if path is None:
        return None
    ck = load_checkpoint(path)
    expected = ck.config.get("backbone_checksum")
    if expected is not None and expected != model.checksum():
        raise ConfigError("prompts were tuned on a different backbone checkpoint")
    return ck.prompts()


def _emit(report: RunReport, path) -> None:
    if path:
        report.write(path)
    sys.stdout.write(report.to_text())


def cmd_gen_data(args) -> None:
    train, eval_ = data_synth.build_dataset(args.n_train, args.n_eval, args.candidates, args.seed)
    data_synth.save_splits(args.out, train, eval_)
    print(f"wrote {len(train)} train and {len(eval_)} eval instances to {args.out}")


def cmd_pretrain(args) -> None:
    train = data_synth.load_split(args.data, "train")
    cfg = PretrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, lr_final=args.lr_final, seed=args.seed)
    model, losses = pretrain(train, cfg, ModelConfig())
    save_checkpoint(model, None, args.out, {"pretrain": dict(cfg.__dict__), "n_train": len(train)})
    print(f"pretrained {cfg.steps} steps on {len(train)} pairs; final loss {losses[-1]:.5f}; wrote {args.out}")


def cmd_score(args) -> None:
    model = load_checkpoint(args.ckpt).model()
    prompts = _load_prompts(args.prompts, model)
    scene = _load_scene(args.scene_json)
    caption = data_synth.parse_caption(args.caption)
    cfg = _score_config(args, prompts.calibration if prompts else (1.0, 0.0))
    s = score_pair(model, data_synth.render(scene), [caption], cfg, noise_seed=scene.seed, prompts=prompts)[0]
    out = {
        "caption": caption.text,
        "scene": scene.to_dict(),
        "config": cfg.to_dict(),
        "raw": s.raw,
        "calibrated": s.calibrated,
        "layers": list(s.layers),
        "heads": list(s.heads),
        "breakdown": s.breakdown,
        "head_weights": s.head_weights,
        "per_level": {f"{k:g}": v for k, v in s.per_level.items()},
    }
    print(canonical_json(out))


def cmd_tune(args) -> None:
    ck = load_checkpoint(args.ckpt)
    model = ck.model()
    train = data_synth.load_split(args.data, "train")
    tcfg = TuneConfig(
        shots=args.shots, steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed, loss_mode=args.loss
    )
    scfg = _score_config(args)
    res = few_shot_tune(model, train, tcfg, scfg)
    config = {"tune": tcfg.to_dict(), "score": scfg.to_dict(), "backbone_checksum": model.checksum()}
    save_checkpoint(None, res.params, args.out, config)
    report = RunReport("tune", config, args.seed, {"final_loss": res.losses[-1] if res.losses else None}, {}, {"tune": res.losses})
    _emit(report, args.report)


def cmd_eval(args) -> None:
    model = load_checkpoint(args.ckpt).model()
    prompts = _load_prompts(args.prompts, model)
    cfg = _score_config(args, prompts.calibration if prompts else (1.0, 0.0))
    data = data_synth.load_split(args.data, "eval")
    metrics = evaluate(model, prompts, data, cfg)
    config = {"score": cfg.to_dict(), "prompts": args.prompts is not None, "backbone_checksum": model.checksum()}
    _emit(RunReport("eval", config, None, metrics), args.report)


def cmd_ablate(args) -> None:
    model = load_checkpoint(args.ckpt).model()
    prompts = _load_prompts(args.prompts, model)
    cfg = _score_config(args, prompts.calibration if prompts else (1.0, 0.0))
    data = data_synth.load_split(args.data, "eval")
    rows = run_ablation(model, data, args.axis, cfg, prompts)
    config = {"axis": args.axis, "base": cfg.to_dict(), "prompts": args.prompts is not None, "backbone_checksum": model.checksum()}
    _emit(RunReport("ablate", config, None, {}, {args.axis: rows}), args.report)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "score": cmd_score,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except FormatError as exc:
        print(f"dsd: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ConfigError) as exc:
        print(f"dsd: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DSDError as exc:
        print(f"dsd: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
