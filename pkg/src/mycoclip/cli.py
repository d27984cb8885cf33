"""Command-line entry point: generate -> caption -> train -> eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import captions as cap
from .config import PROVIDERS, PipelineConfig, load_config
from .dataset import MANIFEST_NAME, SPLITS, attach_captions, build_dataset, load_dataset, make_caption_sets
from .embed import load_checkpoint
from .errors import ConfigError, IntegrityError, MycoError, ProviderError
from .morphology import StageClass
from .train import DivergenceError, train
from .zeroshot import build_prototypes, evaluate

log = logging.getLogger("mycoclip")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INTERRUPTED = 0, 1, 2, 130


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = max(1, args.threads)
    if getattr(args, "count", None) is not None:
        if args.count % len(StageClass):
            raise ConfigError(f"--count {args.count} is not divisible by the {len(StageClass)} classes")
        cfg.count_per_class = args.count // len(StageClass)
    if getattr(args, "epochs", None) is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    if getattr(args, "provider", None) is not None:
        cfg.provider = args.provider
    return cfg


def _save_effective(cfg: PipelineConfig) -> None:
    cfg.write(cfg.run_dir / "config.effective.json")


def cmd_generate(cfg: PipelineConfig) -> dict:
    try:
        manifest = build_dataset(cfg.dataset_config())
    except OSError as exc:
        raise CommandError(f"dataset generation failed: {exc}") from exc
    counts = manifest.class_split_counts()
    print(f"dataset written to {manifest.root}")
    print(f"{'class':<10}" + "".join(f"{s:>8}" for s in SPLITS))
    for stage in StageClass:
        print(f"{stage.label:<10}" + "".join(f"{counts.get((stage.label, s), 0):>8}" for s in SPLITS))
    totals = manifest.split_counts()
    print(f"{'total':<10}" + "".join(f"{totals[s]:>8}" for s in SPLITS))
    print(f"manifest sha256 {manifest.checksum}")
    return {"split_counts": totals, "manifest_sha256": manifest.checksum}


def cmd_caption(cfg: PipelineConfig) -> dict:
    out = cfg.run_dir / "captions"
    out.mkdir(parents=True, exist_ok=True)
    if cfg.provider == "remote":
        transport = cap.ReplayTransport(cfg.remote.replay_dir) if cfg.remote.replay_dir else None
        sets = {}
        for stage in StageClass:
            try:
                sets[stage] = cap.fetch_remote_captions(stage, cfg.remote.endpoint(), cfg.captions, transport)
            except ProviderError as exc:
                raw = getattr(exc, "raw_body", "")
                detail = f"\n{raw[:500]}" if raw else ""
                raise CommandError(f"caption provider failed for {stage.label}: {exc}{detail}") from exc
    else:
        sets = make_caption_sets(cfg.dataset_config())
    stats = {}
    for stage, cs in sets.items():
        cs.write(out / f"{stage.label}.txt")
        st = cap.caption_stats(cs)
        stats[stage.label] = st.__dict__
        print(f"{stage.label:<10} {cs.provider:<20} count={st.count} mean_len={st.mean_length:.2f} vocab={st.vocabulary_size}")
    if (cfg.data_dir / MANIFEST_NAME).exists():
        attach_captions(cfg.data_dir, sets)
        print(f"captions attached to {cfg.data_dir / MANIFEST_NAME}")
    return stats


def _open_dataset(cfg: PipelineConfig):
    path = cfg.data_dir / MANIFEST_NAME
    if not path.exists():
        raise CommandError(f"no dataset manifest at {path}; run `generate` first", EXIT_USAGE)
    try:
        return load_dataset(path)
    except IntegrityError as exc:
        raise CommandError(str(exc)) from exc


def cmd_train(cfg: PipelineConfig) -> dict:
    view = _open_dataset(cfg)
    try:
        result = train(view, cfg.train_config(), cfg.train_dir)
    except DivergenceError as exc:
        raise CommandError(f"{exc}; last good checkpoint: {exc.checkpoint}") from exc
    final = result.metrics[-1]
    print(f"trained {len(result.metrics)} epochs; checkpoint {result.checkpoint}")
    print(f"final val Recall@1 {final['val_recall_at_1']:.4f}")
    return final


def cmd_eval(cfg: PipelineConfig, checkpoint=None, split=None) -> dict:
    view = _open_dataset(cfg)
    ckpt = Path(checkpoint) if checkpoint else cfg.train_dir / "checkpoint.npz"
    if not ckpt.exists():
        raise CommandError(f"checkpoint not found: {ckpt}", EXIT_USAGE)
    pair, extra = load_checkpoint(ckpt)
    if extra.get("manifest_sha256") != view.manifest.checksum:
        raise CommandError(f"checkpoint {ckpt} was trained on a different dataset manifest")
    split = split or cfg.eval_split
    protos = build_prototypes(pair, view.captions, cfg.prototype_mode)
    report = evaluate(view, split, pair, protos)
    report.extra["config_sha256"] = cfg.digest()
    report.extra["checkpoint_epoch"] = extra.get("epoch")
    report.write(cfg.eval_dir)
    print(f"{split} Recall@1 {report.recall_at_1:.4f} ({report.total} samples)")
    print("confusion (rows true, columns predicted):")
    print(f"{'':<10}" + "".join(f"{s.label:>10}" for s in StageClass))
    for s in StageClass:
        print(f"{s.label:<10}" + "".join(f"{int(x):>10}" for x in report.confusion[s]))
    return report.to_json()


def _status(cfg: PipelineConfig, **fields) -> None:
    path = cfg.run_dir / "status.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n")


def cmd_pipeline(cfg: PipelineConfig) -> dict:
    summary = {}
    stages = [
        ("generate", lambda: cmd_generate(cfg)),
        ("caption", lambda: cmd_caption(cfg)),
        ("train", lambda: cmd_train(cfg)),
        ("eval", lambda: cmd_eval(cfg)),
    ]
    done: list[str] = []
    for name, run in stages:
        _status(cfg, complete=False, stage=name, finished=done)
        try:
            summary[name] = run()
        except KeyboardInterrupt:
            _status(cfg, complete=False, stage=name, finished=done, interrupted=True)
            raise
        done.append(name)
    _status(cfg, complete=True, stage=None, finished=done)
    ev = summary["eval"]
    print(f"pipeline complete: {cfg.eval_split} Recall@1 {ev['recall_at_1']:.4f}, outputs under {cfg.run_dir}")
    return summary


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="run directory")
    common.add_argument("--threads", type=int, help="worker cap for image generation")

    parser = argparse.ArgumentParser(prog="mycoclip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="build the image dataset")
    g.add_argument("--count", type=int, help="total images (split evenly across classes)")
    c = sub.add_parser("caption", parents=[common], help="write per-class caption files")
    c.add_argument("--provider", choices=PROVIDERS)
    t = sub.add_parser("train", parents=[common], help="train the dual encoder")
    t.add_argument("--epochs", type=int)
    e = sub.add_parser("eval", parents=[common], help="zero-shot evaluation")
    e.add_argument("--checkpoint")
    e.add_argument("--split", choices=SPLITS)
    p = sub.add_parser("pipeline", parents=[common], help="generate, caption, train and eval")
    p.add_argument("--count", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--provider", choices=PROVIDERS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _effective_config(args)
        _save_effective(cfg)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "caption":
            cmd_caption(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.split)
        else:
            cmd_pipeline(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        print("interrupted; partial outputs are marked incomplete", file=sys.stderr)
        return EXIT_INTERRUPTED
    except (MycoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
