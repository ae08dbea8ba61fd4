import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from src.ablation import AXES, run_ablation
from src.config import MaskingStrategy, TrainConfig, get_settings, load_train_config
from src.datagen import eval_corpus, load_corpus, save_corpus, training_corpus
from src.dependencies import RunDir
from src.errors import SyncMaskError
from src.evaluation import dump_masks, evaluate_retrieval
from src.model import load_checkpoint
from src.selfcheck import run_selfcheck
from src.training import pretrain
from src.utils import format_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    """The configuration could not be read or validated."""


def _load_config(path: Path | None) -> TrainConfig:
    path = path if path is not None else get_settings().config_path
    if path is None:
        return TrainConfig()
    try:
        return load_train_config(path)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}:\n{e}") from e


def _with_output(config: TrainConfig, output_dir: Path | None) -> TrainConfig:
    if output_dir is None:
        return config
    return config.model_copy(update={"output_dir": output_dir})


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    out: Path = args.out or config.output_dir / "corpus.txt"
    save_corpus(training_corpus(config.corpus, config.model), out)
    if args.eval_out is not None:
        save_corpus(eval_corpus(config.corpus, config.model), args.eval_out)
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = _with_output(_load_config(args.config), args.output_dir)
    corpus = load_corpus(args.corpus) if args.corpus is not None else None
    result = pretrain(config, RunDir(config.output_dir), corpus=corpus)
    final = result.retrieval[-1]
    print(format_table(["metric", "value"], [[k, v] for k, v in final.as_record().items()]))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    eval_set = load_corpus(args.corpus) if args.corpus is not None else eval_corpus(config.corpus, model.config)
    report = evaluate_retrieval(model, eval_set, config.eval_ks)
    print(format_table(["metric", "value"], [[k, v] for k, v in report.as_record().items()]))
    return EXIT_OK


def cmd_dump_masks(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    pairs = load_corpus(args.corpus) if args.corpus is not None else training_corpus(config.corpus, model.config)
    strategy = MaskingStrategy(text=args.text_strategy, image=args.image_strategy)
    dump_masks(model, pairs, args.out, config.mask, strategy, seed=config.seed)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _with_output(_load_config(args.config), args.output_dir)
    rows = run_ablation(config, args.axes, config.output_dir)
    failed = [row for row in rows if row.status == "failed"]
    if failed:
        logger.warning(f"{len(failed)} of {len(rows)} ablation cells failed")
    return EXIT_OK


def cmd_selfcheck(args: argparse.Namespace) -> int:
    results = run_selfcheck()
    print(
        format_table(
            ["check", "status", "seconds", "detail"],
            [[r.name, "PASS" if r.passed else "FAIL", r.seconds, r.detail] for r in results],
        )
    )
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syncmask",
        description="Desk-scale vision-language pretraining with synchronized attentional masking",
    )
    parser.add_argument("--log-level", default=None, help="overrides SYNCMASK_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", type=Path, default=None, help="TrainConfig JSON document")
        return p

    gen = with_config(sub.add_parser("gen-data", help="write the synthetic corpus"))
    gen.add_argument("--out", type=Path, default=None)
    gen.add_argument("--eval-out", type=Path, default=None)
    gen.set_defaults(handler=cmd_gen_data)

    train = with_config(sub.add_parser("pretrain", help="train and write metrics and checkpoint"))
    train.add_argument("--output-dir", type=Path, default=None)
    train.add_argument("--corpus", type=Path, default=None, help="corpus file from gen-data")
    train.set_defaults(handler=cmd_pretrain)

    evaluate = with_config(sub.add_parser("eval", help="retrieval recall of a checkpoint"))
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--corpus", type=Path, default=None, help="eval corpus (one view per item)")
    evaluate.set_defaults(handler=cmd_eval)

    dump = with_config(sub.add_parser("dump-masks", help="per-pair masks and attention heatmaps"))
    dump.add_argument("--checkpoint", type=Path, required=True)
    dump.add_argument("--corpus", type=Path, default=None)
    dump.add_argument("--out", type=Path, required=True)
    dump.add_argument("--text-strategy", choices=["random", "attentional"], default="attentional")
    dump.add_argument("--image-strategy", choices=["random", "attentional"], default="attentional")
    dump.set_defaults(handler=cmd_dump_masks)

    ablate = with_config(sub.add_parser("ablate", help="masking and grouping ablation grid"))
    ablate.add_argument("--axes", nargs="+", choices=list(AXES), default=list(AXES))
    ablate.add_argument("--output-dir", type=Path, default=None)
    ablate.set_defaults(handler=cmd_ablate)

    check = sub.add_parser("selfcheck", help="run the invariant suite at tiny shapes")
    check.set_defaults(handler=cmd_selfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or get_settings().log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except ValidationError as e:
        logger.error(f"invalid configuration:\n{e}")
        return EXIT_CONFIG
    except (SyncMaskError, ArithmeticError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
