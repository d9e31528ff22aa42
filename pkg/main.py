import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from core.config_manager import ConfigManager, TrainConfig
from core.datapipe import colorize_labels, voc_palette
from core.emit import write_json
from core.errors import ConfigError, DropRegError
from core.image_io import read_label, write_rgb
from core.matrix import table2_matrix, run_matrix
from core.trainer import evaluate_checkpoint, run_experiment
from core.variance_lab import default_sweep, load_sweep, run_sweep
from utils.logger import setup_logging

logger = logging.getLogger(__name__)


def cmd_train(args) -> int:
    config = ConfigManager(args.config)
    experiments = config.experiments
    if args.seed is not None:
        experiments = [e.with_seed(args.seed) for e in experiments]
    if args.epochs is not None:
        experiments = [replace(e, train=replace(e.train, epochs=args.epochs)) for e in experiments]
    out = Path(args.out)
    for exp in experiments:
        target = out if len(experiments) == 1 else out / exp.name
        run_experiment(exp, target, resume=args.resume)
    return 0


def cmd_matrix(args) -> int:
    if args.preset != 'table2':
        raise ConfigError(f"unknown matrix preset {args.preset!r}")
    train = TrainConfig()
    if args.config:
        config = ConfigManager(args.config)
        train = TrainConfig.from_dict(config.settings)
    overrides = {k: v for k, v in (('epochs', args.epochs), ('seed', args.seed)) if v is not None}
    if overrides:
        train = replace(train, **overrides)
    matrix = table2_matrix(train, scheduled=None if args.scheduled else False)
    run_matrix(matrix, Path(args.out), args.parallel)
    return 0


def cmd_varshift(args) -> int:
    runs = load_sweep(Path(args.sweep)) if args.sweep else default_sweep(args.samples, args.seed)
    run_sweep(runs, Path(args.out))
    return 0


def cmd_eval(args) -> int:
    result = evaluate_checkpoint(Path(args.checkpoint), Path(args.dataset))
    if args.out:
        write_json(Path(args.out), {'summary': result.summary, 'per_image_miou': result.mious})
    s = result.summary
    print(f"mean={s.mean:.4f} std={s.std:.4f} worst={s.worst:.4f} median={s.median:.4f} "
          f"best={s.best:.4f} loss={s.loss:.4f}")
    return 0


def cmd_colorize(args) -> int:
    label = read_label(Path(args.labels))
    write_rgb(Path(args.out), colorize_labels(label, voc_palette()))
    logger.info(f"已写入 {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dropreg', description='语义分割 dropout 正则化实验')
    parser.add_argument('-v', '--verbose', action='store_true', help='输出 DEBUG 日志')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='按配置文件训练一个或多个实验')
    p.add_argument('--config', required=True)
    p.add_argument('--seed', type=int)
    p.add_argument('--epochs', type=int)
    p.add_argument('--out', default='runs/train')
    p.add_argument('--resume', action='store_true', help='从输出目录里的 last 检查点继续')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('matrix', help='执行内置实验矩阵')
    p.add_argument('--preset', default='table2')
    p.add_argument('--scheduled', action='store_true', help='同时执行 linear_ramp 调度版本')
    p.add_argument('--parallel', type=int, default=1)
    p.add_argument('--config', help='settings 作为所有实验的训练配置')
    p.add_argument('--epochs', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser('varshift', help='方差偏移：闭式解与蒙特卡洛对比')
    p.add_argument('--sweep')
    p.add_argument('--samples', type=int, default=200_000)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', default='varshift.csv')
    p.set_defaults(func=cmd_varshift)

    p = sub.add_parser('eval', help='在验证集上评估检查点')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', required=True, help='VOC 根目录或 synthetic.json')
    p.add_argument('--out')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('colorize', help='标签图上色')
    p.add_argument('--labels', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_colorize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except DropRegError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
