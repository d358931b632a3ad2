"""
命令行入口
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from loguru import logger

from src.core.errors import MomentRegressionError

from . import commands
from .run_config import RunConfig

COMMANDS = {
    "simulate": commands.cmd_simulate,
    "fit": commands.cmd_fit,
    "curves": commands.cmd_curves,
    "coverage": commands.cmd_coverage,
    "summarize": commands.cmd_summarize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="functional-moments",
        description="函数型数据的协变量条件矩估计与自助法置信带",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value 配置文件")
    common.add_argument("--out", help="输出目录")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--B", type=int, dest="B")
    common.add_argument("--alpha", type=float)
    common.add_argument("--transform", choices=["none", "log1p"])
    common.add_argument("--verbose", action="store_true", help="输出 DEBUG 日志")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="按模拟设定生成数据")
    fit = sub.add_parser("fit", parents=[common], help="拟合完整矩模型")
    fit.add_argument("--y")
    fit.add_argument("--x")
    fit.add_argument("--grid")
    curves = sub.add_parser("curves", parents=[common], help="在探针处求值条件矩曲线")
    curves.add_argument("--fit-dir", dest="fit_dir")
    bands = sub.add_parser("bands", parents=[common], help="自助法置信带")
    bands.add_argument("--fit-dir", dest="fit_dir")
    bands.add_argument("--target", required=True, help="例如 beta:0、variance、variance_ratio")
    sub.add_parser("coverage", parents=[common], help="模拟覆盖率与 ISE 实验")
    summarize = sub.add_parser("summarize", parents=[common], help="分组经验矩曲线")
    summarize.add_argument("--y")
    summarize.add_argument("--x")
    summarize.add_argument("--grid")
    summarize.add_argument("--groups")
    return parser


def configure_logging(verbose: bool):
    logger.remove()
    logger.add(
        sys.stderr,
        level="DEBUG" if verbose else "INFO",
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}",
    )


def load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config", "verbose", "target")
    }
    return config.update(overrides).validate(cma=False)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = load_config(args)
        if args.command == "bands":
            paths = commands.cmd_bands(config, args.target)
        else:
            paths = COMMANDS[args.command](config)
    except MomentRegressionError as exc:
        logger.error("{}: {}", type(exc).__name__, exc)
        return exc.exit_code

    for path in paths:
        print(path)
    return 0
