"""
    Command line entry point

        python main.py run <config.yaml>
        python main.py sweep-rd <config.yaml>
        python main.py sweep-psnr <config.yaml>
        python main.py sweep-ablation <config.yaml>
        python main.py plot <run-dir>
        python main.py detect <run-dir> --ood <idx-file> [--method combined]

    Exit codes: 0 ok, 2 config error, 3 runtime failure
"""

import sys
import argparse
from typing import List

from semcommlib.ExperimentRunner import ExperimentRunner
from semcommlib.Plotter import Plotter
from semcommlib.exceptions import ConfigError
from semcommlib.utils import setup_logger

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_FAILURE = 3

logger = setup_logger('semcomm')

SWEEP_COMMANDS = {
    'run': ExperimentRunner.run,
    'sweep-rd': ExperimentRunner.sweep_rate_distortion,
    'sweep-psnr': ExperimentRunner.sweep_psnr,
    'sweep-ablation': ExperimentRunner.sweep_ablation,
}


def build_parser() -> argparse.ArgumentParser:

    parser = argparse.ArgumentParser(prog='semcomm', description='Domain-shift robust task-oriented communication experiments')
    commands = parser.add_subparsers(dest='command', required=True)

    for name in SWEEP_COMMANDS:
        command = commands.add_parser(name)
        command.add_argument('config', help='YAML experiment config')
        command.add_argument('--run-dir', default=None, help='Output directory (default: <output_dir>/<name>-<config hash>)')

    plot = commands.add_parser('plot')
    plot.add_argument('run_dir')

    detect = commands.add_parser('detect')
    detect.add_argument('run_dir')
    detect.add_argument('--ood', required=True, help='IDX image file to score')
    detect.add_argument('--method', default=None, help='Use the checkpoint of this method')
    detect.add_argument('--seed', type=int, default=0)

    return parser


def main(argv:List[str]=None) -> int:

    args = build_parser().parse_args(argv)

    try:
        if args.command in SWEEP_COMMANDS:
            runner = ExperimentRunner.from_file(args.config, run_dir=args.run_dir)
            output = SWEEP_COMMANDS[args.command](runner)
            print(output)

        elif args.command == 'plot':
            for path in Plotter().emit_plot_data(args.run_dir):
                print(path)

        elif args.command == 'detect':
            print(ExperimentRunner.detect(args.run_dir, args.ood, method=args.method, seed=args.seed))

    except ConfigError as e:
        logger.error(f'main(): Config error: {e}')
        return EXIT_CONFIG_ERROR

    except Exception as e:
        logger.exception(f'main(): "{args.command}" failed: {e}')
        return EXIT_RUNTIME_FAILURE

    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
