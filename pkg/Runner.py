import argparse
import logging
import sys
import traceback
from pathlib import Path

import coloredlogs
import yaml
from pydantic import ValidationError

from Eval import benchmark
from Eval.EvalService import EvalService
from Train.TrainService import TrainService
from utils.FlushingFileHandler import FlushingFileHandler
from VOD.faim.dataset import Dataset, generate_dataset
from VOD.faim.utils import (DEFAULT_CONFIG, ConfigError, RunConfig,
                            load_config, parse_overrides)

FORMAT = '%(asctime)s %(levelname)s %(message)s'
COMMANDS = ('generate', 'pretrain', 'finetune', 'eval', 'ablate', 'bench', 'verify')
TESTS_DIR = Path(__file__).resolve().parent / 'tests'


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description='FAIM video object detection at desk scale.',
                                     epilog='Any --key=value after the command overrides a config key.',
                                     allow_abbrev=False)
    parser.add_argument("command", type=str, choices=COMMANDS)
    parser.add_argument("--config", type=str, nargs='?', required=False, default=str(DEFAULT_CONFIG))
    parser.add_argument("--checkpoint", type=str, nargs='?', required=False)
    parser.add_argument("--split", type=str, nargs='?', required=False, default='val')
    parser.add_argument("--stage", type=str, action='append', required=False)
    parser.add_argument("--runslow", action='store_true')
    return parser.parse_known_args(argv)


def setup_logging(run_dir: Path) -> None:
    console_logger = logging.getLogger()
    coloredlogs.install(level='INFO', logger=console_logger, fmt=FORMAT)
    file_handler = FlushingFileHandler(str(run_dir / 'run.log'), formatter=logging.Formatter(FORMAT))
    file_handler.setLevel(logging.INFO)
    console_logger.addHandler(file_handler)


def run(command: str, cfg: RunConfig, args) -> int:
    run_dir = cfg.run_dir()
    if command == 'generate':
        generate_dataset(cfg)
    elif command == 'pretrain':
        TrainService(cfg, run_dir).pretrain(Dataset(cfg.data_dir, 'train'))
    elif command == 'finetune':
        TrainService(cfg, run_dir).finetune(Dataset(cfg.data_dir, 'train'))
    elif command == 'eval':
        service = EvalService(cfg, run_dir)
        dataset = Dataset(cfg.data_dir, args.split)
        checkpoint = args.checkpoint or service.default_checkpoint()
        service.evaluate(dataset, checkpoint)
        service.variance(dataset, checkpoint)
    elif command == 'ablate':
        service = EvalService(cfg, run_dir)
        train, val = Dataset(cfg.data_dir, 'train'), Dataset(cfg.data_dir, 'val')
        service.ablate(train, val)
        service.variance(val, train=train)
    elif command == 'bench':
        benchmark.run_all(cfg, run_dir / 'bench.csv', stages=args.stage or benchmark.STAGES)
    return 0


def verify(runslow: bool = False) -> int:
    import pytest

    argv = [str(TESTS_DIR), '-q']
    if runslow:
        argv.append('--runslow')
    return int(pytest.main(argv))


def main(argv=None) -> int:
    args, extra = parse_args(argv)
    try:
        cfg = load_config(args.config, parse_overrides(extra))
    except (ConfigError, ValidationError) as e:
        print(f'config error: {e}', file=sys.stderr)
        return 2
    if args.command == 'verify':
        return verify(args.runslow)

    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(run_dir)
    with open(run_dir / 'config.yaml', 'w', encoding='utf-8') as f:
        yaml.safe_dump(cfg.dump(), f, sort_keys=True)
    logging.info('%s in %s', args.command, run_dir)
    try:
        return run(args.command, cfg, args)
    except (ConfigError, ValidationError) as e:
        logging.error('config error: %s', e)
        return 2
    except Exception:
        logging.error(traceback.format_exc())
        return 1


if __name__ == '__main__':
    sys.exit(main())
