"""
train: fit a WDPN on a dataset and export it with its training report
"""

import argparse
import logging
import time

from commands.common import (args_config, int_list, positive_int, require_file,
                             seed_int, write_payload)
from utils.datagen import read_dataset
from utils.nn_core import save_model
from utils.settings import ExitCodes, TrainingDefaults
from utils.training import OPTIMIZERS, TrainConfig, train

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser("train", help="Train a Wide and Deep PointNet")
    parser.add_argument("--data", required=True, help="training dataset (.ndjson)")
    parser.add_argument("--out", required=True, help="model JSON path")
    parser.add_argument("--report", default=None, help="training report path (default: <out>.report.json)")
    parser.add_argument("--seed", type=seed_int, default=0)
    parser.add_argument("--epochs", type=positive_int, default=TrainingDefaults.EPOCHS)
    parser.add_argument("--batch-size", type=positive_int, default=TrainingDefaults.BATCH_SIZE)
    parser.add_argument("--lr", type=float, default=TrainingDefaults.LEARNING_RATE)
    parser.add_argument("--optimizer", choices=OPTIMIZERS, default=TrainingDefaults.OPTIMIZER)
    parser.add_argument("--hidden", type=int_list, default=None, help="point MLP widths, e.g. 32,64")
    parser.add_argument("--validation-fraction", type=float, default=TrainingDefaults.VALIDATION_FRACTION)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    dataset = read_dataset(require_file(args.data, "dataset"))
    options = dict(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                   optimizer=args.optimizer, seed=args.seed,
                   validation_fraction=args.validation_fraction)
    if args.hidden:
        options["hidden_widths"] = tuple(args.hidden)
    config = TrainConfig(**options)

    started = time.perf_counter()
    model, report = train(dataset, config)
    elapsed = time.perf_counter() - started
    model_checksum = save_model(model, args.out)

    body = report.to_dict()
    body["dataset_id"] = dataset.checksum()
    body["architecture"] = {"K": model.n_points, "D": model.n_tabular,
                            "hidden_widths": list(config.hidden_widths), "latent_dim": model.latent_dim}
    write_payload(args.report or f"{args.out}.report.json", "train_report", body, args.seed,
                  dict(args_config(args), train_config=config.to_dict()), model_checksum,
                  {"train": elapsed})
    logger.info("Model %s: balanced accuracy %.3f", model_checksum[:12], report.balanced_accuracy)
    return ExitCodes.OK
