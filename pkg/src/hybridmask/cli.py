#
# Copyright (c) nexB Inc. and others. All rights reserved.
# SPDX-License-Identifier: Apache-2.0
# See http://www.apache.org/licenses/LICENSE-2.0 for the license text.
# See https://github.com/aboutcode-org/hybridmask for support or download.
# See https://aboutcode.org for more information about nexB OSS projects.
#

"""
The ``hybridmask`` command line.

Exit status is 0 on success, 1 on a runtime failure and 2 on an invalid
configuration or usage.
"""

import functools
import json
import logging
import os
import sys

import click

from hybridmask.ablation import ARMS
from hybridmask.ablation import run_ablation
from hybridmask.checkpoint import load_checkpoint
from hybridmask.config import DEFAULT_PROFILE
from hybridmask.config import PROFILES
from hybridmask.config import RunConfig
from hybridmask.config import build_config
from hybridmask.config import load_config
from hybridmask.config import write_config_sidecar
from hybridmask.data import DataSource
from hybridmask.data import generate_dataset
from hybridmask.data import read_volume
from hybridmask.data import write_volume
from hybridmask.errors import ConfigError
from hybridmask.errors import HybridMaskError
from hybridmask.errors import UsageError
from hybridmask.finetune import run_finetune
from hybridmask.masking import dump_mask
from hybridmask.model import init_pretrain_params
from hybridmask.pretrain import reconstruct_volume
from hybridmask.pretrain import run_pretrain
from hybridmask.verify import SUITES
from hybridmask.verify import VerifySettings
from hybridmask.verify import report_schema
from hybridmask.verify import run_verify

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2


def exit_on_error(func):
    """Turn library errors into a one line message and an exit status."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigError, UsageError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_USAGE)
        except HybridMaskError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_FAILURE)
        except OSError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_FAILURE)

    return wrapper


def parse_shape(ctx, param, value):
    if value is None:
        return None
    try:
        shape = [int(v) for v in value.split(",")]
    except ValueError:
        raise click.BadParameter(f"expected D,H,W integers, got {value!r}")
    if len(shape) != 3 or min(shape) < 1:
        raise click.BadParameter(f"expected three positive extents, got {value!r}")
    return shape


CONFIG_PATH = click.Path(exists=True, readable=True, path_type=str, dir_okay=False)


def config_option(func):
    """Add a command level ``-c/--config FILE`` that takes over the group one."""
    return click.option(
        "-c",
        "--config",
        "config_file",
        type=CONFIG_PATH,
        metavar="FILE",
        help="INI config file applied over the profile. Replaces a file given before the command.",
    )(func)


def effective_config(ctx, overrides, config_file=None) -> RunConfig:
    return load_config(config_file or ctx.obj["config"], ctx.obj["profile"], overrides)


@click.group()
@click.option(
    "--profile",
    type=click.Choice(sorted(PROFILES)),
    default=DEFAULT_PROFILE,
    show_default=True,
    help="Named set of default settings.",
)
@click.option(
    "-c",
    "--config",
    type=CONFIG_PATH,
    metavar="FILE",
    help="INI config file applied over the profile.",
)
@click.option("-v", "--verbose", is_flag=True, help="Log debug messages.")
@click.help_option("-h", "--help")
@click.pass_context
def cli(ctx, profile, config, verbose):
    """
    Hybrid sparse masking: pretrain a sparse CNN and transformer encoder by
    masked reconstruction, fine-tune it for segmentation and verify its
    sparse kernels against dense references.
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ctx.ensure_object(dict)
    ctx.obj["profile"] = profile
    ctx.obj["config"] = config


@cli.command("gen-data")
@click.option(
    "--out",
    type=click.Path(file_okay=False, writable=True, path_type=str),
    required=True,
    metavar="DIR",
    help="Directory receiving the volumes, labels and index.json.",
)
@click.option("--count", type=int, default=10, show_default=True, help="Number of phantoms.")
@click.option(
    "--shape",
    callback=parse_shape,
    default="32,32,32",
    show_default=True,
    metavar="D,H,W",
    help="Phantom extents.",
)
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the first phantom.")
@click.help_option("-h", "--help")
@exit_on_error
def gen_data(out, count, shape, seed):
    """Write synthetic CT-like phantoms with organ labels."""
    index = generate_dataset(out, count, shape, seed)
    click.echo(f"wrote {len(index.entries)} volume and label pairs to {out}")


@cli.command("pretrain")
@click.option(
    "--data",
    type=click.Path(exists=True, file_okay=False, path_type=str),
    required=True,
    metavar="DIR",
    help="Data directory with an index.json.",
)
@click.option("--mask-ratio", type=float, help="Fraction of junction cells masked, in [0, 1).")
@click.option(
    "--no-bottom-up",
    is_flag=True,
    help="Sample the mask of every stage independently instead of replicating the junction mask.",
)
@click.option("--steps", type=int, help="Optimizer steps.")
@click.option("--seed", type=int, help="Run seed.")
@click.option("--precision", type=click.Choice(["float32", "float64"]), help="Floating point precision.")
@click.option(
    "--out",
    type=click.Path(dir_okay=False, writable=True, path_type=str),
    required=True,
    metavar="CKPT",
    help="Checkpoint file to write.",
)
@click.option(
    "--loss-log",
    type=click.Path(dir_okay=False, writable=True, path_type=str),
    metavar="FILE",
    help="Loss log to write. [default: CKPT.loss.ndjson]",
)
@config_option
@click.help_option("-h", "--help")
@click.pass_context
@exit_on_error
def pretrain(ctx, config_file, data, mask_ratio, no_bottom_up, steps, seed, precision, out, loss_log):
    """Pretrain the encoder by masked reconstruction."""
    config = effective_config(
        ctx,
        {
            "train.mask_ratio": mask_ratio,
            "train.bottom_up": False if no_bottom_up else None,
            "train.steps": steps,
            "train.seed": seed,
            "train.precision": precision,
        },
        config_file,
    )
    source = DataSource.from_directory(data)
    result = run_pretrain(config, source, checkpoint=out, loss_log=loss_log or f"{out}.loss.ndjson")
    write_config_sidecar(config, out)
    click.echo(f"pretrained {len(result.records)} steps, final loss {result.losses[-1]:.5f}")


@cli.command("finetune")
@click.option(
    "--ckpt",
    required=True,
    metavar="FILE|none",
    help="Pretraining checkpoint, or none to start from scratch.",
)
@click.option(
    "--data",
    type=click.Path(exists=True, file_okay=False, path_type=str),
    required=True,
    metavar="DIR",
    help="Data directory with labeled volumes.",
)
@click.option("--epochs", type=int, help="Fine-tuning epochs.")
@click.option("--train-fraction", type=float, help="Fraction of labeled volumes used for training.")
@click.option("--seed", type=int, help="Run seed.")
@click.option(
    "--out",
    type=click.Path(dir_okay=False, writable=True, path_type=str),
    required=True,
    metavar="MODEL",
    help="Checkpoint of the segmentation model to write.",
)
@click.option(
    "--dice-log",
    type=click.Path(dir_okay=False, writable=True, path_type=str),
    metavar="FILE",
    help="Dice log to write. [default: MODEL.dice.ndjson]",
)
@config_option
@click.help_option("-h", "--help")
@click.pass_context
@exit_on_error
def finetune(ctx, config_file, ckpt, data, epochs, train_fraction, seed, out, dice_log):
    """Fine-tune a segmentation model, from a checkpoint or from scratch."""
    checkpoint = None
    if ckpt.lower() != "none":
        if not os.path.isfile(ckpt):
            raise UsageError(f"checkpoint {ckpt} does not exist")
        checkpoint = load_checkpoint(ckpt)
    config = effective_config(
        ctx,
        {
            "finetune.epochs": epochs,
            "finetune.train_fraction": train_fraction,
            "finetune.seed": seed,
        },
        config_file,
    )
    source = DataSource.from_directory(data)
    result = run_finetune(
        config, source, checkpoint=checkpoint, dice_log=dice_log or f"{out}.dice.ndjson", out=out
    )
    write_config_sidecar(config, out)
    click.echo(f"fine-tuned {config.finetune.epochs} epochs, final Dice {result.final_dice:.4f}")


@cli.command("reconstruct")
@click.option("--ckpt", required=True, metavar="FILE", help="Pretraining checkpoint.")
@click.option(
    "--volume",
    type=click.Path(exists=True, dir_okay=False, path_type=str),
    required=True,
    metavar="FILE",
    help="Raw volume file with its JSON sidecar.",
)
@click.option("--mask-ratio", type=float, help="Fraction of junction cells masked, in [0, 1).")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the mask.")
@click.option(
    "--out",
    type=click.Path(file_okay=False, writable=True, path_type=str),
    required=True,
    metavar="DIR",
    help="Directory receiving raw, masked and prediction volumes.",
)
@config_option
@click.help_option("-h", "--help")
@click.pass_context
@exit_on_error
def reconstruct(ctx, config_file, ckpt, volume, mask_ratio, seed, out):
    """Write the input, masked input and reconstruction of one volume."""
    if not os.path.isfile(ckpt):
        raise UsageError(f"checkpoint {ckpt} does not exist")
    checkpoint = load_checkpoint(ckpt)
    if checkpoint.config:
        # the model must match the checkpoint
        settings = checkpoint.config
        if mask_ratio is not None:
            settings["train"]["mask_ratio"] = mask_ratio
        config = build_config(settings)
    else:
        config = effective_config(ctx, {"train.mask_ratio": mask_ratio}, config_file)
    params = init_pretrain_params(config.model, config.train.crop, 0, config.train.precision.value)
    checkpoint.restore(params)
    result = reconstruct_volume(
        read_volume(volume), params, config.model, config.train.crop, config.train.mask_ratio, seed
    )
    os.makedirs(out, exist_ok=True)
    for name in ("raw", "masked", "prediction"):
        write_volume(getattr(result, name), os.path.join(out, f"{name}.raw"))
    dump_mask(result.pyramid.junction, os.path.join(out, "junction-mask.txt"), config.train.mask_ratio, seed)
    write_config_sidecar(config, os.path.join(out, "prediction.raw"))
    click.echo(f"wrote raw, masked and prediction volumes to {out}")


@cli.command("verify")
@click.option(
    "--suite",
    type=click.Choice(("all",) + SUITES),
    default="all",
    show_default=True,
    help="Invariant suite to run.",
)
@click.option("--seeds", type=int, default=20, show_default=True, help="Random masks per property check.")
@click.option(
    "--grad-samples",
    type=int,
    default=200,
    show_default=True,
    help="Coordinates of the end-to-end gradient check.",
)
@click.option(
    "--oracle-configs",
    type=int,
    default=25,
    show_default=True,
    help="Random encoder configurations compared with the dense oracle.",
)
@click.option("--no-bottom-up", is_flag=True, help="Check independently sampled stage masks.")
@click.option(
    "--report",
    type=click.Path(dir_okay=False, writable=True, path_type=str),
    metavar="FILE",
    help="Write the JSON report to FILE instead of standard output.",
)
@click.option("--print-schema", is_flag=True, help="Print the JSON Schema of the report and exit.")
@config_option
@click.help_option("-h", "--help")
@click.pass_context
@exit_on_error
def verify(ctx, config_file, suite, seeds, grad_samples, oracle_configs, no_bottom_up, report, print_schema):
    """Run the invariant suites; exit with 1 if any check fails."""
    if print_schema:
        click.echo(json.dumps(report_schema(), indent=2))
        return
    config = effective_config(ctx, {}, config_file)
    settings = VerifySettings(
        seeds=seeds,
        grad_samples=grad_samples,
        oracle_configs=oracle_configs,
        no_bottom_up=no_bottom_up,
        crop=config.train.crop,
        mask_ratio=config.train.mask_ratio,
    )
    suites = SUITES if suite == "all" else (suite,)
    result = run_verify(suites, settings)
    text = result.json(indent=2)
    if report:
        with open(report, "w") as f:
            f.write(text)
            f.write("\n")
    else:
        click.echo(text)
    if not result.passed:
        sys.exit(EXIT_FAILURE)


@cli.command("ablate")
@click.option(
    "--arm",
    "arms",
    type=click.Choice(list(ARMS)),
    multiple=True,
    required=True,
    help="Ablation arm to run; repeat for several arms.",
)
@click.option(
    "--data",
    type=click.Path(exists=True, file_okay=False, path_type=str),
    required=True,
    metavar="DIR",
    help="Data directory with labeled volumes.",
)
@click.option(
    "--out",
    type=click.Path(dir_okay=False, writable=True, path_type=str),
    metavar="PREFIX",
    default="ablation",
    show_default=True,
    help="Write PREFIX.json and PREFIX.txt.",
)
@config_option
@click.help_option("-h", "--help")
@click.pass_context
@exit_on_error
def ablate(ctx, config_file, arms, data, out):
    """Pretrain and fine-tune each arm with shared seeds and compare them."""
    config = effective_config(ctx, {}, config_file)
    source = DataSource.from_directory(data)
    report = run_ablation(config, arms, source)
    with open(f"{out}.json", "w") as f:
        f.write(report.json(indent=2))
        f.write("\n")
    text = report.to_text()
    with open(f"{out}.txt", "w") as f:
        f.write(text)
    click.echo(text, nl=False)
