# BSD 3-Clause License
#
# Copyright (c) 2024, The attr-desk developers. All rights reserved.
# Use of this source code is governed by the BSD 3-Clause License that can be
# found in the LICENSE file at the root of this repository.

"""cli.py: the attr command line: synth, train, infer, eval and ablate"""

import argparse
import logging
import multiprocessing
import os
import typing as t

import src.ablation as ablation
import src.evaluation as evaluation
import src.exporter as exporter
import src.fileparse as fileparse
import src.postprocess as postprocess
import src.settings as settings
import src.synth_data as synth_data
import src.trainer as trainer

## Constants

THREADS_ENV = "ATTR_THREADS"
"""Environment variable capping the number of worker processes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

IMAGE_EXTENSIONS = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")
"""Files picked up when infer is given a directory."""

DEFAULT_REPORT = "report.txt"
"""Report file written next to the detections by default."""

DEFAULT_GRAPH = "tape.dot"
"""Gradient tape DOT file written by --dump-graph without an argument."""


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("-c",
                   "--config",
                   metavar="CFG_STRING",
                   help="override settings from the configuration files "
                        "in the format \"key1=value1, key2=value2...\" "
                        "(with the quotation marks).")

    p.add_argument("-C",
                   "--config_file",
                   nargs="?",
                   default=settings._CONFIG_LOC_,
                   const=settings._CONFIG_LOC_,
                   metavar="FILE",
                   help="read the settings from the given file; "
                        "any given settings will override the defaults.")

    p.add_argument("-v",
                   "--verbose",
                   action="store_true",
                   default=False,
                   help="emit debug output.")

    p.add_argument("-q",
                   "--quiet",
                   action="store_true",
                   default=False,
                   help="only report warnings and errors.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attr",
        description="A multi-scale scene text detector with synthetic data, "
                    "training, inference and evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic train/val dataset.")
    p.add_argument("out_dir", metavar="DIR", help="dataset directory to create.")
    p.add_argument("-n",
                   "--num_images",
                   type=int,
                   metavar="NUM",
                   help="total number of images; the num_images setting by default.")
    p.add_argument("-s",
                   "--seed",
                   type=int,
                   metavar="SEED",
                   help="dataset seed; the seed setting by default.")
    _add_common(p)

    p = sub.add_parser("train", help="train a detector on a dataset split.")
    p.add_argument("data", metavar="DATA", help="a split directory, or a dataset "
                   "directory whose train/ split is used.")
    p.add_argument("out_dir", metavar="DIR", help="receives checkpoints and the loss log.")
    p.add_argument("-r",
                   "--resume",
                   nargs="?",
                   default=None,
                   const="",
                   metavar="CKPT",
                   help="continue from a checkpoint; the last checkpoint in DIR "
                        "if none is given.")
    p.add_argument("-n",
                   "--steps",
                   type=int,
                   metavar="NUM",
                   help="training steps; the total_steps setting by default.")
    p.add_argument("--scales",
                   metavar="S1,S2,...",
                   help="pyramid scale factors, e.g. 1 for single-scale.")
    p.add_argument("--dump-graph",
                   nargs="?",
                   default=None,
                   const=DEFAULT_GRAPH,
                   metavar="FILE",
                   help="write the first step's gradient tape as a DOT graph "
                        "({} by default).".format(DEFAULT_GRAPH))
    _add_common(p)

    p = sub.add_parser("infer", help="detect text in images.")
    p.add_argument("checkpoint", metavar="CKPT", help="trained checkpoint.")
    p.add_argument("images", nargs="+", metavar="IMAGE",
                   help="image files or directories of images.")
    p.add_argument("-o",
                   "--out_dir",
                   default="detections",
                   metavar="DIR",
                   help="receives one detection file per image.")
    p.add_argument("--scales",
                   metavar="S1,S2,...",
                   help="pyramid scale factors; as many as the checkpoint was trained with.")
    p.add_argument("--overlay",
                   action="store_true",
                   default=False,
                   help="also write each image with its detections drawn on.")
    _add_common(p)

    p = sub.add_parser("eval", help="score detection files against ground truths.")
    p.add_argument("dets", metavar="DETS", help="directory of detection files.")
    p.add_argument("gts", metavar="GTS", help="directory of annotation files, or a "
                   "split directory holding gts/.")
    p.add_argument("-o",
                   "--report",
                   metavar="FILE",
                   help="report file; {} in DETS by default.".format(DEFAULT_REPORT))
    _add_common(p)

    p = sub.add_parser("ablate", help="train and compare configuration variants.")
    p.add_argument("mode", choices=sorted(ablation.MODES), metavar="MODE",
                   help="one of: " + ", ".join(sorted(ablation.MODES)) + ".")
    p.add_argument("data", metavar="DATA", help="dataset directory with train/ and val/.")
    p.add_argument("out_dir", metavar="DIR", help="receives the variants and the table.")
    p.add_argument("-n",
                   "--steps",
                   type=int,
                   metavar="NUM",
                   help="training steps per variant; the ablate_steps setting by default.")
    _add_common(p)
    return parser


## Worker pool

def worker_count() -> int:
    """
    Raises:
      settings.ConfigError: ATTR_THREADS is not a positive integer.
    """
    value = os.environ.get(THREADS_ENV, "").strip()
    if not value:
        return os.cpu_count() or 1
    try:
        count = int(value)
    except ValueError:
        count = 0
    if count < 1:
        raise settings.ConfigError("{} must be a positive integer, got {!r}"
                                   .format(THREADS_ENV, value))
    return count


def _init_worker(values: t.Mapping[str, t.Any]):
    settings.apply(values)


def fan_out(fn: t.Callable, items: t.Sequence, initializer: t.Callable = _init_worker,
            initargs: tuple = None) -> t.List:
    """
    Map fn over items in a process pool of worker_count() processes, in order.
    Runs in-process when there is a single worker or a single item.
    """
    initargs = (settings.as_dict(),) if initargs is None else initargs
    workers = min(worker_count(), len(items))
    if workers <= 1:
        if initializer is not _init_worker:
            initializer(*initargs)
        return [fn(x) for x in items]
    with multiprocessing.Pool(workers, initializer, initargs) as pool:
        return pool.map(fn, items)


## Subcommands

def _synth_one(job: t.Tuple[str, int, synth_data.SynthConfig, str]) -> str:
    ident, seed, cfg, split_dir = job
    sample = synth_data.generate_sample(seed, cfg)
    exporter.write_image_ppm(os.path.join(split_dir, "images", ident + ".ppm"), sample.image)
    exporter.write_annotations(os.path.join(split_dir, "gts", ident + ".txt"), sample.instances)
    return ident


def cmd_synth(args) -> int:
    if args.num_images is not None:
        settings.num_images = args.num_images
    if args.seed is not None:
        settings.seed = args.seed
    cfg = synth_data.SynthConfig.from_settings()
    total = settings.num_images
    n_train = int(round(total * (1.0 - settings.val_fraction)))
    jobs = []
    for i in range(total):
        split = "train" if i < n_train else "val"
        jobs.append(("img_{:05d}".format(i), synth_data.sample_seed(settings.seed, i), cfg,
                     os.path.join(args.out_dir, split)))
    for split in ("train", "val"):
        os.makedirs(os.path.join(args.out_dir, split, "images"), exist_ok=True)
        os.makedirs(os.path.join(args.out_dir, split, "gts"), exist_ok=True)
    logging.info("Generating %s images (%s train, %s val) from seed %s.",
                 total, n_train, total - n_train, settings.seed)
    idents = fan_out(_synth_one, jobs)
    for split, chosen in (("train", idents[:n_train]), ("val", idents[n_train:])):
        with open(os.path.join(args.out_dir, split, "manifest.txt"), "w") as f:
            f.writelines(ident + "\n" for ident in chosen)
    settings.write_run_config(os.path.join(args.out_dir, trainer.RUN_CONFIG))
    return EXIT_OK


def _split_dir(path: str, split: str) -> str:
    nested = os.path.join(path, split)
    return nested if os.path.isdir(nested) else path


def cmd_train(args) -> int:
    items = fileparse.load_split(_split_dir(args.data, "train"))
    resume = args.resume
    if resume == "":
        resume = os.path.join(args.out_dir, trainer.LAST_CHECKPOINT)
    if resume is not None and not os.path.isfile(resume):
        raise fileparse.DataError("{}: no checkpoint to resume from".format(resume))
    trainer.train(items, args.out_dir, args.steps, resume, args.dump_graph)
    return EXIT_OK


def image_paths(inputs: t.Sequence[str]) -> t.List[str]:
    """
    Expand directories into the images they hold, following a split's images/.

    Raises:
      fileparse.DataError: an input does not exist or nothing was found.
    """
    paths = []
    for path in inputs:
        if os.path.isdir(path):
            path = _split_dir(path, "images")
            paths.extend(os.path.join(path, n) for n in sorted(os.listdir(path))
                         if n.lower().endswith(IMAGE_EXTENSIONS))
        elif os.path.isfile(path):
            paths.append(path)
        else:
            raise fileparse.DataError("{}: no such image or directory".format(path))
    if not paths:
        raise fileparse.DataError("no images found in {}".format(", ".join(inputs)))
    return paths


_detector = None
"""Model loaded once per inference worker."""


def _init_infer_worker(values: t.Mapping[str, t.Any], checkpoint_path: str):
    global _detector
    settings.apply(values)
    _detector = trainer.load_model(checkpoint_path)


def _infer_one(job: t.Tuple[str, str]) -> t.Tuple[str, int]:
    path, out_dir = job
    ident = os.path.splitext(os.path.basename(path))[0]
    image = fileparse.read_image(path)
    result = postprocess.detect(_detector, image)
    exporter.write_detections(os.path.join(out_dir, ident + ".txt"),
                              result.polygons, result.scores)
    if settings.overlay:
        exporter.OverlayExporter(image, result.polygons).export(
            os.path.join(out_dir, ident + "_overlay.ppm"))
    return ident, len(result)


def cmd_infer(args) -> int:
    if args.overlay:
        settings.overlay = True
    paths = image_paths(args.images)
    if not os.path.isfile(args.checkpoint):
        raise fileparse.DataError("{}: no such checkpoint".format(args.checkpoint))
    os.makedirs(args.out_dir, exist_ok=True)
    settings.write_run_config(os.path.join(args.out_dir, trainer.RUN_CONFIG))
    logging.info("Detecting text in %s images.", len(paths))
    counts = fan_out(_infer_one, [(p, args.out_dir) for p in paths],
                     _init_infer_worker, (settings.as_dict(), args.checkpoint))
    for ident, n in counts:
        logging.debug("%s: %s detections.", ident, n)
    logging.info("Wrote %s detections to %s.", sum(n for _, n in counts), args.out_dir)
    return EXIT_OK


def _evaluate_one(job) -> evaluation.ImageResult:
    return evaluation.evaluate_image(*job)


def missing_ids(dets: t.Iterable[str], gts: t.Iterable[str]) -> t.List[str]:
    """Describe ids present on one side only, or nothing if both sides agree."""
    dets, gts = set(dets), set(gts)
    problems = []
    if gts - dets:
        problems.append("no detections for: " + ", ".join(sorted(gts - dets)))
    if dets - gts:
        problems.append("no ground truth for: " + ", ".join(sorted(dets - gts)))
    return problems


def cmd_eval(args) -> int:
    dets = fileparse.read_polygon_dir(args.dets, scored=True)
    gts = fileparse.read_polygon_dir(_split_dir(args.gts, "gts"), scored=False)
    problems = missing_ids(dets, gts)
    if problems:
        raise fileparse.DataError("; ".join(problems))
    jobs = [(i, dets[i], gts[i], settings.iou_thresh, settings.raster_res) for i in sorted(gts)]
    report = evaluation.EvalReport.from_images(fan_out(_evaluate_one, jobs))
    path = args.report or os.path.join(args.dets, DEFAULT_REPORT)
    report_exporter = exporter.ReportExporter(report)
    report_exporter.export(path)
    settings.write_run_config(os.path.join(os.path.dirname(path) or ".", trainer.RUN_CONFIG))
    print(report_exporter.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    train_items = fileparse.load_split(os.path.join(args.data, "train"))
    test_items = fileparse.load_split(os.path.join(args.data, "val"))
    os.makedirs(args.out_dir, exist_ok=True)
    settings.write_run_config(os.path.join(args.out_dir, trainer.RUN_CONFIG))
    rows = ablation.run_ablation(args.mode, train_items, test_items, args.out_dir, args.steps)
    table = ablation.ablation_table(args.mode, rows)
    table.export(os.path.join(args.out_dir, "ablation_{}.txt".format(args.mode)))
    print(table.table())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "ablate": cmd_ablate}


def _checkpoint_config(args) -> t.Optional[str]:
    """run_config.txt beside the checkpoint the command reads, if any."""
    ckpt = getattr(args, "checkpoint", None) or getattr(args, "resume", None)
    if ckpt == "":
        ckpt = os.path.join(args.out_dir, trainer.LAST_CHECKPOINT)
    if not ckpt:
        return None
    path = os.path.join(os.path.dirname(ckpt) or ".", trainer.RUN_CONFIG)
    return path if os.path.isfile(path) else None


def configure(args):
    """
    Load settings: defaults, the config file, the run configuration stored
    beside a checkpoint, then command line overrides.
    """
    settings.import_config(args.config_file)
    run_config = _checkpoint_config(args)
    trained = None
    if run_config is not None:
        logging.info("Reading model settings from %s.", run_config)
        settings.import_overrides(run_config)
        trained = settings.scales
    if args.config is not None:
        settings.set_from_pairs(args.config)
    if getattr(args, "scales", None):
        settings.set_from_string("scales", args.scales)
    if trained is not None and len(settings.scales) != len(trained):
        # Level embeddings and attention heads are sized by the level count.
        raise settings.ConfigError(
            "{} pyramid scales requested but the checkpoint in {} was trained with {}"
            .format(len(settings.scales), os.path.dirname(run_config) or ".", len(trained)))
    settings.validate()


def main(argv: t.Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)

    log_level = logging.DEBUG if args.verbose else \
        logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(format="%(message)s", level=log_level)

    try:
        configure(args)
        return COMMANDS[args.command](args)
    except settings.ConfigError as e:
        logging.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except fileparse.DataError as e:
        logging.error("Data error: %s", e)
        return EXIT_DATA
