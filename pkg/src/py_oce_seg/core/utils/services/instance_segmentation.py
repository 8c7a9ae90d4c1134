import os
from argparse import Namespace
from typing import TYPE_CHECKING

import numpy as np

from py_oce_seg.core.data_io import labels_to_gray, load_dataset, pgm_write, prepare_image, resolve_dataset_dir, \
    tensor_write
from py_oce_seg.core.oce_net import load_checkpoint
from py_oce_seg.core.segmenter import bandwidth_search, detect_foreground, embedding_variance, predict_full, \
    segment_image
from py_oce_seg.core.utils.config import write_effective_config
from py_oce_seg.core.utils.helpers import PreconditionError
from py_oce_seg.core.utils.responses import CommandResponse
if TYPE_CHECKING:
    from py_oce_seg.core.engine import OceEngine


class Segment:
    """
    Handles the `segment` command: instance masks for every image.

    What:
        Writes `masks/<stem>.ocet` (int32 instance ids) and, on request,
        `pgm/<stem>.pgm` renderings, `foreground/<stem>.ocet` masks and
        `variance/<stem>.ocet` maps.

    How:
        Image k uses noise seed (seed, k) for background detection.

    Attributes:
        oce_engine: The engine instance.
    """
    def __init__(self, oce_engine: 'OceEngine') -> None:
        self.oce_engine: 'OceEngine' = oce_engine

    def _path(self, out: str, folder: str, stem: str, suffix: str | None = None) -> str:
        return os.path.join(out, folder, stem + (suffix or self.oce_engine.DEFAULTS.TENSOR_SUFFIX))

    def process_request(self, args: Namespace) -> CommandResponse:
        """
        Processes an instance segmentation request.

        Args:
            args: Parsed `segment` flags, including the optional outputs.

        Returns:
            The command response; a negative response carries exit code 1 or 2.
        """
        command = self.oce_engine.COMMAND.SEGMENT
        defaults = self.oce_engine.DEFAULTS
        try:
            config = self.oce_engine.load_config(args, {"segment": {
                "bandwidth": args.bandwidth,
                "shrink_distance": args.shrink,
            }})
            params = load_checkpoint(args.model).params
            dataset = load_dataset(resolve_dataset_dir(args.data, "eval"))
            instances = 0
            for index, (stem, image) in enumerate(zip(dataset.stems, dataset.images)):
                result = segment_image(params, image, config.segment, (config.seed, index), config.data.scale_factor)
                instances += int(result.labels.max())
                tensor_write(self._path(args.out, defaults.MASKS_DIR, stem), result.labels)
                if args.pgm:
                    pgm_write(self._path(args.out, defaults.PGM_DIR, stem, ".pgm"), labels_to_gray(result.labels))
                if args.save_foreground:
                    tensor_write(self._path(args.out, defaults.FOREGROUND_DIR, stem),
                                 result.foreground.astype(np.uint8))
                if args.save_variance:
                    tensor_write(self._path(args.out, defaults.VARIANCE_DIR, stem), result.variance)
            write_effective_config(args.out, config)
        except Exception as e:
            return self.oce_engine.report_failure(command, e)
        return self.oce_engine.positive_response.report_positive_response(
            command,
            f"segmented {len(dataset)} images into {instances} instances",
            {"out": args.out, "images": len(dataset), "instances": instances},
        )


class Sweep:
    """
    Handles the `sweep` command: picks bandwidth and shrink distance on labeled data.

    Every (bandwidth, shrink) candidate is scored against the ground truth;
    the table goes to standard output and, with `--out`, to `sweep.tsv` next
    to a `run_config.json` holding the best setting.

    Attributes:
        oce_engine: The engine instance.
    """
    def __init__(self, oce_engine: 'OceEngine') -> None:
        self.oce_engine: 'OceEngine' = oce_engine

    def process_request(self, args: Namespace) -> CommandResponse:
        """
        Processes a bandwidth and shrink sweep request.

        Args:
            args: Parsed `sweep` flags (`model`, `data`, candidates, `metric`, `out`).

        Returns:
            The command response; a negative response carries exit code 1 or 2.
        """
        command = self.oce_engine.COMMAND.SWEEP
        try:
            config = self.oce_engine.load_config(args, {"segment": {
                "bandwidth_candidates": args.bandwidths,
                "shrink_candidates": args.shrinks,
                "sweep_metric": args.metric,
            }})
            segment_config = config.segment
            params = load_checkpoint(args.model).params
            dataset = load_dataset(resolve_dataset_dir(args.data, "eval"))
            if dataset.labels is None:
                raise PreconditionError(f"the sweep needs ground-truth labels next to the images in {args.data}")
            fields, foregrounds = [], []
            for index, image in enumerate(dataset.images):
                working = prepare_image(image, config.data.scale_factor)
                fields.append(predict_full(params, working, segment_config.tile_size))
                variance = embedding_variance(params, working, segment_config.noise_rounds,
                                              segment_config.noise_fraction, (config.seed, index),
                                              segment_config.tile_size)
                foregrounds.append(detect_foreground(variance, segment_config.otsu_bins))
            result = bandwidth_search(fields, foregrounds, dataset.labels, segment_config)
            report = "bandwidth\tshrink\t" + segment_config.sweep_metric + "\n" + "".join(
                f"{bandwidth:g}\t{shrink:g}\t{score:.6f}\n" for bandwidth, shrink, score in result.table
            )
            if args.out:
                best = config.model_copy(update={"segment": segment_config.model_copy(
                    update={"bandwidth": result.bandwidth, "shrink_distance": result.shrink})})
                write_effective_config(args.out, best)
                with open(os.path.join(args.out, "sweep.tsv"), "w", encoding="utf-8") as handle:
                    handle.write(report)
        except Exception as e:
            return self.oce_engine.report_failure(command, e)
        return self.oce_engine.positive_response.report_positive_response(
            command,
            f"best bandwidth {result.bandwidth:g}, shrink {result.shrink:g} "
            f"({segment_config.sweep_metric} {result.score:.4f})",
            {"bandwidth": result.bandwidth, "shrink": result.shrink, "score": result.score, "report": report},
        )
