import os
from argparse import Namespace
from typing import TYPE_CHECKING

import numpy as np

from py_oce_seg.core.data_io import (
    Dataset,
    SceneSpec,
    build_pseudo_dataset,
    build_sparse_dataset,
    load_dataset,
    load_label_maps,
    resolve_dataset_dir,
    sample_annotations,
    save_dataset,
    synth_generate,
    tensor_write,
)
from py_oce_seg.core.utils.config import write_effective_config
from py_oce_seg.core.utils.responses import CommandResponse
if TYPE_CHECKING:
    from py_oce_seg.core.engine import OceEngine


class Synth:
    """
    Handles the `synth` command: generates a labeled synthetic dataset.

    What:
        Writes `train/` and `eval/` dataset folders, each with `images/` and
        `labels/` tensor files, plus the effective `run_config.json`.

    How:
        Image k is drawn from its own generator seeded with (seed, k), so the
        output is identical for identical seeds and configurations. The last
        `round(images * eval_fraction)` images form the eval split.

    Attributes:
        oce_engine: The engine instance.
    """
    def __init__(self, oce_engine: 'OceEngine') -> None:
        self.oce_engine: 'OceEngine' = oce_engine

    def process_request(self, args: Namespace) -> CommandResponse:
        """
        Processes a synthetic data generation request.

        Args:
            args: Parsed `synth` flags (`out`, `images`, `canvas`, `objects`).

        Returns:
            The command response; a negative response carries exit code 1 or 2.
        """
        command = self.oce_engine.COMMAND.SYNTH
        try:
            config = self.oce_engine.load_config(args, {"data": {
                "images": args.images,
                "canvas_size": args.canvas,
                "object_count": args.objects,
            }})
            data = config.data
            n_eval = int(round(data.images * data.eval_fraction))
            n_train = data.images - n_eval
            splits = {"train": Dataset([], [], []), "eval": Dataset([], [], [])}
            for index in range(data.images):
                image, labels = synth_generate(SceneSpec.from_config(data, (config.seed, index)))
                split = splits["train" if index < n_train else "eval"]
                split.stems.append(f"synth_{index:04d}")
                split.images.append(image)
                split.labels.append(labels)
            for name, dataset in splits.items():
                save_dataset(os.path.join(args.out, name), dataset)
            write_effective_config(args.out, config)
        except Exception as e:
            return self.oce_engine.report_failure(command, e)
        return self.oce_engine.positive_response.report_positive_response(
            command,
            f"wrote {n_train} train and {n_eval} eval images to {args.out}",
            {"out": args.out, "train": n_train, "eval": n_eval},
        )


class Pseudo:
    """
    Handles the `pseudo` command: builds the sparse and pseudo datasets.

    What:
        For every ground-truth image a fixed fraction of its objects is drawn
        as annotations. The sparse dataset keeps only those annotations; the
        pseudo dataset is the predicted segmentation with the annotations
        pasted over the predictions they touch. Both carry a known-background
        mask around the annotations.

    Attributes:
        oce_engine: The engine instance.
    """
    def __init__(self, oce_engine: 'OceEngine') -> None:
        self.oce_engine: 'OceEngine' = oce_engine

    def process_request(self, args: Namespace) -> CommandResponse:
        """
        Processes a pseudo dataset request.

        Args:
            args: Parsed `pseudo` flags (`pred`, `gt`, `out`, `fraction`).

        Returns:
            The command response; a negative response carries exit code 1 or 2.
        """
        command = self.oce_engine.COMMAND.PSEUDO
        defaults = self.oce_engine.DEFAULTS
        try:
            config = self.oce_engine.load_config(args, {"data": {"annotation_fraction": args.fraction}})
            data = config.data
            gts = load_label_maps(args.gt)
            preds = load_label_maps(args.pred)
            images = {}
            try:
                dataset = load_dataset(resolve_dataset_dir(args.gt))
                images = dict(zip(dataset.stems, dataset.images))
            except FileNotFoundError:
                self.oce_engine.logger.warning(f"no images next to {args.gt}; writing label maps only")
            annotated = 0
            for index, stem in enumerate(sorted(gts)):
                if stem not in preds:
                    raise FileNotFoundError(f"no predicted mask for {stem} in {args.pred}")
                rng = np.random.default_rng([config.seed, index])
                annotations = sample_annotations(gts[stem], data.annotation_fraction, rng)
                annotated += len(annotations.masks)
                outputs = {
                    "pseudo": build_pseudo_dataset(preds[stem], annotations, data.background_distance),
                    "sparse": build_sparse_dataset(annotations, gts[stem].shape, data.background_distance),
                }
                for name, (labels, known_background) in outputs.items():
                    root = os.path.join(args.out, name)
                    tensor_write(os.path.join(root, defaults.LABELS_DIR, stem + defaults.TENSOR_SUFFIX), labels)
                    tensor_write(os.path.join(root, defaults.KNOWN_BACKGROUND_DIR, stem + defaults.TENSOR_SUFFIX),
                                 known_background.astype(np.uint8))
                    if stem in images:
                        tensor_write(os.path.join(root, defaults.IMAGES_DIR, stem + defaults.TENSOR_SUFFIX),
                                     images[stem])
            write_effective_config(args.out, config)
        except Exception as e:
            return self.oce_engine.report_failure(command, e)
        return self.oce_engine.positive_response.report_positive_response(
            command,
            f"built pseudo and sparse datasets for {len(gts)} images from {annotated} annotations",
            {"out": args.out, "images": len(gts), "annotations": annotated},
        )
