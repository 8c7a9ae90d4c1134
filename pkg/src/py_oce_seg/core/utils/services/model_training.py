import os
from argparse import Namespace
from typing import TYPE_CHECKING

from py_oce_seg.core.data_io import load_dataset, prepare_image, resolve_dataset_dir, tensor_write
from py_oce_seg.core.oce_net import Checkpoint, load_checkpoint, save_checkpoint, train
from py_oce_seg.core.segmenter import predict_full
from py_oce_seg.core.utils.config import write_effective_config
from py_oce_seg.core.utils.responses import CommandResponse
if TYPE_CHECKING:
    from py_oce_seg.core.engine import OceEngine


class Train:
    """
    Handles the `train` command: fits the embedding network without labels.

    What:
        Reads `images/` of a dataset folder (or its `train/` split), normalizes
        and rescales every image, and runs the training loop.

    How:
        The checkpoint `model.ocea` is rewritten every `checkpoint_every`
        epochs and at the end; `--resume` continues from a checkpoint with
        the same updates an uninterrupted run would have made. The per-epoch
        mean loss goes to `loss_trace.tsv`.

    Attributes:
        oce_engine: The engine instance.
    """
    def __init__(self, oce_engine: 'OceEngine') -> None:
        self.oce_engine: 'OceEngine' = oce_engine

    def process_request(self, args: Namespace) -> CommandResponse:
        """
        Processes a training request.

        Args:
            args: Parsed `train` flags (`data`, `out`, `epochs`, `batch`, `crop`, `resume`).

        Returns:
            The command response; a negative response carries exit code 1 or 2.
        """
        command = self.oce_engine.COMMAND.TRAIN
        defaults = self.oce_engine.DEFAULTS
        try:
            config = self.oce_engine.load_config(args, {"train": {
                "epochs": args.epochs,
                "batch_size": args.batch,
                "crop_size": args.crop,
            }})
            dataset = load_dataset(resolve_dataset_dir(args.data, "train"))
            images = [prepare_image(image, config.data.scale_factor) for image in dataset.images]
            resume = load_checkpoint(args.resume) if args.resume else None
            write_effective_config(args.out, config)
            checkpoint_path = os.path.join(args.out, defaults.CHECKPOINT)

            def on_epoch_end(checkpoint: Checkpoint) -> None:
                if checkpoint.epoch % config.train.checkpoint_every == 0:
                    save_checkpoint(checkpoint_path, checkpoint)

            result = train(images, config.model, config.loss, config.train, config.seed, resume, on_epoch_end)
            save_checkpoint(checkpoint_path, Checkpoint(result.params, result.adam, len(result.loss_trace),
                                                        result.loss_trace))
            with open(os.path.join(args.out, defaults.LOSS_TRACE), "w", encoding="utf-8") as handle:
                handle.write("epoch\tloss\n")
                handle.writelines(f"{epoch}\t{loss:.6f}\n" for epoch, loss in enumerate(result.loss_trace, start=1))
        except Exception as e:
            return self.oce_engine.report_failure(command, e)
        final = f", final loss {result.loss_trace[-1]:.6f}" if result.loss_trace else ""
        return self.oce_engine.positive_response.report_positive_response(
            command,
            f"trained {len(result.loss_trace)} epochs on {len(images)} images{final}",
            {"checkpoint": checkpoint_path, "loss_trace": result.loss_trace},
        )


class Predict:
    """
    Handles the `predict` command: writes dense offset fields.

    Every image of the dataset gets `fields/<stem>.ocet`, a [2, H, W] field at
    the working scale.

    Attributes:
        oce_engine: The engine instance.
    """
    def __init__(self, oce_engine: 'OceEngine') -> None:
        self.oce_engine: 'OceEngine' = oce_engine

    def process_request(self, args: Namespace) -> CommandResponse:
        """
        Processes an offset field prediction request.

        Args:
            args: Parsed `predict` flags (`model`, `data`, `out`).

        Returns:
            The command response; a negative response carries exit code 1 or 2.
        """
        command = self.oce_engine.COMMAND.PREDICT
        defaults = self.oce_engine.DEFAULTS
        try:
            config = self.oce_engine.load_config(args)
            params = load_checkpoint(args.model).params
            dataset = load_dataset(resolve_dataset_dir(args.data, "eval"))
            for stem, image in zip(dataset.stems, dataset.images):
                field = predict_full(params, prepare_image(image, config.data.scale_factor), config.segment.tile_size)
                tensor_write(os.path.join(args.out, defaults.FIELDS_DIR, stem + defaults.TENSOR_SUFFIX), field)
            write_effective_config(args.out, config)
        except Exception as e:
            return self.oce_engine.report_failure(command, e)
        return self.oce_engine.positive_response.report_positive_response(
            command, f"wrote {len(dataset)} offset fields to {args.out}", {"out": args.out, "images": len(dataset)}
        )
