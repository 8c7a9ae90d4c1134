import os
from argparse import Namespace
from typing import TYPE_CHECKING

from py_oce_seg.core import metrics
from py_oce_seg.core.data_io import load_label_maps
from py_oce_seg.core.utils.responses import CommandResponse
if TYPE_CHECKING:
    from py_oce_seg.core.engine import OceEngine

DEFAULT_THRESHOLDS = [0.5, 0.6, 0.7, 0.8, 0.9]


class Eval:
    """
    Handles the `eval` command: scores predicted masks against ground truth.

    What:
        Emits a tab-separated table `metric, threshold, value` holding F1,
        recall, precision and accuracy per IoU threshold, and the SEG score.

    How:
        Counts are summed over the dataset before scoring; `--per-image`
        averages per-image scores instead and adds the images found at the
        0/25/50/75/100th percentile of the per-image F1 at the first
        threshold.

    Attributes:
        oce_engine: The engine instance.
    """
    def __init__(self, oce_engine: 'OceEngine') -> None:
        self.oce_engine: 'OceEngine' = oce_engine

    def process_request(self, args: Namespace) -> CommandResponse:
        """
        Processes an evaluation request.

        Args:
            args: Parsed `eval` flags (`gt`, `pred`, `thresholds`, `per_image`, `out`).

        Returns:
            The command response; a negative response carries exit code 1 or 2.
        """
        command = self.oce_engine.COMMAND.EVAL
        try:
            thresholds = args.thresholds or DEFAULT_THRESHOLDS
            gts = load_label_maps(args.gt, "eval")
            preds = load_label_maps(args.pred)
            stems = sorted(gts)
            missing = [stem for stem in stems if stem not in preds]
            if missing:
                raise FileNotFoundError(f"no predicted mask for {', '.join(missing)}")
            gt_list = [gts[stem] for stem in stems]
            pred_list = [preds[stem] for stem in stems]
            report = metrics.format_report(metrics.report_rows(gt_list, pred_list, thresholds, args.per_image))
            percentiles = ""
            if args.per_image:
                per_image_f1 = [
                    metrics.detection_scores(metrics.match_at_threshold(g, p, thresholds[0])).f1
                    for g, p in zip(gt_list, pred_list)
                ]
                percentiles = "percentile\tstem\tf1\n" + "".join(
                    f"{percentile:g}\t{stems[index]}\t{score:.6f}\n"
                    for percentile, index, score in metrics.percentile_images(per_image_f1)
                )
            if args.out:
                os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
                with open(args.out, "w", encoding="utf-8") as handle:
                    handle.write(report)
                if percentiles:
                    with open(os.path.splitext(args.out)[0] + "_percentiles.tsv", "w", encoding="utf-8") as handle:
                        handle.write(percentiles)
        except Exception as e:
            return self.oce_engine.report_failure(command, e)
        return self.oce_engine.positive_response.report_positive_response(
            command,
            f"scored {len(stems)} images at {len(thresholds)} thresholds",
            {"report": report + (("\n" + percentiles) if percentiles else "")},
        )
