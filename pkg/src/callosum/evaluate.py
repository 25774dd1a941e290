"""IoU / mIoU over the two foreground classes and the benchmark comparison table."""

from __future__ import annotations

import csv
import dataclasses
import io

import numpy as np

from .dataset import AXON, MYELIN

FOREGROUND = (AXON, MYELIN)

# Reference mIoU values reported for the full-scale dataset; shipped for
# side-by-side display only, they are not reproduced here.
REFERENCE_MIOU = (
    ("UNet", "256x256", 0.919),
    ("Scratched ViT-Base", "224x224", 0.947),
    ("MAE-Base", "224x224", 0.966),
    ("BEiT-Base", "224x224", 0.962),
    ("EM-SAM-Base", "1024x1024", 0.984),
)
REFERENCE_LABEL = "paper-reported (not locally reproduced)"
CSV_HEADER = ("method", "miou", "iou_axon", "iou_myelin", "source")


def _check(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def class_counts(pred, gt, class_id):
    """``(intersection, union)`` pixel counts for one class."""
    pred, gt = _check(pred, gt)
    p, g = pred == class_id, gt == class_id
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def _ratio(inter, union):
    return 1.0 if union == 0 else inter / union


def iou_class(pred, gt, class_id):
    if class_id not in FOREGROUND:
        raise ValueError(f"class_id must be one of {FOREGROUND}, got {class_id}")
    return _ratio(*class_counts(pred, gt, class_id))


@dataclasses.dataclass
class IoUReport:
    intersection: dict = dataclasses.field(default_factory=lambda: {c: 0 for c in FOREGROUND})
    union: dict = dataclasses.field(default_factory=lambda: {c: 0 for c in FOREGROUND})
    region: str = ""

    def add(self, pred, gt):
        """Accumulate counts from one patch (micro-averaging over a region)."""
        for c in FOREGROUND:
            i, u = class_counts(pred, gt, c)
            self.intersection[c] += i
            self.union[c] += u
        return self

    def merge(self, other):
        for c in FOREGROUND:
            self.intersection[c] += other.intersection[c]
            self.union[c] += other.union[c]
        return self

    @property
    def iou_axon(self):
        return _ratio(self.intersection[AXON], self.union[AXON])

    @property
    def iou_myelin(self):
        return _ratio(self.intersection[MYELIN], self.union[MYELIN])

    @property
    def miou(self):
        return (self.iou_axon + self.iou_myelin) / 2.0


def miou(pred, gt, region="") -> IoUReport:
    return IoUReport(region=region).add(pred, gt)


def benchmark_rows(results):
    rows = [(name, f"{v:.3f}", "", "", REFERENCE_LABEL) for name, _, v in REFERENCE_MIOU]
    for name, value in results:
        if isinstance(value, IoUReport):
            rows.append((name, f"{value.miou:.4f}", f"{value.iou_axon:.4f}", f"{value.iou_myelin:.4f}", "local"))
        else:
            rows.append((name, f"{float(value):.4f}", "", "", "local"))
    return rows


def benchmark_report(results=()):
    """Aligned plain-text table of local results next to the reference values."""
    rows = benchmark_rows(results)
    header = ("method", "mIoU", "IoU axon", "IoU myelin", "source")
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(line.rstrip() for line in lines)


def benchmark_csv(results=()):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for name, m, a, my, src in benchmark_rows(results):
        writer.writerow((name, m, a, my, src))
    return buf.getvalue()
