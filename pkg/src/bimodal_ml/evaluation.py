"""Classification metrics, average precision, and evaluation protocols.

Reports carry per-class precision/recall/F1/support/AP, the confusion
matrix, micro-average AP, and both macro and support-weighted averages
(labeled, since summary tables rarely say which they use). Argmax ties break
toward the lowest class index so repeated runs produce identical reports.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import EXCLUDE_TARGET, Split, apply_mapping, identity_mapping, to_tensors
from .errors import UndefinedMetricError, ValidationError
from .fusion_head import superpose
from .losses import softmax

MODALITIES = ("image", "text", "fusion")


def _check_labels(labels, n_classes, name):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValidationError("%s must be a non-empty 1-D array" % name)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError("%s must be integers" % name)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError("%s outside [0, %d)" % (name, n_classes))
    return labels.astype(np.int64)


@dataclass(frozen=True)
class ClassifyMetrics:
    accuracy: float
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    confusion: tuple
    zero_division: dict


def classify_metrics(true_labels, predicted_labels, n_classes) -> ClassifyMetrics:
    """Accuracy, per-class precision/recall/F1, and the confusion matrix.

    Zero-denominator precision or recall reports 0 and the class id lands in
    the zero_division flags.
    """
    true_labels = _check_labels(true_labels, n_classes, "true labels")
    predicted_labels = _check_labels(predicted_labels, n_classes, "predicted labels")
    if len(true_labels) != len(predicted_labels):
        raise ValidationError("label lists differ in length")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (true_labels, predicted_labels), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted_count = confusion.sum(axis=0)
    zero_division = {
        "precision": tuple(int(c) for c in np.flatnonzero(predicted_count == 0)),
        "recall": tuple(int(c) for c in np.flatnonzero(support == 0)),
    }
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted_count > 0, tp / np.maximum(predicted_count, 1), 0.0)
        recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
        pr_sum = precision + recall
        f1 = np.where(pr_sum > 0, 2.0 * precision * recall / np.maximum(pr_sum, 1e-300), 0.0)
    return ClassifyMetrics(
        accuracy=float(tp.sum() / len(true_labels)),
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        support=tuple(int(v) for v in support),
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
        zero_division=zero_division,
    )


def _binary_curve(scores, binary_labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(binary_labels)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValidationError("scores and labels must be equal-length 1-D arrays")
    if not np.isfinite(scores).all():
        raise ValidationError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order].astype(np.float64)
    # one evaluation point per distinct score, at the end of its tie block
    block_end = np.r_[np.flatnonzero(np.diff(sorted_scores)), len(sorted_scores) - 1]
    tp = np.cumsum(sorted_labels)[block_end]
    precision = tp / (block_end + 1)
    recall = tp / n_pos
    return sorted_scores[block_end], precision, recall


def average_precision(scores, binary_labels) -> float:
    """Stepwise AP over distinct-score thresholds, descending; R_0 = 0."""
    _, precision, recall = _binary_curve(scores, binary_labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def micro_average_precision(score_matrix, true_labels) -> float:
    """Binary AP over all flattened one-vs-rest (sample, class) pairs."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    if scores.ndim != 2:
        raise ValidationError("score matrix must be 2-D")
    labels = _check_labels(true_labels, scores.shape[1], "true labels")
    if len(labels) != scores.shape[0]:
        raise ValidationError("score rows and labels differ in length")
    onehot = np.zeros_like(scores, dtype=np.int64)
    onehot[np.arange(len(labels)), labels] = 1
    return average_precision(scores.ravel(), onehot.ravel())


@dataclass(frozen=True)
class PRCurve:
    class_id: int
    class_name: str
    thresholds: tuple
    precision: tuple
    recall: tuple


def pr_curve(scores, binary_labels, class_id=0, class_name="") -> PRCurve:
    thresholds, precision, recall = _binary_curve(scores, binary_labels)
    return PRCurve(
        class_id=int(class_id),
        class_name=class_name,
        thresholds=tuple(float(v) for v in thresholds),
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
    )


@dataclass(frozen=True)
class EvaluationReport:
    modality: str
    label_names: tuple
    n_samples: int
    accuracy: float
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    ap: tuple
    micro_ap: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: tuple
    zero_division: dict
    undefined_ap_classes: tuple
    pr_curves: tuple = field(repr=False)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        """JSON-ready view; PR curves ship separately as CSV data files."""
        return {
            "modality": self.modality,
            "label_names": list(self.label_names),
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "per_class": [
                {
                    "name": self.label_names[c],
                    "precision": self.precision[c],
                    "recall": self.recall[c],
                    "f1": self.f1[c],
                    "support": self.support[c],
                    "average_precision": self.ap[c],
                }
                for c in range(len(self.label_names))
            ],
            "micro_average_precision": self.micro_ap,
            "macro_avg": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
            "weighted_avg": {
                "precision": self.weighted_precision,
                "recall": self.weighted_recall,
                "f1": self.weighted_f1,
            },
            "confusion_matrix": [list(row) for row in self.confusion],
            "zero_division": {k: list(v) for k, v in self.zero_division.items()},
            "undefined_ap_classes": list(self.undefined_ap_classes),
            "metadata": self.metadata,
        }


def report_from_scores(probabilities, labels, label_names, modality, metadata=None):
    """Build a report from per-sample class probabilities (or any scores
    where the row argmax is the prediction)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != len(label_names):
        raise ValidationError(
            "probabilities must be (n, %d), got %r" % (len(label_names), probs.shape)
        )
    labels = _check_labels(labels, len(label_names), "labels")
    predictions = probs.argmax(axis=1)
    base = classify_metrics(labels, predictions, len(label_names))
    ap, curves, undefined = [], [], []
    for c in range(len(label_names)):
        positives = (labels == c).astype(np.int64)
        if positives.sum() == 0:
            ap.append(None)
            undefined.append(c)
            continue
        ap.append(average_precision(probs[:, c], positives))
        curves.append(pr_curve(probs[:, c], positives, c, label_names[c]))
    support = np.asarray(base.support, dtype=np.float64)
    weights = support / support.sum()
    return EvaluationReport(
        modality=modality,
        label_names=tuple(label_names),
        n_samples=len(labels),
        accuracy=base.accuracy,
        precision=base.precision,
        recall=base.recall,
        f1=base.f1,
        support=base.support,
        ap=tuple(ap),
        micro_ap=micro_average_precision(probs, labels),
        macro_precision=float(np.mean(base.precision)),
        macro_recall=float(np.mean(base.recall)),
        macro_f1=float(np.mean(base.f1)),
        weighted_precision=float(np.dot(weights, base.precision)),
        weighted_recall=float(np.dot(weights, base.recall)),
        weighted_f1=float(np.dot(weights, base.f1)),
        confusion=base.confusion,
        zero_division=base.zero_division,
        undefined_ap_classes=tuple(undefined),
        pr_curves=tuple(curves),
        metadata=dict(metadata or {}),
    )


def model_logits(model, split: Split, attention_enabled=False, batch_size=512):
    """Per-modality logits over a split, as numpy arrays."""
    images, tokens, labels = to_tensors(split)
    outs = {m: [] for m in MODALITIES}
    model.eval()
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            sl = slice(start, start + batch_size)
            logits_img, logits_txt, x1, x2 = model(
                images[sl], tokens[sl], attention_enabled=attention_enabled
            )
            outs["image"].append(logits_img.numpy())
            outs["text"].append(logits_txt.numpy())
            outs["fusion"].append(model.fusion_head(superpose(x1, x2)).numpy())
    return {m: np.concatenate(v).astype(np.float64) for m, v in outs.items()}


def reports_from_logits(logits_by_modality, labels, source_names, mapping=None):
    """One report per modality; a mapping switches to inter-dataset mode.

    Inter-dataset mode keeps only samples whose label maps, renames labels to
    the target domain, drops non-overlap logit columns before argmax, and
    renormalizes probabilities over the mapped subset (recorded in report
    metadata).
    """
    labels = np.asarray(labels)
    if mapping is None:
        mapping = identity_mapping(source_names)
        metadata = {"protocol": "intra-dataset", "scores": "softmax probabilities"}
    else:
        metadata = {
            "protocol": "inter-dataset",
            "scores": "softmax probabilities over the mapped class subset",
            "excluded_source_classes": list(mapping.excluded),
            "logit_handling": "non-overlap logits dropped before argmax",
        }
    mapped_labels, mask = apply_mapping(labels, source_names, mapping)
    if not mask.any():
        raise ValidationError("no samples left after applying the class mapping")
    targets = mapping.target_names
    source_index = {name: i for i, name in enumerate(source_names)}
    columns = []
    for target in targets:
        sources = [
            s for s, t in mapping.pairs if t == target and s in source_index
        ]
        if len(sources) != 1:
            raise ValidationError(
                "target %r needs exactly one mapped source among the model classes,"
                " found %d" % (target, len(sources))
            )
        columns.append(source_index[sources[0]])
    reports = {}
    for modality, logits in logits_by_modality.items():
        kept = torch.as_tensor(logits[mask][:, columns], dtype=torch.float64)
        probs = softmax(kept).numpy()
        reports[modality] = report_from_scores(
            probs, mapped_labels[mask], targets, modality, metadata
        )
    return reports


def run_protocol(model, eval_split: Split, source_names, mapping=None, attention_enabled=False):
    """Evaluate all three modalities on a split; returns {modality: report}."""
    logits = model_logits(model, eval_split, attention_enabled=attention_enabled)
    return reports_from_logits(logits, eval_split.labels, source_names, mapping)


# ---------------------------------------------------------------------------
# Serialization: a JSON report per modality, a per-class metric table CSV in
# the style of the summary tables, PR-curve data CSVs, and the confusion
# matrix as CSV.
# ---------------------------------------------------------------------------


def _fmt(value):
    if value is None:
        return "nan"
    return "%.6f" % value


def write_report_json(report: EvaluationReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_metrics_csv(reports, path):
    """Class rows with precision/recall/F1 columns per modality, then
    macro/weighted average rows and an accuracy row."""
    modalities = [m for m in MODALITIES if m in reports]
    first = reports[modalities[0]]
    header = ["class"]
    for m in modalities:
        header += ["%s_precision" % m, "%s_recall" % m, "%s_f1" % m]
    header.append("support")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for c, name in enumerate(first.label_names):
            row = [name]
            for m in modalities:
                r = reports[m]
                row += [_fmt(r.precision[c]), _fmt(r.recall[c]), _fmt(r.f1[c])]
            row.append(str(first.support[c]))
            writer.writerow(row)
        for label, attr in (("macro_avg", "macro"), ("weighted_avg", "weighted")):
            row = [label]
            for m in modalities:
                r = reports[m]
                row += [
                    _fmt(getattr(r, "%s_precision" % attr)),
                    _fmt(getattr(r, "%s_recall" % attr)),
                    _fmt(getattr(r, "%s_f1" % attr)),
                ]
            row.append(str(first.n_samples))
            writer.writerow(row)
        acc_row = ["accuracy"]
        for m in modalities:
            acc_row += [_fmt(reports[m].accuracy), "", ""]
        acc_row.append(str(first.n_samples))
        writer.writerow(acc_row)
    return path


def write_pr_csv(report: EvaluationReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "threshold", "precision", "recall"])
        for curve in report.pr_curves:
            for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
                writer.writerow([curve.class_name, _fmt(t), _fmt(p), _fmt(r)])
    return path


def write_confusion_csv(report: EvaluationReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted"] + list(report.label_names))
        for name, row in zip(report.label_names, report.confusion):
            writer.writerow([name] + [str(v) for v in row])
    return path
