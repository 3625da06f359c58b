"""Confusion accounting, the five evaluation metrics, and model comparison.

Metrics are one-vs-rest: one class is positive and every other class pools
into the negative side. Degenerate 0/0 ratios become None and macro averages
skip them instead of coercing to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import InvalidSpecError, ShapeMismatchError, UnknownSubclassError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricSet:
    """Each field is a float in [0, 1], or None when its ratio is 0/0."""

    accuracy: float | None
    precision: float | None
    recall: float | None
    specificity: float | None
    f1: float | None


@dataclass(frozen=True)
class CategoryGroup:
    name: str
    members: tuple[str, ...]


def confusion_counts(true_labels, predicted_labels, positive_class: int) -> ConfusionCounts:
    """One-vs-rest counts with `positive_class` against the pooled rest."""
    true_labels = np.asarray(true_labels)
    predicted_labels = np.asarray(predicted_labels)
    if true_labels.shape != predicted_labels.shape or true_labels.ndim != 1:
        raise ShapeMismatchError(
            f"label sequences differ: {true_labels.shape} vs {predicted_labels.shape}"
        )
    actual = true_labels == positive_class
    guessed = predicted_labels == positive_class
    return ConfusionCounts(
        tp=int(np.sum(actual & guessed)),
        fp=int(np.sum(~actual & guessed)),
        fn=int(np.sum(actual & ~guessed)),
        tn=int(np.sum(~actual & ~guessed)),
    )


def _ratio(numerator: int, denominator: int) -> float | None:
    if denominator == 0:
        return None
    return numerator / denominator


def compute_metrics(c: ConfusionCounts) -> MetricSet:
    """The five one-vs-rest metrics; 0/0 ratios become None."""
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if precision is None or recall is None or precision + recall == 0.0:
        f1 = None
    else:
        f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    return MetricSet(
        accuracy=_ratio(c.tp + c.tn, c.total),
        precision=precision,
        recall=recall,
        specificity=_ratio(c.tn, c.tn + c.fp),
        f1=f1,
    )


def multiclass_accuracy(true_labels, predicted_labels) -> float:
    true_labels = np.asarray(true_labels)
    predicted_labels = np.asarray(predicted_labels)
    if true_labels.shape != predicted_labels.shape or true_labels.size == 0:
        raise ShapeMismatchError(
            f"label sequences differ: {true_labels.shape} vs {predicted_labels.shape}"
        )
    return float(np.mean(true_labels == predicted_labels))


def resolve_group(group: CategoryGroup, class_names) -> list[int]:
    """Member label ids for a group, in member order."""
    lookup = {name: i for i, name in enumerate(class_names)}
    missing = [name for name in group.members if name not in lookup]
    if missing:
        raise UnknownSubclassError(f"{group.name}: unknown subclasses {missing}")
    return [lookup[name] for name in group.members]


def category_macro_metrics(true_labels, predicted_labels, member_ids, sibling_only: bool = False) -> MetricSet:
    """Unweighted per-metric mean of the members' one-vs-rest MetricSets.

    Negatives span the whole label set by default; sibling_only restricts
    the evaluation to samples whose true class is inside the group.
    """
    member_ids = list(member_ids)
    if not member_ids:
        raise InvalidSpecError("category group has no members")
    true_labels = np.asarray(true_labels)
    predicted_labels = np.asarray(predicted_labels)
    if sibling_only:
        keep = np.isin(true_labels, member_ids)
        true_labels = true_labels[keep]
        predicted_labels = predicted_labels[keep]
    sets = [
        compute_metrics(confusion_counts(true_labels, predicted_labels, member))
        for member in member_ids
    ]
    averaged = {}
    for field in fields(MetricSet):
        defined = [getattr(s, field.name) for s in sets if getattr(s, field.name) is not None]
        averaged[field.name] = sum(defined) / len(defined) if defined else None
    return MetricSet(**averaged)


FRUITS360_GROUPS = (
    CategoryGroup(
        "Apple",
        (
            "Apple Braeburn",
            "Apple Crimson Snow",
            "Apple Golden 1",
            "Apple Golden 2",
            "Apple Golden 3",
            "Apple Granny Smith",
            "Apple Pink Lady",
            "Apple Red 1",
            "Apple Red 2",
            "Apple Red 3",
            "Apple Red Delicious",
            "Apple Red Yellow 1",
            "Apple Red Yellow 2",
        ),
    ),
    CategoryGroup(
        "Cherry",
        (
            "Cherry 1",
            "Cherry 2",
            "Cherry Rainier",
            "Cherry Wax Black",
            "Cherry Wax Red",
            "Cherry Wax Yellow",
        ),
    ),
    CategoryGroup(
        "Grape",
        (
            "Grape Blue",
            "Grape Pink",
            "Grape White",
            "Grape White 2",
            "Grape White 3",
            "Grape White 4",
        ),
    ),
    CategoryGroup(
        "Pear",
        (
            "Pear",
            "Pear Abate",
            "Pear Forelle",
            "Pear Kaiser",
            "Pear Monster",
            "Pear Red",
            "Pear Williams",
        ),
    ),
    CategoryGroup(
        "Tomato",
        (
            "Tomato 1",
            "Tomato 2",
            "Tomato 3",
            "Tomato 4",
            "Tomato Cherry Red",
            "Tomato Maroon",
            "Tomato Yellow",
        ),
    ),
)


def compare_models(results) -> tuple[str, str]:
    """CSV and aligned-text comparison of baseline vs ensemble accuracies.

    Each result is (model name, softmax accuracy, ensemble accuracy); the
    delta column is always recomputed as ensemble - baseline.
    """
    results = list(results)
    if not results:
        raise InvalidSpecError("comparison needs at least one result row")
    csv_lines = ["model,softmax_accuracy,ensemble_accuracy,delta"]
    name_width = max(len("model"), max(len(name) for name, _, _ in results))
    text_lines = [
        f"{'model':<{name_width}}  {'softmax':>10}  {'ensemble':>10}  {'delta':>8}"
    ]
    for name, softmax_acc, ensemble_acc in results:
        delta = ensemble_acc - softmax_acc
        csv_lines.append(f"{name},{softmax_acc:.4f},{ensemble_acc:.4f},{delta:+.4f}")
        text_lines.append(
            f"{name:<{name_width}}  {softmax_acc:>10.4f}  {ensemble_acc:>10.4f}  {delta:>+8.4f}"
        )
    return "\n".join(csv_lines) + "\n", "\n".join(text_lines) + "\n"
