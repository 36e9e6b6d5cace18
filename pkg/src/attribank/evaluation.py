"""Metrics and protocols: accuracy matrices, transfer scores, cross-dataset runs.

Accuracies are stored as percentages. The accuracy matrix is lower
triangular: entry (t, s) is the test accuracy on task s after training task
t, defined for s <= t. Forward/backward transfer compare a model fine-tuned
across datasets against the same architecture trained from scratch.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bank import select_top_c, compose_text_input
from .encoders import TokenSequence

THREADS_ENV = "ATTRIBANK_THREADS"


@dataclass
class AccuracyMatrix:
    a: np.ndarray
    task_labels: list

    @classmethod
    def empty(cls, task_labels) -> "AccuracyMatrix":
        t = len(task_labels)
        return cls(a=np.full((t, t), np.nan), task_labels=list(task_labels))

    @property
    def num_tasks(self) -> int:
        return self.a.shape[0]

    def set(self, t: int, s: int, value: float) -> None:
        if s > t:
            raise ValueError(f"matrix entry ({t},{s}) above the diagonal")
        if not 0.0 <= value <= 100.0:
            raise ValueError(f"accuracy {value} outside [0, 100]")
        self.a[t, s] = value

    def defined(self, t: int, s: int) -> bool:
        return s <= t and not np.isnan(self.a[t, s])

    def to_dict(self) -> dict:
        return {"task_labels": self.task_labels,
                "a": [[None if np.isnan(v) else v for v in row] for row in self.a]}

    @classmethod
    def from_dict(cls, d: dict) -> "AccuracyMatrix":
        rows = [[np.nan if v is None else float(v) for v in row] for row in d["a"]]
        return cls(a=np.array(rows, dtype=np.float64), task_labels=list(d["task_labels"]))

    def to_csv(self, label: str) -> str:
        """One row per run, columns are the running average accuracy after each task."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method"] + [f"task_{t}" for t in range(1, self.num_tasks + 1)])
        writer.writerow([label] + [f"{average_accuracy(self, t):.4f}"
                                   for t in range(1, self.num_tasks + 1)])
        return buf.getvalue()


def average_accuracy(matrix: AccuracyMatrix, t: int) -> float:
    """Mean test accuracy over tasks 1..t after training task t (t is 1-based)."""
    if not 1 <= t <= matrix.num_tasks:
        raise ValueError(f"t={t} outside [1, {matrix.num_tasks}]")
    row = matrix.a[t - 1, :t]
    if np.isnan(row).any():
        raise ValueError(f"matrix row {t} has undefined entries")
    return float(row.mean())


@dataclass
class CdclReport:
    """Cross-dataset continual learning quantities for one learner mode."""

    acc_scratch_b: float
    acc_a2b_on_b: float
    acc_scratch_a: float
    acc_a2b_on_a: float
    acc_joint: float
    ft: float = field(init=False)
    bt: float = field(init=False)

    def __post_init__(self):
        self.ft = self.acc_a2b_on_b - self.acc_scratch_b
        self.bt = self.acc_a2b_on_a - self.acc_scratch_a

    def as_dict(self) -> dict:
        return {"acc_scratch_b": self.acc_scratch_b, "acc_a2b_on_b": self.acc_a2b_on_b,
                "acc_scratch_a": self.acc_scratch_a, "acc_a2b_on_a": self.acc_a2b_on_a,
                "acc_joint": self.acc_joint, "ft": self.ft, "bt": self.bt}


def forward_transfer(report: CdclReport) -> float:
    """Accuracy on the second dataset after cross-dataset training, minus scratch.

    Positive means the first dataset helped the second.
    """
    return report.acc_a2b_on_b - report.acc_scratch_b


def backward_transfer(report: CdclReport) -> float:
    """Accuracy on the first dataset after training the second, minus the
    from-scratch accuracy on the first. Positive means the new dataset
    improved the old one."""
    return report.acc_a2b_on_a - report.acc_scratch_a


def _eval_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate(state, test_set, candidate_classes) -> float:
    """Accuracy percent over test_set with predictions restricted to candidates.

    Per sample: encode the image, select prompts (attriclip), compose the
    text input per candidate class, embed, and take the class with the
    highest cosine similarity. Candidates are sorted internally, so the
    result does not depend on their given order and ties break toward the
    lowest class id. All tensors are constants: nothing lands on the tape.
    """
    candidates = sorted(set(int(c) for c in candidate_classes))
    if not candidates:
        raise ValueError("evaluate: no candidate classes")
    test_set = list(test_set)
    if not test_set:
        raise ValueError("evaluate: empty test set")
    for cid in candidates:
        if cid not in state.class_tokens:
            raise KeyError(f"unknown class id {cid}")

    enc = state.encoders
    frozen = state.bank.frozen_view() if state.mode == "attriclip" else None
    shared_const = (ad.constant(state.shared_prompt.values)
                    if state.mode == "shared_prompt" else None)
    cls_seq = {cid: TokenSequence(ad.constant(state.class_tokens[cid].reshape(1, -1)))
               for cid in candidates}
    cache: dict = {}

    def embedding(sel, cid) -> np.ndarray:
        key = (sel.index_tuple if sel is not None else None, cid)
        w = cache.get(key)
        if w is None:
            if state.mode == "attriclip":
                seq = compose_text_input(sel, frozen, cls_seq[cid])
            elif state.mode == "shared_prompt":
                seq = TokenSequence(ad.concat([shared_const, cls_seq[cid].tokens]))
            else:
                seq = cls_seq[cid]
            w = enc.encode_text(seq).values
            cache[key] = w
        return w

    def classify(sample) -> bool:
        z = enc.encode_image(sample)
        sel = (select_top_c(z, frozen, state.top_c)
               if state.mode == "attriclip" else None)
        scores = np.array([ad.cosine_value(z, embedding(sel, cid)) for cid in candidates])
        return candidates[int(np.argmax(scores))] == sample.label

    workers = _eval_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hits = list(pool.map(classify, test_set))
    else:
        hits = [classify(s) for s in test_set]
    return 100.0 * sum(hits) / len(hits)


def run_cdcl(stream_a, stream_b, config, mode: str = "attriclip") -> CdclReport:
    """Four-leg cross-dataset protocol: scratch on each dataset, then A->B.

    Per-dataset accuracies use that dataset's classes as candidates; the
    joint accuracy presents the union of both label spaces for every test
    sample of both datasets.
    """
    from .trainer import run_sequence

    ids_a = set(stream_a.all_class_ids())
    ids_b = set(stream_b.all_class_ids())
    overlap = ids_a & ids_b
    if overlap:
        raise ValueError(f"CDCL streams share class ids {sorted(overlap)}")

    cand_a = sorted(ids_a)
    cand_b = sorted(ids_b)
    test_a = stream_a.all_test_samples()
    test_b = stream_b.all_test_samples()

    _, state_b = run_sequence(stream_b, config, mode=mode)
    acc_scratch_b = evaluate(state_b, test_b, cand_b)

    _, state = run_sequence(stream_a, config, mode=mode)
    acc_scratch_a = evaluate(state, test_a, cand_a)

    run_sequence(stream_b, config, state=state, mode=mode)
    acc_a2b_on_b = evaluate(state, test_b, cand_b)
    acc_a2b_on_a = evaluate(state, test_a, cand_a)
    acc_joint = evaluate(state, test_a + test_b, cand_a + cand_b)

    return CdclReport(acc_scratch_b=acc_scratch_b, acc_a2b_on_b=acc_a2b_on_b,
                      acc_scratch_a=acc_scratch_a, acc_a2b_on_a=acc_a2b_on_a,
                      acc_joint=acc_joint)
