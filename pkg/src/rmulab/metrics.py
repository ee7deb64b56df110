"""Scoring: regurgitation (ROUGE-L / exact match), harmonic task aggregate,
loss-based membership inference, knowledge probe and the final score.

ROUGE-L tokenization: lowercase, replace every character outside ``[a-z0-9]``
with a space, split on whitespace.  Exact-match normalization: strip, collapse
internal whitespace, case-fold.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import KINDS, SUBTASKS, Corpus, Document, ProbeItem, Tokenizer, encode_record
from .model import Model, greedy_decode, sequence_logprobs

GRID_SPLITS = ("retain", "forget")
HARMONIC_FLOOR = 1e-9

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def rouge_tokens(text: str) -> list[str]:
    return _NON_ALNUM.sub(" ", text.lower()).split()


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, variant: str = "f") -> float:
    """LCS-based ROUGE-L; ``variant`` is ``"f"`` (F-measure) or ``"recall"``."""
    if variant not in ("f", "recall"):
        raise ValueError(f"unknown ROUGE-L variant {variant!r}")
    c, r = rouge_tokens(candidate), rouge_tokens(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    if variant == "recall":
        return lcs / len(r)
    # 2PR / (P + R) with P = lcs/|c|, R = lcs/|r|, as one correctly rounded division
    return 2 * lcs / (len(c) + len(r))


def normalize_answer(text: str) -> str:
    return " ".join(text.split()).casefold()


def exact_match(candidate: str, reference: str) -> int:
    return int(normalize_answer(candidate) == normalize_answer(reference))


@dataclass
class RegurgitationCell:
    subtask: int
    kind: str
    split: str
    raw_score: float

    @property
    def aggregated_score(self) -> float:
        return 1.0 - self.raw_score if self.split == "forget" else self.raw_score

    def to_dict(self) -> dict:
        return {"subtask": self.subtask, "kind": self.kind, "split": self.split,
                "raw_score": self.raw_score, "aggregated_score": self.aggregated_score}


def grid_positions() -> list[tuple[int, str, str]]:
    return [(s, k, sp) for s in SUBTASKS for k in KINDS for sp in GRID_SPLITS]


def harmonic_mean(values: Sequence[float]) -> float:
    vals = [float(v) for v in values]
    if any(v <= HARMONIC_FLOOR for v in vals):
        return 0.0
    return len(vals) / sum(1.0 / v for v in vals)


def task_aggregate(cells: Sequence[RegurgitationCell]) -> float:
    if len(cells) != 12:
        raise ValueError(f"task_aggregate needs exactly 12 cells, got {len(cells)}")
    keys = {(c.subtask, c.kind, c.split) for c in cells}
    if keys != set(grid_positions()):
        raise ValueError("cells must cover each subtask x kind x split position exactly once")
    return harmonic_mean([c.aggregated_score for c in cells])


def mia_auc(member_losses: Sequence[float], nonmember_losses: Sequence[float]) -> float:
    """P(member loss < non-member loss), ties counted as one half."""
    m = np.asarray(member_losses, dtype=np.float64)
    n = np.sort(np.asarray(nonmember_losses, dtype=np.float64))
    if m.size == 0 or n.size == 0:
        raise ValueError("mia_auc needs non-empty member and non-member lists")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(n))):
        raise ValueError("mia_auc losses must be finite")
    below = np.searchsorted(n, m, side="left")
    upto = np.searchsorted(n, m, side="right")
    greater = int(np.sum(n.size - upto))
    ties = int(np.sum(upto - below))
    return (2 * greater + ties) / (2 * m.size * n.size)


def mia_score(auc: float) -> float:
    if not 0.0 <= auc <= 1.0:
        raise ValueError(f"auc must lie in [0, 1], got {auc}")
    return 1.0 - abs(auc - 0.5) * 2


def final_score(task_agg: float, mia: float, probe_acc: float) -> float:
    for name, v in (("task aggregate", task_agg), ("mia score", mia), ("probe accuracy", probe_acc)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return (task_agg + mia + probe_acc) / 3


# -- model-dependent scoring -----------------------------------------------


@dataclass
class Transcript:
    id: str
    subtask: int
    split: str
    kind: str
    reference: str
    candidate: str
    score: float


def decode_records(model: Model, tok: Tokenizer, docs: Sequence[Document],
                   max_new_tokens: int = 48) -> list[str]:
    prompts = [tok.encode(d.prompt, strict=False, bos=True) for d in docs]
    room = [model.config.max_seq_len - len(p) for p in prompts]
    if min(room, default=1) < 1:
        raise ValueError("a prompt fills the whole context window")
    outs = greedy_decode(model, prompts, max_new_tokens, tok.eos_id, tok.pad_id)
    return [tok.decode(o) for o in outs]


def score_record(doc: Document, candidate: str, rouge_variant: str = "f") -> float:
    if doc.kind == "qa":
        return float(exact_match(candidate, doc.completion))
    return rouge_l(candidate, doc.completion, rouge_variant)


def evaluate_regurgitation(model: Model, corpus: Corpus, tok: Tokenizer, max_new_tokens: int = 48,
                           rouge_variant: str = "f") -> tuple[list[RegurgitationCell], list[Transcript]]:
    """Greedy-decode every retain/forget record and reduce to the 12-cell grid."""
    docs = sorted((d for d in corpus.documents if d.split in GRID_SPLITS), key=lambda d: d.id)
    outs = decode_records(model, tok, docs, max_new_tokens)
    transcripts = [Transcript(d.id, d.subtask, d.split, d.kind, d.completion, o,
                              score_record(d, o, rouge_variant)) for d, o in zip(docs, outs)]
    return cells_from_transcripts(transcripts), transcripts


def cells_from_transcripts(transcripts: Sequence[Transcript]) -> list[RegurgitationCell]:
    cells = []
    for s, k, sp in grid_positions():
        scores = [t.score for t in transcripts if (t.subtask, t.kind, t.split) == (s, k, sp)]
        if not scores:
            raise ValueError(f"no documents for subtask {s}, kind {k}, split {sp}")
        cells.append(RegurgitationCell(s, k, sp, float(np.mean(scores))))
    return cells


def completion_losses(model: Model, tok: Tokenizer, docs: Sequence[Document]) -> list[float]:
    """Mean completion-token negative log-likelihood per document (end token excluded)."""
    seqs, spans = [], []
    for d in docs:
        ids, plen = encode_record(tok, d.prompt, d.completion, strict=False)
        seqs.append(ids)
        spans.append((plen, len(ids) - 1))
    logps = sequence_logprobs(model, seqs, tok.pad_id)
    # logp[t] scores token t+1, so completion tokens [plen, end) sit at [plen-1, end-1)
    return [float(-np.mean(lp[a - 1:b - 1])) for lp, (a, b) in zip(logps, spans)]


def membership_inference(model: Model, corpus: Corpus, tok: Tokenizer) -> tuple[float, float]:
    """(auc, mia score) with forget records as members and holdout records as non-members."""
    members = corpus.select(split="forget")
    nonmembers = corpus.select(split="holdout")
    if not nonmembers:
        raise ValueError("corpus has no holdout split; membership inference is impossible")
    if not members:
        raise ValueError("corpus has no forget split")
    auc = mia_auc(completion_losses(model, tok, members), completion_losses(model, tok, nonmembers))
    return auc, mia_score(auc)


def knowledge_probe(model: Model, probe: Sequence[ProbeItem], tok: Tokenizer) -> float:
    """Multiple-choice accuracy; argmax of mean choice-token log-likelihood, ties to lowest index."""
    if not probe:
        raise ValueError("knowledge probe is empty")
    seqs, owners = [], []
    for i, item in enumerate(probe):
        q = tok.encode(item.question, strict=False, bos=True)
        for c in item.choices:
            seqs.append((q + tok.encode(c, strict=False), len(q)))
            owners.append(i)
    logps = sequence_logprobs(model, [s for s, _ in seqs], tok.pad_id, batch_size=128)
    scores = np.array([np.mean(lp[start - 1:]) for lp, (_, start) in zip(logps, seqs)]).reshape(len(probe), 4)
    preds = np.argmax(scores, axis=1)
    return float(np.mean([p == item.answer_index for p, item in zip(preds, probe)]))


@dataclass
class MetricReport:
    cells: list[RegurgitationCell]
    task_aggregate: float
    mia_auc: float
    mia_score: float
    probe_accuracy: float
    final_score: float
    rouge_variant: str = "f"
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cells, auc, probe_acc, rouge_variant="f", fingerprint="", extra=None) -> "MetricReport":
        agg = task_aggregate(cells)
        ms = mia_score(auc)
        return cls(list(cells), agg, auc, ms, probe_acc, final_score(agg, ms, probe_acc),
                   rouge_variant, fingerprint, dict(extra or {}))

    def check(self) -> None:
        if len(self.cells) != 12:
            raise ValueError("a metric report needs 12 cells")
        if abs(self.final_score - (self.task_aggregate + self.mia_score + self.probe_accuracy) / 3) > 1e-9:
            raise ValueError("final score does not equal the mean of its components")

    def raw_mean(self, split: str) -> float:
        return float(np.mean([c.raw_score for c in self.cells if c.split == split]))

    def to_dict(self) -> dict:
        return {"cells": [c.to_dict() for c in self.cells], "task_aggregate": self.task_aggregate,
                "mia_auc": self.mia_auc, "mia_score": self.mia_score,
                "probe_accuracy": self.probe_accuracy, "final_score": self.final_score,
                "rouge_variant": self.rouge_variant, "config_fingerprint": self.config_fingerprint,
                "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        cells = [RegurgitationCell(c["subtask"], c["kind"], c["split"], c["raw_score"]) for c in d["cells"]]
        rep = cls(cells, d["task_aggregate"], d["mia_auc"], d["mia_score"], d["probe_accuracy"],
                  d["final_score"], d.get("rouge_variant", "f"), d.get("config_fingerprint", ""),
                  d.get("extra", {}))
        rep.check()
        return rep

    def csv_row(self) -> dict:
        return {"task_aggregate": self.task_aggregate, "mia": self.mia_score,
                "probe": self.probe_accuracy, "final": self.final_score}


def evaluate_model(model: Model, corpus: Corpus, probe: Sequence[ProbeItem], tok: Tokenizer,
                   max_new_tokens: int = 48, rouge_variant: str = "f",
                   fingerprint: str = "") -> tuple[MetricReport, list[Transcript]]:
    cells, transcripts = evaluate_regurgitation(model, corpus, tok, max_new_tokens, rouge_variant)
    auc, _ = membership_inference(model, corpus, tok)
    acc = knowledge_probe(model, probe, tok)
    return MetricReport.build(cells, auc, acc, rouge_variant, fingerprint), transcripts


def transcript_dicts(transcripts: Sequence[Transcript]) -> list[dict]:
    return [asdict(t) for t in transcripts]
