"""Word error rate with a substitution/insertion/deletion breakdown."""
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self):
        return self.errors / self.ref_len

    def __add__(self, other):
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


def _as_ids(seq):
    if isinstance(seq, str):
        seq = seq.split()
    seq = list(seq)
    if seq and not isinstance(seq[0], (int, np.integer)):
        return seq
    return [int(s) for s in seq]


def _intern(ref, hyp):
    table = {}
    r = np.array([table.setdefault(t, len(table)) for t in ref], dtype=np.int64)
    h = np.array([table.setdefault(t, len(table)) for t in hyp], dtype=np.int64)
    return r, h


def align(reference, hypothesis):
    """Backtrace one minimal alignment as a list of ``(op, ref_tok, hyp_tok)``.

    ``op`` is one of ``"=" "S" "I" "D"``. Among optimal predecessors the
    backtrace prefers match/substitution, then insertion, then deletion.
    """
    ref, hyp = _as_ids(reference), _as_ids(hypothesis)
    r, h = _intern(ref, hyp)
    d = kernels.edit_table(r, h)
    i, j = len(r), len(h)
    ops = []
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            ops.append(("=" if r[i - 1] == h[j - 1] else "S", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ops.append(("I", None, hyp[j - 1]))
            j -= 1
        else:
            ops.append(("D", ref[i - 1], None))
            i -= 1
    ops.reverse()
    return ops


def wer(reference, hypothesis):
    """Edit-distance breakdown of ``hypothesis`` against a non-empty ``reference``.

    Accepts id lists or whitespace-separated strings.
    """
    ref = _as_ids(reference)
    if not ref:
        raise ValueError("WER is undefined for an empty reference")
    counts = {"S": 0, "I": 0, "D": 0, "=": 0}
    for op, _, _ in align(ref, hypothesis):
        counts[op] += 1
    return WerBreakdown(counts["S"], counts["I"], counts["D"], len(ref))


def corpus_wer(pairs):
    """Sum S/I/D and reference lengths over ``(reference, hypothesis)`` pairs, then divide."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_wer needs at least one pair")
    total = WerBreakdown(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + wer(ref, hyp)
    return total


def format_report(rows, total, header=None):
    """Line-oriented report: one ``id=... S= I= D= ref_len= wer=`` line per sample, then the corpus line."""
    lines = [header] if header else []
    for sid, b in rows:
        lines.append(
            f"id={sid}\tS={b.substitutions}\tI={b.insertions}\tD={b.deletions}\tref_len={b.ref_len}\twer={b.wer:.6f}"
        )
    lines.append(
        f"corpus\tS={total.substitutions}\tI={total.insertions}\tD={total.deletions}\t"
        f"ref_len={total.ref_len}\twer={total.wer:.6f}"
    )
    return "\n".join(lines) + "\n"
