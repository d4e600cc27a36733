"""Corpus BLEU-1..4, METEOR (exact-match), and ROUGE-L.

Metric tokens are lowercased whitespace words, independent of the BPE model.
METEOR alignment maximizes exact unigram matches and then minimizes chunks;
minimizing chunks exactly is combinatorial, so short candidates get an
exhaustive search and long ones a wide beam (the reference METEOR tool does
the same).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

EXACT_CHUNK_LIMIT = 10
BEAM_WIDTH = 64


def normalize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge: float
    n_pairs: int

    def as_dict(self) -> dict:
        return {"bleu1": self.bleu1, "bleu2": self.bleu2, "bleu3": self.bleu3,
                "bleu4": self.bleu4, "meteor": self.meteor, "rouge": self.rouge,
                "n_pairs": self.n_pairs}


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[list], references: list[list], k: int = 4) -> float:
    """Corpus-level BLEU-k: geometric mean of clipped n-gram precisions for
    n = 1..k with brevity penalty min(1, e^{1 - r/c})."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        raise ValueError("empty corpus")
    if not (1 <= k <= 4):
        raise ValueError("k must be in 1..4")
    clipped = [0] * k
    total = [0] * k
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, k + 1):
            cn = _ngrams(cand, n)
            rn = _ngrams(ref, n)
            total[n - 1] += sum(cn.values())
            clipped[n - 1] += sum(min(cnt, rn[g]) for g, cnt in cn.items())
    if any(t == 0 or c == 0 for t, c in zip(total, clipped)):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, total)) / k
    bp = min(1.0, math.exp(1.0 - r_len / c_len)) if c_len > 0 else 0.0
    return bp * math.exp(log_p)


def _chunks_of(alignment: list[tuple[int, int]]) -> int:
    """Chunk count of an alignment sorted by candidate position."""
    chunks = 0
    prev = None
    for ci, ri in alignment:
        if prev is None or ci != prev[0] + 1 or ri != prev[1] + 1:
            chunks += 1
        prev = (ci, ri)
    return chunks


def _min_chunks(cand: list, ref: list) -> tuple[int, int]:
    """(matches, min chunks) over exact-match unigram alignments.

    Matches per token type are forced to min(count_cand, count_ref); the
    choice of which occurrences pair up is what chunk minimization is over.
    """
    c_counts = Counter(cand)
    r_counts = Counter(ref)
    matches = sum(min(c_counts[t], r_counts[t]) for t in c_counts)
    if matches == 0:
        return 0, 0
    quota = {t: min(c_counts[t], r_counts[t]) for t in c_counts if t in r_counts}
    ref_pos = {}
    for j, t in enumerate(ref):
        ref_pos.setdefault(t, []).append(j)

    exhaustive = len(cand) <= EXACT_CHUNK_LIMIT
    # beam over candidate positions; state = (used ref positions, remaining
    # per-type quotas, last aligned pair, chunks so far)
    states = [(0, None, frozenset(), tuple(sorted(quota.items(), key=lambda kv: str(kv[0]))))]
    for ci, tokenc in enumerate(cand):
        nxt = []
        for chunks, prev, used, q in states:
            qd = dict(q)
            can_skip = True
            if tokenc in qd and qd[tokenc] > 0:
                remaining_cand = sum(1 for t in cand[ci:] if t == tokenc)
                can_skip = remaining_cand > qd[tokenc]
                for rj in ref_pos[tokenc]:
                    if rj in used:
                        continue
                    qd2 = dict(qd)
                    qd2[tokenc] -= 1
                    new_chunks = chunks + (0 if prev == (ci - 1, rj - 1) else 1)
                    nxt.append((new_chunks, (ci, rj), used | {rj},
                                tuple(sorted(qd2.items(), key=lambda kv: str(kv[0])))))
            if can_skip:
                nxt.append((chunks, prev, used, q))
        nxt.sort(key=lambda s: s[0])
        seen = set()
        dedup = []
        for s in nxt:
            key = (s[1], s[2], s[3])
            if key not in seen:
                seen.add(key)
                dedup.append(s)
        states = dedup if exhaustive else dedup[:BEAM_WIDTH]
    best = min(s[0] for s in states
               if all(v == 0 for _, v in s[3])) if states else matches
    return matches, best


def meteor(candidate: list, reference: list) -> float:
    """Exact-match METEOR: F = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3."""
    m, chunks = _min_chunks(candidate, reference)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    f = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f * (1.0 - penalty)


def _lcs_len(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: list, reference: list) -> tuple[float, float, float]:
    """(precision, recall, F1) from longest-common-subsequence length."""
    lcs = _lcs_len(candidate, reference)
    if lcs == 0:
        return 0.0, 0.0, 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return p, r, 2 * p * r / (p + r)


def evaluate_corpus(pairs: list[tuple[str, str]]) -> MetricReport:
    """Corpus BLEU over all pairs; METEOR and ROUGE-L F1 averaged per pair."""
    if not pairs:
        raise ValueError("empty pair list")
    cands = [normalize(g) for g, _ in pairs]
    refs = [normalize(r) for _, r in pairs]
    bleus = [bleu(cands, refs, k) for k in (1, 2, 3, 4)]
    met = sum(meteor(c, r) for c, r in zip(cands, refs)) / len(pairs)
    rg = sum(rouge_l(c, r)[2] for c, r in zip(cands, refs)) / len(pairs)
    return MetricReport(*bleus, met, rg, len(pairs))


def relative_change(a: float, b: float) -> float:
    """(a - b) / b, the ablation arithmetic (guards b == 0)."""
    if b == 0:
        return math.inf if a > 0 else 0.0
    return (a - b) / b
