"""BLEU-1..4 and exact-match METEOR-lite for generated vs reference
reports.

Scores are sentence-level (one per exam) and averaged arithmetically
over the corpus; a corpus-pooled BLEU mode exists for comparison. BLEU
uses no smoothing: any zero n-gram precision yields 0. METEOR-lite is
the exact-unigram-match variant (no stemming or synonymy), so its values
are not comparable to full METEOR.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

from .errors import DataError

METEOR_ALPHA = 0.9
METEOR_BETA = 3.0
METEOR_GAMMA = 0.5


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_ngram_precision(cand, ref, n):
    """Clipped n-gram matches and candidate n-gram total.

    Candidate counts are clipped at the reference count of the same
    n-gram (the BLEU trick that stops "the the the ..." scoring high).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cand_counts = _ngram_counts(cand, n)
    if not cand_counts:
        return 0, 0
    ref_counts = _ngram_counts(ref, n)
    clipped = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    return clipped, sum(cand_counts.values())


def brevity_penalty(cand_len, ref_len):
    if cand_len == 0:
        return 0.0
    return math.exp(min(0.0, 1.0 - ref_len / cand_len))


def bleu_n(cand, ref, n):
    """Geometric mean of modified precisions 1..n times the brevity
    penalty. Unsmoothed: any zero precision gives a 0 score."""
    if n not in (1, 2, 3, 4):
        raise ValueError(f"bleu_n: n must be in 1..4, got {n}")
    cand, ref = list(cand), list(ref)
    if not cand:
        warnings.warn("bleu_n: empty candidate scores 0", stacklevel=2)
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        clipped, total = modified_ngram_precision(cand, ref, k)
        if clipped == 0 or total == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    return brevity_penalty(len(cand), len(ref)) * math.exp(log_sum / n)


def _align_unigrams(cand, ref):
    """Max-match, then min-chunk unigram alignment (exact matches only).

    Returns (m, chunks) where m = sum over token types of
    min(cand_count, ref_count), and chunks is the minimum number of
    contiguous matched spans over all alignments achieving m matches.
    Branch and bound over candidate positions; fine at report scale where
    duplicate tokens are rare.
    """
    ref_positions: dict = {}
    for j, tok in enumerate(ref):
        ref_positions.setdefault(tok, []).append(j)
    cand_counts = Counter(cand)
    ref_counts = Counter(ref)
    need = {t: min(c, ref_counts[t]) for t, c in cand_counts.items() if t in ref_counts}
    m = sum(need.values())
    if m == 0:
        return 0, 0

    matchable = [i for i, tok in enumerate(cand) if tok in ref_positions]
    # occurrences of each token at or after position k, to tell when a
    # skip would make the max match count unreachable
    occ_after = [Counter() for _ in range(len(matchable) + 1)]
    for k in range(len(matchable) - 1, -1, -1):
        occ_after[k] = occ_after[k + 1].copy()
        occ_after[k][cand[matchable[k]]] += 1

    best = [m + 1]
    matched = Counter()

    def search(k, used, prev_i, prev_j, chunks):
        if chunks >= best[0]:
            return
        if k == len(matchable):
            best[0] = chunks
            return
        i = matchable[k]
        tok = cand[i]
        if matched[tok] < need[tok]:
            slots = [j for j in ref_positions[tok] if j not in used]
            # continuation of the current chunk first, for early tight bounds
            slots.sort(key=lambda j: (not (prev_i == i - 1 and j == prev_j + 1), j))
            matched[tok] += 1
            for j in slots:
                cont = prev_i == i - 1 and j == prev_j + 1
                used.add(j)
                search(k + 1, used, i, j, chunks + (0 if cont else 1))
                used.remove(j)
            matched[tok] -= 1
        # leaving this occurrence unmatched is legal only if later
        # occurrences can still supply the required matches
        if occ_after[k + 1][tok] >= need[tok] - matched[tok]:
            search(k + 1, used, prev_i, prev_j, chunks)

    search(0, set(), -2, -2, 0)
    return m, best[0]


def meteor_lite(cand, ref):
    """Exact-match METEOR: F-mean of unigram P/R weighted toward recall,
    times a fragmentation penalty from the chunk count."""
    cand, ref = list(cand), list(ref)
    if not cand or not ref:
        return 0.0
    m, chunks = _align_unigrams(cand, ref)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r)
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
    return f * (1.0 - penalty)


METRIC_NAMES = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor")


def score_pair(cand, ref):
    scores = {f"bleu{n}": bleu_n(cand, ref, n) for n in (1, 2, 3, 4)}
    scores["meteor"] = meteor_lite(cand, ref)
    return scores


@dataclass
class ScoreReport:
    per_exam: list[tuple[str, dict]]  # (exam_id, {metric: value})
    means: dict

    @property
    def count(self):
        return len(self.per_exam)

    def to_table(self) -> str:
        """TSV, scores x100 (Table-1 scale), one row per exam + MEAN."""
        lines = ["exam_id\t" + "\t".join(METRIC_NAMES)]
        for exam_id, scores in self.per_exam:
            lines.append(exam_id + "\t" + "\t".join(f"{scores[m] * 100:.4f}" for m in METRIC_NAMES))
        lines.append("MEAN\t" + "\t".join(f"{self.means[m] * 100:.4f}" for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"


def score_corpus(pairs) -> ScoreReport:
    """pairs: list of (exam_id, candidate_tokens, reference_tokens)."""
    if not pairs:
        raise DataError("score_corpus: no pairs to score")
    per_exam = [(exam_id, score_pair(cand, ref)) for exam_id, cand, ref in pairs]
    means = {
        m: sum(scores[m] for _, scores in per_exam) / len(per_exam)
        for m in METRIC_NAMES
    }
    return ScoreReport(per_exam=per_exam, means=means)


def corpus_pooled_bleu(pairs, n):
    """Pooled-count BLEU over the whole corpus (comparison mode)."""
    clipped_total = [0] * n
    ngram_total = [0] * n
    cand_len = ref_len = 0
    for _, cand, ref in pairs:
        cand, ref = list(cand), list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for k in range(1, n + 1):
            c, t = modified_ngram_precision(cand, ref, k)
            clipped_total[k - 1] += c
            ngram_total[k - 1] += t
    log_sum = 0.0
    for c, t in zip(clipped_total, ngram_total):
        if c == 0 or t == 0:
            return 0.0
        log_sum += math.log(c / t)
    return brevity_penalty(cand_len, ref_len) * math.exp(log_sum / n)
