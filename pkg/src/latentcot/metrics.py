"""Evaluation: answer exact match, token accounting, BLEU-4 / ROUGE-L, the
zero-vector information ablation, and ablation-sweep tables."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .curriculum import assemble_sequence
from .vocab import ThinkingTokenSpec


class MetricsError(ValueError):
    pass


def _strip_markers(tokens) -> list[str]:
    return [t for t in tokens if not (t.startswith("<") and t.endswith(">"))]


def exact_match(pred_tokens, gold_tokens) -> int:
    """1 iff the token sequences are equal after stripping marker tokens."""
    return int(_strip_markers(pred_tokens) == _strip_markers(gold_tokens))


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate, reference) -> float:
    """Geometric mean of 1..4-gram modified precisions, +1 smoothing on any
    zero match count, brevity penalty exp(1 - |ref|/|cand|) for short
    candidates. Empty candidates score 0."""
    cand = list(candidate)
    ref = list(reference)
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand_counts = _ngrams(cand, n)
        ref_counts = _ngrams(ref, n)
        total = sum(cand_counts.values())
        matched = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        if matched == 0:
            p = (matched + 1.0) / (total + 1.0)
        else:
            p = matched / total
        log_sum += math.log(p)
    score = math.exp(log_sum / 4.0)
    if len(cand) < len(ref):
        score *= math.exp(1.0 - len(ref) / len(cand))
    return score


def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """LCS-based F1 (beta = 1)."""
    cand, ref = list(candidate), list(reference)
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2.0 * p * r / (p + r)


# ---------------------------------------------------------------------------
# token accounting

@dataclass
class TokenStats:
    mean_generated: float
    baseline_mean_generated: float
    compression_ratio: float   # baseline mean / hidden-thinking mean
    n: int


def token_stats(results, baseline) -> TokenStats:
    """Mean generated tokens for both result sets over matched sample ids."""
    if not results or not baseline:
        raise MetricsError("empty result list")
    ids_a = sorted(r.sample_id for r in results)
    ids_b = sorted(r.sample_id for r in baseline)
    if ids_a != ids_b:
        raise MetricsError("result sets cover different sample ids")
    mean_a = sum(r.generated_token_count for r in results) / len(results)
    mean_b = sum(r.generated_token_count for r in baseline) / len(baseline)
    if mean_a <= 0:
        raise MetricsError("degenerate zero-token results")
    return TokenStats(
        mean_generated=mean_a,
        baseline_mean_generated=mean_b,
        compression_ratio=mean_b / mean_a,
        n=len(results),
    )


def structural_generated_count(sample, spec: ThinkingTokenSpec | None, v,
                               s: int | None = None) -> int:
    """Tokens a perfectly trained model emits for this sample: the length of
    the loss-bearing target region (stages or thinking runs, answer span,
    EOS). With ``spec=None`` or s=0 this is the textual-baseline count."""
    if spec is None:
        spec = ThinkingTokenSpec()
        s = 0
    if s is None:
        s = spec.num_stages
    seq = assemble_sequence(sample, s, spec, v)
    return seq.target_length


# ---------------------------------------------------------------------------
# ablation sweeps

@dataclass
class AblationRow:
    value: float
    mean_generated_tokens: float | None = None
    answer_accuracy: float | None = None
    error: str | None = None
    flags: dict = field(default_factory=dict)


@dataclass
class AblationReport:
    kind: str
    rows: list[AblationRow]
    baseline_mean_tokens: float | None = None
    meta: dict = field(default_factory=dict)

    def to_table(self) -> str:
        lines = ["value\tmean_generated_tokens\tanswer_accuracy\terror"]
        for r in self.rows:
            lines.append(
                f"{r.value}\t"
                f"{'' if r.mean_generated_tokens is None else f'{r.mean_generated_tokens:.3f}'}\t"
                f"{'' if r.answer_accuracy is None else f'{r.answer_accuracy:.4f}'}\t"
                f"{r.error or ''}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "baseline_mean_tokens": self.baseline_mean_tokens,
            "meta": self.meta,
            "rows": [r.__dict__ for r in self.rows],
        }, sort_keys=True, indent=2)


def _spec_for_value(kind: str, value, base_spec: ThinkingTokenSpec) -> ThinkingTokenSpec:
    if kind == "tokens-per-stage":
        return ThinkingTokenSpec(
            stage_names=base_spec.stage_names,
            tokens_per_stage=int(value), mode="fixed")
    if kind == "retention-ratio":
        return ThinkingTokenSpec(
            stage_names=base_spec.stage_names,
            mode="ratio", ratio=float(value))
    raise MetricsError(f"unknown ablation kind {kind!r}")


def structural_sweep(kind: str, values, samples, v,
                     base_spec: ThinkingTokenSpec) -> AblationReport:
    """No-training sweep: per value, the mean structural generated-token count
    over the dataset. Retention-mode means are non-decreasing in the ratio by
    construction of the per-stage counts."""
    if not values:
        raise MetricsError("no ablation values")
    baseline = sum(
        structural_generated_count(s, None, v) for s in samples) / len(samples)
    rows = []
    for value in values:
        spec = _spec_for_value(kind, value, base_spec)
        mean = sum(
            structural_generated_count(s, spec, v) for s in samples) / len(samples)
        rows.append(AblationRow(value=float(value), mean_generated_tokens=mean))
    return AblationReport(kind=kind, rows=rows, baseline_mean_tokens=baseline,
                          meta={"mode": "structural", "n": len(samples)})


def ablation_sweep(kind: str, values, run_pipeline, *, structural_args=None
                   ) -> AblationReport:
    """Full-pipeline sweep: ``run_pipeline(spec_value) -> (accuracy, mean
    tokens)`` per value; aborted runs turn into rows with failure markers.

    For a no-training structural sweep pass ``structural_args=(samples, vocab,
    base_spec)`` and ``run_pipeline=None``.
    """
    if not values:
        raise MetricsError("no ablation values")
    if run_pipeline is None:
        samples, v, base_spec = structural_args
        return structural_sweep(kind, values, samples, v, base_spec)
    rows = []
    for value in values:
        try:
            accuracy, mean_tokens = run_pipeline(value)
            rows.append(AblationRow(value=float(value),
                                    mean_generated_tokens=mean_tokens,
                                    answer_accuracy=accuracy))
        except Exception as e:  # aborted run -> partial table
            rows.append(AblationRow(value=float(value), error=str(e)))
    return AblationReport(kind=kind, rows=rows, meta={"mode": "pipeline"})


# ---------------------------------------------------------------------------
# evaluation report

@dataclass
class EvalReport:
    datasets: dict = field(default_factory=dict)   # name -> accuracy/token stats
    stages: dict = field(default_factory=dict)     # stage -> bleu/rouge metrics
    digests: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name, d in self.datasets.items():
            acc = d.get("answer_accuracy")
            if acc is not None and not 0.0 <= acc <= 1.0:
                raise MetricsError(f"{name}: accuracy {acc} out of range")
            ratio = d.get("compression_ratio")
            if ratio is not None and ratio <= 0:
                raise MetricsError(f"{name}: compression ratio {ratio} <= 0")

    def to_json(self) -> str:
        self.validate()
        return json.dumps({
            "datasets": self.datasets,
            "stages": self.stages,
            "digests": self.digests,
            "flags": self.flags,
        }, sort_keys=True, indent=2)

    def to_table(self) -> str:
        lines = ["section\tname\tmetric\tvalue"]
        for name, d in sorted(self.datasets.items()):
            for k, val in sorted(d.items()):
                lines.append(f"dataset\t{name}\t{k}\t{val}")
        for name, d in sorted(self.stages.items()):
            for k, val in sorted(d.items()):
                lines.append(f"stage\t{name}\t{k}\t{val}")
        for k, val in sorted(self.digests.items()):
            lines.append(f"digest\t-\t{k}\t{val}")
        for k, val in sorted(self.flags.items()):
            lines.append(f"flag\t-\t{k}\t{val}")
        return "\n".join(lines) + "\n"

    def save(self, json_path, table_path=None) -> None:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).write_text(self.to_json())
        if table_path:
            Path(table_path).write_text(self.to_table())


def answer_accuracy(results, samples_by_id) -> float:
    if not results:
        raise MetricsError("no inference results")
    hits = 0
    for r in results:
        gold = samples_by_id[r.sample_id].answer_tokens
        hits += exact_match(r.answer_tokens, gold)
    return hits / len(results)
