"""Stage-s sequence assembly with loss masks, and the progressive schedule.

At stage s, reasoning stages k <= s appear as runs of their thinking token
(no open/close markers: the token itself delimits the stage); stages k > s
keep their marked-up text. The loss covers thinking tokens, textual stages,
their markers, the answer span, and EOS - the model has to learn to emit the
thinking tokens itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import taskgen
from .taskgen import Sample, stage_markers
from .vocab import ThinkingTokenSpec, Vocab


class CurriculumError(ValueError):
    pass


@dataclass
class MaskedSequence:
    """Token ids with a parallel loss mask; the unit every trainer consumes."""

    ids: np.ndarray                                # int64 [T]
    loss_mask: np.ndarray                          # bool [T]
    thinking_positions: tuple[tuple[int, int], ...]  # (stage k, position)
    region_map: dict[str, tuple[int, int]]         # half-open [start, end) spans

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def target_length(self) -> int:
        """Number of loss-bearing positions (what a perfect model generates)."""
        return int(self.loss_mask.sum())


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def retention_counts(sample: Sample, ratio: float) -> tuple[int, ...]:
    """Per-stage thinking-token counts at a retention ratio.

    m_k = max(1, round(ratio * |stage_k|)) with round-half-away-from-zero.
    """
    if not 0.0 < ratio <= 1.0:
        raise CurriculumError("ratio must be in (0, 1]")
    return tuple(
        max(1, _round_half_away(ratio * len(stage))) for stage in sample.stages
    )


def stage_token_counts(sample: Sample, spec: ThinkingTokenSpec) -> tuple[int, ...]:
    if spec.mode == "fixed":
        return (spec.tokens_per_stage,) * spec.num_stages
    return retention_counts(sample, spec.ratio)


def prompt_ids(sample: Sample, v: Vocab) -> list[int]:
    """[BOS] [visual tokens] [question tokens] - the inference prompt."""
    return v.encode(
        [taskgen.BOS, *sample.visual_tokens, *sample.question_tokens]
    )


def assemble_sequence(
    sample: Sample,
    s: int,
    spec: ThinkingTokenSpec,
    v: Vocab,
    max_len: int | None = None,
) -> MaskedSequence:
    """Compile a sample into the stage-s training sequence.

    Layout: [BOS][visual][question], then for each stage k: m_k thinking ids
    when k <= s, else <stage_k> text </stage_k>; then <ANSWER> answer
    </ANSWER> [EOS]. The mask is False on BOS/visual/question and True
    everywhere after.
    """
    K = spec.num_stages
    if not 0 <= s <= K:
        raise CurriculumError(f"stage {s} outside [0, {K}]")
    if len(sample.stages) != K:
        raise CurriculumError(
            f"sample {sample.id} has {len(sample.stages)} stages, spec expects {K}")
    if not v.thinking_ids:
        raise CurriculumError("vocab has no thinking tokens registered")

    counts = stage_token_counts(sample, spec)
    ids: list[int] = []
    mask: list[bool] = []
    region: dict[str, tuple[int, int]] = {}
    thinking_positions: list[tuple[int, int]] = []

    def emit(tokens: list[int], loss: bool) -> tuple[int, int]:
        start = len(ids)
        ids.extend(tokens)
        mask.extend([loss] * len(tokens))
        return (start, len(ids))

    emit([v.id(taskgen.BOS)], False)
    region["visual"] = emit(v.encode(sample.visual_tokens), False)
    region["question"] = emit(v.encode(sample.question_tokens), False)

    for k in range(1, K + 1):
        if k <= s:
            tid = v.thinking_ids[k - 1]
            start = len(ids)
            emit([tid] * counts[k - 1], True)
            thinking_positions += [(k, p) for p in range(start, len(ids))]
            region[f"stage{k}"] = (start, len(ids))
        else:
            open_m, close_m = stage_markers(spec.stage_names[k - 1])
            span = emit(
                v.encode([open_m, *sample.stages[k - 1], close_m]), True)
            region[f"stage{k}"] = span

    region["answer"] = emit(
        v.encode([taskgen.ANS_OPEN, *sample.answer_tokens, taskgen.ANS_CLOSE]), True)
    emit([v.id(taskgen.EOS)], True)

    if max_len is not None and len(ids) > max_len:
        raise CurriculumError(
            f"sample {sample.id}: assembled length {len(ids)} exceeds max_len {max_len}")

    return MaskedSequence(
        ids=np.asarray(ids, dtype=np.int64),
        loss_mask=np.asarray(mask, dtype=bool),
        thinking_positions=tuple(thinking_positions),
        region_map=region,
    )


# ---------------------------------------------------------------------------
# progressive schedule

@dataclass(frozen=True)
class Phase:
    label: str
    s: int
    steps: int
    lr: float
    batch_size: int


@dataclass(frozen=True)
class StagePlan:
    phases: tuple[Phase, ...]
    spec: ThinkingTokenSpec | None
    seed: int

    def describe(self) -> list[dict]:
        return [
            {"label": p.label, "s": p.s, "steps": p.steps, "lr": p.lr,
             "batch_size": p.batch_size}
            for p in self.phases
        ]


def build_stage_plan(train_cfg, spec: ThinkingTokenSpec | None, *, seed: int = 0,
                     kind: str = "progressive", n_samples: int | None = None) -> StagePlan:
    """Split the step budget into the progressive phases plus recovering.

    ``progressive``: equal budget for s = 0..K at the encoding lr, then a
    recovering phase (s = K) at the recovering lr. ``one-shot``: the whole
    encoding budget at s = K, then the same recovering phase. ``textual``:
    a single s = 0 phase with the full budget (the verbose baseline).
    ``overfit``: a single s = K phase with the full budget.
    ``spec=None`` is the degenerate no-thinking-token plan: one textual phase,
    no recovering. When the config leaves total_steps unset, each phase gets
    one pass over the data (``n_samples`` required).
    """
    K = spec.num_stages if spec is not None else 0
    single_phase = kind in ("textual", "overfit") or K == 0
    n_phases = 1 if single_phase else K + 2

    if train_cfg.total_steps is None:
        if n_samples is None:
            raise CurriculumError("total_steps unset and n_samples unknown")
        per_phase = max(1, math.ceil(n_samples / train_cfg.batch_size))
        total = per_phase * n_phases
    else:
        total = int(train_cfg.total_steps)
    if total < n_phases:
        raise CurriculumError(
            f"step budget {total} too small for {n_phases} phases")
    base, extra = divmod(total, n_phases)
    sizes = [base + (1 if i < extra else 0) for i in range(n_phases)]

    phases: list[Phase] = []
    if single_phase:
        s = K if kind == "overfit" else 0
        phases.append(Phase(f"s{s}", s, sizes[0], train_cfg.lr_encoding,
                            train_cfg.batch_size))
    elif kind == "progressive":
        for s in range(K + 1):
            phases.append(Phase(f"s{s}", s, sizes[s], train_cfg.lr_encoding,
                                train_cfg.batch_size))
        phases.append(Phase("recover", K, sizes[K + 1], train_cfg.lr_recover,
                            train_cfg.recover_batch_size))
    elif kind == "one-shot":
        encode_steps = sum(sizes[:-1])
        phases.append(Phase(f"s{K}", K, encode_steps, train_cfg.lr_encoding,
                            train_cfg.batch_size))
        phases.append(Phase("recover", K, sizes[-1], train_cfg.lr_recover,
                            train_cfg.recover_batch_size))
    else:
        raise CurriculumError(f"unknown plan kind {kind!r}")
    return StagePlan(phases=tuple(phases), spec=spec, seed=seed)
