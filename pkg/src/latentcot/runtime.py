"""Encoder inference: greedy generation, token accounting, hidden-state
capture and the offline export format for reconstruction decoders."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net, taskgen
from .curriculum import assemble_sequence, prompt_ids, stage_token_counts
from .net import ModelConfig
from .taskgen import Sample
from .vocab import ThinkingTokenSpec, Vocab

HIDDEN_FORMAT = "latentcot-hidden"
HIDDEN_VERSION = 1


class InferenceError(RuntimeError):
    pass


@dataclass
class HiddenStateRecord:
    sample_id: int
    stage_index: int        # 1-based stage k
    slot_index: int         # 0..m_k-1
    vector: np.ndarray      # [d_model] float32
    question_tokens: tuple[str, ...]
    gold_stage_text: tuple[str, ...]
    encoder_checkpoint_digest: str
    capture_mode: str       # "teacher-forced" | "generated"


@dataclass
class WellFormed:
    thinking_in_order: bool
    answer_delimited: bool


@dataclass
class InferenceResult:
    sample_id: int
    emitted_ids: tuple[int, ...]
    answer_tokens: tuple[str, ...]
    generated_token_count: int
    hidden: tuple[HiddenStateRecord, ...]
    wellformed: WellFormed


def generate(params, cfg: ModelConfig, prompt: list[int], max_new: int,
             stop_id: int) -> list[int]:
    """Greedy decode on the fixed-shape path; ties break to the lowest id.

    Stops after emitting ``stop_id`` or ``max_new`` tokens; the stop token is
    included in the returned emission.
    """
    if len(prompt) + max_new > cfg.max_len:
        raise InferenceError(
            f"prompt length {len(prompt)} + max_new {max_new} exceeds "
            f"max_len {cfg.max_len}")
    if not prompt:
        raise InferenceError("empty prompt")
    ids = list(prompt)
    emitted: list[int] = []
    for _ in range(max_new):
        out = net.forward(params, cfg, ids)
        nxt = int(np.argmax(out.logits[len(ids) - 1]))
        ids.append(nxt)
        emitted.append(nxt)
        if nxt == stop_id:
            break
    return emitted


def capture_hidden_teacher_forced(params, cfg: ModelConfig, sample: Sample,
                                  spec: ThinkingTokenSpec, v: Vocab,
                                  ckpt_digest: str = "") -> list[HiddenStateRecord]:
    """One forward pass over the full gold s=K assembly; records the final
    hidden vector at every thinking position."""
    seq = assemble_sequence(sample, spec.num_stages, spec, v, max_len=cfg.max_len)
    if not seq.thinking_positions:
        raise InferenceError(
            f"sample {sample.id}: no thinking positions in assembly")
    out = net.forward(params, cfg, seq.ids)
    records = []
    slot_counter: dict[int, int] = {}
    for k, pos in seq.thinking_positions:
        slot = slot_counter.get(k, 0)
        slot_counter[k] = slot + 1
        records.append(HiddenStateRecord(
            sample_id=sample.id,
            stage_index=k,
            slot_index=slot,
            vector=np.asarray(net.hidden_export_point(out, pos), dtype=np.float32).copy(),
            question_tokens=sample.question_tokens,
            gold_stage_text=sample.stages[k - 1],
            encoder_checkpoint_digest=ckpt_digest,
            capture_mode="teacher-forced",
        ))
    return records


def _parse_emission(emitted: list[int], spec: ThinkingTokenSpec, v: Vocab,
                    expected_counts: tuple[int, ...]):
    """Split an emission into thinking prefix and delimited answer.

    Malformed emissions are data, not errors: flags record what went wrong
    and the answer is still extracted when it is delimited.
    """
    thinking_set = set(v.thinking_ids)
    expected = []
    for k, m in enumerate(expected_counts, start=1):
        expected += [v.thinking_ids[k - 1]] * m
    ans_open, ans_close = v.id(taskgen.ANS_OPEN), v.id(taskgen.ANS_CLOSE)

    actual_thinking = [(i, t) for i, t in enumerate(emitted) if t in thinking_set]
    try:
        open_pos = emitted.index(ans_open)
        close_pos = emitted.index(ans_close, open_pos + 1)
        answer_ids = emitted[open_pos + 1: close_pos]
        answer_delimited = True
    except ValueError:
        answer_ids = []
        answer_delimited = False
        open_pos = len(emitted)

    thinking_in_order = (
        [t for _, t in actual_thinking] == expected
        and all(i < open_pos for i, _ in actual_thinking)
    )
    return actual_thinking, answer_ids, WellFormed(thinking_in_order, answer_delimited)


def infer_sample(params, cfg: ModelConfig, sample: Sample,
                 spec: ThinkingTokenSpec, v: Vocab, *, ckpt_digest: str = "",
                 max_new: int | None = None,
                 capture_hidden: bool = True) -> InferenceResult:
    """Prompt with [BOS][visual][question], decode greedily, parse the
    emission, and capture hidden vectors at generated thinking positions.

    Capture uses one full pass over prompt+emission; on the fixed-shape path
    this is bit-identical to the pass that consumed each thinking token.
    """
    prompt = prompt_ids(sample, v)
    if max_new is None:
        max_new = cfg.max_len - len(prompt)
    emitted = generate(params, cfg, prompt, max_new, v.id(taskgen.EOS))
    expected_counts = stage_token_counts(sample, spec)
    actual_thinking, answer_ids, flags = _parse_emission(
        emitted, spec, v, expected_counts)

    records: list[HiddenStateRecord] = []
    if capture_hidden and actual_thinking:
        full = prompt + emitted
        out = net.forward(params, cfg, full)
        slot_counter: dict[int, int] = {}
        stage_of = {tid: k for k, tid in enumerate(v.thinking_ids, start=1)}
        for i, tid in actual_thinking:
            k = stage_of[tid]
            slot = slot_counter.get(k, 0)
            slot_counter[k] = slot + 1
            pos = len(prompt) + i
            records.append(HiddenStateRecord(
                sample_id=sample.id,
                stage_index=k,
                slot_index=slot,
                vector=np.asarray(net.hidden_export_point(out, pos),
                                  dtype=np.float32).copy(),
                question_tokens=sample.question_tokens,
                gold_stage_text=sample.stages[k - 1],
                encoder_checkpoint_digest=ckpt_digest,
                capture_mode="generated",
            ))

    return InferenceResult(
        sample_id=sample.id,
        emitted_ids=tuple(emitted),
        answer_tokens=tuple(v.decode(answer_ids)),
        generated_token_count=len(emitted),
        hidden=tuple(records),
        wellformed=flags,
    )


# ---------------------------------------------------------------------------
# hidden-state export file

def save_hidden_records(path, records: list[HiddenStateRecord], d_model: int,
                        header_meta: dict | None = None) -> str:
    """Versioned header line, then per record one JSON metadata line followed
    by d_model little-endian float32 bytes. Returns the file digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": HIDDEN_FORMAT,
        "version": HIDDEN_VERSION,
        "d_model": d_model,
        "count": len(records),
        **(header_meta or {}),
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for r in records:
            vec = np.ascontiguousarray(r.vector, dtype="<f4")
            if vec.shape != (d_model,):
                raise InferenceError(
                    f"record {r.sample_id}: vector shape {vec.shape} != ({d_model},)")
            meta = {
                "sample_id": r.sample_id,
                "stage_index": r.stage_index,
                "slot_index": r.slot_index,
                "question_tokens": list(r.question_tokens),
                "gold_stage_text": list(r.gold_stage_text),
                "encoder_checkpoint_digest": r.encoder_checkpoint_digest,
                "capture_mode": r.capture_mode,
            }
            f.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
            f.write(vec.tobytes())
    return file_digest(path)


def load_hidden_records(path) -> tuple[list[HiddenStateRecord], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != HIDDEN_FORMAT or header.get("version") != HIDDEN_VERSION:
            raise InferenceError(f"unsupported hidden-state file {path}")
        d = int(header["d_model"])
        records = []
        for _ in range(int(header["count"])):
            meta = json.loads(f.readline().decode("utf-8"))
            raw = f.read(4 * d)
            if len(raw) != 4 * d:
                raise InferenceError(f"truncated hidden-state file {path}")
            records.append(HiddenStateRecord(
                sample_id=int(meta["sample_id"]),
                stage_index=int(meta["stage_index"]),
                slot_index=int(meta["slot_index"]),
                vector=np.frombuffer(raw, dtype="<f4").astype(np.float32),
                question_tokens=tuple(meta["question_tokens"]),
                gold_stage_text=tuple(meta["gold_stage_text"]),
                encoder_checkpoint_digest=meta["encoder_checkpoint_digest"],
                capture_mode=meta["capture_mode"],
            ))
    return records, header


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
