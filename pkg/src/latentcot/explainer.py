"""Reconstruction decoders: explanatory prompts, per-stage record building,
embedding-substitution training data, and text reconstruction.

A decoder never sees visual tokens; whatever grid content shows up in a
correct reconstruction had to travel through the substituted hidden vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net, runtime, taskgen
from .net import ModelConfig
from .runtime import HiddenStateRecord
from .taskgen import Sample, stage_markers
from .vocab import ThinkingTokenSpec, Vocab

DECREC_FORMAT = "latentcot-decrecs"
DECREC_VERSION = 1

# The prompt template; {question} and {thinking} are slots. The thinking slot
# expands to m copies of the stage's token.
DEFAULT_TEMPLATE = (
    "according to the question : {question} , "
    "can you explain the thinking progress of {thinking} ?"
)


class ExplainerError(ValueError):
    pass


@dataclass
class ExplanatoryPrompt:
    template: str
    stage_index: int
    rendered_ids: tuple[int, ...]          # includes leading BOS
    placeholder_positions: tuple[int, ...]


@dataclass
class DecoderRecord:
    prompt: ExplanatoryPrompt
    hidden: np.ndarray                     # [m, d_model] float32
    target_ids: tuple[int, ...]            # stage text + close marker
    stage_index: int
    sample_id: int
    question_tokens: tuple[str, ...]
    gold_stage_text: tuple[str, ...]
    encoder_checkpoint_digest: str


def render_prompt(question_tokens, s: int, m: int, v: Vocab,
                  template: str = DEFAULT_TEMPLATE) -> ExplanatoryPrompt:
    """Tokenize the template with the question spliced in and m thinking-token
    placeholders at the {thinking} slot. Deterministic."""
    if not 1 <= s <= len(v.thinking_ids):
        raise ExplainerError(f"stage {s} has no registered thinking token")
    if m < 1:
        raise ExplainerError("placeholder count must be >= 1")
    tid = v.thinking_ids[s - 1]
    thinking_sym = v.symbol(tid)
    for tok in question_tokens:
        if tok in v and v.id(tok) in v.thinking_ids:
            raise ExplainerError(f"question contains thinking token {tok!r}")

    tokens: list[str] = [taskgen.BOS]
    placeholders: list[int] = []
    for word in template.split():
        if word == "{question}":
            tokens.extend(question_tokens)
        elif word == "{thinking}":
            placeholders = list(range(len(tokens), len(tokens) + m))
            tokens.extend([thinking_sym] * m)
        else:
            tokens.append(word)
    if not placeholders:
        raise ExplainerError("template has no {thinking} slot")
    return ExplanatoryPrompt(
        template=template,
        stage_index=s,
        rendered_ids=tuple(v.encode(tokens)),
        placeholder_positions=tuple(placeholders),
    )


def make_decoder_record(sample: Sample, stage_index: int,
                        hidden_records: list[HiddenStateRecord], v: Vocab,
                        spec: ThinkingTokenSpec, ckpt_digest: str,
                        template: str = DEFAULT_TEMPLATE) -> DecoderRecord:
    stage_hidden = sorted(
        (r for r in hidden_records
         if r.sample_id == sample.id and r.stage_index == stage_index),
        key=lambda r: r.slot_index,
    )
    if not stage_hidden:
        raise ExplainerError(
            f"sample {sample.id}: no stage-{stage_index} hidden vectors")
    if ckpt_digest and any(
            r.encoder_checkpoint_digest != ckpt_digest for r in stage_hidden):
        raise ExplainerError(
            f"sample {sample.id}: hidden vectors come from a different "
            f"encoder checkpoint than {ckpt_digest[:12]}")
    gold = sample.stages[stage_index - 1]
    if not gold:
        raise ExplainerError(f"sample {sample.id}: empty stage-{stage_index} text")
    prompt = render_prompt(sample.question_tokens, stage_index,
                           len(stage_hidden), v, template)
    _open_m, close_m = stage_markers(spec.stage_names[stage_index - 1])
    target = v.encode([*gold, close_m])
    return DecoderRecord(
        prompt=prompt,
        hidden=np.stack([r.vector for r in stage_hidden]).astype(np.float32),
        target_ids=tuple(target),
        stage_index=stage_index,
        sample_id=sample.id,
        question_tokens=sample.question_tokens,
        gold_stage_text=gold,
        encoder_checkpoint_digest=ckpt_digest,
    )


def build_decoder_dataset(encoder_params, enc_cfg: ModelConfig, samples,
                          stage_index: int, spec: ThinkingTokenSpec, v: Vocab,
                          ckpt_digest: str, template: str = DEFAULT_TEMPLATE
                          ) -> list[DecoderRecord]:
    """Teacher-forced hidden capture paired with the gold stage text, one
    record per sample."""
    records = []
    for sample in samples:
        hid = runtime.capture_hidden_teacher_forced(
            encoder_params, enc_cfg, sample, spec, v, ckpt_digest)
        records.append(make_decoder_record(
            sample, stage_index, hid, v, spec, ckpt_digest, template))
    return records


def explain(decoder_params, dec_cfg: ModelConfig, rec: DecoderRecord,
            v: Vocab, spec: ThinkingTokenSpec, *, max_new: int = 96,
            ablate_hidden: bool = False) -> list[str]:
    """Greedy reconstruction of the stage text from the hidden vectors.

    The decoder runs with the record's hidden vectors substituted for the
    placeholder embeddings (zeros under ``ablate_hidden``) and stops at the
    stage-close marker. Returns tokens without the close marker.
    """
    if rec.hidden.shape[-1] != dec_cfg.d_model:
        raise ExplainerError(
            f"hidden width {rec.hidden.shape[-1]} != decoder d_model {dec_cfg.d_model}")
    vectors = np.zeros_like(rec.hidden) if ablate_hidden else rec.hidden
    overrides = [(pos, vectors[i])
                 for i, pos in enumerate(rec.prompt.placeholder_positions)]
    _open_m, close_m = stage_markers(spec.stage_names[rec.stage_index - 1])
    close_id = v.id(close_m)

    ids = list(rec.prompt.rendered_ids)
    max_new = min(max_new, dec_cfg.max_len - len(ids))
    emitted: list[int] = []
    for _ in range(max_new):
        out = net.forward(decoder_params, dec_cfg, ids, overrides=overrides)
        nxt = int(np.argmax(out.logits[len(ids) - 1]))
        ids.append(nxt)
        emitted.append(nxt)
        if nxt == close_id:
            break
    if emitted and emitted[-1] == close_id:
        emitted = emitted[:-1]
    return v.decode(emitted)


# ---------------------------------------------------------------------------
# record file (hidden-export layout plus prompt/target fields)

def save_decoder_records(path, records: list[DecoderRecord], d_model: int,
                         header_meta: dict | None = None) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": DECREC_FORMAT,
        "version": DECREC_VERSION,
        "d_model": d_model,
        "count": len(records),
        **(header_meta or {}),
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for r in records:
            hid = np.ascontiguousarray(r.hidden, dtype="<f4")
            meta = {
                "sample_id": r.sample_id,
                "stage_index": r.stage_index,
                "template": r.prompt.template,
                "rendered_ids": list(r.prompt.rendered_ids),
                "placeholder_positions": list(r.prompt.placeholder_positions),
                "target_ids": list(r.target_ids),
                "question_tokens": list(r.question_tokens),
                "gold_stage_text": list(r.gold_stage_text),
                "encoder_checkpoint_digest": r.encoder_checkpoint_digest,
                "m": int(hid.shape[0]),
            }
            f.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
            f.write(hid.tobytes())
    return runtime.file_digest(path)


def load_decoder_records(path) -> tuple[list[DecoderRecord], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != DECREC_FORMAT or header.get("version") != DECREC_VERSION:
            raise ExplainerError(f"unsupported decoder-record file {path}")
        d = int(header["d_model"])
        records = []
        for _ in range(int(header["count"])):
            meta = json.loads(f.readline().decode("utf-8"))
            m = int(meta["m"])
            raw = f.read(4 * d * m)
            if len(raw) != 4 * d * m:
                raise ExplainerError(f"truncated decoder-record file {path}")
            if not meta["target_ids"]:
                raise ExplainerError(
                    f"record {meta['sample_id']}: empty target rejected at load")
            prompt = ExplanatoryPrompt(
                template=meta["template"],
                stage_index=int(meta["stage_index"]),
                rendered_ids=tuple(meta["rendered_ids"]),
                placeholder_positions=tuple(meta["placeholder_positions"]),
            )
            records.append(DecoderRecord(
                prompt=prompt,
                hidden=np.frombuffer(raw, dtype="<f4").reshape(m, d).astype(np.float32),
                target_ids=tuple(meta["target_ids"]),
                stage_index=int(meta["stage_index"]),
                sample_id=int(meta["sample_id"]),
                question_tokens=tuple(meta["question_tokens"]),
                gold_stage_text=tuple(meta["gold_stage_text"]),
                encoder_checkpoint_digest=meta["encoder_checkpoint_digest"],
            ))
    return records, header
