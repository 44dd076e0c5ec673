"""Optimization loop: AdamW with decoupled decay, cosine schedule with
warmup, global-norm clipping, per-phase execution of a StagePlan."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .curriculum import MaskedSequence, StagePlan, assemble_sequence
from .net import ModelConfig
from .vocab import Vocab


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimHyper:
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup: int = 100
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    hyper: OptimHyper

    @staticmethod
    def fresh(params: dict[str, np.ndarray], hyper: OptimHyper) -> "OptimState":
        return OptimState(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            step=0,
            hyper=hyper,
        )


def lr_at(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then cosine decay to 0."""
    if not 0 <= step <= total:
        raise TrainingError(f"step {step} outside [0, {total}]")
    if warmup >= total:
        raise TrainingError(f"warmup {warmup} must be < total {total}")
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float(np.dot(g.reshape(-1).astype(np.float64),
                              g.reshape(-1).astype(np.float64)))
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 1.0
                     ) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns (grads, pre-clip norm). Non-finite gradients abort with the
    offending parameter named.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient in {name}")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


def optim_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               st: OptimState, lr: float) -> tuple[dict[str, np.ndarray], OptimState]:
    """One AdamW update: multiplicative decoupled weight decay at the current
    lr, then bias-corrected moment update. Arrays are updated in place."""
    h = st.hyper
    st.step += 1
    t = st.step
    bc1 = 1.0 - h.beta1 ** t
    bc2 = 1.0 - h.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if h.weight_decay:
            p *= 1.0 - lr * h.weight_decay
        m = st.m[name]
        v = st.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + h.eps)
    return params, st


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    checkpoints: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    final_digest: str = ""


class MetricsLog:
    """Append-only JSONL of {step, phase, loss, lr, grad_norm} records."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _batches(n: int, batch_size: int, steps: int, seed_parts):
    """Yield ``steps`` index batches, reshuffling each epoch with a seed
    derived from (plan seed, phase, epoch)."""
    epoch = 0
    order = np.random.default_rng([*seed_parts, epoch]).permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            epoch += 1
            order = np.random.default_rng([*seed_parts, epoch]).permutation(n)
            pos = 0
        yield order[pos: pos + batch_size]
        pos += batch_size


def _phase_warmup(hyper: OptimHyper, steps: int) -> int:
    # Keep the configured warmup whenever it fits the phase; degrade to a
    # fifth of the phase for very short (test-scale) phases.
    return hyper.warmup if hyper.warmup < steps else max(1, steps // 5)


def train_encoder(plan: StagePlan, samples, params, cfg: ModelConfig, v: Vocab,
                  hyper: OptimHyper, *, out_dir=None, log: MetricsLog | None = None,
                  provenance: dict | None = None) -> TrainResult:
    """Run every phase of the plan; checkpoint at each phase boundary.

    A fresh optimizer state and schedule start each phase (phases mirror the
    sequential fine-tuning stages they model).
    """
    if not samples:
        raise TrainingError("no training samples")
    log = log or MetricsLog()
    result = TrainResult(params=params)
    out_dir = Path(out_dir) if out_dir else None
    global_step = 0

    for phase_idx, phase in enumerate(plan.phases):
        if phase.batch_size > len(samples):
            raise TrainingError(
                f"batch size {phase.batch_size} exceeds dataset size {len(samples)}")
        cache: dict[int, MaskedSequence] = {}

        def seq_for(idx: int) -> MaskedSequence:
            if idx not in cache:
                cache[idx] = assemble_sequence(
                    samples[idx], phase.s, plan.spec, v, max_len=cfg.max_len)
            return cache[idx]

        ph = OptimHyper(**{**hyper.__dict__, "peak_lr": phase.lr})
        st = OptimState.fresh(params, ph)
        warmup = _phase_warmup(hyper, phase.steps)
        for step, batch_idx in enumerate(
                _batches(len(samples), phase.batch_size, phase.steps,
                         [plan.seed, phase_idx])):
            seqs = [seq_for(int(i)) for i in batch_idx]
            try:
                loss, grads, _ = net.batch_nll_loss_and_grads(params, cfg, seqs)
            except net.NumericsError as e:
                raise TrainingError(
                    f"non-finite loss at phase {phase.label} step {step} "
                    f"(samples {[samples[int(i)].id for i in batch_idx]}): {e}"
                ) from e
            grads, gnorm = clip_global_norm(grads, hyper.clip_norm)
            lr = lr_at(step, phase.steps, phase.lr, warmup)
            params, st = optim_step(params, grads, st, lr)
            result.losses.append(loss)
            log.append({"step": global_step, "phase": phase.label,
                        "loss": loss, "lr": lr, "grad_norm": gnorm})
            global_step += 1

        if out_dir is not None:
            ckpt = out_dir / f"encoder_{phase.label}_step{global_step:06d}.ckpt"
            meta = {"phase": phase.label, "step": global_step,
                    "plan": plan.describe(), **(provenance or {})}
            net.save_checkpoint(ckpt, params, cfg, meta)
            result.checkpoints.append(str(ckpt))

    result.final_digest = net.params_digest(params)
    return result


def decoder_training_sequence(rec, v: Vocab) -> tuple[MaskedSequence, list]:
    """Masked sequence + input overrides for one reconstruction record.

    Layout: [prompt ids (incl. BOS and placeholders)][target ids]; the loss
    covers only the target span (stage text + close marker). Placeholder
    embeddings are overridden by the stored hidden vectors.
    """
    prompt = np.asarray(rec.prompt.rendered_ids, dtype=np.int64)
    target = np.asarray(rec.target_ids, dtype=np.int64)
    ids = np.concatenate([prompt, target])
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(prompt):] = True
    overrides = [
        (pos, rec.hidden[i]) for i, pos in enumerate(rec.prompt.placeholder_positions)
    ]
    return MaskedSequence(
        ids=ids, loss_mask=mask, thinking_positions=(),
        region_map={"prompt": (0, len(prompt)), "target": (len(prompt), len(ids))},
    ), overrides


def train_decoder(records, params, cfg: ModelConfig, v: Vocab,
                  hyper: OptimHyper, *, steps: int, batch_size: int = 8,
                  seed: int = 0, out_dir=None, log: MetricsLog | None = None,
                  provenance: dict | None = None, label: str = "decoder") -> TrainResult:
    """Single-phase decoder fine-tuning on reconstruction records."""
    if not records:
        raise TrainingError("no decoder records")
    for rec in records:
        if rec.hidden.shape[-1] != cfg.d_model:
            raise TrainingError(
                f"record {rec.sample_id}: hidden width {rec.hidden.shape[-1]} "
                f"!= decoder d_model {cfg.d_model}")
        if len(rec.target_ids) == 0:
            raise TrainingError(f"record {rec.sample_id}: empty target")
    if batch_size > len(records):
        raise TrainingError(
            f"batch size {batch_size} exceeds record count {len(records)}")

    log = log or MetricsLog()
    result = TrainResult(params=params)
    prepared = [decoder_training_sequence(rec, v) for rec in records]
    st = OptimState.fresh(params, hyper)
    warmup = _phase_warmup(hyper, steps)
    for step, batch_idx in enumerate(_batches(len(records), batch_size, steps, [seed])):
        seqs = [prepared[int(i)][0] for i in batch_idx]
        ovs = [prepared[int(i)][1] for i in batch_idx]
        try:
            loss, grads, _ = net.batch_nll_loss_and_grads(params, cfg, seqs, ovs)
        except net.NumericsError as e:
            raise TrainingError(
                f"non-finite loss at decoder step {step} "
                f"(records {[records[int(i)].sample_id for i in batch_idx]}): {e}"
            ) from e
        grads, gnorm = clip_global_norm(grads, hyper.clip_norm)
        lr = lr_at(step, steps, hyper.peak_lr, warmup)
        params, st = optim_step(params, grads, st, lr)
        result.losses.append(loss)
        log.append({"step": step, "phase": label, "loss": loss,
                    "lr": lr, "grad_norm": gnorm})

    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = out_dir / f"{label}_step{steps:06d}.ckpt"
        meta = {"phase": label, "step": steps, **(provenance or {})}
        net.save_checkpoint(ckpt, params, cfg, meta)
        result.checkpoints.append(str(ckpt))
    result.final_digest = net.params_digest(params)
    return result
