"""Decoder-only transformer with handwritten forward and backward passes.

Pre-norm blocks, learned absolute positions, tanh-GELU feed-forward, causal
attention. Two execution paths share the same parameters:

* a batched path used by training (padded to the longest sequence in the
  batch), deterministic run-to-run at equal thread counts;
* a fixed-shape path used by generation and hidden-state capture, always
  padded to ``max_len`` so the value computed at a position is bit-identical
  no matter how many tokens follow it (BLAS kernels pick different summation
  orders for different shapes, so shape must be pinned to get this).

``final_hidden`` is the final-layer output after the last normalization and
before the output projection; ``hidden_export_point`` isolates that choice.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

CKPT_FORMAT = "latentcot-ckpt"
CKPT_VERSION = 1


class NetError(ValueError):
    pass


class NumericsError(RuntimeError):
    """Raised when a non-finite value shows up mid-computation."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_len: int

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise NetError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise NetError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ForwardOutput:
    logits: np.ndarray        # [T, vocab_size]
    final_hidden: np.ndarray  # [T, d_model]


def param_names(cfg: ModelConfig) -> list[str]:
    """Canonical parameter order; checkpoints store arrays in this order."""
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layers):
        p = f"L{i}."
        names += [p + "ln1.g", p + "ln1.b"]
        names += [p + "attn.wq", p + "attn.bq", p + "attn.wk", p + "attn.bk",
                  p + "attn.wv", p + "attn.bv", p + "attn.wo", p + "attn.bo"]
        names += [p + "ln2.g", p + "ln2.b"]
        names += [p + "ff.w1", p + "ff.b1", p + "ff.w2", p + "ff.b2"]
    names += ["lnf.g", "lnf.b", "out.w", "out.b"]
    return names


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, D),
        "pos_emb": (cfg.max_len, D),
        "lnf.g": (D,),
        "lnf.b": (D,),
        "out.w": (D, V),
        "out.b": (V,),
    }
    for i in range(cfg.n_layers):
        p = f"L{i}."
        shapes[p + "ln1.g"] = (D,)
        shapes[p + "ln1.b"] = (D,)
        shapes[p + "attn.wq"] = (D, D)
        shapes[p + "attn.bq"] = (D,)
        shapes[p + "attn.wk"] = (D, D)
        shapes[p + "attn.bk"] = (D,)
        shapes[p + "attn.wv"] = (D, D)
        shapes[p + "attn.bv"] = (D,)
        shapes[p + "attn.wo"] = (D, D)
        shapes[p + "attn.bo"] = (D,)
        shapes[p + "ln2.g"] = (D,)
        shapes[p + "ln2.b"] = (D,)
        shapes[p + "ff.w1"] = (D, F)
        shapes[p + "ff.b1"] = (F,)
        shapes[p + "ff.w2"] = (F, D)
        shapes[p + "ff.b2"] = (D,)
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Deterministic init: N(0, 0.02) for embeddings and projections, with
    residual-output projections (attn.wo, ff.w2) scaled by 1/sqrt(2*n_layers);
    zero biases and norm offsets, unit norm gains."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    resid_scale = 1.0 / math.sqrt(2.0 * cfg.n_layers)
    params: dict[str, np.ndarray] = {}
    for name in param_names(cfg):
        shape = shapes[name]
        kind = name.rsplit(".", 1)[-1]
        if kind in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            arr = np.zeros(shape, dtype=dtype)
        elif kind == "g":
            arr = np.ones(shape, dtype=dtype)
        else:
            std = 0.02
            if name.endswith("attn.wo") or name.endswith("ff.w2"):
                std *= resid_scale
            arr = (rng.standard_normal(shape) * std).astype(dtype)
        params[name] = arr
    return params


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(str(params[name].shape).encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# primitives

def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    D = xhat.shape[-1]
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _check_finite(arr, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {where}")


# ---------------------------------------------------------------------------
# forward

def _embed(params, cfg, ids, overrides):
    """Token+positional embedding with per-position input overrides.

    ``overrides`` is a list of (batch, position, vector); the vector replaces
    the token embedding only, the positional embedding is still added.
    """
    B, T = ids.shape
    x = params["tok_emb"][ids].copy()
    override_mask = np.zeros((B, T), dtype=bool)
    if overrides:
        dtype = params["tok_emb"].dtype
        for b, pos, vec in overrides:
            if not 0 <= pos < T:
                raise NetError(f"override position {pos} out of range for length {T}")
            v = np.asarray(vec, dtype=dtype)
            if v.shape != (cfg.d_model,):
                raise NetError(
                    f"override vector shape {v.shape} != ({cfg.d_model},)")
            x[b, pos] = v
            override_mask[b, pos] = True
    x = x + params["pos_emb"][:T]
    return x, override_mask


def _forward_core(params, cfg: ModelConfig, ids, overrides=None, *,
                  want_cache: bool, check_finite: bool = False):
    """Shared forward over a [B, T] id batch. Returns (logits, final_hidden,
    cache). Padding positions (if any) are handled by the caller's loss mask;
    causal attention keeps them from influencing earlier positions."""
    B, T = ids.shape
    if T > cfg.max_len:
        raise NetError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))

    x, override_mask = _embed(params, cfg, ids, overrides)
    cache = {"ids": ids, "override_mask": override_mask, "layers": []} if want_cache else None

    for i in range(cfg.n_layers):
        p = f"L{i}."
        h1, ln1_cache = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = h1 @ params[p + "attn.wq"] + params[p + "attn.bq"]
        k = h1 @ params[p + "attn.wk"] + params[p + "attn.bk"]
        v = h1 @ params[p + "attn.wv"] + params[p + "attn.bv"]
        # [B, T, D] -> [B, H, T, dh]
        q = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(causal, scores, -np.inf)
        m = np.max(scores, axis=-1, keepdims=True)
        e = np.where(causal, np.exp(scores - m), 0.0)
        denom = np.sum(e, axis=-1, keepdims=True)
        attn = e / denom
        ctx = np.matmul(attn, v)                       # [B, H, T, dh]
        ctx_m = ctx.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        attn_out = ctx_m @ params[p + "attn.wo"] + params[p + "attn.bo"]
        x = x + attn_out

        h2, ln2_cache = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        a1 = h2 @ params[p + "ff.w1"] + params[p + "ff.b1"]
        g1, tanh_c = _gelu(a1)
        ff_out = g1 @ params[p + "ff.w2"] + params[p + "ff.b2"]
        x = x + ff_out

        if check_finite:
            _check_finite(x, f"layer {i} output")
        if want_cache:
            cache["layers"].append({
                "ln1": ln1_cache, "h1": h1, "q": q, "k": k, "v": v,
                "attn": attn, "ctx_m": ctx_m,
                "ln2": ln2_cache, "h2": h2, "a1": a1, "g1": g1, "tanh": tanh_c,
            })

    hidden, lnf_cache = _layer_norm(x, params["lnf.g"], params["lnf.b"])
    logits = hidden @ params["out.w"] + params["out.b"]
    if check_finite:
        _check_finite(logits, "logits")
    if want_cache:
        cache["lnf"] = lnf_cache
        cache["hidden"] = hidden
    return logits, hidden, cache


def forward(params, cfg: ModelConfig, ids: Sequence[int],
            overrides: Sequence[tuple[int, np.ndarray]] | None = None) -> ForwardOutput:
    """Single-sequence forward on the fixed-shape path.

    The input is padded to ``max_len`` before the pass, which pins every BLAS
    kernel shape; as a result logits and hidden states at position t are
    bit-identical whichever longer sequence they are later embedded in.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise NetError("forward expects a 1-D id sequence")
    T = ids.shape[0]
    if T == 0:
        raise NetError("empty sequence")
    if T > cfg.max_len:
        raise NetError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    padded = np.zeros(cfg.max_len, dtype=np.int64)
    padded[:T] = ids
    ov = None
    if overrides:
        ov = []
        for pos, vec in overrides:
            if not 0 <= pos < T:
                raise NetError(f"override position {pos} out of range for length {T}")
            ov.append((0, pos, vec))
    logits, hidden, _ = _forward_core(params, cfg, padded[None, :], ov, want_cache=False)
    return ForwardOutput(logits=logits[0, :T], final_hidden=hidden[0, :T])


def hidden_export_point(fwd: ForwardOutput, position: int) -> np.ndarray:
    """The vector handed to reconstruction decoders for a given position.

    Isolated here so the post-final-norm choice can be flipped in one place.
    """
    return fwd.final_hidden[position]


# ---------------------------------------------------------------------------
# loss and gradients

def _gather_targets(seqs):
    """Per-sequence target positions (mask True) and their counts."""
    out = []
    for s in seqs:
        tpos = np.flatnonzero(s.loss_mask)
        if tpos.size == 0:
            raise NetError("sequence has an empty loss mask")
        if tpos[0] == 0:
            raise NetError("loss mask may not include position 0 (no left context)")
        out.append(tpos)
    return out


def batch_nll_loss_and_grads(params, cfg: ModelConfig, seqs,
                             overrides_per_seq=None, *, want_grads: bool = True):
    """Mean-over-sequences of the per-sequence mean masked next-token NLL.

    Returns (loss, grads, aux). ``aux`` carries per-sequence losses. Override
    vectors are inputs, not parameters: they receive no gradient, and neither
    does the token embedding row they shadow.
    """
    B = len(seqs)
    if B == 0:
        raise NetError("empty batch")
    T = max(len(s.ids) for s in seqs)
    ids = np.zeros((B, T), dtype=np.int64)
    for b, s in enumerate(seqs):
        ids[b, : len(s.ids)] = s.ids
    ov = []
    if overrides_per_seq:
        for b, seq_ov in enumerate(overrides_per_seq):
            for pos, vec in seq_ov or ():
                ov.append((b, pos, vec))
    targets = _gather_targets(seqs)

    logits, _hidden, cache = _forward_core(
        params, cfg, ids, ov, want_cache=want_grads, check_finite=True)

    # Log-softmax per needed row, accumulated in double precision.
    dlogits = np.zeros_like(logits) if want_grads else None
    per_seq_loss = np.zeros(B, dtype=np.float64)
    for b, tpos in enumerate(targets):
        rows = logits[b, tpos - 1].astype(np.float64)
        rows -= rows.max(axis=-1, keepdims=True)
        lse = np.log(np.sum(np.exp(rows), axis=-1))
        tgt = ids[b, tpos]
        nll = lse - rows[np.arange(len(tpos)), tgt]
        per_seq_loss[b] = float(np.mean(nll))
        if want_grads:
            p = np.exp(rows - lse[:, None])
            p[np.arange(len(tpos)), tgt] -= 1.0
            dlogits[b, tpos - 1] += (p / (B * len(tpos))).astype(logits.dtype)
    loss = float(np.mean(per_seq_loss))
    if not math.isfinite(loss):
        raise NumericsError("non-finite loss")
    aux = {"per_seq_loss": per_seq_loss}
    if not want_grads:
        return loss, None, aux
    grads = _backward_core(params, cfg, cache, dlogits)
    return loss, grads, aux


def _backward_core(params, cfg: ModelConfig, cache, dlogits):
    B, T = cache["ids"].shape
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}

    hidden = cache["hidden"]
    grads["out.w"] += np.tensordot(hidden, dlogits, axes=([0, 1], [0, 1]))
    grads["out.b"] += dlogits.sum(axis=(0, 1))
    dhidden = dlogits @ params["out.w"].T
    dx, dg, db = _layer_norm_backward(dhidden, params["lnf.g"], cache["lnf"])
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    for i in reversed(range(cfg.n_layers)):
        p = f"L{i}."
        lc = cache["layers"][i]

        # feed-forward branch
        dff_out = dx
        grads[p + "ff.w2"] += np.tensordot(lc["g1"], dff_out, axes=([0, 1], [0, 1]))
        grads[p + "ff.b2"] += dff_out.sum(axis=(0, 1))
        dg1 = dff_out @ params[p + "ff.w2"].T
        da1 = _gelu_backward(dg1, lc["a1"], lc["tanh"])
        grads[p + "ff.w1"] += np.tensordot(lc["h2"], da1, axes=([0, 1], [0, 1]))
        grads[p + "ff.b1"] += da1.sum(axis=(0, 1))
        dh2 = da1 @ params[p + "ff.w1"].T
        dx2, dg, db = _layer_norm_backward(dh2, params[p + "ln2.g"], lc["ln2"])
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dx = dx + dx2

        # attention branch
        dattn_out = dx
        grads[p + "attn.wo"] += np.tensordot(lc["ctx_m"], dattn_out, axes=([0, 1], [0, 1]))
        grads[p + "attn.bo"] += dattn_out.sum(axis=(0, 1))
        dctx_m = dattn_out @ params[p + "attn.wo"].T
        dctx = dctx_m.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        attn, v = lc["attn"], lc["v"]
        dattn = np.matmul(dctx, v.transpose(0, 1, 3, 2))
        dv = np.matmul(attn.transpose(0, 1, 3, 2), dctx)
        dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
        dq = np.matmul(dscores, lc["k"]) * scale
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), lc["q"]) * scale
        dq = dq.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        dk = dk.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        dv = dv.transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        h1 = lc["h1"]
        grads[p + "attn.wq"] += np.tensordot(h1, dq, axes=([0, 1], [0, 1]))
        grads[p + "attn.bq"] += dq.sum(axis=(0, 1))
        grads[p + "attn.wk"] += np.tensordot(h1, dk, axes=([0, 1], [0, 1]))
        grads[p + "attn.bk"] += dk.sum(axis=(0, 1))
        grads[p + "attn.wv"] += np.tensordot(h1, dv, axes=([0, 1], [0, 1]))
        grads[p + "attn.bv"] += dv.sum(axis=(0, 1))
        dh1 = dq @ params[p + "attn.wq"].T + dk @ params[p + "attn.wk"].T \
            + dv @ params[p + "attn.wv"].T
        dx1, dg, db = _layer_norm_backward(dh1, params[p + "ln1.g"], lc["ln1"])
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dx = dx + dx1

    # embeddings; overridden positions pass their gradient to nobody
    dx_tok = np.where(cache["override_mask"][:, :, None], 0.0, dx).astype(dx.dtype)
    np.add.at(grads["tok_emb"], cache["ids"], dx_tok)
    grads["pos_emb"][:T] += dx.sum(axis=0)
    return grads


def nll_loss_and_grads(params, cfg: ModelConfig, seq, overrides=None):
    """Masked next-token NLL and exact parameter gradients for one sequence."""
    ov = [list(overrides)] if overrides else None
    loss, grads, _ = batch_nll_loss_and_grads(params, cfg, [seq], ov)
    return loss, grads


def nll_loss(params, cfg: ModelConfig, seqs, overrides_per_seq=None) -> float:
    loss, _, _ = batch_nll_loss_and_grads(
        params, cfg, seqs, overrides_per_seq, want_grads=False)
    return loss


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(params, cfg: ModelConfig, seq, eps: float = 1e-4, *,
               coords_per_group: int = 200, seed: int = 0,
               overrides=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs fully in double precision over a random subsample of coordinates per
    parameter group (all coordinates for small groups).
    """
    _gather_targets([seq])  # rejects empty masks up front
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    ov = [list(overrides)] if overrides else None
    _, grads, _ = batch_nll_loss_and_grads(p64, cfg, [seq], ov)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in param_names(cfg):
        arr = p64[name]
        n = arr.size
        idx = np.arange(n) if n <= coords_per_group else rng.choice(
            n, size=coords_per_group, replace=False)
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = nll_loss(p64, cfg, [seq], ov)
            flat[i] = orig - eps
            lm = nll_loss(p64, cfg, [seq], ov)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            an = gflat[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
            if rel > worst:
                worst = rel
    return worst


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params, cfg: ModelConfig, meta: dict | None = None) -> str:
    """Versioned header line (JSON) + named little-endian float32 arrays in
    canonical declaration order. Returns the parameter digest recorded in the
    header. ``meta["adapter"]`` is reserved for low-rank adapter variants."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = param_names(cfg)
    payloads = [np.ascontiguousarray(params[n], dtype="<f4").tobytes() for n in names]
    h = hashlib.sha256()
    for b in payloads:
        h.update(b)
    digest = h.hexdigest()
    header = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": asdict(cfg),
        "dtype": "<f4",
        "names": names,
        "shapes": {n: list(params[n].shape) for n in names},
        "param_digest": digest,
        "meta": {"adapter": None, **(meta or {})},
    }
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for b in payloads:
            f.write(b)
    return digest


def load_checkpoint(path):
    """Returns (params, cfg, header). Verifies the stored digest."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != CKPT_FORMAT or header.get("version") != CKPT_VERSION:
            raise NetError(f"unsupported checkpoint format in {path}")
        cfg = ModelConfig(**header["config"])
        params = {}
        h = hashlib.sha256()
        for name in header["names"]:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise NetError(f"truncated checkpoint {path} at {name}")
            h.update(raw)
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if h.hexdigest() != header["param_digest"]:
        raise NetError(f"checkpoint digest mismatch in {path}")
    return params, cfg, header


def checkpoint_digest(path) -> str:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
    return header["param_digest"]
