"""Command-line surface: data generation, training, inference, explanation,
evaluation, gradient checking, and ablations.

Every command is deterministic given the config and seed; artifacts carry the
config digest and the digests of whatever they were derived from, so a report
can be traced back to the run that produced it.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import curriculum, explainer, metrics, net, runtime, taskgen, trainer
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .curriculum import build_stage_plan
from .taskgen import load_dataset
from .trainer import OptimHyper
from .vocab import Vocab, register_thinking_tokens

RESULTS_FORMAT = "latentcot-infer"
RECON_FORMAT = "latentcot-recon"


class CommandError(RuntimeError):
    """User-facing failure; exits with status 2."""


# ---------------------------------------------------------------------------
# small helpers

def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=n)
    except ImportError:
        return contextlib.nullcontext()


def _load_cfg(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    overrides = list(args.set or [])
    if args.workdir:
        overrides.append(f"workdir={json.dumps(args.workdir)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _load_vocab(cfg: RunConfig) -> Vocab:
    path = cfg.vocab_path
    if not path.exists():
        raise CommandError(f"no vocab at {path}; run gen-data first")
    return Vocab.load(path)


def _load_split(cfg: RunConfig, split: str):
    path = cfg.dataset_path(split)
    if not path.exists():
        raise CommandError(f"no {split} dataset at {path}; run gen-data first")
    return load_dataset(path)


def _plan_dir(cfg: RunConfig, plan_kind: str) -> Path:
    return cfg.checkpoint_dir / plan_kind


def _encoder_manifest(cfg: RunConfig, plan_kind: str) -> dict:
    manifest = _plan_dir(cfg, plan_kind) / "manifest.json"
    if not manifest.exists():
        raise CommandError(
            f"no checkpoint manifest at {manifest}; run train-encoder first")
    return json.loads(manifest.read_text())


def _decoder_manifest(cfg: RunConfig, stage: int) -> dict:
    manifest = cfg.checkpoint_dir / f"decoder_s{stage}" / "manifest.json"
    if not manifest.exists():
        raise CommandError(
            f"no decoder manifest at {manifest}; run train-decoder first")
    return json.loads(manifest.read_text())


def _hyper(cfg: RunConfig, peak_lr: float) -> OptimHyper:
    t = cfg.train
    return OptimHyper(peak_lr=peak_lr, weight_decay=t.weight_decay,
                      warmup=t.warmup, clip_norm=t.clip_norm,
                      beta1=t.beta1, beta2=t.beta2, eps=t.eps)


def _write_jsonl(path: Path, header: dict, rows: list[dict]) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return runtime.file_digest(path)


def _read_jsonl(path: Path) -> tuple[dict, list[dict]]:
    if not path.exists():
        raise CommandError(f"missing artifact {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        rows = [json.loads(line) for line in f if line.strip()]
    return header, rows


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    v = register_thinking_tokens(taskgen.build_task_vocab(cfg.gen), cfg.thinking)
    cfg.dataset_dir.mkdir(parents=True, exist_ok=True)
    vocab_digest = v.save(cfg.vocab_path)
    train_digest = taskgen.gen_dataset(cfg.gen, cfg.n_train, "train",
                                       cfg.dataset_path("train"))
    test_digest = taskgen.gen_dataset(cfg.gen, cfg.n_test, "test",
                                      cfg.dataset_path("test"))
    cfg.save(Path(cfg.workdir) / "config.json")
    manifest = {
        "config_digest": cfg.digest(),
        "vocab_digest": vocab_digest,
        "train_digest": train_digest,
        "test_digest": test_digest,
        "n_train": cfg.n_train,
        "n_test": cfg.n_test,
    }
    (cfg.dataset_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2))
    print(f"gen-data: train={train_digest[:12]} test={test_digest[:12]} "
          f"vocab={vocab_digest[:12]}")
    return 0


def cmd_train_encoder(cfg: RunConfig, args) -> int:
    v = _load_vocab(cfg)
    samples = _load_split(cfg, "train")
    spec = cfg.thinking
    plan = build_stage_plan(cfg.train, spec, seed=cfg.seed, kind=args.plan,
                            n_samples=len(samples))
    model_cfg = cfg.encoder.to_model_config(v.size)
    params = net.init_params(model_cfg, cfg.seed)
    out_dir = _plan_dir(cfg, args.plan)
    log = trainer.MetricsLog(out_dir / "metrics.jsonl")
    provenance = {
        "config_digest": cfg.digest(),
        "dataset_digest": taskgen.dataset_digest(cfg.dataset_path("train")),
        "plan_kind": args.plan,
    }
    result = trainer.train_encoder(
        plan, samples, params, model_cfg, v, _hyper(cfg, cfg.train.lr_encoding),
        out_dir=out_dir, log=log, provenance=provenance)
    final = result.checkpoints[-1]
    manifest = {
        "final_checkpoint": final,
        "checkpoint_digest": net.checkpoint_digest(final),
        "plan": plan.describe(),
        **provenance,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2))
    print(f"train-encoder[{args.plan}]: final={Path(final).name} "
          f"digest={manifest['checkpoint_digest'][:12]} "
          f"last_loss={result.losses[-1]:.4f}")
    return 0


def cmd_train_decoder(cfg: RunConfig, args) -> int:
    v = _load_vocab(cfg)
    samples = _load_split(cfg, "train")
    stage = args.stage
    spec = cfg.thinking
    if not 1 <= stage <= spec.num_stages:
        raise CommandError(f"stage {stage} outside 1..{spec.num_stages}")
    enc_manifest = _encoder_manifest(cfg, args.encoder)
    enc_params, enc_cfg, _ = net.load_checkpoint(enc_manifest["final_checkpoint"])
    ckpt_digest = enc_manifest["checkpoint_digest"]

    records = explainer.build_decoder_dataset(
        enc_params, enc_cfg, samples, stage, spec, v, ckpt_digest)
    rec_path = cfg.hidden_dir / f"decrecs_train_s{stage}.bin"
    rec_digest = explainer.save_decoder_records(
        rec_path, records, enc_cfg.d_model,
        {"encoder_checkpoint_digest": ckpt_digest, "config_digest": cfg.digest(),
         "stage_index": stage, "split": "train"})

    dec_cfg = cfg.decoder.to_model_config(v.size)
    if dec_cfg.d_model != enc_cfg.d_model:
        raise CommandError(
            f"decoder d_model {dec_cfg.d_model} != encoder d_model {enc_cfg.d_model}")
    dec_params = net.init_params(dec_cfg, cfg.seed + 1000 + stage)
    steps = cfg.train.decoder_steps or max(1, -(-len(records) // cfg.train.decoder_batch_size))
    out_dir = cfg.checkpoint_dir / f"decoder_s{stage}"
    log = trainer.MetricsLog(out_dir / "metrics.jsonl")
    provenance = {"config_digest": cfg.digest(),
                  "encoder_checkpoint_digest": ckpt_digest,
                  "records_digest": rec_digest, "stage_index": stage}
    result = trainer.train_decoder(
        records, dec_params, dec_cfg, v, _hyper(cfg, cfg.train.lr_decoder),
        steps=steps, batch_size=cfg.train.decoder_batch_size, seed=cfg.seed,
        out_dir=out_dir, log=log, provenance=provenance,
        label=f"decoder_s{stage}")
    manifest = {
        "final_checkpoint": result.checkpoints[-1],
        "checkpoint_digest": net.checkpoint_digest(result.checkpoints[-1]),
        "records_path": str(rec_path),
        **provenance,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2))
    print(f"train-decoder[s{stage}]: digest={manifest['checkpoint_digest'][:12]} "
          f"last_loss={result.losses[-1]:.4f}")
    return 0


def cmd_infer(cfg: RunConfig, args) -> int:
    v = _load_vocab(cfg)
    samples = _load_split(cfg, args.split)
    if args.limit:
        samples = samples[: args.limit]
    enc_manifest = _encoder_manifest(cfg, args.encoder)
    params, model_cfg, _ = net.load_checkpoint(enc_manifest["final_checkpoint"])
    ckpt_digest = enc_manifest["checkpoint_digest"]
    spec = cfg.thinking

    rows = []
    hidden_records = []
    for sample in samples:
        res = runtime.infer_sample(
            params, model_cfg, sample, spec, v, ckpt_digest=ckpt_digest,
            max_new=cfg.max_new, capture_hidden=args.export_hidden)
        rows.append({
            "sample_id": res.sample_id,
            "generated_token_count": res.generated_token_count,
            "answer_tokens": list(res.answer_tokens),
            "thinking_in_order": res.wellformed.thinking_in_order,
            "answer_delimited": res.wellformed.answer_delimited,
        })
        hidden_records.extend(res.hidden)

    out = cfg.report_dir / f"infer_{args.encoder}_{args.split}.jsonl"
    header = {
        "format": RESULTS_FORMAT, "version": 1,
        "encoder": args.encoder, "split": args.split,
        "checkpoint_digest": ckpt_digest, "config_digest": cfg.digest(),
        "dataset_digest": taskgen.dataset_digest(cfg.dataset_path(args.split)),
        "count": len(rows),
    }
    digest = _write_jsonl(out, header, rows)
    msg = f"infer[{args.encoder}/{args.split}]: n={len(rows)} digest={digest[:12]}"
    if args.export_hidden:
        hpath = cfg.hidden_dir / f"hidden_{args.encoder}_{args.split}.bin"
        hdigest = runtime.save_hidden_records(
            hpath, hidden_records, model_cfg.d_model,
            {"encoder_checkpoint_digest": ckpt_digest,
             "config_digest": cfg.digest(), "capture_mode": "generated"})
        msg += f" hidden={hdigest[:12]}"
    print(msg)
    return 0


def cmd_explain(cfg: RunConfig, args) -> int:
    v = _load_vocab(cfg)
    samples = _load_split(cfg, args.split)
    if args.limit:
        samples = samples[: args.limit]
    stage = args.stage
    spec = cfg.thinking
    dec_manifest = _decoder_manifest(cfg, stage)
    dec_params, dec_cfg, _ = net.load_checkpoint(dec_manifest["final_checkpoint"])
    enc_manifest = _encoder_manifest(cfg, args.encoder)
    enc_params, enc_cfg, _ = net.load_checkpoint(enc_manifest["final_checkpoint"])
    ckpt_digest = enc_manifest["checkpoint_digest"]

    records = explainer.build_decoder_dataset(
        enc_params, enc_cfg, samples, stage, spec, v, ckpt_digest)
    rows = []
    for rec in records:
        recon = explainer.explain(dec_params, dec_cfg, rec, v, spec,
                                  max_new=args.max_new,
                                  ablate_hidden=args.ablate_hidden)
        rows.append({
            "sample_id": rec.sample_id,
            "stage_index": stage,
            "ablated": bool(args.ablate_hidden),
            "reconstruction": recon,
            "gold": list(rec.gold_stage_text),
        })
    suffix = "_ablated" if args.ablate_hidden else ""
    out = cfg.report_dir / f"recon_{args.encoder}_{args.split}_s{stage}{suffix}.jsonl"
    header = {
        "format": RECON_FORMAT, "version": 1,
        "stage_index": stage, "split": args.split, "ablated": bool(args.ablate_hidden),
        "encoder_checkpoint_digest": ckpt_digest,
        "decoder_checkpoint_digest": dec_manifest["checkpoint_digest"],
        "config_digest": cfg.digest(), "count": len(rows),
    }
    digest = _write_jsonl(out, header, rows)
    print(f"explain[s{stage}/{args.split}{suffix}]: n={len(rows)} digest={digest[:12]}")
    return 0


@dataclass
class _ResultRow:
    sample_id: int
    generated_token_count: int
    answer_tokens: tuple[str, ...]


def _load_infer_rows(path: Path) -> tuple[dict, list[_ResultRow]]:
    header, rows = _read_jsonl(path)
    return header, [
        _ResultRow(r["sample_id"], r["generated_token_count"],
                   tuple(r["answer_tokens"])) for r in rows
    ]


def cmd_eval(cfg: RunConfig, args) -> int:
    samples = {s.id: s for s in _load_split(cfg, args.split)}
    report = metrics.EvalReport()
    report.digests["config"] = cfg.digest()

    hidden_path = cfg.report_dir / f"infer_{args.encoder}_{args.split}.jsonl"
    header, hidden_rows = _load_infer_rows(hidden_path)
    report.digests["infer_hidden"] = runtime.file_digest(hidden_path)
    report.digests["encoder_checkpoint"] = header["checkpoint_digest"]
    acc = metrics.answer_accuracy(hidden_rows, samples)
    entry = {
        "answer_accuracy": acc,
        "mean_generated_tokens":
            sum(r.generated_token_count for r in hidden_rows) / len(hidden_rows),
    }

    baseline_path = cfg.report_dir / f"infer_{args.baseline}_{args.split}.jsonl"
    if baseline_path.exists():
        bheader, base_rows = _load_infer_rows(baseline_path)
        stats = metrics.token_stats(hidden_rows, base_rows)
        entry["compression_ratio"] = stats.compression_ratio
        report.datasets[f"{args.baseline}_{args.split}"] = {
            "answer_accuracy": metrics.answer_accuracy(base_rows, samples),
            "mean_generated_tokens": stats.baseline_mean_generated,
        }
        report.digests["infer_baseline"] = runtime.file_digest(baseline_path)
    report.datasets[f"{args.encoder}_{args.split}"] = entry

    for stage in range(1, cfg.thinking.num_stages + 1):
        base = cfg.report_dir / f"recon_{args.encoder}_{args.split}_s{stage}.jsonl"
        if not base.exists():
            continue
        _, rows = _read_jsonl(base)
        bleu = sum(metrics.bleu4(r["reconstruction"], r["gold"]) for r in rows) / len(rows)
        rouge = sum(metrics.rouge_l(r["reconstruction"], r["gold"]) for r in rows) / len(rows)
        stage_entry = {"bleu4": bleu, "rouge_l": rouge, "n": len(rows)}
        abl = cfg.report_dir / f"recon_{args.encoder}_{args.split}_s{stage}_ablated.jsonl"
        if abl.exists():
            _, arow = _read_jsonl(abl)
            stage_entry["zero_ablated_bleu4"] = (
                sum(metrics.bleu4(r["reconstruction"], r["gold"]) for r in arow) / len(arow))
        report.stages[f"stage{stage}"] = stage_entry

    out_json = cfg.report_dir / f"eval_{args.encoder}_{args.split}.json"
    out_tsv = cfg.report_dir / f"eval_{args.encoder}_{args.split}.tsv"
    report.save(out_json, out_tsv)
    print(f"eval[{args.encoder}/{args.split}]: accuracy={acc:.4f} "
          f"report={out_json}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    rng = np.random.default_rng(cfg.seed)
    worst_overall = 0.0
    for dims in ((50, 16, 1, 2, 64), (128, 32, 2, 4, 128)):
        V, D, L, H, F = dims
        model_cfg = net.ModelConfig(vocab_size=V, d_model=D, n_layers=L,
                                    n_heads=H, d_ff=F, max_len=32)
        params = net.init_params(model_cfg, cfg.seed)
        T = 12
        ids = rng.integers(0, V, size=T)
        mask = np.zeros(T, dtype=bool)
        mask[1:] = rng.random(T - 1) < 0.5
        if not mask.any():
            mask[T - 1] = True
        seq = curriculum.MaskedSequence(
            ids=ids.astype(np.int64), loss_mask=mask,
            thinking_positions=(), region_map={})
        err = net.grad_check(params, model_cfg, seq, eps=args.eps,
                             coords_per_group=args.coords, seed=cfg.seed)
        worst_overall = max(worst_overall, err)
        print(f"gradcheck V={V} D={D} L={L} H={H}: max_rel_error={err:.3e}")
    ok = worst_overall < 1e-4
    print(f"gradcheck: worst={worst_overall:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_ablate(cfg: RunConfig, args) -> int:
    v = _load_vocab(cfg)
    samples = _load_split(cfg, "test")
    if args.limit:
        samples = samples[: args.limit]
    values = [float(x) if args.kind == "retention-ratio" else int(x)
              for x in args.values.split(",")]
    if args.structural:
        report = metrics.ablation_sweep(
            args.kind, values, None,
            structural_args=(samples, v, cfg.thinking))
    else:
        train_samples = _load_split(cfg, "train")

        def run_pipeline(value):
            spec = metrics._spec_for_value(args.kind, value, cfg.thinking)
            plan = build_stage_plan(cfg.train, spec, seed=cfg.seed,
                                    kind="progressive", n_samples=len(train_samples))
            model_cfg = cfg.encoder.to_model_config(v.size)
            params = net.init_params(model_cfg, cfg.seed)
            trainer.train_encoder(plan, train_samples, params, model_cfg, v,
                                  _hyper(cfg, cfg.train.lr_encoding))
            rows = [runtime.infer_sample(params, model_cfg, s, spec, v,
                                         capture_hidden=False)
                    for s in samples]
            acc = metrics.answer_accuracy(rows, {s.id: s for s in samples})
            mean_tokens = sum(r.generated_token_count for r in rows) / len(rows)
            return acc, mean_tokens

        report = metrics.ablation_sweep(args.kind, values, run_pipeline)
    out = cfg.report_dir / f"ablate_{args.kind}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    (cfg.report_dir / f"ablate_{args.kind}.tsv").write_text(report.to_table())
    print(report.to_table(), end="")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    path = Path(args.path) if args.path else (
        cfg.report_dir / f"eval_{args.encoder}_{args.split}.json")
    if not path.exists():
        raise CommandError(f"no eval report at {path}; run eval first")
    data = json.loads(path.read_text())
    report = metrics.EvalReport(
        datasets=data.get("datasets", {}), stages=data.get("stages", {}),
        digests=data.get("digests", {}), flags=data.get("flags", {}))
    print(report.to_table(), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="latentcot",
        description="latent chain-of-thought pipeline (data, training, "
                    "inference, reconstruction, evaluation)")
    p.add_argument("--config", help="path to a JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field (dotted keys, JSON values)")
    p.add_argument("--workdir", help="override the run directory")
    p.add_argument("--seed", type=int, help="override the run seed")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate train/test datasets and the vocab")

    tp = sub.add_parser("train-encoder", help="train the reasoning encoder")
    tp.add_argument("--plan", default="progressive",
                    choices=["progressive", "one-shot", "textual", "overfit"])

    dp = sub.add_parser("train-decoder", help="train a stage reconstruction decoder")
    dp.add_argument("--stage", type=int, required=True)
    dp.add_argument("--encoder", default="progressive",
                    help="which encoder plan's checkpoint to read")

    ip = sub.add_parser("infer", help="greedy inference with token accounting")
    ip.add_argument("--encoder", default="progressive")
    ip.add_argument("--split", default="test", choices=["train", "test"])
    ip.add_argument("--limit", type=int, default=0)
    ip.add_argument("--export-hidden", action="store_true")

    ep = sub.add_parser("explain", help="reconstruct stage text from hidden states")
    ep.add_argument("--stage", type=int, required=True)
    ep.add_argument("--encoder", default="progressive")
    ep.add_argument("--split", default="test", choices=["train", "test"])
    ep.add_argument("--limit", type=int, default=0)
    ep.add_argument("--max-new", type=int, default=96)
    ep.add_argument("--ablate-hidden", action="store_true",
                    help="substitute zero vectors (information ablation)")

    vp = sub.add_parser("eval", help="aggregate artifacts into an EvalReport")
    vp.add_argument("--encoder", default="progressive")
    vp.add_argument("--baseline", default="textual")
    vp.add_argument("--split", default="test", choices=["train", "test"])

    gp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gp.add_argument("--eps", type=float, default=1e-4)
    gp.add_argument("--coords", type=int, default=200)

    ap = sub.add_parser("ablate", help="ablation sweep (structural or full)")
    ap.add_argument("--kind", required=True,
                    choices=["tokens-per-stage", "retention-ratio"])
    ap.add_argument("--values", required=True, help="comma-separated values")
    ap.add_argument("--structural", action="store_true")
    ap.add_argument("--limit", type=int, default=0)

    rp = sub.add_parser("report", help="render an EvalReport as a flat table")
    rp.add_argument("--path", help="explicit report path")
    rp.add_argument("--encoder", default="progressive")
    rp.add_argument("--split", default="test", choices=["train", "test"])
    return p


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-encoder": cmd_train_encoder,
    "train-decoder": cmd_train_decoder,
    "infer": cmd_infer,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        with _limit_threads(cfg.threads):
            return _COMMANDS[args.command](cfg, args)
    except (CommandError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (taskgen.TaskGenError, net.NetError, curriculum.CurriculumError,
            trainer.TrainingError, metrics.MetricsError,
            explainer.ExplainerError, runtime.InferenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
