"""Command-line entry point: train, eval, convert, bench, analyze."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from ..analysis import (category_tv_distance, head_load_density, head_similarity, write_head_load_csv,
                        write_similarity_csv)
from ..errors import MoHError
from ..retrofit import RetrofitPlan, convert_dense_to_moh
from ..sparse import benchmark_inference, format_bench_table, write_bench_csv
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import load_task_spec, load_train_config
from .model import Classifier
from .tasks import gen_task
from .train import evaluate, train

def _cmd_train(args) -> int:
    task = load_task_spec(args.task)
    cfg = load_train_config(args.config, d_in=task.feature_dim)
    ckpt, log = train(cfg, task, log_path=args.log)
    save_checkpoint(ckpt, args.out)
    last = log.rows[-1]
    print(f"step {last['step']}: task_loss {last['task_loss']:.4f} lb_loss {last['lb_loss']:.4f} "
          f"accuracy {last['accuracy']:.4f}")
    return 0

def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _, test = gen_task(load_task_spec(args.task))
    ev = evaluate(ckpt.to_model(), test)
    print(f"task_loss {ev.task_loss:.6f}")
    print(f"accuracy {ev.accuracy:.6f}")
    if ev.f is not None:
        print(f"lb_loss {ev.lb_loss:.6f}")
        print("head_load " + " ".join(f"{x:.4f}" for x in ev.f))
    return 0

def _cmd_convert(args) -> int:
    src = load_checkpoint(args.ckpt)
    model = src.to_model()
    w = model.layer.attn
    layer = convert_dense_to_moh(w, RetrofitPlan(args.shared, args.topk, w), beta=src.config.beta)
    out = Checkpoint.from_model(Classifier(layer, model.W_c, model.b_c), step=src.step)
    out.rng_state = src.rng_state
    save_checkpoint(out, args.out)
    print(f"converted {w.h} heads: {args.shared} shared + top-{args.topk} routed "
          f"(activation ratio {layer.cfg.activation_ratio:.3f})")
    return 0

def _cmd_bench(args) -> int:
    ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    reports = benchmark_inference(args.heads, args.dim, args.seq, ratios, reps=args.reps)
    if args.out:
        write_bench_csv(reports, args.out)
    print(format_bench_table(reports))
    return 0

def _cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    _, test = gen_task(load_task_spec(args.task))
    decisions = [model.forward(test.X[i:i + 1])[1] for i in range(len(test))]
    profiles = head_load_density(decisions, test.clusters.tolist())
    sim = head_similarity(model.layer.attn, test.X)
    os.makedirs(args.out, exist_ok=True)
    write_head_load_csv(profiles, os.path.join(args.out, "head_load.csv"))
    write_similarity_csv(sim, os.path.join(args.out, "similarity.csv"))
    print(f"mean attention-pattern similarity {sim.mean_attn():.4f}")
    print(f"mean output-feature cosine {sim.mean_cosine():.4f}")
    for (a, b), tv in sorted(category_tv_distance(profiles).items()):
        print(f"routed head-load TV distance, categories {a} vs {b}: {tv:.4f}")
    return 0

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moh", description="Mixture-of-Head attention toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a classifier on a synthetic task")
    s.add_argument("--config", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", required=True, help="metrics CSV path")
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the task's held-out split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("convert", help="retrofit a checkpoint into parameter-free MoH")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--shared", type=int, required=True)
    s.add_argument("--topk", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_convert)

    s = sub.add_parser("bench", help="time head-masked attention against full activation")
    s.add_argument("--heads", type=int, default=32)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--seq", type=int, default=512)
    s.add_argument("--ratios", default="1.0,0.9,0.75,0.5")
    s.add_argument("--reps", type=int, default=11)
    s.add_argument("--out", default=None, help="CSV path")
    s.set_defaults(fn=_cmd_bench)

    s = sub.add_parser("analyze", help="export head-load and head-similarity CSVs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--out", required=True, help="output directory for head_load.csv and similarity.csv")
    s.set_defaults(fn=_cmd_analyze)
    return p

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (MoHError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

if __name__ == "__main__":
    sys.exit(main())
