"""
CLI entry point for lords.
Parses arguments, wires progress and logging, and maps errors to exit codes.
Only machine-parseable output goes to stdout; everything else goes to stderr.
"""

import argparse
import csv
import io
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional

from tqdm import tqdm

from .core.blockwise import aligned_rank, BitConfig, mixed_precision_plan
from .core.engine import LordsEngine
from .core.errors import LordsError
from .core.formats import atomic_write, read_packed, read_tensor, write_packed, write_tensor
from .core.tensors import CodebookId, FactorPair

CODEBOOK_CHOICES = [c.label for c in CodebookId]
BIT_CHOICES = [b.value for b in BitConfig]


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0

    if args.command is None:
        parser.print_help(sys.stderr)
        return 2

    _setup_logging(args)
    try:
        return args.handler(args)
    except LordsError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 4


def _positive_int(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{value}'")
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {n}")
    return n


def _rank_arg(value: str) -> Optional[int]:
    """'auto' (None) or a positive integer"""
    if value == "auto":
        return None
    return _positive_int(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state-dir", help="State directory (default: $LORDS_STATE_DIR or ./.lords)")
    common.add_argument("--verbose", "-v", action="store_true", help="Log progress details to stderr")
    common.add_argument("--quiet", "-q", action="store_true", help="No progress bars")

    parser = argparse.ArgumentParser(
        prog="lords",
        description="lords - low-rank decomposed scaling quantization for weight matrices",
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    def add(name: str, help_text: str, handler):
        sub = subparsers.add_parser(name, help=help_text, parents=[common])
        sub.set_defaults(handler=handler)
        return sub

    p = add("quantize", "Block-wise baseline quantization", run_quantize_command)
    p.add_argument("--in", dest="in_path", required=True, help="Input tensor file (.lrt)")
    p.add_argument("--codebook", choices=CODEBOOK_CHOICES, help="Codebook (default: from config)")
    p.add_argument("--block-size", type=_positive_int, help="Elements per block (default: from config)")
    p.add_argument("--out", required=True, help="Output packed artifact (.lrq)")

    p = add("refine", "Low-rank scale refinement", run_refine_command)
    p.add_argument("--in", dest="in_path", required=True, help="Input tensor file (.lrt)")
    p.add_argument("--codebook", choices=CODEBOOK_CHOICES, help="Codebook (default: from config)")
    p.add_argument("--rank", type=_rank_arg, default=None,
                   help="Factor rank, or 'auto' for the block-budget rank (default: auto)")
    p.add_argument("--block-size", type=_positive_int, help="Block size the auto rank is matched to")
    p.add_argument("--adapter-rank", type=int, default=0, help="Add a LoRA adapter rank to the auto rank")
    p.add_argument("--steps", type=int, help="Alternating iterations (default: from config)")
    p.add_argument("--lr", type=float, help="AdamW learning rate (default: from config)")
    p.add_argument("--out", required=True, help="Output packed artifact (.lrq)")
    p.add_argument("--report", help="Write the error trace CSV here")
    cache_mode = p.add_mutually_exclusive_group()
    cache_mode.add_argument("--no-cache", action="store_true", help="Ignore and do not update the run cache")
    cache_mode.add_argument("--refresh", action="store_true",
                            help="Recompute and store the result as a new cached version")

    p = add("dequantize", "Reconstruct a dense matrix", run_dequantize_command)
    p.add_argument("--in", dest="in_path", required=True, help="Packed artifact (.lrq)")
    p.add_argument("--out", required=True, help="Output tensor file (.lrt)")

    p = add("error-report", "Compare artifacts against their weights", run_error_report_command)
    p.add_argument("--weights", required=True, help="Original tensor file (.lrt)")
    p.add_argument("--artifacts", nargs="+", required=True, help="Packed artifacts (.lrq)")
    p.add_argument("--format", choices=["csv", "md"], default="csv", help="Output format (default: csv)")
    p.add_argument("--block-size", type=_positive_int, help="Block size of the NF4 baseline")

    p = add("rank-plan", "Rank matching a block-wise scale budget", run_rank_plan_command)
    p.add_argument("--rows", type=_positive_int, required=True)
    p.add_argument("--cols", type=_positive_int, required=True)
    p.add_argument("--block-size", type=_positive_int, help="Block size (default: from config)")
    p.add_argument("--adapter-rank", type=int, default=0, help="LoRA adapter rank to align with")

    p = add("mixed-plan", "Per-layer codebooks for an average bit width", run_mixed_plan_command)
    p.add_argument("--layers", type=_positive_int, required=True)
    p.add_argument("--bits", choices=BIT_CHOICES, required=True)

    p = add("quantize-layers", "Quantize a layer stack with a mixed-precision plan", run_quantize_layers_command)
    p.add_argument("--in", dest="in_paths", nargs="+", required=True, help="Layer tensor files, first layer first")
    p.add_argument("--bits", choices=BIT_CHOICES, required=True)
    p.add_argument("--method", choices=["blockwise", "lords"], default="blockwise")
    p.add_argument("--block-size", type=_positive_int, help="Block size (default: from config)")
    p.add_argument("--out-dir", required=True, help="Directory for layer_<i>.lrq artifacts")

    p = add("qat-demo", "Toy quantization-aware training run", run_qat_demo_command)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, help="SGD steps (default: from config)")
    p.add_argument("--lr", type=float, help="SGD learning rate (default: from config)")
    p.add_argument("--scale-lr-ratio", type=float, help="Step of B, A relative to --lr (default: from config)")
    p.add_argument("--codebook", choices=CODEBOOK_CHOICES, default=CodebookId.INT4S.label)
    p.add_argument("--mode", choices=["joint", "weights"], default="joint",
                   help="Train W with B, A (joint) or W alone (weights)")
    p.add_argument("--compare", action="store_true", help="Add the other mode's loss column")
    p.add_argument("--out", help="Loss trace CSV (default: stdout)")

    p = add("peft-init", "Export refined factors as the fine-tuning start point", run_peft_init_command)
    p.add_argument("--base", required=True, help="Refined packed artifact (.lrq)")
    p.add_argument("--out-b", required=True, help="Output B factor (.lrt)")
    p.add_argument("--out-a", required=True, help="Output A factor (.lrt)")

    p = add("peft-train", "Fine-tune factors on a seeded toy task with codes frozen", run_peft_train_command)
    _add_tuned_args(p)
    p.add_argument("--out-b", required=True, help="Output tuned B factor (.lrt)")
    p.add_argument("--out-a", required=True, help="Output tuned A factor (.lrt)")
    p.add_argument("--seed", type=int, default=0, help="Task seed")
    p.add_argument("--steps", type=int, help="AdamW steps (default: from config)")
    p.add_argument("--lr", type=float, help="AdamW learning rate (default: from config)")
    p.add_argument("--trace", help="Write the step,loss CSV here")

    p = add("peft-merge", "Absorb tuned factors into an artifact", run_peft_merge_command)
    _add_tuned_args(p)
    p.add_argument("--out", required=True, help="Merged packed artifact (.lrq)")

    p = add("delta-rank", "Spectrum of the multiplicative update", run_delta_rank_command)
    _add_tuned_args(p)
    p.add_argument("--out", help="Singular-value spectrum CSV")
    p.add_argument("--lora-rank", type=_positive_int, help="Also list a random additive update of this rank")
    p.add_argument("--seed", type=int, default=0, help="Seed of the additive reference update")

    p = add("config", "Manage configuration", run_config_command)
    p.add_argument("action", choices=["init", "show"], help="Config action")

    p = add("runs", "Manage the refine run cache", run_runs_command)
    p.add_argument("action", choices=["stats", "list", "clear", "cleanup"], help="Cache action")
    p.add_argument("--keep", type=int, help="Versions to keep per run for cleanup (default: from config)")

    return parser


def _add_tuned_args(parser):
    parser.add_argument("--base", required=True, help="Refined packed artifact (.lrq)")
    parser.add_argument("--tuned-b", required=True, help="Tuned B factor (.lrt)")
    parser.add_argument("--tuned-a", required=True, help="Tuned A factor (.lrt)")


def _setup_logging(args):
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


@contextmanager
def _progress(args, total: int, desc: str):
    """Yield a (step, value) callback driving a tqdm bar on stderr"""
    disable = args.quiet or not sys.stderr.isatty()
    with tqdm(total=total, desc=desc, file=sys.stderr, leave=False, disable=disable) as bar:
        def update(step: int, value: float):
            bar.update(1)
            bar.set_postfix(value=f"{value:.4g}", refresh=False)
        yield update


def _engine(args, use_cache: Optional[bool] = None) -> LordsEngine:
    return LordsEngine(state_dir=args.state_dir, use_cache=use_cache)


def _write_text(path: str, text: str):
    atomic_write(path, text.encode("utf-8"))


def run_quantize_command(args) -> int:
    engine = _engine(args)
    w = read_tensor(args.in_path)
    q = engine.quantize(w, engine.codebook(args.codebook), args.block_size)
    write_packed(q, args.out)
    logging.getLogger(__name__).info("wrote %s (%d scale parameters)", args.out, q.float_params)
    return 0


def run_refine_command(args) -> int:
    """Run refinement; prints the final Frobenius error"""
    engine = _engine(args, use_cache=False if args.no_cache else None)
    w = read_tensor(args.in_path)
    rank = engine.resolve_rank(w, args.rank, args.block_size, args.adapter_rank)
    cfg = engine.refine_config(rank, args.steps, args.lr, engine.codebook(args.codebook))
    with _progress(args, cfg.steps, f"refine r={rank}") as update:
        q, report, cached = engine.refine(w, cfg, update, refresh=args.refresh)
    write_packed(q, args.out)
    if args.report:
        _write_text(args.report, report.to_csv())
    print(repr(report.final_error))
    return 0


def run_dequantize_command(args) -> int:
    engine = _engine(args)
    write_tensor(engine.dequantize(read_packed(args.in_path)), args.out)
    return 0


def run_error_report_command(args) -> int:
    engine = _engine(args)
    w = read_tensor(args.weights)
    artifacts = [(path, read_packed(path)) for path in args.artifacts]
    table = engine.error_report(w, artifacts, args.block_size)
    sys.stdout.write(table.to_markdown() if args.format == "md" else table.to_csv())
    return 0


def run_rank_plan_command(args) -> int:
    engine = _engine(args)
    block = args.block_size or engine.config.block_size
    print(aligned_rank(args.rows, args.cols, block, args.adapter_rank))
    return 0


def run_mixed_plan_command(args) -> int:
    plan = mixed_precision_plan(args.layers, BitConfig.from_label(args.bits))
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["layer", "codebook"])
    for i, codebook_id in enumerate(plan):
        writer.writerow([i, codebook_id.label])
    sys.stdout.write(buffer.getvalue())
    return 0


def run_quantize_layers_command(args) -> int:
    """Quantize every layer and print layer,codebook,float_params,path"""
    engine = _engine(args)
    layers = [read_tensor(path) for path in args.in_paths]
    with _progress(args, len(layers), "layers") as update:
        artifacts = engine.quantize_layers(layers, BitConfig.from_label(args.bits), args.method,
                                           args.block_size, update)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["layer", "codebook", "float_params", "path"])
    for i, q in enumerate(artifacts):
        path = out_dir / f"layer_{i}.lrq"
        write_packed(q, path)
        writer.writerow([i, q.codebook_id.label, q.float_params, str(path)])
    sys.stdout.write(buffer.getvalue())
    return 0


def run_qat_demo_command(args) -> int:
    """Toy QAT; the loss CSV goes to --out (then the final loss is printed) or stdout"""
    engine = _engine(args)
    modes = [args.mode]
    if args.compare:
        modes.append("weights" if args.mode == "joint" else "joint")
    steps = engine.config.qat_steps if args.steps is None else args.steps
    with _progress(args, (steps + 1) * len(modes), f"qat {'+'.join(modes)}") as update:
        results = engine.qat_demo(args.seed, steps, args.lr, modes, CodebookId.from_label(args.codebook), update,
                                  scale_lr_ratio=args.scale_lr_ratio)

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    header = ["step"] + [f"{mode}_loss" for mode in modes] if args.compare else ["step", "loss"]
    writer.writerow(header)
    for step in range(steps + 1):
        writer.writerow([step] + [repr(results[mode].losses[step]) for mode in modes])

    if args.out:
        _write_text(args.out, buffer.getvalue())
        print(repr(results[args.mode].final_loss))
    else:
        sys.stdout.write(buffer.getvalue())
    return 0


def _read_tuned(args) -> FactorPair:
    return FactorPair(b=read_tensor(args.tuned_b), a=read_tensor(args.tuned_a))


def run_peft_init_command(args) -> int:
    engine = _engine(args)
    start = engine.peft_start(read_packed(args.base))
    write_tensor(start.b, args.out_b)
    write_tensor(start.a, args.out_a)
    return 0


def run_peft_train_command(args) -> int:
    """Train the factors; prints the final task loss"""
    engine = _engine(args)
    steps = engine.config.peft_steps if args.steps is None else args.steps
    with _progress(args, steps + 1, "peft") as update:
        result = engine.peft_train(read_packed(args.base), _read_tuned(args), args.seed, steps, args.lr, update)
    write_tensor(result.factors.b, args.out_b)
    write_tensor(result.factors.a, args.out_a)
    if args.trace:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(result.losses):
            writer.writerow([step, repr(loss)])
        _write_text(args.trace, buffer.getvalue())
    print(repr(result.final_loss))
    return 0


def run_peft_merge_command(args) -> int:
    engine = _engine(args)
    merged = engine.peft_merge(read_packed(args.base), _read_tuned(args))
    write_packed(merged, args.out)
    return 0


def run_delta_rank_command(args) -> int:
    """Print the effective rank; write index,sigma[,additive_sigma] to --out"""
    engine = _engine(args)
    rank, sigma, additive = engine.delta_spectrum(read_packed(args.base), _read_tuned(args),
                                                  args.lora_rank, args.seed)
    if args.out:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["index", "sigma"] + (["additive_sigma"] if additive is not None else []))
        for i, value in enumerate(sigma):
            writer.writerow([i, repr(float(value))] + ([repr(float(additive[i]))] if additive is not None else []))
        _write_text(args.out, buffer.getvalue())
    print(rank)
    return 0


def run_config_command(args) -> int:
    engine = _engine(args)
    if args.action == "init":
        path = engine.init_config()
        print(f"✅ Wrote {path}", file=sys.stderr)
    print(json.dumps(engine.config.to_dict(), indent=2))
    return 0


def run_runs_command(args) -> int:
    """Run cache management command"""
    engine = _engine(args)

    if args.action == "clear":
        cleared = engine.clear_cache()
        print(f"🧹 Cleared {cleared} cached runs", file=sys.stderr)
        print(cleared)

    elif args.action == "stats":
        print(json.dumps(engine.get_cache_stats(), indent=2))

    elif args.action == "list":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["digest", "config_key", "version", "rows", "cols", "created_at"])
        for run in engine.list_runs():
            writer.writerow([run["digest"], run["config_key"], run["version"],
                             run["rows"], run["cols"], run["created_at"]])
        sys.stdout.write(buffer.getvalue())

    elif args.action == "cleanup":
        cleaned = engine.cleanup_cache(args.keep)
        print(f"🗑️  Cleaned up {cleaned} old run versions", file=sys.stderr)
        print(cleaned)

    return 0


if __name__ == "__main__":
    sys.exit(main())
