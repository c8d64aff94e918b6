"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 I/O error (missing or unreadable
files, bad checkpoints), 4 validation error (bad flag values or configs).

Speculation settings come from, in increasing precedence: defaults, the
file named by ``SPECPREFILL_CONFIG``, the file given with ``--config``, and
explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import analytic, bench, serving
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, get_preset
from .errors import CheckpointError, ConfigError, PositionError, RequestFileError
from .harness import (
    ResultRow,
    encode_text,
    gen_task,
    planted_needle_model,
    read_requests,
    retention_rate,
    write_results,
)
from .model import init_model
from .speculation import (
    Request,
    RequestBatch,
    SpecConfig,
    generate,
    generate_from_speculated,
    load_config_file,
    speculate_prefill,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4
CONFIG_ENV = "SPECPREFILL_CONFIG"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_spec_flags(p):
    g = p.add_argument_group("speculation")
    g.add_argument("--keep-rate", type=float, help="fraction of chunks kept, in (0, 1]")
    g.add_argument("--chunk-size", type=int)
    g.add_argument("--pool-window", type=int, help="odd smoothing window")
    g.add_argument("--look-ahead", type=int, help="speculator look-ahead steps")
    g.add_argument("--eos-id", type=int)
    g.add_argument("--config", help="JSON/TOML file with speculation settings")


def _add_prompt_flags(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--tokens", help="space- or comma-separated token ids")
    g.add_argument("--text", help="prompt text, byte-tokenized")
    g.add_argument("--requests", help="JSONL request file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specprefill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-model", help="write a randomly initialised checkpoint")
    p.add_argument("--preset", default="tiny", help=f"one of {', '.join(sorted(PRESETS))}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("speculate", help="show kept tokens and positions for prompts")
    p.add_argument("--speculator", required=True, help="checkpoint path or preset:NAME")
    p.add_argument("--seed", type=int, default=0, help="seed for preset:NAME models")
    p.add_argument("--out", help="output JSONL (default stdout)")
    _add_prompt_flags(p)
    _add_spec_flags(p)

    p = sub.add_parser("generate", help="greedy generation with or without speculation")
    p.add_argument("--base", required=True, help="checkpoint path or preset:NAME")
    p.add_argument("--speculator", help="omit for the unspeculated baseline")
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="results CSV (default stdout)")
    _add_prompt_flags(p)
    _add_spec_flags(p)

    p = sub.add_parser("bench-ttft", help="wall-clock TTFT over a BxS grid")
    p.add_argument("--base", default="preset:toy-base")
    p.add_argument("--speculator", "--spec", dest="speculator", default="preset:toy-spec")
    p.add_argument("--grid", default="1x512,4x512,1x2048", help="comma list of BxS")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    _add_spec_flags(p)

    p = sub.add_parser("simulate-qps", help="constant-QPS serving simulation sweep")
    p.add_argument("--cost", help="cost-model JSON (default: Llama-70B on an H200 node)")
    p.add_argument("--qps", help="comma list of QPS values (default: automatic grid)")
    p.add_argument("--points", type=int, default=40, help="size of the automatic grid")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--num-queries", type=int, default=600)
    p.add_argument("--speculator-preset", help="apply speculation with this speculator preset")
    p.add_argument("--keep-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")

    p = sub.add_parser("flops", help="analytic FLOPS, overhead and speedup")
    p.add_argument("--spec", required=True, help="speculator preset")
    p.add_argument("--base", required=True, help="base preset")
    p.add_argument("--seq-len", type=int, default=32768)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--keep-rate", type=float, default=0.1)
    p.add_argument("--mode", choices=("linear", "quadratic"), default="linear")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")

    p = sub.add_parser("eval-synthetic", help="needle retention on synthetic tasks")
    p.add_argument("--speculator", default="planted",
                   help="'planted' (contrived needle model), checkpoint path or preset:NAME")
    p.add_argument("--kind", choices=("needle", "passkey", "copy"), default="needle")
    p.add_argument("--num-tasks", type=int, default=100)
    p.add_argument("--seq-len", type=int, default=640)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-task CSV (default: summary only)")
    _add_spec_flags(p)
    return parser


def _spec_from_args(args) -> SpecConfig:
    data: dict = {}
    for source in (os.environ.get(CONFIG_ENV), args.config):
        if source:
            loaded = load_config_file(source)
            data.update(loaded.get("spec", loaded))
    flags = {
        "keep_rate": args.keep_rate,
        "chunk_size": args.chunk_size,
        "pool_window": args.pool_window,
        "look_ahead_steps": args.look_ahead,
        "eos_token_id": args.eos_id,
    }
    data.update({k: v for k, v in flags.items() if v is not None})
    return SpecConfig.from_mapping(data)


def _load_model(ref: str, seed: int):
    if ref.startswith("preset:"):
        return init_model(get_preset(ref[len("preset:"):]), seed)
    return load_checkpoint(ref)


def _parse_tokens(text: str) -> list[int]:
    try:
        tokens = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"bad token list {text!r}") from None
    if not tokens:
        raise ConfigError("empty token list")
    return tokens


def _prompt_batch(args) -> RequestBatch:
    if args.requests:
        return read_requests(args.requests)
    tokens = _parse_tokens(args.tokens) if args.tokens else encode_text(args.text)
    if not tokens:
        raise ConfigError("empty prompt")
    max_new = getattr(args, "max_new_tokens", 16)
    return RequestBatch([Request(id="0", tokens=tuple(tokens), max_new_tokens=max_new)])


class _Output:
    """Context manager yielding a text stream for ``--out`` or stdout."""

    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.f = open(self.path, "w", newline="", encoding="utf-8") if self.path else sys.stdout
        return self.f

    def __exit__(self, *exc):
        if self.path:
            self.f.close()
        else:
            self.f.flush()


def cmd_init_model(args):
    model = init_model(get_preset(args.preset), args.seed)
    save_checkpoint(model, args.out)
    print(f"wrote {args.out} sha256={model.checksum()}")


def cmd_speculate(args):
    spec = _spec_from_args(args)
    batch = _prompt_batch(args)
    speculator = _load_model(args.speculator, args.seed)
    out = speculate_prefill(batch, speculator, spec)
    with _Output(args.out) as f:
        for req in out:
            if req.error:
                raise ConfigError(f"request {req.id}: {req.error}")
            sp = req.speculated
            record = {
                "id": req.id,
                "original_tokens": sp.original_context_len,
                "kept_tokens": sp.num_kept,
                "kept_indices": list(sp.kept_position_ids),
                "first_decode_position": sp.first_decode_position,
            }
            f.write(json.dumps(record) + "\n")


def cmd_generate(args):
    spec = _spec_from_args(args)
    if args.max_new_tokens < 0:
        raise ConfigError("--max-new-tokens must be >= 0")
    batch = _prompt_batch(args)
    base = _load_model(args.base, args.seed)
    speculator = _load_model(args.speculator, args.seed) if args.speculator else None
    rows = []
    for req in batch:
        t0 = time.perf_counter()
        if speculator is None:
            out = generate(base, req.tokens, req.max_new_tokens, spec.eos_token_id)
            kept = len(req.tokens)
        else:
            sp = speculate_prefill(RequestBatch([req]), speculator, spec).requests[0]
            if sp.error:
                raise ConfigError(f"request {req.id}: {sp.error}")
            out = generate_from_speculated(base, sp.speculated, req.max_new_tokens,
                                           spec.eos_token_id)
            kept = sp.speculated.num_kept
        rows.append(ResultRow(req.id, kept, len(req.tokens), out,
                              (time.perf_counter() - t0) * 1e3))
    with _Output(args.out) as f:
        write_results(f, rows)


def cmd_bench_ttft(args):
    spec = _spec_from_args(args)
    grid = bench.parse_grid(args.grid)
    base = _load_model(args.base, args.seed)
    speculator = _load_model(args.speculator, args.seed + 1)
    rows = bench.bench_ttft(base, speculator, grid, spec, repeats=args.repeats, seed=args.seed)
    with _Output(args.out) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(bench.BENCH_COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())


def cmd_simulate_qps(args):
    if args.timeout <= 0 or args.num_queries < 1:
        raise ConfigError("--timeout must be positive and --num-queries >= 1")
    cost = serving.CostModel()
    if args.cost:
        with open(args.cost, encoding="utf-8") as f:
            try:
                cost = serving.CostModel.from_dict(json.load(f))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.cost}: {exc}") from exc
    if args.speculator_preset:
        r = analytic.relative_flops(get_preset(args.speculator_preset), cost.model, 1,
                                    cost.prompt_len)
        cost = cost.with_speculation(r, args.keep_rate)
    if args.qps:
        try:
            grid = [float(q) for q in args.qps.split(",")]
        except ValueError:
            raise ConfigError(f"bad --qps list {args.qps!r}") from None
    else:
        grid = serving.default_qps_grid(cost, args.points).tolist()
    result = serving.sweep_qps(grid, cost, args.timeout, num_queries=args.num_queries,
                               seed=args.seed)
    with _Output(args.out) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("qps", "mean_latency_s", "completion_fraction", "stage"))
        for p in result.points:
            w.writerow([f"{p.qps:.6g}", f"{p.mean_latency:.6f}", f"{p.completion_fraction:.6f}",
                        p.stage])


def cmd_flops(args):
    spec_cfg, base_cfg = get_preset(args.spec), get_preset(args.base)
    if args.seq_len < 1 or args.batch < 1:
        raise ConfigError("--seq-len and --batch must be >= 1")
    ratio = analytic.relative_flops(spec_cfg, base_cfg, args.batch, args.seq_len)
    speedup = analytic.speedup_from_configs(spec_cfg, base_cfg, args.batch, args.seq_len,
                                            args.keep_rate, mode=args.mode)
    summary = {
        "spec": args.spec,
        "base": args.base,
        "batch": args.batch,
        "seq_len": args.seq_len,
        "keep_rate": args.keep_rate,
        "relative_flops": ratio,
        "overhead": analytic.overhead(ratio, args.keep_rate),
        "speedup": speedup,
        "mode": args.mode,
    }
    profiles = {
        "spec": analytic.flops_profile(spec_cfg, args.batch, args.seq_len).as_dict(),
        "base": analytic.flops_profile(base_cfg, args.batch, args.seq_len).as_dict(),
    }
    if args.format == "text":
        for role in ("spec", "base"):
            pr = profiles[role]
            print(f"{role:<5} {summary[role]:<10} total={pr['total']:.4e} mlp={pr['mlp']:.4e} "
                  f"qkvo={pr['qkvo']:.4e} attn={pr['self_attention']:.4e} "
                  f"lm_head={pr['lm_head']:.4e}")
        print(f"relative_flops {ratio:.4%}")
        print(f"overhead {summary['overhead']:.4%}")
        print(f"speedup {speedup:.2f}")
    elif args.format == "json":
        print(json.dumps({**summary, "profiles": profiles}, indent=2))
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(("model", "preset", "mlp", "qkvo", "self_attention", "lm_head", "total"))
        for role in ("spec", "base"):
            pr = profiles[role]
            w.writerow((role, summary[role], pr["mlp"], pr["qkvo"], pr["self_attention"],
                        pr["lm_head"], pr["total"]))
        w.writerow(())
        w.writerow(("relative_flops", "keep_rate", "overhead", "speedup"))
        w.writerow((f"{ratio:.6f}", args.keep_rate, f"{summary['overhead']:.6f}",
                    f"{speedup:.4f}"))


def cmd_eval_synthetic(args):
    spec = _spec_from_args(args)
    if args.num_tasks < 1:
        raise ConfigError("--num-tasks must be >= 1")
    if args.speculator == "planted":
        speculator = planted_needle_model(max_position=max(16384, args.seq_len + 64))
    else:
        speculator = _load_model(args.speculator, args.seed)
    vocab = speculator.config.vocab_size
    rng = np.random.default_rng(args.seed)
    fractions = rng.random(args.num_tasks)
    tasks = [
        gen_task(args.kind, args.seed * 100003 + i, args.seq_len, float(fractions[i]), vocab,
                 chunk_size=spec.chunk_size)
        for i in range(args.num_tasks)
    ]
    batch = RequestBatch([Request(str(i), t.prompt_tokens) for i, t in enumerate(tasks)])
    out = speculate_prefill(batch, speculator, spec)
    for r in out:
        if r.error:
            raise ConfigError(f"task {r.id}: {r.error}")
    prompts = [r.speculated for r in out]
    rate = retention_rate(tasks, prompts)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("task", "needle_start", "needle_end", "kept_tokens", "original_tokens",
                        "retained"))
            for i, (t, sp) in enumerate(zip(tasks, prompts)):
                kept = set(sp.kept_position_ids)
                ok = all(j in kept for j in range(*t.needle_span))
                w.writerow((i, t.needle_span[0], t.needle_span[1], sp.num_kept,
                            sp.original_context_len, int(ok)))
    print(json.dumps({"kind": args.kind, "num_tasks": args.num_tasks,
                      "keep_rate": spec.keep_rate, "retention_rate": rate}))


COMMANDS = {
    "init-model": cmd_init_model,
    "speculate": cmd_speculate,
    "generate": cmd_generate,
    "bench-ttft": cmd_bench_ttft,
    "simulate-qps": cmd_simulate_qps,
    "flops": cmd_flops,
    "eval-synthetic": cmd_eval_synthetic,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, CheckpointError,
            RequestFileError) as exc:
        print(f"specprefill: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, PositionError, ValueError) as exc:
        print(f"specprefill: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"specprefill: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
