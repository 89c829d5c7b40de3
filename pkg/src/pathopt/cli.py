"""``pathopt`` command line: benchmark generation, stores, runs, analyses.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any

from .errors import NumericError, PathwayError, StoreError
from .harness import (
    coverage_analysis,
    expand_ablation_grid,
    experiment_config_from_dict,
    expert_heatmap,
    flop_proxy,
    forwards_equivalent,
    run_experiment,
    step_curve,
    write_csv_table,
)
from .kernels import KERNEL_KINDS, KernelSpec
from .model import PlantSpec, generate_planted_benchmark, load_model, save_model
from .neighborhood import NEIGHBORHOOD_KINDS, NeighborhoodSpec
from .optimizers import (
    METHODS,
    MaskSpec,
    OptimizerSpec,
    parse_lr_schedule,
    parse_span,
    run_optimizer,
)
from .pathway import RoutingConfig
from .refstore import (
    build_reference_set,
    load_samples,
    load_store,
    save_samples,
    save_store,
    store_hash,
    verify_store,
)
from .serialization import canonical_json, sha256_hex

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; we reserve 2 for
    verification failures, so remap usage problems to 1."""

    def error(self, message: str):  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared optimizer flags


def _add_optimizer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHODS, default="ngd")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--lr", default="cosine:1e-2:1e-5",
                   help="fixed:LR | step:LR[:FACTOR[:EVERY]] | cosine[:START[:END]]")
    p.add_argument("--alpha-grid", default=None,
                   help="comma-separated blend grid (must include 0 and 1)")
    p.add_argument("--ms-iters", type=int, default=5)
    p.add_argument("--ms-alpha", type=float, default=0.5)
    p.add_argument("--kernel", choices=KERNEL_KINDS, default="gaussian")
    p.add_argument("--bandwidth", type=float, default=None,
                   help="kernel bandwidth; default = median heuristic")
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--offset", type=float, default=1.0)
    p.add_argument("--neighborhood", choices=NEIGHBORHOOD_KINDS, default="knn")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--dedup-threshold", type=float, default=0.95)
    p.add_argument("--tokens", default="last:1", help="token span, e.g. last:1")
    p.add_argument("--layers", default="last:3", help="layer span, e.g. last:3")
    p.add_argument("--core-experts", default="8", help="per-row expert budget or 'all'")


def _spec_from_args(args: argparse.Namespace) -> OptimizerSpec:
    tok_pos, tok_n = parse_span(args.tokens)
    lay_pos, lay_n = parse_span(args.layers)
    core = None if args.core_experts == "all" else int(args.core_experts)
    kwargs: dict[str, Any] = dict(
        method=args.method,
        steps=args.steps,
        lr_schedule=parse_lr_schedule(args.lr),
        meanshift_iters=args.ms_iters,
        meanshift_alpha=args.ms_alpha,
        kernel=KernelSpec(
            kind=args.kernel,
            bandwidth=args.bandwidth,
            degree=args.degree,
            offset=args.offset,
        ),
        neighborhood=NeighborhoodSpec(
            kind=args.neighborhood,
            k=args.k,
            epsilon=args.epsilon,
            dedup_threshold=args.dedup_threshold,
        ),
        mask=MaskSpec(
            token_position=tok_pos,
            token_count=tok_n,
            layer_position=lay_pos,
            layer_count=lay_n,
            core_experts=core,
        ),
    )
    if args.alpha_grid is not None:
        kwargs["alpha_grid"] = tuple(float(a) for a in args.alpha_grid.split(","))
    return OptimizerSpec(**kwargs)


def _analysis_comment(tag: str, spec: OptimizerSpec, *parts: str) -> str:
    from .harness import optimizer_spec_to_dict

    payload = {"analysis": tag, "spec": optimizer_spec_to_dict(spec), "inputs": list(parts)}
    digest = sha256_hex(canonical_json(payload).encode("utf-8"))[:16]
    return f"config_hash={digest} seeds=from-files"


# ---------------------------------------------------------------------------
# command handlers


def _cmd_bench_gen(args: argparse.Namespace) -> int:
    spec = PlantSpec(
        n_clusters=args.clusters,
        router_noise=args.eta,
        pool_size=args.pool_size,
        test_size=args.test_size,
    )
    config = RoutingConfig()
    model, pool, test = generate_planted_benchmark(args.seed, spec, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    save_samples(pool, out / "pool.jsonl")
    save_samples(test, out / "test.jsonl")
    print(f"model fingerprint {model.fingerprint()}")
    for name in ("model.json", "pool.jsonl", "test.jsonl"):
        print(f"wrote {out / name}")
    return EXIT_OK


def _cmd_refstore_build(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    pool = load_samples(args.pool)
    store = build_reference_set(model, pool)
    save_store(store, args.out)
    print(
        f"wrote {args.out}: {len(store.entries)} entries "
        f"(of {len(pool)} pool samples), hash {store_hash(store)[:16]}"
    )
    return EXIT_OK


def _cmd_refstore_verify(args: argparse.Namespace) -> int:
    store = load_store(args.store)
    model = load_model(args.model) if args.model else None
    problems = verify_store(store, model)
    if problems:
        for problem in problems:
            print(f"FAIL {problem}", file=sys.stderr)
        print(f"{len(problems)} problem(s) found", file=sys.stderr)
        return EXIT_VERIFY
    print(f"ok: {len(store.entries)} entries, hash {store_hash(store)[:16]}")
    return EXIT_OK


def _print_run_result(result: dict[str, Any]) -> None:
    print(f"config_hash {result['config_hash']}")
    for s in result["summary"]:
        print(
            f"  {s['arm']}: accuracy {s['accuracy_mean']:.4f} "
            f"± {s['accuracy_std']:.4f} over {s['seeds_ok']} seed(s)"
        )
    failures = [r for r in result["rows"] if r.status != "ok"]
    for row in failures:
        print(f"  seed {row.seed}: {row.status}", file=sys.stderr)
    for path in result["paths"]:
        print(f"wrote {path}")


def _cmd_run(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = experiment_config_from_dict(doc)
    result = run_experiment(cfg)
    _print_run_result(result)
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    cfg = expand_ablation_grid(doc)
    result = run_experiment(cfg)
    _print_run_result(result)
    return EXIT_OK


def _load_eval_inputs(args: argparse.Namespace):
    model = load_model(args.model)
    testset = load_samples(args.test)
    store = load_store(args.store)
    if args.limit is not None:
        testset = testset[: args.limit]
    return model, testset, store


def _cmd_analyze_steps(args: argparse.Namespace) -> int:
    model, testset, store = _load_eval_inputs(args)
    spec = _spec_from_args(args)
    accuracies, flips = step_curve(model, testset, store, spec)
    comment = _analysis_comment("steps", spec, args.model, args.test, args.store)
    rows = [
        (t, accuracies[t], flips.n_correct[t], flips.n_i2c[t], flips.n_c2i[t])
        for t in range(len(accuracies))
    ]
    write_csv_table(Path(args.out), comment,
                    ("step", "accuracy", "n_correct", "n_i2c", "n_c2i"), rows)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_analyze_heatmap(args: argparse.Namespace) -> int:
    model, testset, store = _load_eval_inputs(args)
    spec = _spec_from_args(args)
    layers = [int(v) for v in args.layers_list.split(",")]
    before, after = [], []
    for x, y in testset:
        base = model.forward_base(x)[1]
        omega, _ = run_optimizer(model, x, spec, store=store, y=y)
        before.append(base)
        after.append(omega)
    heat = expert_heatmap(model, testset, before, after, layers)
    comment = _analysis_comment("heatmap", spec, args.model, args.test, args.store)
    rows = []
    for layer in layers:
        for e in range(model.config.n_experts):
            rows.append(
                (layer, e, heat[layer]["before"][e], heat[layer]["after"][e])
            )
    write_csv_table(Path(args.out), comment,
                    ("layer", "expert", "before", "after"), rows)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_analyze_coverage(args: argparse.Namespace) -> int:
    model, testset, store = _load_eval_inputs(args)
    spec = _spec_from_args(args)
    n_values = [int(v) for v in args.n_values.split(",")]
    table = coverage_analysis(model, testset, store, spec, n_values)
    comment = _analysis_comment("coverage", spec, args.model, args.test, args.store)
    write_csv_table(Path(args.out), comment, ("n", "coverage"), table)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_analyze_cost(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = experiment_config_from_dict(doc)
    from .harness import config_hash

    comment = (
        f"config_hash={config_hash(cfg)} "
        f"seeds={','.join(str(s) for s in cfg.seeds)}"
    )
    rows = []
    for name, spec in cfg.arms:
        rows.append(
            (
                name,
                spec.method,
                forwards_equivalent(spec),
                flop_proxy(
                    spec, cfg.routing, cfg.plant.d_model,
                    cfg.plant.hidden_width, cfg.plant.n_classes,
                ),
            )
        )
    write_csv_table(Path(args.out), comment,
                    ("arm", "method", "forwards_equivalent", "flop_proxy"), rows)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly


def build_parser() -> _Parser:
    parser = _Parser(prog="pathopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="planted benchmark utilities")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)
    gen = bench_sub.add_parser("gen", help="generate model + pool + test files")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--eta", type=float, default=0.5, help="router noise level")
    gen.add_argument("--clusters", type=int, default=8)
    gen.add_argument("--pool-size", type=int, default=2000)
    gen.add_argument("--test-size", type=int, default=500)
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(handler=_cmd_bench_gen)

    refstore = sub.add_parser("refstore", help="reference store utilities")
    ref_sub = refstore.add_subparsers(dest="refstore_command", required=True)
    build = ref_sub.add_parser("build", help="build a store from a labeled pool")
    build.add_argument("--model", required=True)
    build.add_argument("--pool", required=True)
    build.add_argument("--out", required=True)
    build.set_defaults(handler=_cmd_refstore_build)
    verify = ref_sub.add_parser("verify", help="check store integrity")
    verify.add_argument("store")
    verify.add_argument("--model", default=None)
    verify.set_defaults(handler=_cmd_refstore_verify)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.set_defaults(handler=_cmd_run)

    ablate = sub.add_parser("ablate", help="run a one-factor ablation grid")
    ablate.add_argument("--grid", required=True)
    ablate.set_defaults(handler=_cmd_ablate)

    analyze = sub.add_parser("analyze", help="analysis tables")
    an_sub = analyze.add_subparsers(dest="analyze_command", required=True)

    def eval_inputs(p: argparse.ArgumentParser) -> None:
        p.add_argument("--model", required=True)
        p.add_argument("--test", required=True)
        p.add_argument("--store", required=True)
        p.add_argument("--limit", type=int, default=None,
                       help="evaluate only the first N test samples")
        p.add_argument("--out", required=True)
        _add_optimizer_flags(p)

    steps = an_sub.add_parser("steps", help="per-step accuracy and flip counts")
    eval_inputs(steps)
    steps.set_defaults(handler=_cmd_analyze_steps)

    heatmap = an_sub.add_parser("heatmap", help="expert activation frequencies")
    eval_inputs(heatmap)
    heatmap.add_argument("--heatmap-layers", dest="layers_list", default="3,4,5",
                         help="comma-separated layer indices")
    heatmap.set_defaults(handler=_cmd_analyze_heatmap)

    coverage = an_sub.add_parser("coverage", help="top-n expert coverage curve")
    eval_inputs(coverage)
    coverage.add_argument("--n-values", default="4,8,12,16")
    coverage.set_defaults(handler=_cmd_analyze_coverage)

    cost = an_sub.add_parser("cost", help="declared cost model per arm")
    cost.add_argument("--config", required=True)
    cost.add_argument("--out", required=True)
    cost.set_defaults(handler=_cmd_analyze_cost)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StoreError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (PathwayError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
