"""Experiment harness: benchmark runs, ablation grids, and analysis tables.

Everything here is deterministic given (config, seeds): reports carry a
config hash and the seed list in a leading comment line, contain no
timestamps, and are byte-identical across repeat runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import NumericError, PathwayError, StoreError
from .kernels import KernelSpec
from .model import MoEModel, PlantSpec, cross_entropy, generate_planted_benchmark
from .neighborhood import NeighborhoodSpec
from .optimizers import (
    MaskSpec,
    OptimizationTrace,
    OptimizerSpec,
    parse_lr_schedule,
    parse_span,
    run_optimizer,
)
from .pathway import RoutingConfig, sparsify_topk
from .refstore import ReferenceStore, build_reference_set
from .serialization import canonical_json, sha256_hex

__all__ = [
    "ExperimentConfig",
    "ReportRow",
    "FlipStats",
    "run_experiment",
    "step_curve",
    "expert_heatmap",
    "coverage_analysis",
    "flop_proxy",
    "forwards_equivalent",
    "optimizer_spec_from_dict",
    "optimizer_spec_to_dict",
    "experiment_config_from_dict",
    "expand_ablation_grid",
    "config_hash",
]

REPORT_FORMATS = ("csv", "json")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...]
    plant: PlantSpec
    routing: RoutingConfig
    arms: tuple[tuple[str, OptimizerSpec], ...]
    output_dir: str = "reports"
    formats: tuple[str, ...] = ("csv", "json")

    def __post_init__(self) -> None:
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")
        if len(self.arms) < 1:
            raise ValueError("need at least one arm")
        names = [name for name, _ in self.arms]
        if len(set(names)) != len(names):
            raise ValueError(f"arm names must be unique, got {names}")
        bad = set(self.formats) - set(REPORT_FORMATS)
        if bad:
            raise ValueError(f"unknown report formats {sorted(bad)}")


@dataclass(frozen=True)
class ReportRow:
    arm: str
    seed: int
    status: str                 # "ok" or an error summary
    accuracy: float
    mean_loss: float
    mean_steps_to_best: float
    mean_forward_passes: float
    flop_proxy: float
    no_neighbor_rate: float

    def __post_init__(self) -> None:
        if self.status == "ok" and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


@dataclass
class FlipStats:
    """Per-step counts relative to step 0 (index 0 = before optimization)."""

    n_correct: list[int]
    n_i2c: list[int]
    n_c2i: list[int]

    def check_identity(self) -> bool:
        return all(
            c == self.n_correct[0] + i2c - c2i
            for c, i2c, c2i in zip(self.n_correct, self.n_i2c, self.n_c2i)
        )


# ---------------------------------------------------------------------------
# cost model


def forwards_equivalent(spec: OptimizerSpec) -> float:
    """Declared forward-pass-equivalents per test sample for ``spec.method``.

    One gradient evaluation counts as one forward plus a backward at twice a
    forward (3 total).  Neighbor counts use ``spec.neighborhood.k`` even for
    ε-ball selection, where it is a static stand-in for the data-dependent
    neighborhood size.
    """
    k = spec.neighborhood.k
    if spec.method == "none":
        return 1.0
    if spec.method == "oracle":
        return 1.0 + 3.0 * spec.steps
    if spec.method == "ngd":
        return 1.0 + 3.0 * spec.steps * k
    if spec.method == "kernel_regression":
        return 1.0 + float(len(spec.alpha_grid)) * k
    return 1.0  # mode_finding touches stored pathways only


def flop_proxy(
    spec: OptimizerSpec,
    config: RoutingConfig,
    d_model: int = 16,
    hidden_width: int = 8,
    n_classes: int = 4,
) -> float:
    """Documented cost proxy in multiply-accumulates per test sample.

    Per forward: every token at every layer pays E·d for routing plus
    top_k·2·h·d for the active experts, and the readout pays C·d once.
    """
    per_forward = (
        config.n_tokens
        * config.n_layers
        * (config.n_experts * d_model + config.top_k * 2 * hidden_width * d_model)
        + n_classes * d_model
    )
    return forwards_equivalent(spec) * per_forward


# ---------------------------------------------------------------------------
# per-arm evaluation


def _trace_loss(trace: OptimizationTrace, model: MoEModel, x: np.ndarray, y: int) -> float:
    if not trace.records:
        return cross_entropy(model._last_token_logits(x, None, None), y)
    if trace.method == "kernel_regression":
        return min(r.loss for r in trace.records)
    return trace.records[-1].loss


def _steps_to_best(trace: OptimizationTrace) -> int:
    if not trace.records:
        return 0
    losses = [r.loss for r in trace.records]
    if trace.method == "mode_finding":  # loss field holds density: larger is better
        return int(np.argmax(losses))
    if trace.method == "kernel_regression":
        best = min(losses)
        return max(i for i, v in enumerate(losses) if v == best)
    return int(np.argmin(losses))


def evaluate_arm(
    model: MoEModel,
    testset: Sequence[tuple[np.ndarray, int]],
    store: ReferenceStore,
    spec: OptimizerSpec,
) -> dict[str, float]:
    """Accuracy and cost statistics of one optimizer over a labeled test set."""
    n = len(testset)
    correct = 0
    loss_sum = 0.0
    steps_best_sum = 0.0
    forwards_sum = 0.0
    no_neighbors = 0
    for x, y in testset:
        _, trace = run_optimizer(model, x, spec, store=store, y=y)
        correct += int(trace.final_prediction == y)
        loss_sum += _trace_loss(trace, model, x, y)
        steps_best_sum += _steps_to_best(trace)
        forwards_sum += trace.forwards_used
        no_neighbors += int(trace.no_neighbors)
    return {
        "accuracy": correct / n,
        "mean_loss": loss_sum / n,
        "mean_steps_to_best": steps_best_sum / n,
        "mean_forward_passes": forwards_sum / n,
        "no_neighbor_rate": no_neighbors / n,
    }


def run_experiment(cfg: ExperimentConfig) -> dict[str, Any]:
    """Run every (seed, arm) cell; write reports; return rows and file paths.

    A module error while preparing or evaluating a seed records a failure row
    for that seed and moves on; other seeds still run.
    """
    rows: list[ReportRow] = []
    arm_order = [name for name, _ in cfg.arms]
    for seed in cfg.seeds:
        try:
            model, pool, test = generate_planted_benchmark(seed, cfg.plant, cfg.routing)
            store = build_reference_set(model, pool)
            for name, spec in cfg.arms:
                stats = evaluate_arm(model, test, store, spec)
                rows.append(
                    ReportRow(
                        arm=name,
                        seed=seed,
                        status="ok",
                        accuracy=stats["accuracy"],
                        mean_loss=stats["mean_loss"],
                        mean_steps_to_best=stats["mean_steps_to_best"],
                        mean_forward_passes=stats["mean_forward_passes"],
                        flop_proxy=flop_proxy(
                            spec,
                            cfg.routing,
                            model.d_model,
                            model.hidden_width,
                            model.n_classes,
                        ),
                        no_neighbor_rate=stats["no_neighbor_rate"],
                    )
                )
        except (PathwayError, NumericError, StoreError, ValueError) as exc:
            rows.append(
                ReportRow(
                    arm="*",
                    seed=seed,
                    status=f"error: {type(exc).__name__}: {exc}",
                    accuracy=0.0,
                    mean_loss=0.0,
                    mean_steps_to_best=0.0,
                    mean_forward_passes=0.0,
                    flop_proxy=0.0,
                    no_neighbor_rate=0.0,
                )
            )
    rows.sort(key=lambda r: (arm_order.index(r.arm) if r.arm in arm_order else -1, r.seed))
    summary = summarize(rows, arm_order)
    digest = config_hash(cfg)
    paths = write_reports(cfg, rows, summary, digest)
    return {"rows": rows, "summary": summary, "config_hash": digest, "paths": paths}


def summarize(rows: Sequence[ReportRow], arm_order: Sequence[str]) -> list[dict[str, Any]]:
    """Per-arm mean and population stddev over the seeds that completed."""
    out = []
    for name in arm_order:
        ok = [r for r in rows if r.arm == name and r.status == "ok"]
        if not ok:
            continue
        acc = np.asarray([r.accuracy for r in ok])
        out.append(
            {
                "arm": name,
                "seeds_ok": len(ok),
                "accuracy_mean": float(acc.mean()),
                "accuracy_std": float(acc.std()),
                "mean_loss": float(np.mean([r.mean_loss for r in ok])),
                "mean_forward_passes": float(np.mean([r.mean_forward_passes for r in ok])),
                "flop_proxy": float(np.mean([r.flop_proxy for r in ok])),
                "no_neighbor_rate": float(np.mean([r.no_neighbor_rate for r in ok])),
            }
        )
    return out


# ---------------------------------------------------------------------------
# analyses


def step_curve(
    model: MoEModel,
    testset: Sequence[tuple[np.ndarray, int]],
    store: ReferenceStore,
    spec: OptimizerSpec,
) -> tuple[list[float], FlipStats]:
    """Accuracy after every optimization step, plus correct/incorrect flips.

    Index 0 is the pre-optimization state; gradient-family methods only.
    """
    if spec.method not in ("oracle", "ngd"):
        raise PathwayError("step curves need a gradient method (oracle or ngd)")
    n = len(testset)
    base_ok = np.zeros(n, dtype=bool)
    step_ok = np.zeros((spec.steps, n), dtype=bool)
    for i, (x, y) in enumerate(testset):
        _, trace = run_optimizer(model, x, spec, store=store, y=y)
        base_ok[i] = trace.base_prediction == y
        preds = [r.prediction for r in trace.records]
        if not preds:  # no-neighbor fallback: prediction never changes
            preds = [trace.base_prediction] * spec.steps
        for t in range(spec.steps):
            step_ok[t, i] = preds[min(t, len(preds) - 1)] == y
    accuracies = [float(base_ok.mean())] + [float(step_ok[t].mean()) for t in range(spec.steps)]
    n_correct = [int(base_ok.sum())]
    n_i2c = [0]
    n_c2i = [0]
    for t in range(spec.steps):
        n_correct.append(int(step_ok[t].sum()))
        n_i2c.append(int((~base_ok & step_ok[t]).sum()))
        n_c2i.append(int((base_ok & ~step_ok[t]).sum()))
    return accuracies, FlipStats(n_correct=n_correct, n_i2c=n_i2c, n_c2i=n_c2i)


def expert_heatmap(
    model: MoEModel,
    testset: Sequence[tuple[np.ndarray, int]],
    pathways_before: Sequence[np.ndarray],
    pathways_after: Sequence[np.ndarray],
    layers: Sequence[int],
) -> dict[int, dict[str, np.ndarray]]:
    """Per-layer expert activation frequencies before/after optimization.

    An expert counts as activated for a token when it appears in the token's
    sparsified top-k; frequencies are fractions of all test tokens, so each
    layer's vector sums to top_k.
    """
    cfg = model.config
    if len(pathways_before) != len(testset) or len(pathways_after) != len(testset):
        raise PathwayError("pathway lists must align with the test set")

    def frequencies(pathways: Sequence[np.ndarray], layer: int) -> np.ndarray:
        counts = np.zeros(cfg.n_experts)
        total = 0
        for pw in pathways:
            for t in range(cfg.n_tokens):
                idx, _ = sparsify_topk(pw[t, layer], cfg.top_k)
                counts[idx] += 1.0
                total += 1
        return counts / total

    out = {}
    for layer in layers:
        if not 0 <= layer < cfg.n_layers:
            raise PathwayError(f"layer {layer} out of range")
        out[int(layer)] = {
            "before": frequencies(pathways_before, layer),
            "after": frequencies(pathways_after, layer),
        }
    return out


def coverage_analysis(
    model: MoEModel,
    testset: Sequence[tuple[np.ndarray, int]],
    store: ReferenceStore,
    spec: OptimizerSpec,
    n_values: Sequence[int],
) -> list[tuple[int, float]]:
    """How much of the unrestricted optimum the router's top-n already covers.

    Runs ``spec`` with the core-expert restriction lifted, takes each masked
    row's final top-k expert set, and reports the fraction of it found in the
    router's pre-optimization top-n, averaged over samples and masked rows.
    """
    cfg = model.config
    for n in n_values:
        if not cfg.top_k <= n <= cfg.n_experts:
            raise PathwayError(
                f"n={n} outside [{cfg.top_k}, {cfg.n_experts}]"
            )
    open_spec = replace(spec, mask=replace(spec.mask, core_experts=None))
    fractions = {int(n): [] for n in n_values}
    for x, y in testset:
        _, base = model.forward_base(x)
        mask = open_spec.mask.resolve(cfg, base)
        omega, _ = run_optimizer(model, x, open_spec, store=store, y=y)
        for t in mask.tokens:
            for l in mask.layers:
                final_set = set(sparsify_topk(omega[t, l], cfg.top_k)[0].tolist())
                base_order = np.argsort(-base[t, l], kind="stable")
                for n in n_values:
                    top_n = set(base_order[: int(n)].tolist())
                    fractions[int(n)].append(
                        len(final_set & top_n) / cfg.top_k
                    )
    return [(int(n), float(np.mean(fractions[int(n)]))) for n in n_values]


# ---------------------------------------------------------------------------
# config (de)serialization


def optimizer_spec_from_dict(doc: dict[str, Any]) -> OptimizerSpec:
    """Build an OptimizerSpec from the JSON config dialect used by the CLI."""
    known = {
        "method", "steps", "lr", "alpha_grid", "ms_iters", "ms_alpha",
        "kernel", "neighborhood", "mask",
    }
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown optimizer config keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "method" in doc:
        kwargs["method"] = doc["method"]
    if "steps" in doc:
        kwargs["steps"] = int(doc["steps"])
    if "lr" in doc:
        kwargs["lr_schedule"] = parse_lr_schedule(doc["lr"])
    if "alpha_grid" in doc:
        kwargs["alpha_grid"] = tuple(float(a) for a in doc["alpha_grid"])
    if "ms_iters" in doc:
        kwargs["meanshift_iters"] = int(doc["ms_iters"])
    if "ms_alpha" in doc:
        kwargs["meanshift_alpha"] = float(doc["ms_alpha"])
    if "kernel" in doc:
        k = dict(doc["kernel"])
        kwargs["kernel"] = KernelSpec(
            kind=k.pop("kind", "gaussian"),
            bandwidth=k.pop("bandwidth", None),
            degree=int(k.pop("degree", 2)),
            offset=float(k.pop("offset", 1.0)),
        )
        if k:
            raise ValueError(f"unknown kernel keys {sorted(k)}")
    if "neighborhood" in doc:
        nb = dict(doc["neighborhood"])
        kwargs["neighborhood"] = NeighborhoodSpec(
            kind=nb.pop("kind", "knn"),
            k=int(nb.pop("k", 3)),
            epsilon=float(nb.pop("epsilon", 0.5)),
            dedup_threshold=float(nb.pop("dedup_threshold", 0.95)),
        )
        if nb:
            raise ValueError(f"unknown neighborhood keys {sorted(nb)}")
    if "mask" in doc:
        m = dict(doc["mask"])
        tok_pos, tok_n = parse_span(m.pop("tokens", "last:1"))
        lay_pos, lay_n = parse_span(m.pop("layers", "last:3"))
        core = m.pop("core_experts", 8)
        kwargs["mask"] = MaskSpec(
            token_position=tok_pos,
            token_count=tok_n,
            layer_position=lay_pos,
            layer_count=lay_n,
            core_experts=None if core is None else int(core),
        )
        if m:
            raise ValueError(f"unknown mask keys {sorted(m)}")
    return OptimizerSpec(**kwargs)


def optimizer_spec_to_dict(spec: OptimizerSpec) -> dict[str, Any]:
    sched = spec.lr_schedule
    if sched.kind == "fixed":
        lr = f"fixed:{sched.base_lr}"
    elif sched.kind == "step_decay":
        lr = f"step:{sched.base_lr}:{sched.factor}:{sched.every}"
    else:
        lr = f"cosine:{sched.base_lr}:{sched.end_lr}"
    return {
        "method": spec.method,
        "steps": spec.steps,
        "lr": lr,
        "alpha_grid": list(spec.alpha_grid),
        "ms_iters": spec.meanshift_iters,
        "ms_alpha": spec.meanshift_alpha,
        "kernel": {
            "kind": spec.kernel.kind,
            "bandwidth": spec.kernel.bandwidth,
            "degree": spec.kernel.degree,
            "offset": spec.kernel.offset,
        },
        "neighborhood": {
            "kind": spec.neighborhood.kind,
            "k": spec.neighborhood.k,
            "epsilon": spec.neighborhood.epsilon,
            "dedup_threshold": spec.neighborhood.dedup_threshold,
        },
        "mask": {
            "tokens": f"{spec.mask.token_position}:{spec.mask.token_count}",
            "layers": f"{spec.mask.layer_position}:{spec.mask.layer_count}",
            "core_experts": spec.mask.core_experts,
        },
    }


def _plant_from_dict(doc: dict[str, Any]) -> PlantSpec:
    kwargs = dict(doc)
    if kwargs.get("noise_profile") is not None:
        kwargs["noise_profile"] = tuple(float(v) for v in kwargs["noise_profile"])
    return PlantSpec(**kwargs)


def experiment_config_from_dict(doc: dict[str, Any]) -> ExperimentConfig:
    """Parse the `run --config` JSON document."""
    known = {"seeds", "seed", "plant", "routing", "arms", "out_dir", "formats"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    if "seeds" in doc:
        seeds = tuple(int(s) for s in doc["seeds"])
    elif "seed" in doc:
        seeds = (int(doc["seed"]),)
    else:
        raise ValueError("config needs 'seeds' or 'seed'")
    plant = _plant_from_dict(doc.get("plant", {}))
    routing = RoutingConfig(**doc.get("routing", {}))
    arms = []
    for arm in doc.get("arms", []):
        arm = dict(arm)
        name = arm.pop("name", None) or arm.get("method", "arm")
        arms.append((str(name), optimizer_spec_from_dict(arm)))
    return ExperimentConfig(
        seeds=seeds,
        plant=plant,
        routing=routing,
        arms=tuple(arms),
        output_dir=str(doc.get("out_dir", "reports")),
        formats=tuple(doc.get("formats", ["csv", "json"])),
    )


def expand_ablation_grid(doc: dict[str, Any]) -> ExperimentConfig:
    """Expand a one-factor-at-a-time ablation grid into experiment arms.

    The grid document holds a ``base`` arm plus ``axes`` mapping dotted
    optimizer-config paths (e.g. ``mask.layers``, ``kernel.kind``, ``lr``)
    to value lists; each value patches the base arm into one extra arm named
    ``<path>=<value>``.  The unpatched base arm is always included.
    """
    known = {"seeds", "seed", "plant", "routing", "base", "axes", "out_dir", "formats"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    base = dict(doc.get("base", {}))
    arms: list[dict[str, Any]] = [{"name": "base", **base}]
    for path, values in doc.get("axes", {}).items():
        head, _, tail = path.partition(".")
        for value in values:
            patched = json.loads(json.dumps(base))  # deep copy of plain JSON
            if tail:
                patched.setdefault(head, {})
                patched[head][tail] = value
            else:
                patched[head] = value
            patched["name"] = f"{path}={value}"
            arms.append(patched)
    run_doc = {
        k: doc[k]
        for k in ("seeds", "seed", "plant", "routing", "out_dir", "formats")
        if k in doc
    }
    run_doc["arms"] = arms
    return experiment_config_from_dict(run_doc)


def _config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    plant = {
        k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg.plant).items()
    }
    return {
        "seeds": list(cfg.seeds),
        "plant": plant,
        "routing": {
            "n_tokens": cfg.routing.n_tokens,
            "n_layers": cfg.routing.n_layers,
            "n_experts": cfg.routing.n_experts,
            "top_k": cfg.routing.top_k,
        },
        "arms": [
            {"name": name, **optimizer_spec_to_dict(spec)} for name, spec in cfg.arms
        ],
        "formats": list(cfg.formats),
    }


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable digest of everything that affects the report contents."""
    return sha256_hex(canonical_json(_config_to_dict(cfg)).encode("utf-8"))[:16]


# ---------------------------------------------------------------------------
# report writers


def _format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv_table(
    path: Path,
    comment: str,
    header: Sequence[str],
    rows: Sequence[Sequence[Any]],
) -> None:
    """RFC-4180 CSV with a single leading ``#`` comment line."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {comment}\r\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def write_reports(
    cfg: ExperimentConfig,
    rows: Sequence[ReportRow],
    summary: Sequence[dict[str, Any]],
    digest: str,
) -> list[str]:
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    comment = f"config_hash={digest} seeds={','.join(str(s) for s in cfg.seeds)}"
    paths = []
    if "csv" in cfg.formats:
        report_path = out_dir / "report.csv"
        write_csv_table(
            report_path,
            comment,
            (
                "arm", "seed", "status", "accuracy", "mean_loss",
                "mean_steps_to_best", "mean_forward_passes", "flop_proxy",
                "no_neighbor_rate",
            ),
            [
                (
                    r.arm, r.seed, r.status, r.accuracy, r.mean_loss,
                    r.mean_steps_to_best, r.mean_forward_passes, r.flop_proxy,
                    r.no_neighbor_rate,
                )
                for r in rows
            ],
        )
        paths.append(str(report_path))
        summary_path = out_dir / "summary.csv"
        write_csv_table(
            summary_path,
            comment,
            (
                "arm", "seeds_ok", "accuracy_mean", "accuracy_std", "mean_loss",
                "mean_forward_passes", "flop_proxy", "no_neighbor_rate",
            ),
            [
                (
                    s["arm"], s["seeds_ok"], s["accuracy_mean"], s["accuracy_std"],
                    s["mean_loss"], s["mean_forward_passes"], s["flop_proxy"],
                    s["no_neighbor_rate"],
                )
                for s in summary
            ],
        )
        paths.append(str(summary_path))
    if "json" in cfg.formats:
        doc = {
            "config_hash": digest,
            "seeds": list(cfg.seeds),
            "config": _config_to_dict(cfg),
            "rows": [vars(r) for r in rows],
            "summary": list(summary),
        }
        json_path = out_dir / "report.json"
        json_path.write_text(canonical_json(doc) + "\n", encoding="utf-8")
        paths.append(str(json_path))
    return paths
