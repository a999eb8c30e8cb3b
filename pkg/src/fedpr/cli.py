"""Command-line driver: config parsing, experiment execution, and
deterministic artifact emission (per-round CSV plus a JSON summary).

Subcommands: run, compare, partition-report, selftest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import PartitionSpec
from .errors import ConfigError
from .evaluation import last_k_mean
from .federation import (
    FederationConfig,
    RoundRecord,
    prepare_partition,
    run_experiment,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

CSV_HEADER = "round,mean_train_loss,acc_softmax,acc_prototype,wall_time_ms"

# External key <-> FederationConfig field. "lambda" is a Python keyword,
# so the dataclass field is "lam"; files and flags use the plain name.
_KEY_TO_FIELD = {
    "num_clients": "num_clients",
    "rounds": "rounds",
    "local_epochs": "local_epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "momentum": "momentum",
    "dirichlet_alpha": "dirichlet_alpha",
    "lambda": "lam",
    "strategy": "strategy",
    "model": "model",
    "seed": "master_seed",
    "dataset": "dataset",
    "data_dir": "data_dir",
    "subsample_n": "subsample_n",
    "agg_denominator": "agg_denominator",
    "support_weighted_protos": "support_weighted_protos",
    "proto_loss_form": "proto_loss_form",
    "eval_inference": "eval_inference",
    "synth_classes": "synth_classes",
    "synth_dim": "synth_dim",
    "synth_per_class": "synth_per_class",
    "synth_test_per_class": "synth_test_per_class",
    "synth_spread": "synth_spread",
}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}
_FIELD_TYPES = {f.name: f.type for f in fields(FederationConfig)}


@dataclass
class RunArtifact:
    """Everything one run emits: resolved config, records, summary, provenance."""

    config: FederationConfig
    records: list[RoundRecord]
    summary: dict
    master_seed: int
    config_hash: str
    format_version: int = FORMAT_VERSION


def _coerce(key: str, raw: str):
    """Parse a config-file string into the field's declared type."""
    target = _FIELD_TYPES[_KEY_TO_FIELD[key]]
    if target in ("int", int):
        return int(raw)
    if target in ("float", float):
        return float(raw)
    if target in ("bool", bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: cannot parse {raw!r} as a boolean")
    return raw.strip()


def read_config_file(path) -> dict:
    """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(key, raw.strip())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from exc
    return values


def parse_config(path=None, overrides=None) -> FederationConfig:
    """Resolve a configuration with precedence flags > file > defaults."""
    merged = {}
    explicit = set()
    if path is not None:
        file_values = read_config_file(path)
        merged.update(file_values)
        explicit.update(file_values)
    if overrides:
        for key, value in overrides.items():
            if key not in _KEY_TO_FIELD:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
            explicit.add(key)

    strategy = merged.get("strategy", FederationConfig.strategy)
    if strategy == "fedavg":
        if "lambda" in explicit and merged["lambda"] != 0:
            raise ConfigError("lambda: strategy=fedavg forces lambda=0")
        merged["lambda"] = 0.0
        if "eval_inference" in explicit and merged["eval_inference"] != "softmax":
            raise ConfigError("eval_inference: fedavg supports softmax inference only")
        merged["eval_inference"] = "softmax"
    elif strategy == "fedpr" and "lambda" in explicit and merged["lambda"] == 0:
        raise ConfigError(
            "lambda: fedpr with lambda=0 is the fedavg baseline; use strategy=fedavg"
        )

    kwargs = {_KEY_TO_FIELD[k]: v for k, v in merged.items()}
    try:
        cfg = FederationConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def config_external_dict(cfg: FederationConfig) -> dict:
    """Resolved config under external key names, in canonical key order."""
    return {key: getattr(cfg, field) for key, field in _KEY_TO_FIELD.items()}


def config_hash(cfg: FederationConfig) -> str:
    """Platform-stable hash of the fully resolved configuration."""
    canon = "\n".join(
        f"{key}={_canonical_value(value)}" for key, value in sorted(config_external_dict(cfg).items())
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _canonical_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def write_round_csv(records, path) -> None:
    """One row per round, 6 fractional digits, LF endings.

    Absent metrics render as empty fields. The wall_time_ms column is
    always left empty: emitted artifacts are byte-reproducible functions
    of (config, seed), which a timing measurement can never be. Timings
    stay on the in-memory records and in the progress log.
    """
    lines = [CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.round_index},{_fmt(r.mean_train_loss)},"
            f"{_fmt(r.test_accuracy_softmax)},{_fmt(r.test_accuracy_prototype)},"
        )
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_round_csv(path) -> list[RoundRecord]:
    """Inverse of write_round_csv (wall time comes back as None)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ConfigError(f"{path}: unexpected CSV header")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 5:
            raise ConfigError(f"{path}: malformed row {line!r}")
        records.append(
            RoundRecord(
                int(parts[0]),
                float(parts[1]),
                float(parts[2]) if parts[2] else None,
                float(parts[3]) if parts[3] else None,
                float(parts[4]) if parts[4] else None,
            )
        )
    return records


def _metric_block(records, k: int) -> dict:
    """Last-k means plus final-round values for every populated field."""
    block = {"k": k, "last_k": {}, "final_round": {}}
    final = records[-1]
    for field_name, out_name in (
        ("mean_train_loss", "mean_train_loss"),
        ("test_accuracy_softmax", "acc_softmax"),
        ("test_accuracy_prototype", "acc_prototype"),
    ):
        if all(getattr(r, field_name) is not None for r in records[-k:]):
            block["last_k"][out_name] = last_k_mean(records, k, field_name)
        value = getattr(final, field_name)
        if value is not None:
            block["final_round"][out_name] = value
    block["final_round"]["round"] = final.round_index
    return block


def build_artifact(cfg: FederationConfig, records) -> RunArtifact:
    k = min(10, len(records))
    summary = {
        "format_version": FORMAT_VERSION,
        "mode": "run",
        "config": config_external_dict(cfg),
        "config_hash": config_hash(cfg),
        "master_seed": cfg.master_seed,
        "rounds_completed": len(records),
        **_metric_block(records, k),
    }
    return RunArtifact(cfg, records, summary, cfg.master_seed, config_hash(cfg))


def write_summary(artifact: RunArtifact, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        json.dump(artifact.summary, f, indent=2)
        f.write("\n")


def natural_accuracy_field(cfg: FederationConfig) -> str:
    """The inference path a strategy is scored on by default."""
    if cfg.strategy == "fedpr" and cfg.eval_inference in ("prototype", "both"):
        return "test_accuracy_prototype"
    return "test_accuracy_softmax"


def build_compare_summary(
    cfg_avg: FederationConfig,
    records_avg,
    cfg_pr: FederationConfig,
    records_pr,
) -> dict:
    k = min(10, len(records_avg), len(records_pr))
    field_avg = natural_accuracy_field(cfg_avg)
    field_pr = natural_accuracy_field(cfg_pr)
    last_avg = last_k_mean(records_avg, k, field_avg)
    last_pr = last_k_mean(records_pr, k, field_pr)
    delta = last_pr - last_avg
    return {
        "format_version": FORMAT_VERSION,
        "mode": "compare",
        "master_seed": cfg_pr.master_seed,
        "fedavg": {
            "config": config_external_dict(cfg_avg),
            "config_hash": config_hash(cfg_avg),
            **_metric_block(records_avg, k),
        },
        "fedpr": {
            "config": config_external_dict(cfg_pr),
            "config_hash": config_hash(cfg_pr),
            **_metric_block(records_pr, k),
        },
        "delta_fields": {"fedpr": field_pr, "fedavg": field_avg},
        # Absolute difference of last-k mean accuracies (fraction and
        # percentage points) plus the relative improvement, kept separate
        # because "x% higher" often means the relative form.
        "delta_last10": delta,
        "delta_last10_pp": 100.0 * delta,
        "delta_last10_relative_pct": 100.0 * delta / last_avg if last_avg else None,
    }


def write_compare_csv(records_avg, records_pr, path) -> None:
    lines = ["round,fedavg_acc_softmax,fedpr_acc_softmax,fedpr_acc_prototype,delta_softmax"]
    for r_avg, r_pr in zip(records_avg, records_pr):
        delta = None
        if r_avg.test_accuracy_softmax is not None and r_pr.test_accuracy_softmax is not None:
            delta = r_pr.test_accuracy_softmax - r_avg.test_accuracy_softmax
        lines.append(
            f"{r_avg.round_index},{_fmt(r_avg.test_accuracy_softmax)},"
            f"{_fmt(r_pr.test_accuracy_softmax)},{_fmt(r_pr.test_accuracy_prototype)},"
            f"{_fmt(delta)}"
        )
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _progress(record: RoundRecord) -> None:
    parts = [f"round {record.round_index}", f"loss={record.mean_train_loss:.4f}"]
    if record.test_accuracy_softmax is not None:
        parts.append(f"acc_softmax={record.test_accuracy_softmax:.4f}")
    if record.test_accuracy_prototype is not None:
        parts.append(f"acc_proto={record.test_accuracy_prototype:.4f}")
    if record.wall_time_ms is not None:
        parts.append(f"({record.wall_time_ms:.0f} ms)")
    log.info(" ".join(parts))


def _cmd_run(args) -> int:
    cfg = parse_config(args.config, _flag_overrides(args))
    records = run_experiment(cfg, progress=_progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifact = build_artifact(cfg, records)
    write_round_csv(records, out / "rounds.csv")
    write_summary(artifact, out / "summary.json")
    last = artifact.summary["last_k"]
    print(f"run complete: {len(records)} rounds, last-{artifact.summary['k']} " + ", ".join(f"{k}={v:.4f}" for k, v in last.items()))
    print(f"artifacts: {out / 'rounds.csv'}, {out / 'summary.json'}")
    return 0


def _cmd_compare(args) -> int:
    overrides = _flag_overrides(args)
    if "strategy" in overrides:
        raise ConfigError("strategy: compare always runs fedavg and fedpr; do not set it")
    base = dict(overrides)
    base.pop("lambda", None)

    cfg_pr = parse_config(args.config, {**overrides, "strategy": "fedpr"})
    # The baseline leg pins lambda/eval explicitly so a config file written
    # for fedpr (nonzero lambda, prototype eval) still parses.
    cfg_avg = parse_config(
        args.config,
        {**base, "strategy": "fedavg", "lambda": 0.0, "eval_inference": "softmax"},
    )

    log.info("compare: running fedavg (seed %d)", cfg_avg.master_seed)
    records_avg = run_experiment(cfg_avg, progress=_progress)
    log.info("compare: running fedpr (seed %d)", cfg_pr.master_seed)
    records_pr = run_experiment(cfg_pr, progress=_progress)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_round_csv(records_avg, out / "rounds_fedavg.csv")
    write_round_csv(records_pr, out / "rounds_fedpr.csv")
    write_compare_csv(records_avg, records_pr, out / "compare.csv")
    summary = build_compare_summary(cfg_avg, records_avg, cfg_pr, records_pr)
    with open(out / "summary.json", "w", newline="", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    print(
        f"compare complete: fedpr-fedavg delta over last {summary['fedpr']['k']} rounds = "
        f"{summary['delta_last10_pp']:+.2f} pp "
        f"({summary['delta_last10_relative_pct']:+.2f}% relative)"
    )
    print(f"artifacts in {out}/")
    return 0


def _cmd_partition_report(args) -> int:
    cfg = parse_config(args.config, _flag_overrides(args))
    train, _, shards = prepare_partition(cfg)
    spec = PartitionSpec.from_shards(
        shards, train.labels, train.num_classes, cfg.dirichlet_alpha, cfg.master_seed
    )
    counts = spec.counts
    lines = ["client,class,count"]
    for client in range(counts.shape[0]):
        for cls in range(counts.shape[1]):
            lines.append(f"{client},{cls},{counts[client, cls]}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "partition.csv").write_text(text, encoding="utf-8", newline="")
        print(f"partition report: {out / 'partition.csv'}")
    else:
        sys.stdout.write(text)
    return 0


# --- selftest checks -------------------------------------------------------


def _selftest_gradients() -> str | None:
    from .nn import build_mlp2, finite_diff_gradient, loss_and_grad

    rng = np.random.default_rng(20240001)
    for trial in range(5):
        in_dim, hidden, classes = 6, 10, 3
        params = build_mlp2(rng, in_dim, classes, hidden=hidden)
        batch = rng.standard_normal((4, in_dim))
        labels = rng.integers(0, classes, size=4)
        protos = {c: rng.standard_normal(hidden) for c in range(classes - 1)}
        lam = [0.0, 0.5, 1.0][trial % 3]
        report = loss_and_grad(params, batch, labels, protos, lam)
        fd = finite_diff_gradient(
            lambda p: loss_and_grad(p, batch, labels, protos, lam).total_loss, params
        )
        for (a_w, a_b), (f_w, f_b) in zip(report.grads, fd):
            for a, f in ((a_w, f_w), (a_b, f_b)):
                rel = np.abs(a - f) / np.maximum.reduce([np.abs(a), np.abs(f), np.full_like(a, 1e-6)])
                if rel.max() >= 1e-4:
                    return f"trial {trial}: max relative gradient error {rel.max():.2e}"
    return None


def _selftest_aggregation() -> str | None:
    from .federation import server_weighted_average
    from .nn import LayerParams, ModelParams
    from .prototypes import Prototype, aggregate_global_prototypes

    rng = np.random.default_rng(20240002)
    for trial in range(20):
        n_clients = int(rng.integers(1, 5))
        dim = int(rng.integers(2, 6))
        per_client = [
            [Prototype(int(c), rng.standard_normal(dim), int(rng.integers(1, 9)))
             for c in rng.choice(5, size=rng.integers(1, 4), replace=False)]
            for _ in range(n_clients)
        ]
        agg = aggregate_global_prototypes(per_client)
        for cls in agg.classes():
            vecs = [p.vector for protos in per_client for p in protos if p.class_id == cls]
            expect = np.sum(vecs, axis=0) / len(vecs)
            if np.abs(agg.entries[cls].vector - expect).max() > 1e-12:
                return f"trial {trial}: prototype mean mismatch for class {cls}"

        models = []
        weights = []
        for _ in range(n_clients):
            w = rng.standard_normal((3, 2))
            b = rng.standard_normal(3)
            models.append(ModelParams([LayerParams("fc", "dense", w, b)], 1))
            weights.append(float(rng.integers(1, 10)))
        avg = server_weighted_average(list(zip(models, weights)))
        total = sum(weights)
        expect_w = sum((wt / total) * m.layers[0].weight for m, wt in zip(models, weights))
        if np.abs(avg.layers[0].weight - expect_w).max() > 1e-12:
            return f"trial {trial}: weighted model average mismatch"
    return None


def _selftest_fedavg_identity() -> str | None:
    cfg_avg = FederationConfig(
        num_clients=3, rounds=2, dataset="synthetic", model="mlp2", strategy="fedavg",
        lam=0.0, eval_inference="softmax", subsample_n=90, synth_classes=3, synth_dim=8,
        synth_per_class=40, synth_test_per_class=10, dirichlet_alpha=0.5, master_seed=7,
    )
    cfg_pr0 = cfg_avg.replace(strategy="fedpr", eval_inference="softmax")
    rec_avg = run_experiment(cfg_avg)
    rec_pr0 = run_experiment(cfg_pr0)
    for a, b in zip(rec_avg, rec_pr0):
        if (a.mean_train_loss, a.test_accuracy_softmax) != (b.mean_train_loss, b.test_accuracy_softmax):
            return f"round {a.round_index}: fedpr(lambda=0) != fedavg"
    return None


def _selftest_partition() -> str | None:
    from .data import dirichlet_partition

    rng = np.random.default_rng(20240003)
    labels = rng.integers(0, 10, size=500)
    for seed in range(3):
        shards = dirichlet_partition(labels, 8, 0.3, seed)
        merged = np.concatenate([s.indices for s in shards])
        if len(merged) != len(labels) or len(np.unique(merged)) != len(labels):
            return f"seed {seed}: partition not a disjoint cover"
    return None


def _cmd_selftest(args) -> int:
    checks = [
        ("gradient-check", _selftest_gradients),
        ("aggregation-oracles", _selftest_aggregation),
        ("fedavg-identity", _selftest_fedavg_identity),
        ("partition-completeness", _selftest_partition),
    ]
    failed = False
    for name, fn in checks:
        detail = fn()
        if detail is None:
            print(f"selftest PASS {name}")
        else:
            print(f"selftest FAIL {name}: {detail}")
            failed = True
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------


def _add_common_flags(sub, out_default="out") -> None:
    sub.add_argument("--config", metavar="PATH", default=None, help="key = value config file")
    sub.add_argument("--strategy", choices=["fedavg", "fedpr"], default=None)
    sub.add_argument("--dataset", choices=["mnist", "fashion", "synthetic"], default=None)
    sub.add_argument("--alpha", type=float, default=None, help="Dirichlet concentration")
    sub.add_argument("--lambda", dest="lam", type=float, default=None, help="prototype loss weight")
    sub.add_argument("--rounds", type=int, default=None)
    sub.add_argument("--epochs", type=int, default=None, help="local epochs per round")
    sub.add_argument("--batch", type=int, default=None, help="local batch size")
    sub.add_argument("--lr", type=float, default=None, help="learning rate")
    sub.add_argument("--clients", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None, help="master seed")
    sub.add_argument("--model", choices=["cnn4", "mlp2"], default=None)
    sub.add_argument("--out", metavar="DIR", default=out_default, help="artifact directory")


_FLAG_TO_KEY = {
    "strategy": "strategy",
    "dataset": "dataset",
    "alpha": "dirichlet_alpha",
    "lam": "lambda",
    "rounds": "rounds",
    "epochs": "local_epochs",
    "batch": "batch_size",
    "lr": "learning_rate",
    "clients": "num_clients",
    "seed": "seed",
    "model": "model",
}


def _flag_overrides(args) -> dict:
    overrides = {}
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedpr",
        description="Deterministic federated-learning simulator (FedAvg / FedPR).",
    )
    parser.add_argument("--version", action="version", version=f"fedpr {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="run one experiment and write rounds.csv + summary.json")
    _add_common_flags(run)
    run.set_defaults(func=_cmd_run)

    compare = subs.add_parser("compare", help="run fedavg and fedpr on the same seed and diff them")
    _add_common_flags(compare)
    compare.set_defaults(func=_cmd_compare)

    report = subs.add_parser("partition-report", help="emit the client/class counts matrix")
    _add_common_flags(report, out_default=None)
    report.set_defaults(func=_cmd_partition_report)

    selftest = subs.add_parser("selftest", help="run built-in gradient/oracle checks")
    selftest.set_defaults(func=_cmd_selftest)

    return parser


def run_cli(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
