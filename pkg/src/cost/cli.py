"""Command-line pipeline driver.

Subcommands: ``synth``, ``train-tokenizer``, ``assign``, ``train-generator``,
``evaluate``, ``sweep``, ``report``. One JSON config file describes a run;
flags override it. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric failure.

Every stage derives its randomness from the single top-level seed via fixed
labels, so stages can be rerun independently and reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, evaluator, generator, tokenizer
from .errors import CostError, DataError, NumericError, UsageError
from .seeding import derive_seed

_EXIT_CODES = [(UsageError, 1), (DataError, 2), (NumericError, 3)]

_SWEEP_AXES = ("codebook_size", "num_levels", "latent_dim", "temperature")
_AXIS_LABELS = {
    "codebook_size": "K",
    "num_levels": "M",
    "latent_dim": "d",
    "temperature": "tau",
}


@dataclass
class RunConfig:
    out_dir: str = "runs/out"
    seed: int = 0
    embeddings: str | None = None
    sequences: str | None = None
    synthetic: dict | None = None
    tokenizer: tokenizer.TokenizerConfig = field(default_factory=tokenizer.TokenizerConfig)
    generator: generator.GeneratorConfig = field(default_factory=generator.GeneratorConfig)
    eval_k: list[int] = field(default_factory=lambda: [5, 10, 20, 40])
    sweep: dict[str, list] | None = None


def _check_keys(raw: dict, allowed: set[str], context: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise UsageError(
            f"unknown key(s) {sorted(unknown)} in {context}; allowed: {sorted(allowed)}"
        )


def _dataclass_from(raw: dict, cls, context: str, banned: tuple[str, ...] = ("seed",)):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in banned:
        if key in raw:
            raise UsageError(
                f"{context}.{key} is not configurable; stage seeds derive from the "
                "top-level seed"
            )
    _check_keys(raw, names - set(banned), context)
    kwargs = dict(raw)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list) and isinstance(
            getattr(cls(), f.name, None), tuple
        ):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    _check_keys(raw, allowed, str(path))
    cfg = RunConfig()
    cfg.out_dir = str(raw.get("out_dir", cfg.out_dir))
    cfg.seed = int(raw.get("seed", cfg.seed))
    cfg.embeddings = raw.get("embeddings")
    cfg.sequences = raw.get("sequences")
    cfg.synthetic = raw.get("synthetic")
    if "tokenizer" in raw:
        cfg.tokenizer = _dataclass_from(raw["tokenizer"], tokenizer.TokenizerConfig, "tokenizer")
    if "generator" in raw:
        cfg.generator = _dataclass_from(raw["generator"], generator.GeneratorConfig, "generator")
    if "eval_k" in raw:
        cfg.eval_k = [int(k) for k in raw["eval_k"]]
        if not cfg.eval_k or any(k < 1 for k in cfg.eval_k):
            raise UsageError("eval_k must be a non-empty list of positive cutoffs")
    if "sweep" in raw and raw["sweep"] is not None:
        sweep = raw["sweep"]
        _check_keys(sweep, set(_SWEEP_AXES), "sweep")
        cfg.sweep = {k: list(v) for k, v in sweep.items()}
    return cfg


# ---------------------------------------------------------------------------
# Artifact paths and helpers
# ---------------------------------------------------------------------------


@dataclass
class RunPaths:
    out: Path

    @property
    def data_dir(self) -> Path:
        return self.out / "data"

    @property
    def embeddings(self) -> Path:
        return self.data_dir / "embeddings.cste"

    @property
    def sequences(self) -> Path:
        return self.data_dir / "sequences.tsv"

    @property
    def tokenizer_dir(self) -> Path:
        return self.out / "tokenizer"

    @property
    def tokenizer_trace(self) -> Path:
        return self.out / "tokenizer_trace.csv"

    @property
    def token_map(self) -> Path:
        return self.out / "token_map.tsv"

    @property
    def generator_dir(self) -> Path:
        return self.out / "generator"

    @property
    def generator_trace(self) -> Path:
        return self.out / "generator_trace.csv"

    @property
    def eval_dir(self) -> Path:
        return self.out / "eval"


def _resolve_embeddings(cfg: RunConfig, paths: RunPaths) -> Path:
    p = Path(cfg.embeddings) if cfg.embeddings else paths.embeddings
    if not p.exists():
        raise DataError(
            f"missing artifact: embeddings file {p}; run `cost synth` or point "
            "`embeddings` at an existing file"
        )
    return p


def _resolve_sequences(cfg: RunConfig, paths: RunPaths) -> Path:
    p = Path(cfg.sequences) if cfg.sequences else paths.sequences
    if not p.exists():
        raise DataError(
            f"missing artifact: sequences file {p}; run `cost synth` or point "
            "`sequences` at an existing file"
        )
    return p


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    _write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _stage_synth(cfg: RunConfig, paths: RunPaths) -> None:
    if cfg.synthetic is None:
        raise UsageError("config has no `synthetic` block; nothing to generate")
    raw = dict(cfg.synthetic)
    kind = raw.pop("kind", "clusters")
    seed = derive_seed(cfg.seed, "synth")
    if kind == "clusters":
        spec = _dataclass_from(raw, dataio.SyntheticSpec, "synthetic")
        spec.seed = seed
        items, labels = dataio.synth_clusters(spec)
        sequences = dataio.synth_sequences(spec, labels)
        summary = {
            "kind": kind,
            "n_items": spec.n_items,
            "n_clusters": spec.n_clusters,
            "n_users": spec.n_users,
            "d_in": spec.d_in,
        }
    elif kind == "successor":
        spec = _dataclass_from(raw, dataio.SuccessorSpec, "synthetic")
        spec.seed = seed
        items, sequences = dataio.synth_successor(spec)
        summary = {
            "kind": kind,
            "n_items": spec.n_items,
            "cycle_len": spec.cycle_len,
            "n_users": spec.n_users,
            "d_in": spec.d_in,
        }
    else:
        raise UsageError(f"unknown synthetic kind {kind!r}; use clusters or successor")
    paths.data_dir.mkdir(parents=True, exist_ok=True)
    dataio.save_embeddings(paths.embeddings, items)
    dataio.save_sequences(paths.sequences, sequences)
    _write_text(
        paths.data_dir / "synth_summary.json",
        json.dumps(summary, sort_keys=True, indent=2) + "\n",
    )
    print(f"wrote {len(items)} embeddings and {len(sequences)} sequences to {paths.data_dir}")


def _tokenizer_trace_csv(trace: tokenizer.FitTrace, num_levels: int) -> tuple[list[str], list[list]]:
    header = ["epoch", "step", "loss_total", "loss_mse", "loss_rq", "loss_cl"] + [
        f"utilization_l{i + 1}" for i in range(num_levels)
    ]
    rows = []
    for rec in trace.steps:
        rows.append(
            [rec.epoch, rec.step, rec.loss_total, rec.loss_mse, rec.loss_rq, rec.loss_cl]
            + list(rec.utilization)
        )
    return header, rows


def _stage_train_tokenizer(cfg: RunConfig, paths: RunPaths) -> None:
    items = dataio.load_embeddings(_resolve_embeddings(cfg, paths))
    tok_cfg = dataclasses.replace(cfg.tokenizer, seed=derive_seed(cfg.seed, "tokenizer"))
    model, trace = tokenizer.fit(items, tok_cfg)
    tokenizer.save_tokenizer(paths.tokenizer_dir, model)
    header, rows = _tokenizer_trace_csv(trace, tok_cfg.num_levels)
    _write_csv(paths.tokenizer_trace, header, rows)
    _write_text(
        paths.out / "tokenizer_summary.json",
        json.dumps(trace.summary, sort_keys=True, indent=2) + "\n",
    )
    print(
        f"tokenizer trained: first epoch {trace.epoch_means[0]:.5f} -> "
        f"final epoch {trace.epoch_means[-1]:.5f}; "
        f"level-1 utilization {trace.summary['dataset_utilization'][0]:.3f}; "
        f"prefix-agreement@1 {trace.summary['prefix_agreement_at_1']:.3f}"
    )


def _stage_assign(cfg: RunConfig, paths: RunPaths, random_baseline: bool = False) -> None:
    items = dataio.load_embeddings(_resolve_embeddings(cfg, paths))
    if random_baseline:
        tokens = tokenizer.random_tokens(
            [it.item_id for it in items],
            num_levels=cfg.tokenizer.num_levels,
            codebook_size=cfg.tokenizer.codebook_size,
            seed=derive_seed(cfg.seed, "baseline"),
        )
    else:
        if not paths.tokenizer_dir.exists():
            raise DataError(
                f"missing artifact: tokenizer checkpoint {paths.tokenizer_dir}; "
                "run `cost train-tokenizer` first"
            )
        model = tokenizer.load_tokenizer(paths.tokenizer_dir)
        tokens = tokenizer.assign_tokens(model, items)
    dataio.save_token_map(paths.token_map, tokens)
    collisions = sum(1 for t in tokens.values() if t.disambig > 0)
    print(f"wrote {len(tokens)} token tuples ({collisions} needed disambiguation)")


def _stage_train_generator(cfg: RunConfig, paths: RunPaths) -> None:
    if not paths.token_map.exists():
        raise DataError(
            f"missing artifact: token map {paths.token_map}; run `cost assign` first"
        )
    sequences, rejected = dataio.load_sequences(_resolve_sequences(cfg, paths))
    if rejected:
        print(f"note: {rejected} sequences shorter than 3 were rejected", file=sys.stderr)
    tokens = dataio.load_token_map(paths.token_map)
    gen_cfg = dataclasses.replace(cfg.generator, seed=derive_seed(cfg.seed, "generator"))
    if gen_cfg.codebook_size is None:
        gen_cfg.codebook_size = cfg.tokenizer.codebook_size
    model, trace = generator.train_generator(sequences, tokens, gen_cfg)
    generator.save_generator(paths.generator_dir, model)
    rows = [[r.epoch, r.step, r.loss, r.token_accuracy] for r in trace.steps]
    _write_csv(paths.generator_trace, ["epoch", "step", "loss", "token_accuracy"], rows)
    print(
        f"generator trained on {trace.summary['pairs']} pairs: "
        f"final epoch loss {trace.epoch_means[-1]:.5f}, "
        f"token accuracy {trace.summary['final_token_accuracy']:.3f}"
    )


def _stage_evaluate(cfg: RunConfig, paths: RunPaths) -> evaluator.EvalReport:
    if not paths.generator_dir.exists():
        raise DataError(
            f"missing artifact: generator checkpoint {paths.generator_dir}; "
            "run `cost train-generator` first"
        )
    if not paths.token_map.exists():
        raise DataError(
            f"missing artifact: token map {paths.token_map}; run `cost assign` first"
        )
    sequences, _ = dataio.load_sequences(_resolve_sequences(cfg, paths))
    tokens = dataio.load_token_map(paths.token_map)
    model = generator.load_generator(paths.generator_dir)
    table = generator.TokenItemTable(tokens)
    eval_split = evaluator.split(sequences)
    if not eval_split.users:
        raise DataError("no users with sequences long enough to evaluate")
    k_max = max(cfg.eval_k)
    rankings: dict[str, list[str]] = {}
    targets: dict[str, str] = {}
    lines = []
    for user in eval_split.users:
        scored = generator.retrieve(model, user.test_history, table, k=k_max)
        rankings[user.user_id] = [item for item, _ in scored]
        targets[user.user_id] = user.test_target
        rendered = " ".join(f"{item}:{lp:.6f}" for item, lp in scored)
        lines.append(f"{user.user_id}\t{rendered}")
    report = evaluator.evaluate_rankings(rankings, targets, cfg.eval_k)
    report.extra["rejected_short"] = eval_split.rejected_short
    paths.eval_dir.mkdir(parents=True, exist_ok=True)
    report.save(paths.eval_dir / "report.json")
    _write_text(paths.eval_dir / "report.txt", report.render_table() + "\n")
    _write_text(paths.eval_dir / "retrieval.tsv", "\n".join(lines) + "\n")
    print(report.render_table())
    return report


def _cell_name(axes: list[str], values: tuple) -> str:
    return "_".join(f"{_AXIS_LABELS[a]}{v}" for a, v in zip(axes, values))


def _run_sweep_cell(payload: tuple) -> dict:
    """Run one sweep cell end to end; returns a summary row. Top-level so it
    can run in a worker process."""
    cfg_dict, axes, values, out_dir, data_dir = payload
    cfg = _config_from_dict(cfg_dict)
    cfg.out_dir = out_dir
    cfg.embeddings = str(Path(data_dir) / "embeddings.cste")
    cfg.sequences = str(Path(data_dir) / "sequences.tsv")
    for axis, value in zip(axes, values):
        cfg.tokenizer = dataclasses.replace(cfg.tokenizer, **{axis: value})
    row = {_AXIS_LABELS[a]: v for a, v in zip(axes, values)}
    paths = RunPaths(Path(cfg.out_dir))
    try:
        _stage_train_tokenizer(cfg, paths)
        _stage_assign(cfg, paths)
        _stage_train_generator(cfg, paths)
        report = _stage_evaluate(cfg, paths)
        for k in report.k_values:
            row[f"recall@{k}"] = report.recall[k]
            row[f"ndcg@{k}"] = report.ndcg[k]
        row["status"] = "ok"
    except CostError as exc:
        row["status"] = f"error:{type(exc).__name__}:{exc}"
    return row


def _config_to_dict(cfg: RunConfig) -> dict:
    return {
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
        "embeddings": cfg.embeddings,
        "sequences": cfg.sequences,
        "synthetic": cfg.synthetic,
        "tokenizer": dataclasses.asdict(cfg.tokenizer),
        "generator": dataclasses.asdict(cfg.generator),
        "eval_k": list(cfg.eval_k),
        "sweep": cfg.sweep,
    }


def _config_from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    cfg.out_dir = raw["out_dir"]
    cfg.seed = raw["seed"]
    cfg.embeddings = raw["embeddings"]
    cfg.sequences = raw["sequences"]
    cfg.synthetic = raw["synthetic"]
    tok = dict(raw["tokenizer"])
    tok["encoder_hidden"] = tuple(tok["encoder_hidden"])
    cfg.tokenizer = tokenizer.TokenizerConfig(**tok)
    cfg.generator = generator.GeneratorConfig(**raw["generator"])
    cfg.eval_k = list(raw["eval_k"])
    cfg.sweep = raw["sweep"]
    return cfg


def _stage_sweep(cfg: RunConfig, paths: RunPaths) -> None:
    if not cfg.sweep:
        raise UsageError("config has no `sweep` block with non-empty axes")
    axes = sorted(cfg.sweep)
    for axis in axes:
        if not cfg.sweep[axis]:
            raise UsageError(f"sweep axis {axis!r} is empty")
    # shared input data: synthesize once if no explicit paths were given
    if cfg.embeddings is None or cfg.sequences is None:
        if not (paths.embeddings.exists() and paths.sequences.exists()):
            _stage_synth(cfg, paths)
        data_dir = paths.data_dir
    else:
        _resolve_embeddings(cfg, paths)
        _resolve_sequences(cfg, paths)
        data_dir = None

    cells = list(itertools.product(*(cfg.sweep[a] for a in axes)))
    payloads = []
    for values in cells:
        cell_dir = paths.out / "sweep" / _cell_name(axes, values)
        payloads.append(
            (
                _config_to_dict(cfg),
                axes,
                values,
                str(cell_dir),
                str(data_dir if data_dir is not None else Path(cfg.embeddings).parent),
            )
        )
    workers = int(os.environ.get("COST_THREADS", "1"))
    if workers > 1 and len(payloads) > 1:
        import multiprocessing

        with multiprocessing.get_context("spawn").Pool(min(workers, len(payloads))) as pool:
            rows = list(pool.map(_run_sweep_cell, payloads))
    else:
        rows = [_run_sweep_cell(p) for p in payloads]

    columns = [_AXIS_LABELS[a] for a in axes]
    metric_cols = [f"recall@{k}" for k in cfg.eval_k] + [f"ndcg@{k}" for k in cfg.eval_k]
    header = columns + metric_cols + ["status"]
    table_rows = [[row.get(c) for c in header] for row in rows]
    _write_csv(paths.out / "sweep" / "summary.csv", header, table_rows)
    print(f"sweep finished: {len(rows)} cells -> {paths.out / 'sweep' / 'summary.csv'}")


def _stage_report(cfg: RunConfig, paths: RunPaths, plots: bool = False) -> None:
    produced = False
    report_file = paths.eval_dir / "report.json"
    if report_file.exists():
        report = evaluator.EvalReport.load(report_file)
        text = report.render_table() + "\n"
        _write_text(paths.eval_dir / "report.txt", text)
        print(text, end="")
        produced = True
    summary_file = paths.out / "sweep" / "summary.csv"
    if summary_file.exists():
        text = summary_file.read_text(encoding="utf-8")
        print(text, end="")
        produced = True
        if plots:
            _plot_sweep(summary_file, paths.out / "sweep")
    if not produced:
        raise DataError(
            f"no stored reports under {paths.out}; run `cost evaluate` or `cost sweep` first"
        )


def _plot_sweep(summary_file: Path, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(summary_file, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    axis_cols = [c for c in header if c in _AXIS_LABELS.values()]
    metric_cols = [c for c in header if c.startswith(("recall@", "ndcg@"))]
    if len(axis_cols) != 1:
        print("plotting supports exactly one swept axis; skipping", file=sys.stderr)
        return
    axis = axis_cols[0]
    xs = [float(r[header.index(axis)]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric in metric_cols:
        ys = [float(r[header.index(metric)]) if r[header.index(metric)] else np.nan for r in rows]
        ax.plot(xs, ys, marker="o", label=metric)
    ax.set_xlabel(axis)
    ax.set_ylabel("metric")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / f"sweep_{axis}.png", metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cost", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    common.add_argument("--out", default=None, help="override the output directory")
    for name, help_text in [
        ("synth", "generate a synthetic dataset"),
        ("train-tokenizer", "train the semantic tokenizer"),
        ("assign", "assign token tuples to every item"),
        ("train-generator", "train the token generator"),
        ("evaluate", "run leave-one-out retrieval evaluation"),
        ("sweep", "cartesian sweep over tokenizer axes"),
        ("report", "render tables from stored reports"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("train-tokenizer", "sweep"):
            p.add_argument(
                "--loss-mode",
                choices=["re", "co", "re+co"],
                default=None,
                help="override the tokenizer loss mode",
            )
        if name == "assign":
            p.add_argument(
                "--random-baseline",
                action="store_true",
                help="ignore the trained tokenizer and hash items to uniform tuples",
            )
        if name == "report":
            p.add_argument("--plots", action="store_true", help="also write sweep plots")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "loss_mode", None):
        cfg.tokenizer = dataclasses.replace(
            cfg.tokenizer, loss_mode=tokenizer.canonical_loss_mode(args.loss_mode)
        )
    paths = RunPaths(Path(cfg.out_dir))
    paths.out.mkdir(parents=True, exist_ok=True)
    if args.command == "synth":
        _stage_synth(cfg, paths)
    elif args.command == "train-tokenizer":
        _stage_train_tokenizer(cfg, paths)
    elif args.command == "assign":
        _stage_assign(cfg, paths, random_baseline=args.random_baseline)
    elif args.command == "train-generator":
        _stage_train_generator(cfg, paths)
    elif args.command == "evaluate":
        _stage_evaluate(cfg, paths)
    elif args.command == "sweep":
        _stage_sweep(cfg, paths)
    elif args.command == "report":
        _stage_report(cfg, paths, plots=args.plots)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except CostError as exc:
        for klass, code in _EXIT_CODES:
            if isinstance(exc, klass):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
