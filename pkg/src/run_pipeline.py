#!/usr/bin/env python3
"""
Supervoxel Graph Pipeline - command line

Usage:
    python -m src.run_pipeline phantom --n 4 --out-dir data/phantoms
    python -m src.run_pipeline preprocess data/phantoms --n-sv 64 --out-dir data/graphs
    python -m src.run_pipeline train data/graphs --task reg --profile toy --epochs 50
    python -m src.run_pipeline eval data/graphs --checkpoint runs/model.ckpt --with-dice
    python -m src.run_pipeline params-report --profile paper
    python -m src.run_pipeline export-attention --graph g.svg2 --checkpoint runs/model.ckpt
    python -m src.run_pipeline make-splits data/graphs --folds 4
    python -m src.run_pipeline cross-validate data/graphs --folds 4
    python -m src.run_pipeline granularity-sweep data/phantoms --n-sv 32,64,128
    python -m src.run_pipeline phantom-benchmark --n 60 --n-train 40 --epochs 200

Every command exits 0 on success and nonzero with a one-line diagnostic
on stderr on failure. Settings resolve as profile < flags < --config file.
"""

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from src.config import DEFAULT_SEED, ModelConfig, PreprocessConfig, TrainConfig
from src.models.supervoxel_encoder import count_parameters, count_parameters_analytic
from src.preprocessing.build_graph_dataset import (
    FAILURES_NAME,
    GRAPH_SUFFIX,
    build_graph_dataset,
    preprocess_volume,
    rebuild_partition,
)
from src.preprocessing.graph_builder import read_graph
from src.preprocessing.synthetic_phantoms import PhantomSpec, generate_phantom
from src.preprocessing.volume_io import read_mmv, write_mmv
from src.training.metrics import DEFAULT_TAU_DICE, summarize_folds
from src.training.phantom_benchmark import run_phantom_benchmark
from src.training.split_manifest import make_split_manifests, read_split_manifest
from src.training.trainer import (
    build_model,
    evaluate,
    load_model,
    model_config_for_graphs,
    save_model,
    train,
)

VOLUME_SUFFIX = ".mmv"
TOP_NEIGHBOURS = 5


# -- argument helpers ---------------------------------------------------------

def int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got '{text}'")
    return values


def dims_arg(text: str):
    values = int_list(text)
    if len(values) == 1:
        values = values * 3
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"dims must be one or three integers, got '{text}'")
    return tuple(values)


def task_arg(text: str) -> str:
    if text not in ("reg", "cls", "regression", "classification"):
        raise argparse.ArgumentTypeError(f"task must be reg or cls, got '{text}'")
    return text


def expand_paths(items: Sequence[str], suffix: str) -> List[Path]:
    """Files as given; directories expanded to their sorted `*suffix` files."""
    paths: List[Path] = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob(f"*{suffix}")))
        elif p.exists():
            paths.append(p)
        else:
            raise FileNotFoundError(f"no such file or directory: {item}")
    if not paths:
        raise FileNotFoundError(f"no {suffix} files found in {list(items)}")
    return paths


def load_config_file(path: Optional[str]) -> Dict[str, dict]:
    """Optional JSON with "model", "train" and "preprocess" sections."""
    if not path:
        return {}
    values = json.loads(Path(path).read_text())
    unknown = set(values) - {"model", "train", "preprocess"}
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    return values


def write_json(payload, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=str))
    return path


def banner(title: str):
    print("=" * 70)
    print(title)
    print("=" * 70)


# -- configuration resolution -------------------------------------------------

def preprocess_config(args) -> PreprocessConfig:
    cfg = PreprocessConfig().updated(
        n_sv=args.n_sv[0],
        k_nn=args.knn,
        k_pe=args.k_pe,
        n_patch=args.n_patch,
        patch_size=args.patch_size,
        tau_cls=args.tau_cls,
        compactness=args.compactness,
        knn_rule=args.knn_rule,
        seed=args.seed,
    )
    return cfg.updated(**load_config_file(args.config).get("preprocess", {}))


def training_configs(args, graphs):
    file_values = load_config_file(args.config)
    model_cfg = model_config_for_graphs(
        graphs, profile=args.profile, task=args.task, dropout=args.dropout
    ).updated(**file_values.get("model", {}))
    train_cfg = TrainConfig.from_profile(args.profile).updated(
        task=model_cfg.task,
        seed=args.seed,
        max_epochs=args.epochs,
        base_lr=args.lr,
        batch_size=args.batch_size,
        accum_steps=args.accum_steps,
    ).updated(**file_values.get("train", {}))
    return model_cfg, train_cfg


def load_graphs(paths: Sequence[Path]):
    return [read_graph(p) for p in paths]


def graphs_from_args(args, split: str):
    if getattr(args, "split_manifest", None):
        train_paths, test_paths = read_split_manifest(args.split_manifest)
        chosen = train_paths if split == "train" else test_paths
        return [Path(p) for p in chosen]
    return expand_paths(args.graphs, GRAPH_SUFFIX)


def dice_inputs_for(graphs) -> Dict[str, tuple]:
    """graph_id -> (partition, mask) rebuilt from each graph's source volume."""
    inputs = {}
    for graph in graphs:
        source = graph.meta.get("source_volume")
        if not source or not Path(source).exists():
            raise FileNotFoundError(
                f"source volume of graph '{graph.graph_id}' not found ({source!r}); "
                "--with-dice needs the original .mmv files"
            )
        vol = read_mmv(source)
        if vol.mask is None:
            raise ValueError(f"source volume {source} has no mask")
        inputs[graph.graph_id] = (rebuild_partition(vol, graph), vol.mask)
    return inputs


# -- commands -----------------------------------------------------------------

def cmd_phantom(args) -> int:
    out_dir = Path(args.out_dir)
    banner("GENERATING PHANTOM VOLUMES")
    for i in range(args.n):
        spec = PhantomSpec(
            dims=args.dims,
            n_lesions=args.lesions,
            lesion_radius_range=(args.radius_min, args.radius_max),
            noise_sigma=args.noise,
            seed=args.seed + i,
        )
        vol = generate_phantom(spec, volume_id=f"phantom_{i:03d}")
        path = write_mmv(vol, out_dir / f"phantom_{i:03d}{VOLUME_SUFFIX}")
        print(f"  {path}: {int(vol.mask.sum())} lesion voxels")
    print(f"\nPhantoms written: {args.n}")
    return 0


def cmd_preprocess(args) -> int:
    volumes = expand_paths(args.volumes, VOLUME_SUFFIX)
    cfg = preprocess_config(args)
    manifest, failures = build_graph_dataset(
        volumes, args.out_dir, cfg, granularities=args.n_sv, n_workers=args.workers
    )
    if len(failures):
        print(f"error: {len(failures)} of {len(failures) + len(manifest)} job(s) failed; "
              f"see {Path(args.out_dir) / FAILURES_NAME}", file=sys.stderr)
        return 1
    return 0


def _train_and_save(args, train_graphs, val_graphs, out_dir: Path, tag: str):
    model_cfg, train_cfg = training_configs(args, train_graphs)
    model = build_model(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    result = train(
        train_graphs, model, train_cfg, val_graphs=val_graphs,
        log_path=out_dir / f"{tag}_log.jsonl", verbose=True,
    )
    ckpt = save_model(result.model, out_dir / f"{tag}.ckpt", train_cfg,
                      extra={"optimizer_steps": result.optimizer_steps})
    return result, ckpt, train_cfg


def cmd_train(args) -> int:
    graphs = load_graphs(graphs_from_args(args, "train"))
    out_dir = Path(args.out_dir)
    banner("TRAINING SUPERVOXEL GRAPH ENCODER")
    print(f"Timestamp: {datetime.now().isoformat()}")
    print(f"Training graphs: {len(graphs)}")
    result, ckpt, _ = _train_and_save(args, graphs, None, out_dir, args.tag)

    banner("TRAINING SUMMARY")
    print(f"Epochs: {len(result.history)}")
    print(f"Optimizer steps: {result.optimizer_steps}")
    if len(result.history):
        print(f"Final train loss: {result.history['train_loss'].iloc[-1]:.5f}")
    print(f"Checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    graphs = load_graphs(graphs_from_args(args, "test"))
    model, extra = load_model(args.checkpoint)
    dtype = extra.get("train_config", {}).get("dtype", "float64")
    dice_inputs = dice_inputs_for(graphs) if args.with_dice else None

    report = evaluate(graphs, model, dtype=dtype, dice_inputs=dice_inputs, tau_dice=args.tau_dice)
    predictions = report.pop("predictions")

    out_dir = Path(args.out_dir)
    write_json(report, out_dir / "eval_report.json")
    predictions.to_csv(out_dir / "predictions.csv", index=False)

    banner("EVALUATION REPORT")
    print(f"Graphs: {report['n_graphs']}  Nodes: {report['n_nodes']}")
    for name, value in report["pooled"].items():
        print(f"  {name}: {value:.4f}")
    print(f"\nReport: {out_dir / 'eval_report.json'}")
    return 0


def cmd_params_report(args) -> int:
    cfg = ModelConfig.from_profile(args.profile).updated(
        **load_config_file(args.config).get("model", {})
    )
    counts = count_parameters_analytic(cfg)
    banner(f"PARAMETER REPORT ({cfg.profile} profile)")
    for name, value in counts.items():
        print(f"  {name:<14} {value:>12,}")
    if args.instantiate:
        model = build_model(cfg, dtype="float32")
        print(f"\n  instantiated  {count_parameters(model):>12,}")
    return 0


def cmd_export_attention(args) -> int:
    graph = read_graph(args.graph)
    model, extra = load_model(args.checkpoint)
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(graph.patches, dtype=dtype), graph.edges,
                    torch.as_tensor(graph.lap_pe, dtype=dtype))

    patch_attention = torch.stack(out["patch_attention"]).numpy()
    graph_attention = torch.stack(out["graph_attention"]).numpy()
    src, dst = out["src"].numpy(), out["dst"].numpy()

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.graph).stem
    np.savez(
        out_dir / f"{stem}_attention.npz",
        patch_attention=patch_attention,
        graph_attention=graph_attention,
        src=src,
        dst=dst,
        node_ids=graph.node_ids,
    )

    edges = pd.DataFrame({
        "dst": graph.node_ids[dst],
        "src": graph.node_ids[src],
        "attention": graph_attention.mean(axis=(0, 2)),
    })
    edges = edges[edges["dst"] != edges["src"]]
    top = (
        edges.sort_values(["dst", "attention", "src"], ascending=[True, False, True])
        .groupby("dst", sort=True)
        .head(args.top_k)
        .rename(columns={"dst": "node_id", "src": "neighbour_id"})
    )
    top["rank"] = top.groupby("node_id").cumcount() + 1
    top[["node_id", "rank", "neighbour_id", "attention"]].to_csv(
        out_dir / f"{stem}_top_neighbours.csv", index=False
    )

    print(f"Patch attention: {patch_attention.shape} (layer, node, head, token, token)")
    print(f"Graph attention: {graph_attention.shape} (layer, edge, head)")
    print(f"Written to {out_dir}")
    return 0


def cmd_make_splits(args) -> int:
    paths = expand_paths(args.graphs, GRAPH_SUFFIX)
    manifests = make_split_manifests(paths, args.out_dir, n_folds=args.folds, seed=args.seed)
    for m in manifests:
        print(f"  {m}")
    return 0


def cmd_cross_validate(args) -> int:
    paths = expand_paths(args.graphs, GRAPH_SUFFIX)
    out_dir = Path(args.out_dir)
    manifests = make_split_manifests(paths, out_dir / "splits", n_folds=args.folds, seed=args.seed)

    reports = []
    for fold, manifest in enumerate(manifests):
        banner(f"FOLD {fold + 1}/{len(manifests)}")
        train_paths, test_paths = read_split_manifest(manifest)
        train_graphs = load_graphs(train_paths)
        test_graphs = load_graphs(test_paths)
        result, _, train_cfg = _train_and_save(args, train_graphs, None, out_dir, f"fold_{fold}")
        report = evaluate(test_graphs, result.model, dtype=train_cfg.dtype)
        report.pop("predictions")
        reports.append(report)
        write_json(report, out_dir / f"fold_{fold}_report.json")

    summary = summarize_folds(reports)
    summary.to_csv(out_dir / "cross_validation_summary.csv")
    banner("CROSS-VALIDATION SUMMARY (mean +/- std over folds)")
    for name, row in summary.iterrows():
        print(f"  {name}: {row['mean']:.4f} +/- {row['std']:.4f}")
    return 0


def cmd_granularity_sweep(args) -> int:
    volumes = [read_mmv(p) for p in expand_paths(args.volumes, VOLUME_SUFFIX)]
    if len(volumes) < 2:
        raise ValueError("granularity sweep needs at least 2 volumes")
    n_train = max(1, int(round(len(volumes) * 2 / 3)))
    n_train = min(n_train, len(volumes) - 1)

    rows = []
    for n_sv in args.n_sv:
        cfg = PreprocessConfig(n_sv=n_sv, seed=args.seed).updated(
            n_patch=args.n_patch, patch_size=args.patch_size
        )
        graphs = [preprocess_volume(v, cfg).graph for v in volumes]
        for s in range(args.seeds):
            seed = args.seed + s
            model_cfg = model_config_for_graphs(graphs, profile="toy", task="regression")
            train_cfg = TrainConfig.from_profile("toy", seed=seed, max_epochs=args.epochs, task="regression")
            model = build_model(model_cfg, seed=seed, dtype=train_cfg.dtype)
            train(graphs[:n_train], model, train_cfg)
            report = evaluate(graphs[n_train:], model, dtype=train_cfg.dtype)
            rows.append({"n_sv": n_sv, "seed": seed, **report["pooled"]})
            print(f"  n_sv={n_sv} seed={seed}: MAE={report['pooled']['mae']:.4f}")

    table = pd.DataFrame(rows)
    summary = table.groupby("n_sv")["mae"].agg(["mean", "std"]).reset_index()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "granularity_runs.csv", index=False)
    summary.to_csv(out_dir / "granularity_summary.csv", index=False)

    means, stds = summary["mean"].to_numpy(), summary["std"].fillna(0).to_numpy()
    rising = bool(np.all(np.diff(means) >= -stds[1:]))
    banner("GRANULARITY SWEEP (regression MAE)")
    print(summary.to_string(index=False))
    print(f"\nMAE non-decreasing with n_sv within 1 std: {'yes' if rising else 'no'}")
    return 0


def cmd_phantom_benchmark(args) -> int:
    preprocess = PreprocessConfig(n_sv=args.n_sv, seed=args.seed).updated(
        **load_config_file(args.config).get("preprocess", {})
    )
    result = run_phantom_benchmark(
        n_volumes=args.n, n_train=args.n_train, dims=args.dims, preprocess=preprocess,
        max_epochs=args.epochs, seed=args.seed, verbose=True,
    )
    out_dir = Path(args.out_dir)
    write_json({"metrics": result.metrics, "n_train_nodes": result.n_train_nodes,
                "n_test_nodes": result.n_test_nodes,
                "train_positive_fraction": result.train_positive_fraction},
               out_dir / "benchmark_report.json")
    result.acceptance.to_csv(out_dir / "acceptance.csv", index=False)
    if not result.passed:
        failed = ", ".join(result.acceptance.loc[~result.acceptance["passed"], "metric"])
        print(f"error: benchmark bars missed: {failed}", file=sys.stderr)
        return 1
    return 0


# -- parser -------------------------------------------------------------------

class UsageError(ValueError):
    """Bad command line."""


class PipelineArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of printing usage and exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_preprocess_flags(p):
    p.add_argument("--n-sv", type=int_list, default=[1000],
                   help="supervoxel count, or a comma list for several granularities")
    p.add_argument("--knn", type=int, default=8)
    p.add_argument("--k-pe", type=int, default=8)
    p.add_argument("--n-patch", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=24)
    p.add_argument("--tau-cls", type=float, default=0.15)
    p.add_argument("--compactness", type=float, default=0.1)
    p.add_argument("--knn-rule", choices=["mutual", "or"], default="mutual")


def _add_training_flags(p):
    p.add_argument("--task", type=task_arg, default="reg")
    p.add_argument("--profile", choices=["toy", "paper"], default="toy")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--accum-steps", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = PipelineArgumentParser(
        prog="run_pipeline", description="Supervoxel graph encoding pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--config", default=None, help="JSON config overriding flags")
        p.set_defaults(func=func)
        return p

    p = command("phantom", cmd_phantom, "generate synthetic phantom volumes")
    p.add_argument("--dims", type=dims_arg, default=(48, 48, 48))
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--lesions", type=int, default=1)
    p.add_argument("--radius-min", type=float, default=9.0)
    p.add_argument("--radius-max", type=float, default=12.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out-dir", default="data/phantoms")

    p = command("preprocess", cmd_preprocess, "convert volumes into supervoxel graphs")
    p.add_argument("volumes", nargs="+")
    _add_preprocess_flags(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default="data/graphs")

    p = command("train", cmd_train, "train an encoder on graphs")
    p.add_argument("graphs", nargs="*", default=["data/graphs"])
    _add_training_flags(p)
    p.add_argument("--split-manifest", default=None)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--tag", default="model")

    p = command("eval", cmd_eval, "evaluate a checkpoint on graphs")
    p.add_argument("graphs", nargs="*", default=["data/graphs"])
    p.add_argument("--checkpoint", default="runs/model.ckpt")
    p.add_argument("--split-manifest", default=None)
    p.add_argument("--with-dice", action="store_true")
    p.add_argument("--tau-dice", type=float, default=DEFAULT_TAU_DICE)
    p.add_argument("--out-dir", default="runs")

    p = command("params-report", cmd_params_report, "analytic parameter counts")
    p.add_argument("--profile", choices=["toy", "paper"], default="paper")
    p.add_argument("--instantiate", action="store_true",
                   help="also build the model and count its parameters")

    p = command("export-attention", cmd_export_attention, "dump patch and graph attention")
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", default="runs/model.ckpt")
    p.add_argument("--top-k", type=int, default=TOP_NEIGHBOURS)
    p.add_argument("--out-dir", default="runs/attention")

    p = command("make-splits", cmd_make_splits, "write k-fold split manifests")
    p.add_argument("graphs", nargs="*", default=["data/graphs"])
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--out-dir", default="runs/splits")

    p = command("cross-validate", cmd_cross_validate, "k-fold train and evaluate")
    p.add_argument("graphs", nargs="*", default=["data/graphs"])
    p.add_argument("--folds", type=int, default=4)
    _add_training_flags(p)
    p.add_argument("--out-dir", default="runs/cv")

    p = command("phantom-benchmark", cmd_phantom_benchmark, "phantom cohort train/test against fixed bars")
    p.add_argument("--n", type=int, default=60)
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--dims", type=dims_arg, default=(48, 48, 48))
    p.add_argument("--n-sv", type=int, default=64)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--out-dir", default="runs/benchmark")

    p = command("granularity-sweep", cmd_granularity_sweep, "regression MAE versus n_sv")
    p.add_argument("volumes", nargs="*", default=["data/phantoms"])
    p.add_argument("--n-sv", type=int_list, default=[32, 64, 128])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--n-patch", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--out-dir", default="runs/granularity")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
