from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import argparse
import itertools
import json
import logging

import numpy as np
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from ..config import Config, MODEL_FIELDS, PRESETS, TRAIN_FIELDS
from ..core.checkpoint import FORWARD_FIELDS, check_compatible, load_checkpoint
from ..core.dataset import SyntheticShapeDataset
from ..core.errors import ConfigError, ParseError
from ..core.finetune import finetune_classifier
from ..core.geometry import fps_sample, patchify
from ..core.manifest import RunManifest, write_table
from ..core.model import ModelWeights, count_params, param_breakdown
from ..core.pointio import read_xyz, write_ply
from ..core.run_utils import RunUtils
from ..core.training import Pretrainer, batch_mask_split, leakage_forward, num_masked_for, pretrain_forward
from ..core.types import MaskType, PatchBatch, PcLoss, PointCloud, TargetMode

logger = logging.getLogger("pcp_mae.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

VISIBLE_COLOR = (70, 130, 220)
MASKED_COLOR = (220, 60, 60)
INPUT_COLOR = (160, 160, 160)


class UsageError(Exception):
    """argparse の終了を例外に置き換えたもの"""

    def __init__(self, status: int, message: str = ""):
        super().__init__(message)
        self.status = status


class _Parser(argparse.ArgumentParser):
    def exit(self, status: int = 0, message: Optional[str] = None):
        raise UsageError(status, message or "")

    def error(self, message: str):
        self.print_usage()
        raise UsageError(EXIT_USAGE, f"{self.prog}: error: {message}")


def _ratio(value: str) -> float:
    ratio = float(value)
    if not 0.0 <= ratio <= 1.0:
        raise argparse.ArgumentTypeError(f"mask ratio must be within [0, 1], got {value}")
    return ratio


def _seed_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma separated integers, got {value!r}") from None


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="フラットな JSON 設定ファイル")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="ベースとなるプリセット")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcp-mae", description="点群の中心予測付きマスクオートエンコーダ")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("pretrain", help="事前学習を実行する")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mask-ratio", type=float, dest="mask_ratio")
    p.add_argument("--eta", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dataset-size", type=int, dest="dataset_size")
    p.add_argument("--save-every", type=int, dest="save_every")
    p.add_argument("--no-stop-gradient", action="store_true")
    p.add_argument("--no-share-weights", action="store_true")
    p.add_argument("--target", choices=[m.value for m in TargetMode], dest="target_mode")
    p.add_argument("--pc-loss", choices=[m.value for m in PcLoss], dest="pc_loss")
    p.add_argument("--mask-type", choices=[m.value for m in MaskType], dest="mask_type")
    p.add_argument("--resume", help="このチェックポイントから再開する")

    p = sub.add_parser("leakage", help="エンコーダなし・全マスクで中心リークを再現する")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset-size", type=int, dest="dataset_size")
    p.add_argument("--export", type=int, default=2, help="PLY を書き出す形状の数")

    p = sub.add_parser("ablate", help="アブレーショングリッドを実行する")
    _add_config_args(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("finetune", help="合成形状の分類で微調整する")
    _add_config_args(p)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint")
    source.add_argument("--scratch", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2])
    p.add_argument("--epochs", type=int, dest="finetune_epochs")
    p.add_argument("--freeze-encoder", action="store_true")

    p = sub.add_parser("reconstruct", help="入力点群のマスク再構成を PLY で書き出す")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mask-ratio", type=_ratio, default=0.6, dest="mask_ratio")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("info", help="パラメータ数と構成を表示する")
    _add_config_args(p)
    p.add_argument("--target", choices=[m.value for m in TargetMode], dest="target_mode")

    p = sub.add_parser("serve", help="読み取り専用の HTTP サービスを起動する")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--runs-dir")
    return parser


def load_grid(path: str, base: Dict[str, Any]) -> List[Dict[str, Any]]:
    """{"base": {...}, "axes": {field: [values]}} の直積、または {"cells": [...]} を展開する"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            grid = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e}", line=e.lineno, source=path) from None
    if not isinstance(grid, dict) or not ({"axes", "cells"} & set(grid)):
        raise ParseError("grid must be an object with 'axes' or 'cells'", source=path)
    shared = {**base, **grid.get("base", {})}
    if "cells" in grid:
        cells = grid["cells"]
        if not isinstance(cells, list):
            raise ParseError("'cells' must be a list", source=path)
    else:
        axes = grid["axes"]
        if not isinstance(axes, dict) or not all(isinstance(v, list) and v for v in axes.values()):
            raise ParseError("'axes' must map field names to non-empty lists", source=path)
        names = list(axes)
        cells = [dict(zip(names, values)) for values in itertools.product(*(axes[n] for n in names))]
    resolved = []
    for index, cell in enumerate(cells):
        if not isinstance(cell, dict):
            raise ParseError("cell must be an object", cell=index, source=path)
        unknown = [k for k in cell if k not in MODEL_FIELDS and k not in TRAIN_FIELDS]
        if unknown:
            raise ParseError(f"unknown fields {unknown}", cell=index, source=path)
        resolved.append({**shared, **cell})
    return resolved


class CommandLineInterface:
    def __init__(self, console: Optional[Console] = None):
        self.console = console or Console()

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = build_parser().parse_args(argv)
        except UsageError as e:
            if e.args and e.args[0]:
                self.console.print(e.args[0], markup=False)
            return e.status
        handlers = {
            "pretrain": self.cmd_pretrain,
            "leakage": self.cmd_leakage,
            "ablate": self.cmd_ablate,
            "finetune": self.cmd_finetune,
            "reconstruct": self.cmd_reconstruct,
            "info": self.cmd_info,
            "serve": self.cmd_serve,
        }
        try:
            return handlers[args.command](args)
        except ConfigError as e:
            self.console.print(f"[red]設定エラー:[/red] {e}")
            return EXIT_USAGE
        except Exception as e:
            logger.error(f"{args.command} failed: {e}", exc_info=True)
            self._handle_error(e)
            return EXIT_FAILURE

    def _handle_error(self, error: Exception):
        """エラーハンドリング"""
        self.console.print(Panel(
            f"エラーが発生しました:\n"
            f"種類: {type(error).__name__}\n"
            f"詳細: {str(error)}",
            title="⚠️",
            style="red"
        ))

    def _load_config(self, args: argparse.Namespace, overrides: Dict[str, Any]) -> Config:
        return Config(getattr(args, "config", None), getattr(args, "preset", "desk"), overrides)

    # pretrain

    def cmd_pretrain(self, args: argparse.Namespace) -> int:
        overrides = {
            "seed": args.seed, "mask_ratio": args.mask_ratio, "eta": args.eta, "epochs": args.epochs,
            "batch_size": args.batch_size, "dataset_size": args.dataset_size, "save_every": args.save_every,
            "target_mode": args.target_mode, "pc_loss": args.pc_loss, "mask_type": args.mask_type,
        }
        if args.no_stop_gradient:
            overrides["stop_gradient"] = False
        if args.no_share_weights:
            overrides["share_pcm_weights"] = False
        config = self._load_config(args, overrides)
        out = Path(args.out)
        RunUtils(out / "logs", config.get_log_level())
        manifest = run_pretrain(config, out, "pretrain", resume=args.resume,
                                progress=self.console)
        self._show_rows("事前学習", manifest)
        return EXIT_OK

    # leakage

    def cmd_leakage(self, args: argparse.Namespace) -> int:
        overrides = {"epochs": args.epochs, "seed": args.seed, "dataset_size": args.dataset_size,
                     "mask_ratio": 1.0}
        config = self._load_config(args, overrides)
        out = Path(args.out)
        RunUtils(out / "logs", config.get_log_level())
        trainer = Pretrainer(config, leakage=True)
        manifest = RunManifest("leakage", config.snapshot(), config.train.seed)
        with self.console.status("デコーダのみで学習中..."):
            trainer.run(on_epoch=lambda row: _record(manifest, row, out / "manifest.json"))
        recon, baseline = trainer.evaluate_leakage()
        manifest.summary.update({
            "recon_chamfer": recon,
            "baseline_chamfer": baseline,
            "ratio": recon / baseline if baseline > 0 else float("nan"),
        })
        manifest.outputs.update(export_leakage(trainer, out, args.export))
        manifest.outputs["metrics"] = manifest.write_csv(out / "metrics.csv")
        manifest.finalize(out / "manifest.json")

        table = Table(title="中心リーク実験 (m = 1.0)")
        table.add_column("指標")
        table.add_column("値", justify="right")
        table.add_row("再構成 Chamfer", f"{recon:.6f}")
        table.add_row("中心のみベースライン", f"{baseline:.6f}")
        table.add_row("比", f"{manifest.summary['ratio']:.3f}")
        self.console.print(table)
        return EXIT_OK

    # ablate

    def cmd_ablate(self, args: argparse.Namespace) -> int:
        base_config = self._load_config(args, {})
        cells = load_grid(args.grid, {})
        configs = []
        for index, cell in enumerate(cells):
            try:
                configs.append(Config(args.config, args.preset, cell))
            except ConfigError as e:
                raise ParseError(str(e), cell=index, source=args.grid) from None
        out = Path(args.out)
        RunUtils(out / "logs", base_config.get_log_level())
        workers = args.workers or base_config.train.workers
        self.console.print(f"[cyan]{len(configs)} セルを {workers} スレッドで実行します[/cyan]")

        def run_cell(index: int) -> RunManifest:
            return run_pretrain(configs[index], out / f"cell_{index:03d}", "ablate")

        with ThreadPoolExecutor(max_workers=workers) as pool:
            manifests = list(pool.map(run_cell, range(len(configs))))

        axis_keys = sorted({k for cell in cells for k in cell})
        rows = []
        for index, (cell, manifest) in enumerate(zip(cells, manifests)):
            row = {"cell": f"cell_{index:03d}", **{k: _csv_value(cell.get(k)) for k in axis_keys}}
            row.update({k: manifest.summary.get(k) for k in ("loss", "loss_pc", "loss_recon", "num_masked")})
            rows.append(row)
        columns = ["cell", *axis_keys, "loss", "loss_pc", "loss_recon", "num_masked"]
        path = write_table(rows, out / "ablation.csv", columns)

        table = Table(title="アブレーション結果")
        for column in columns:
            table.add_column(column)
        for row in rows:
            table.add_row(*[_format(row.get(c)) for c in columns])
        self.console.print(table)
        self.console.print(f"[green]✓ 結果を保存しました: {path}[/green]")
        return EXIT_OK

    # finetune

    def cmd_finetune(self, args: argparse.Namespace) -> int:
        overrides = {"finetune_epochs": args.finetune_epochs}
        if args.freeze_encoder:
            overrides["freeze_encoder"] = True
        config = self._load_config(args, overrides)
        out = Path(args.out)
        RunUtils(out / "logs", config.get_log_level())
        weights = None
        if args.checkpoint:
            state = load_checkpoint(args.checkpoint)
            check_compatible(state.config, config.model)
            config.apply({k: state.config[k] for k in FORWARD_FIELDS if k in state.config})
            weights = ModelWeights.initialize(
                config.model,
                share_pcm_weights=state.config.get("share_pcm_weights", True),
                target_mode=state.config.get("target_mode", TargetMode.PEM.value))
            weights.load_arrays(state.params)
        train = config.train
        dataset = SyntheticShapeDataset(train.dataset_size, None, train.source_points, train.shape_noise,
                                        train.seed)
        train_set, test_set = dataset.split(train.finetune_test_fraction, seed=train.seed)
        manifest = RunManifest("finetune", config.snapshot(), train.seed)
        results = []
        with self.console.status("微調整中..."):
            for seed in args.seeds:
                results.append(finetune_classifier(weights, train_set, test_set, config, seed=seed))
        for epoch in range(train.finetune_epochs):
            manifest.add_row({"epoch": epoch + 1, "loss": float(np.mean([r.losses[epoch] for r in results]))})
        accuracies = [r.accuracy for r in results]
        manifest.summary.update({
            "source": args.checkpoint or "scratch",
            "seeds": list(args.seeds),
            "accuracies": accuracies,
            "accuracy_mean": float(np.mean(accuracies)),
            "accuracy_std": float(np.std(accuracies)),
            "num_classes": results[0].num_classes,
        })
        manifest.outputs["metrics"] = manifest.write_csv(out / "metrics.csv", ("epoch", "loss"))
        manifest.finalize(out / "manifest.json")

        table = Table(title="微調整の精度")
        table.add_column("seed")
        table.add_column("accuracy", justify="right")
        for seed, accuracy in zip(args.seeds, accuracies):
            table.add_row(str(seed), f"{accuracy:.4f}")
        self.console.print(table)
        self.console.print(f"平均 {manifest.summary['accuracy_mean']:.4f} ± {manifest.summary['accuracy_std']:.4f}")
        return EXIT_OK

    # reconstruct

    def cmd_reconstruct(self, args: argparse.Namespace) -> int:
        state = load_checkpoint(args.checkpoint)
        config = Config.from_snapshot(state.config)
        config.apply({"mask_ratio": args.mask_ratio})
        weights = ModelWeights.initialize(config.model, share_pcm_weights=config.train.share_pcm_weights,
                                          target_mode=config.train.target_mode)
        weights.load_arrays(state.params)
        cloud = fps_sample(read_xyz(args.input), config.model.num_points, args.seed)
        paths = export_reconstruction(cloud, weights, config, Path(args.out), args.seed)
        table = Table(title="書き出したファイル")
        table.add_column("種類")
        table.add_column("パス")
        for kind, path in paths.items():
            table.add_row(kind, path)
        self.console.print(table)
        return EXIT_OK

    # info

    def cmd_info(self, args: argparse.Namespace) -> int:
        config = self._load_config(args, {"target_mode": args.target_mode})
        target = config.train.target_mode
        shared = count_params(config.model, True, target)
        separate = count_params(config.model, False, target)
        table = Table(title=f"パラメータ数 (preset: {config.preset})")
        table.add_column("構成要素")
        table.add_column("共有", justify="right")
        table.add_column("非共有", justify="right")
        shared_parts = param_breakdown(config.model, True, target)
        separate_parts = param_breakdown(config.model, False, target)
        for name in shared_parts:
            table.add_row(name, f"{shared_parts[name]:,}", f"{separate_parts[name]:,}")
        table.add_row("合計", f"{shared:,} ({shared / 1e6:.2f} M)", f"{separate:,} ({separate / 1e6:.2f} M)")
        self.console.print(table)
        self.console.print(Panel(json.dumps(config.snapshot(), indent=2, ensure_ascii=False),
                                 title="設定", expand=False))
        return EXIT_OK

    # serve

    def cmd_serve(self, args: argparse.Namespace) -> int:
        import uvicorn
        from ..api.server import create_app

        uvicorn.run(create_app(args.runs_dir), host=args.host, port=args.port)
        return EXIT_OK

    def _show_rows(self, title: str, manifest: RunManifest) -> None:
        table = Table(title=title)
        for column in ("epoch", "loss", "loss_pc", "loss_recon", "lr"):
            table.add_column(column, justify="right")
        rows = manifest.rows
        shown = rows if len(rows) <= 10 else rows[:3] + rows[-7:]
        for row in shown:
            table.add_row(str(row["epoch"]), *[f"{row[k]:.6g}" for k in ("loss", "loss_pc", "loss_recon", "lr")])
        self.console.print(table)


def _record(manifest: RunManifest, row: Dict[str, Any], path: Path) -> None:
    manifest.add_row(row)
    manifest.flush_partial(path)


def _csv_value(value: Any) -> Any:
    return "+".join(value) if isinstance(value, list) else value


def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return "" if value is None else str(value)


def run_pretrain(config: Config, out: Path, command: str, resume: Optional[str] = None,
                 progress: Optional[Console] = None) -> RunManifest:
    """事前学習 1 回分: チェックポイント、マニフェスト、CSV を out に書く"""
    trainer = Pretrainer(config, checkpoint_dir=out / "checkpoints")
    if resume:
        trainer.restore(load_checkpoint(resume))
    manifest = RunManifest(command, config.snapshot(), config.train.seed)
    n = config.model.num_groups
    manifest.summary.update({"num_patches": n, "num_masked": num_masked_for(n, config.train.mask_ratio)})
    manifest_path = out / "manifest.json"
    if progress is not None:
        with progress.status("事前学習中..."):
            trainer.run(on_epoch=lambda row: _record(manifest, row, manifest_path))
    else:
        trainer.run(on_epoch=lambda row: _record(manifest, row, manifest_path))
    manifest.outputs["final_checkpoint"] = trainer.save(out / "checkpoints" / "final.ckpt")
    manifest.outputs["metrics"] = manifest.write_csv(out / "metrics.csv")
    if manifest.rows:
        last = manifest.rows[-1]
        manifest.summary.update({k: last[k] for k in ("loss", "loss_pc", "loss_recon")})
    manifest.finalize(manifest_path)
    return manifest


def _patch_points(batch: PatchBatch, item: int, patches: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """正規化パッチ座標を中心に戻して平らに並べる"""
    centers = batch.centers[item, indices]
    return (patches + centers[:, None, :]).reshape(-1, 3)


def export_leakage(trainer: Pretrainer, out: Path, count: int) -> Dict[str, str]:
    """先頭 count 個の形状について真値と再構成を並べて書き出す"""
    indices = range(min(count, len(trainer.dataset)))
    if not indices:
        return {}
    batch = trainer.leakage_batch(indices)
    pred, _ = leakage_forward(batch, trainer.weights)
    paths = {}
    everything = np.arange(batch.centers.shape[1])
    for i in indices:
        truth = batch.points[i]
        recon = _patch_points(batch, i, pred.data[i].astype(np.float64), everything)
        paths[f"ground_truth_{i}"] = write_ply(PointCloud(truth), out / f"leakage_{i:02d}_gt.ply",
                                               np.tile(INPUT_COLOR, (len(truth), 1)))
        paths[f"reconstruction_{i}"] = write_ply(PointCloud(recon), out / f"leakage_{i:02d}_recon.ply",
                                                 np.tile(MASKED_COLOR, (len(recon), 1)))
    return paths


def export_reconstruction(cloud: PointCloud, weights: ModelWeights, config: Config, out: Path,
                          seed: int = 0) -> Dict[str, str]:
    """入力、可視パッチ、可視 + 再構成したマスクパッチの 3 つの PLY を書く"""
    rng = np.random.default_rng([seed, 9])
    patch_set = patchify(cloud, config.model.num_groups, config.model.group_size, rng)
    batch = PatchBatch(centers=patch_set.centers[None], patches=patch_set.patches[None],
                       points=[cloud.points])
    masked, visible = batch_mask_split(batch.centers, config.train.mask_ratio, config.train.mask_type, rng)
    output = pretrain_forward(batch, weights, config, masked, visible)

    visible_idx = np.unique(patch_set.neighbor_indices[visible[0]].reshape(-1))
    visible_points = cloud.points[visible_idx]
    recon_points = _patch_points(batch, 0, output.pred_patches.data[0].astype(np.float64), masked[0])
    combined = np.concatenate([visible_points, recon_points]) if len(recon_points) else visible_points
    colors = np.concatenate([np.tile(VISIBLE_COLOR, (len(visible_points), 1)),
                             np.tile(MASKED_COLOR, (len(recon_points), 1))])
    out.mkdir(parents=True, exist_ok=True)
    paths = {"input": write_ply(cloud, out / "input.ply", np.tile(INPUT_COLOR, (len(cloud), 1)))}
    paths["visible"] = write_ply(visible_points, out / "visible.ply",
                                 np.tile(VISIBLE_COLOR, (len(visible_points), 1)))
    paths["reconstruction"] = write_ply(PointCloud(combined), out / "reconstruction.ply", colors)
    logger.info(f"Reconstruction with {masked.shape[1]} masked patches written to {out}")
    return paths
