# src/cli.py
"""
命令行入口

    python -m src.cli gen-data --config configs/benchmark.json --out data
    python -m src.cli train --config configs/benchmark.json --out outputs/g --lge.variant=B
    python -m src.cli eval --checkpoint outputs/g/model --n-queries 400 --dump-detections outputs/g/det
    python -m src.cli ablate --config configs/benchmark.json --grid configs/ablation.json
    python -m src.cli grad-check
    python -m src.cli serve --port 8000

未识别的 --key=value 参数都作为配置覆盖（支持 lge.variant 这样的点号路径）。
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from src.schemas.train import AblationGrid, TrainConfig, load_train_config, parse_override_args
from src.services.config import settings
from src.utils import console
from src.utils.exceptions import WaveBevError


def _config_from(args: argparse.Namespace, extra: List[str]) -> TrainConfig:
    return load_train_config(args.config, parse_override_args(extra))


# ============ 子命令 ============

def cmd_gen_data(args: argparse.Namespace, extra: List[str]) -> int:
    from src.services.scene_store import SceneStore

    cfg = _config_from(args, extra)
    out = Path(args.out or settings.DATA_DIR)
    console.start("generating scenes", {"train": cfg.train_scenes, "eval": cfg.eval_scenes, "out": str(out)})
    SceneStore.gen_data(cfg, out)
    return 0


def cmd_train(args: argparse.Namespace, extra: List[str]) -> int:
    from src.services.checkpoint_store import CheckpointStore
    from src.services.eval_service import EvalService, save_report
    from src.services.scene_store import SceneStore
    from src.services.train_service import TrainService

    cfg = _config_from(args, extra)
    out = Path(args.out or settings.OUTPUT_DIR)
    train_set = SceneStore.dataset_for(cfg, "train", args.data)
    result = TrainService.train(cfg, train_set, output_dir=out)

    log_path = out / "metric_log.json"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text(json.dumps([r.to_dict() for r in result.metric_log], indent=2), encoding="utf-8")
    last = result.metric_log[-1].to_dict() if result.metric_log else {}
    CheckpointStore.save(out / "model", result.params, cfg, steps=result.steps, metrics=last)

    if args.eval:
        eval_set = SceneStore.dataset_for(cfg, "eval", args.data)
        report = EvalService.evaluate(result.params, cfg, eval_set, loss_curve=result.loss_curve())
        console.info("report written", str(save_report(report, out / "metrics.json")))
    return 0


def cmd_eval(args: argparse.Namespace, extra: List[str]) -> int:
    from src.services.checkpoint_store import CheckpointStore
    from src.services.eval_service import EvalService, save_report
    from src.services.scene_store import SceneStore

    params, cfg, meta = CheckpointStore.load(args.checkpoint)
    if extra:
        overrides = parse_override_args(extra)
        cfg = load_train_config(None, {**_flatten(cfg.model_dump(mode="json")), **overrides})
    eval_set = SceneStore.dataset_for(cfg, "eval", args.data)

    loss_curve = None
    log_path = Path(args.checkpoint).with_suffix("").parent / "metric_log.json"
    if log_path.exists():
        loss_curve = [r["loss"] for r in json.loads(log_path.read_text(encoding="utf-8"))]

    report = EvalService.evaluate(
        params,
        cfg,
        eval_set,
        n_queries=args.n_queries,
        max_detections=args.max_detections,
        loss_curve=loss_curve,
        dump_detections=args.dump_detections,
        dump_features=args.dump_features,
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix("").parent / "metrics.json"
    console.info("report written", str(save_report(report, out)))
    return 0


def cmd_ablate(args: argparse.Namespace, extra: List[str]) -> int:
    from src.services.ablation_service import AblationService

    base = _config_from(args, extra)
    grid = AblationGrid.model_validate(json.loads(Path(args.grid).read_text(encoding="utf-8")))
    out = Path(args.out or Path(settings.OUTPUT_DIR) / "ablation.csv")
    rows = AblationService.run(grid, base, out, data_dir=args.data)
    return 0 if rows else 1


def cmd_grad_check(args: argparse.Namespace, extra: List[str]) -> int:
    from src.utils.grad_check import gradient_suite

    console.section("gradient check (float64)")
    failures = 0
    for name, (err, tol) in gradient_suite(args.seed).items():
        ok = err < tol
        failures += not ok
        line = f"{name:<12} rel err {err:.3e} (tol {tol:.0e})"
        if ok:
            console.info(line)
        else:
            console.error(line)
    return 1 if failures else 0


def cmd_serve(args: argparse.Namespace, extra: List[str]) -> int:
    import uvicorn

    uvicorn.run("src.main:app", host=args.host, port=args.port, reload=False)
    return 0


def _flatten(data: dict, prefix: str = "") -> dict:
    """嵌套 dict → 点号路径，用于在 checkpoint 配置上叠加覆盖"""
    out = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, f"{path}."))
        else:
            out[path] = value
    return out


# ============ 解析 ============

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavebev", description="Wavelet/attention enhanced multi-stage BEV detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate train/eval scene files")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--out", help="Output directory (default: settings.DATA_DIR)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="Train a detector and save a checkpoint")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--data", help="Scene directory with manifest.json (generated on the fly if absent)")
    p.add_argument("--out", help="Output directory (default: settings.OUTPUT_DIR)")
    p.add_argument("--eval", action="store_true", help="Evaluate on the eval split after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="Checkpoint path (without extension)")
    p.add_argument("--data", help="Scene directory with manifest.json")
    p.add_argument("--out", help="Metrics JSON path")
    p.add_argument("--n-queries", type=int, default=None, help="Queries per stage at test time")
    p.add_argument("--max-detections", type=int, default=None, help="Boxes kept per scene")
    p.add_argument("--dump-detections", default=None, help="Directory for per-scene detection/query CSVs")
    p.add_argument("--dump-features", default=None, help="Directory for per-scene feature tensors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Run an ablation grid")
    p.add_argument("--config", help="Base TrainConfig JSON")
    p.add_argument("--grid", required=True, help="AblationGrid JSON")
    p.add_argument("--data", help="Scene directory with manifest.json")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="Run the built-in gradient checks")
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("serve", help="Start the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return args.func(args, extra)
    except (WaveBevError, ValidationError, ValueError, FileNotFoundError) as e:
        console.error(f"{args.command} failed", str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
