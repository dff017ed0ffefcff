"""
Training command
"""
import argparse
import logging
from pathlib import Path
from typing import List

from mmnorm.core.fusion import FusionMethod
from mmnorm.core.net import save_checkpoint
from mmnorm.models.schemas import TrainConfig
from mmnorm.services.dataset_service import load_dataset_dir
from mmnorm.services.training_service import TrainResult, grid_points, grid_train, train
from mmnorm.utils.errors import UsageError
from mmnorm.utils.runs import load_config, write_manifest

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="Train a normative model on the reference cohort")
    parser.add_argument("--config", type=Path, help="TrainConfig JSON file")
    parser.add_argument("--data-dir", type=Path, required=True)
    parser.add_argument("--out", type=Path, required=True,
                        help="checkpoint path, or a directory when a grid is requested")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--learning-rate", type=float)
    parser.add_argument("--latent-dim", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--fusion", choices=[m.value for m in FusionMethod])
    parser.add_argument("--objective", choices=["sivae", "vae"])
    parser.add_argument("--grid-latent-dims", type=int, nargs="+")
    parser.add_argument("--grid-fusion", choices=[m.value for m in FusionMethod], nargs="+")
    parser.set_defaults(func=cmd_train)


def _checkpoint_name(cfg: TrainConfig) -> str:
    return f"{cfg.objective}-{cfg.fusion.method.value}-d{cfg.latent_dim}.ckpt"


def _write(result: TrainResult, path: Path) -> List[Path]:
    log_path = path.with_name(path.name + ".trainlog.jsonl")
    return [save_checkpoint(path, result.checkpoint), result.log.write(log_path)]


def cmd_train(args: argparse.Namespace) -> int:
    if not args.data_dir.is_dir():
        raise UsageError("data directory does not exist", path=str(args.data_dir))
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "latent_dim": args.latent_dim,
        "seed": args.seed,
        "objective": args.objective,
        "fusion": {"method": args.fusion},
    }
    cfg = load_config(TrainConfig, args.config, overrides)
    batch, _ = load_dataset_dir(args.data_dir)
    inputs = sorted(args.data_dir.glob("*.csv")) + ([args.config] if args.config else [])

    if args.grid_latent_dims or args.grid_fusion:
        methods = [FusionMethod(m) for m in args.grid_fusion] if args.grid_fusion else None
        results = grid_train(batch, cfg, args.grid_latent_dims, methods)
        points = grid_points(cfg, args.grid_latent_dims, methods)
        outputs = []
        for point, result in zip(points, results):
            outputs += _write(result, args.out / _checkpoint_name(point))
        config = {"base": cfg.model_dump(mode="json"), "grid": [p.model_dump(mode="json") for p in points]}
        write_manifest("train", config, args.out / "grid", inputs, outputs, seed=cfg.seed)
        return 0

    result = train(batch, cfg)
    outputs = _write(result, args.out)
    write_manifest("train", cfg.model_dump(mode="json"), args.out, inputs, outputs, seed=cfg.seed)
    return 0
