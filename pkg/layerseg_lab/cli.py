import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .config import CONFIG_FILE, RUNS_DIR, Settings, load_config, save_config
from .core import container
from .core.benchmark import benchmark
from .core.evaluator import DEFAULT_METHOD, Evaluator
from .core.inference import infer_volume
from .core.nets import Network, snet_forward
from .core.phantom import generate_dataset, generate_volume
from .core.preprocessing import PatchLayout, estimate_baseline, extract_patches, flatten_and_crop, stitch
from .core.render import read_image, render_scan
from .core.run_storage import (
    list_runs,
    load_dataset,
    load_weights,
    network_from_weights,
    new_run_dir,
    save_weights,
    write_manifest,
)
from .core.topology import boundaries_from_labels
from .core.training import TrainResult, train_rnet, train_snet
from .engine import gradcheck
from .engine.tensor import no_grad
from .errors import ConfigError, LayerSegError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON config file (default: the per-user file, if any)")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible outputs")
    common.add_argument("--threads", type=int, help="worker threads for data generation and inference")
    common.add_argument("--out", type=Path, help="output directory (default: a new run directory)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="layerseg", description="Topology-preserving layer segmentation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate phantom patches or a phantom volume")
    p.add_argument("--kind", choices=["patches", "volume"], default="patches")
    p.add_argument("--count", type=int, help="number of patches or B-scans")
    p.add_argument("--split", choices=SPLITS, default="train", help="patch split; sets the default count and seed")

    for name, what in (("train-snet", "segmentation"), ("train-rnet", "thickness regression")):
        p = sub.add_parser(name, parents=[common], help=f"train the {what} network")
        p.add_argument("--data", type=Path, required=True, help="patch dataset directory")
        p.add_argument("--val", type=Path, help="validation dataset directory")

    p = sub.add_parser("infer", parents=[common], help="segment a volume, a patch dataset or one B-scan image")
    _weight_flags(p)
    p.add_argument("--volume", type=Path, required=True, help="volume file, patch dataset directory or image")

    p = sub.add_parser("eval", parents=[common], help="boundary error report")
    p.add_argument("--pred", type=Path, required=True, help="boundaries file written by infer")
    p.add_argument("--truth", type=Path, required=True, help="volume file or patch dataset with ground truth")
    p.add_argument("--compare-snet", action="store_true", help="add the S-Net-only reading with Wilcoxon p-values")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p.add_argument("--instances", type=int, help="random instances per check")
    p.add_argument("--coords", type=int, help="sampled coordinates per parameter tensor")
    p.add_argument("--checks", nargs="+", choices=sorted(gradcheck.CHECKS), help="subset of checks")

    p = sub.add_parser("bench", parents=[common], help="pipeline timing report")
    _weight_flags(p)
    p.add_argument("--volume", type=Path, help="volume file (default: a generated phantom volume)")
    p.add_argument("--runs", type=int, help="repetitions (at least 3 for a median)")

    p = sub.add_parser("render", parents=[common], help="write B-scans with overlays and probability maps")
    p.add_argument("--volume", type=Path, required=True, help="volume file, patch dataset directory or image")
    p.add_argument("--pred", type=Path, help="boundaries file written by infer")
    p.add_argument("--snet", type=Path, help="S-Net weights for probability maps")
    p.add_argument("--scans", type=int, nargs="+", default=[0], help="B-scan indices")

    p = sub.add_parser("config", parents=[common], help="print the effective configuration")
    p.add_argument("--save", action="store_true", help=f"write it to the per-user file ({CONFIG_FILE})")

    sub.add_parser("runs", parents=[common], help=f"list run directories under {RUNS_DIR}")
    return parser


def _weight_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--snet", type=Path, required=True, help="S-Net weight file")
    p.add_argument("--rnet", type=Path, required=True, help="R-Net weight file")


def _settings(args: argparse.Namespace) -> Settings:
    settings = load_config(args.config)
    update: Dict[str, Any] = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.threads is not None:
        update["threads"] = args.threads
    if args.deterministic:
        update["deterministic"] = True
        update["threads"] = 1
    if update:
        run = settings.run.model_dump()
        run.update(update)
        try:
            settings = settings.model_copy(update={"run": type(settings.run).model_validate(run)})
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return settings


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        return args.out
    return new_run_dir(RUNS_DIR, args.command)


def _provenance(args: argparse.Namespace, settings: Settings) -> Dict[str, Any]:
    return {
        "command": args.command,
        "seed": settings.run.seed,
        "deterministic": settings.run.deterministic,
        "config": settings.model_dump(mode="json"),
        "config_hash": settings.hash,
    }


def split_seed(seed: int, split: str) -> int:
    """The training split uses the run seed; the others get independent streams."""
    if split == "train":
        return seed
    return int(np.random.SeedSequence([seed, SPLITS.index(split)]).generate_state(1)[0])


def load_scans(path: Path, num_classes: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """B-scans [N, H, W] and, when known, their true boundaries [N, B, W]."""
    path = Path(path)
    if path.is_dir():
        items, _ = load_dataset(path)
        if not items:
            raise ConfigError(f"dataset {path} is empty")
        volume = np.stack([image[0] for image, _ in items])
        truth = np.stack([boundaries_from_labels(mask, num_classes) for _, mask in items])
        return volume, truth
    if path.suffix.lower() in IMAGE_SUFFIXES:
        image = read_image(path).astype(np.float32)
        if image.ndim == 3:
            image = image[..., :3].mean(axis=2)
        return (image / 255.0)[None], None
    tensors, _ = container.load(path)
    if "volume" not in tensors:
        raise ConfigError(f"{path} holds no 'volume' tensor")
    return tensors["volume"], tensors.get("boundaries")


def _cmd_gen_data(args, settings: Settings) -> int:
    out = _out_dir(args)
    seed = settings.run.seed
    if args.kind == "patches":
        count = getattr(settings.run, f"{args.split}_count") if args.count is None else args.count
        seed = split_seed(seed, args.split)
        provenance = {**_provenance(args, settings), "split": args.split}
        generate_dataset(settings.phantom, count, seed, out, settings.run.threads, provenance)
    else:
        scans = settings.run.volume_scans if args.count is None else args.count
        volume, boundaries = generate_volume(settings.volume, scans, np.random.default_rng(seed))
        container.save(out / "volume.lmn", {"volume": volume, "boundaries": boundaries}, {"seed": seed})
        write_manifest(out, {**_provenance(args, settings), "kind": "volume", "count": scans, "file": "volume.lmn"})
        logger.info("wrote a %dx%dx%d phantom volume to %s", *volume.shape, out)
    print(out)
    return 0


def _load_patches(path: Path, settings: Settings) -> List[Tuple[np.ndarray, np.ndarray]]:
    items, _ = load_dataset(path)
    expected = (settings.net.patch_height, settings.net.patch_width)
    for image, mask in items:
        if mask.shape != expected:
            raise ConfigError(f"{path}: patches are {mask.shape[0]}x{mask.shape[1]}, net expects {expected[0]}x{expected[1]}")
    return items


def _write_training(args, settings: Settings, result: TrainResult, kind: str) -> int:
    out = _out_dir(args)
    save_weights(out / f"{kind}.lmn", result.weights)
    with open(out / "loss_curve.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "steps", "train_loss", "val_metric"])
        for e in result.curve:
            writer.writerow([e.epoch, e.steps, repr(e.train_loss), "" if e.val_metric is None else repr(e.val_metric)])
    write_manifest(out, {
        **_provenance(args, settings),
        "kind": kind,
        "weights": f"{kind}.lmn",
        "curve": [e.to_dict() for e in result.curve],
        "cancelled": result.cancelled,
    })
    print(out / f"{kind}.lmn")
    return 0


def _cmd_train_snet(args, settings: Settings) -> int:
    data = _load_patches(args.data, settings)
    val = _load_patches(args.val, settings) if args.val else None
    result = train_snet(data, settings.net, settings.optimizer, settings.schedule, settings.run.seed, val)
    return _write_training(args, settings, result, "snet")


def _cmd_train_rnet(args, settings: Settings) -> int:
    masks = [mask for _, mask in _load_patches(args.data, settings)]
    val = [mask for _, mask in _load_patches(args.val, settings)] if args.val else None
    result = train_rnet(
        masks, settings.net, settings.defects, settings.optimizer, settings.schedule, settings.run.seed, val
    )
    return _write_training(args, settings, result, "rnet")


def _load_pair(args) -> Tuple[Network, Network]:
    snet = network_from_weights(load_weights(args.snet), "snet")
    rnet = network_from_weights(load_weights(args.rnet), "rnet")
    return snet, rnet


def _cmd_infer(args, settings: Settings) -> int:
    snet, rnet = _load_pair(args)
    volume, _ = load_scans(args.volume, snet.config.num_classes)
    results = infer_volume(volume, snet, rnet, settings.pipeline, settings.run.threads, snet_baseline=True)
    out = _out_dir(args)
    boundaries = np.stack([r.boundaries for r in results])
    flat = np.stack([r.flat_boundaries for r in results])
    ordered = int((np.diff(flat, axis=1) >= 0).all(axis=1).sum())
    columns = flat.shape[0] * flat.shape[2]
    container.save(
        out / "boundaries.lmn",
        {
            "boundaries": boundaries,
            "flat_boundaries": flat,
            "snet_boundaries": np.stack([r.snet_boundaries for r in results]),
            "snet_unstacked": np.array([r.unstacked_columns for r in results], dtype=np.float32),
        },
        {"seed": settings.run.seed, "snet": str(args.snet), "rnet": str(args.rnet)},
    )
    write_manifest(out, {
        **_provenance(args, settings),
        "kind": "boundaries",
        "file": "boundaries.lmn",
        "scans": len(results),
        "ordered_columns": ordered,
        "columns": columns,
        "snet_unstacked_columns": [r.unstacked_columns for r in results],
    })
    with open(out / "timings.json", "w", encoding="utf-8") as f:
        json.dump([r.timings for r in results], f, indent=2)
    print(f"{ordered}/{columns} columns ordered; boundaries written to {out / 'boundaries.lmn'}")
    return 0


def _cmd_eval(args, settings: Settings) -> int:
    pred, _ = container.load(args.pred)
    if "boundaries" not in pred:
        raise ConfigError(f"{args.pred} holds no 'boundaries' tensor")
    _, truth = load_scans(args.truth, settings.net.num_classes)
    if truth is None:
        raise ConfigError(f"{args.truth} holds no ground-truth boundaries")
    compare = None
    if args.compare_snet:
        if "snet_boundaries" not in pred:
            raise ConfigError(f"{args.pred} holds no 'snet_boundaries' tensor")
        compare = {"S-Net": pred["snet_boundaries"]}
    report = Evaluator(settings.metrics).evaluate(pred["boundaries"], truth, DEFAULT_METHOD, compare)
    if "snet_unstacked" in pred:
        report.unstacked = (int(pred["snet_unstacked"].sum()), pred["boundaries"].shape[0] * pred["boundaries"].shape[-1])
    text = report.format_table()
    sys.stdout.write(text)
    if args.out is not None:
        out = _out_dir(args)
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        write_manifest(out, {**_provenance(args, settings), "kind": "report", "pred": str(args.pred)})
    return 0


def _cmd_gradcheck(args, settings: Settings) -> int:
    results = gradcheck.audit(
        instances=args.instances or settings.run.gradcheck_instances,
        seed=settings.run.seed,
        coords=args.coords or settings.run.gradcheck_coords,
        names=args.checks,
    )
    worst = 0.0
    for r in results:
        worst = max(worst, r.max_rel_error)
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<26} {r.max_rel_error:.3e}  {r.instances} instances, {r.redrawn} redrawn  {status}")
    print(f"max relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:.0e})")
    return 0 if all(r.passed for r in results) else 1


def _cmd_bench(args, settings: Settings) -> int:
    snet, rnet = _load_pair(args)
    if args.volume is not None:
        volume, _ = load_scans(args.volume, snet.config.num_classes)
    else:
        volume, _ = generate_volume(settings.volume, settings.run.volume_scans, np.random.default_rng(settings.run.seed))
    report = benchmark(volume, snet, rnet, settings.pipeline, args.runs or settings.run.bench_runs, settings.run.threads)
    sys.stdout.write(report.format_text())
    if args.out is not None:
        out = _out_dir(args)
        write_manifest(out, {**_provenance(args, settings), "kind": "bench", "timing": report.to_dict()})
    return 0 if any(r.error is None for r in report.runs) else 1


def _snet_probabilities(snet: Network, bscan: np.ndarray, settings: Settings):
    cfg = settings.pipeline
    flat, record = flatten_and_crop(bscan, estimate_baseline(bscan, cfg), cfg)
    layout = PatchLayout.for_width(flat.shape[-1], cfg.patch_size, cfg.patch_count)
    with no_grad():
        probs = [(start, snet_forward(snet, patch).data) for start, patch in extract_patches(flat, layout)]
    return stitch(probs, flat.shape[-1], cfg.stitch_weighting), record


def _cmd_render(args, settings: Settings) -> int:
    snet = network_from_weights(load_weights(args.snet), "snet") if args.snet else None
    num_classes = snet.config.num_classes if snet else settings.net.num_classes
    volume, truth = load_scans(args.volume, num_classes)
    pred = container.load(args.pred)[0]["boundaries"] if args.pred else None
    out = _out_dir(args)
    written = []
    for index in args.scans:
        if not 0 <= index < volume.shape[0]:
            raise ConfigError(f"scan index {index} outside 0..{volume.shape[0] - 1}")
        probabilities, record = _snet_probabilities(snet, volume[index], settings) if snet else (None, None)
        boundaries = pred[index] if pred is not None else (truth[index] if truth is not None else np.zeros((0, volume.shape[2])))
        written += render_scan(
            out, f"scan{index:03d}", volume[index], boundaries,
            truth=truth[index] if truth is not None and pred is not None else None,
            probabilities=probabilities, record=record,
        )
    for path in written:
        print(path)
    return 0


def _cmd_config(args, settings: Settings) -> int:
    if args.save:
        print(save_config(settings))
        return 0
    sys.stdout.write(yaml.safe_dump(settings.model_dump(mode="json"), sort_keys=False))
    return 0


def _cmd_runs(args, settings: Settings) -> int:
    for run in list_runs(RUNS_DIR):
        seed = "" if run["seed"] is None else run["seed"]
        print(f"{run['kind']:<12} {seed!s:<12} {run['dir']}")
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-snet": _cmd_train_snet,
    "train-rnet": _cmd_train_rnet,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
    "render": _cmd_render,
    "config": _cmd_config,
    "runs": _cmd_runs,
}


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, stream=sys.stderr, force=True
    )


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args.verbose)
    try:
        settings = _settings(args)
        return COMMANDS[args.command](args, settings)
    except (LayerSegError, OSError, ValueError) as e:
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        return 1


def main() -> None:
    sys.exit(run())
