import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel

from ..errors import CompatibilityError, ContainerError
from . import container
from .nets import NetConfig, Network, build_network

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"


def config_hash(model: Union[BaseModel, Dict[str, Any]]) -> str:
    data = model.model_dump(mode="json") if isinstance(model, BaseModel) else model
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def new_run_dir(root: Path, name: str) -> Path:
    safe_name = "".join(c for c in name if c.isalnum() or c in "_- ")[:50].strip()
    run_dir = Path(root) / f"{datetime.now().strftime('%Y-%m-%d_%H-%M-%S')}_{safe_name}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_manifest(run_dir: Path, data: Dict[str, Any]) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / MANIFEST_FILE
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
    except OSError as e:
        raise ContainerError(f"cannot write {path}: {e}") from e
    return path


def read_manifest(run_dir: Path) -> Dict[str, Any]:
    path = Path(run_dir) / MANIFEST_FILE
    if not path.exists():
        raise ContainerError(f"no {MANIFEST_FILE} in {run_dir}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def list_runs(root: Path) -> List[Dict[str, Any]]:
    root = Path(root)
    if not root.exists():
        return []
    runs = []
    for run_dir in sorted(root.iterdir(), reverse=True):
        if not (run_dir / MANIFEST_FILE).exists():
            continue
        data = read_manifest(run_dir)
        runs.append({"kind": data.get("kind", ""), "seed": data.get("seed"), "dir": str(run_dir)})
    return runs


@dataclass
class DatasetManifest:
    kind: str = "patches"
    count: int = 0
    seed: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    config_hash: str = ""
    items: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def item_file(index: int) -> str:
    return f"item_{index:05d}.lmn"


def save_item(run_dir: Path, index: int, image: np.ndarray, mask: np.ndarray, seed: int) -> str:
    name = item_file(index)
    container.save(Path(run_dir) / name, {"image": image, "mask": mask}, {"seed": int(seed)})
    return name


def load_dataset(run_dir: Path) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], DatasetManifest]:
    manifest = DatasetManifest.from_dict(read_manifest(run_dir))
    items = []
    for entry in manifest.items:
        tensors, _ = container.load(Path(run_dir) / entry["file"])
        items.append((tensors["image"], np.rint(tensors["mask"]).astype(np.int64)))
    return items, manifest


@dataclass
class WeightStore:
    kind: str
    params: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def net_config(self) -> NetConfig:
        return NetConfig.model_validate(self.metadata["net_config"])


def weights_from_network(net: Network, seed: int, step_count: int, **extra: Any) -> WeightStore:
    metadata = {
        "kind": net.kind,
        "net_config": net.config.model_dump(mode="json"),
        "config_hash": config_hash(net.config),
        "seed": int(seed),
        "step_count": int(step_count),
    }
    metadata.update(extra)
    return WeightStore(kind=net.kind, params=net.state(), metadata=metadata)


def save_weights(path: Union[str, Path], store: WeightStore) -> None:
    container.save(path, store.params, store.metadata)
    logger.info("saved %s weights (%d tensors) to %s", store.kind, len(store.params), path)


def load_weights(path: Union[str, Path]) -> WeightStore:
    params, metadata = container.load(path)
    for key in ("kind", "net_config", "config_hash"):
        if key not in metadata:
            raise ContainerError(f"{path}: weight file metadata lacks {key!r}")
    logger.debug("loaded %s weights from %s, step %s", metadata["kind"], path, metadata.get("step_count"))
    return WeightStore(kind=metadata["kind"], params=params, metadata=metadata)


def network_from_weights(store: WeightStore, expected_kind: Optional[str] = None) -> Network:
    if expected_kind is not None and store.kind != expected_kind:
        raise CompatibilityError(f"expected {expected_kind} weights, got {store.kind}")
    cfg = store.net_config
    if config_hash(cfg) != store.metadata["config_hash"]:
        raise CompatibilityError(f"{store.kind} weights: stored config hash does not match its network config")
    net = build_network(store.kind, cfg)
    net.load_state(store.params)
    return net
