"""
Image/label loading, tiling of large scenes, and adversarial dataset export.

Manifest format: a CSV with header `path,label` (classification) or `image,labelmap`
(segmentation), plus an optional JSON sidecar next to it with the same stem:

    {"class_names": [...], "pixel_range": [0, 255], "background_class": 5}

Export layout: images/, manifest.csv (+ sidecar), attack_config.json, delta_log.csv,
and labels/ for segmentation bundles.
"""
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from .config import Task
from .errors import ArgumentError, ExportError, LoadError

logger = logging.getLogger(__name__)

CLASSIFICATION_COLUMNS = ["path", "label"]
SEGMENTATION_COLUMNS = ["image", "labelmap"]


class ImageDataset(BaseModel):
    """Images in pixel units (H, W, C float64) with class ids or label maps."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    task: Task = Field(default=Task.classification)
    images: List[torch.Tensor] = Field(default_factory=list)
    labels: List[Any] = Field(default_factory=list, description="class ids, or (H, W) long label maps")
    class_names: List[str] = Field(default_factory=list)
    names: List[str] = Field(default_factory=list, description="file names used on export")
    background_class: Optional[int] = Field(default=None, description="label id excluded from valid pixels")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def valid_mask(self, index: int) -> Optional[torch.Tensor]:
        if self.task != Task.segmentation:
            return None
        label = self.labels[index]
        if self.background_class is None:
            return torch.ones_like(label, dtype=torch.bool)
        return label != self.background_class

    def subset(self, indices: Sequence[int]) -> "ImageDataset":
        return self.model_copy(
            update={
                "images": [self.images[i] for i in indices],
                "labels": [self.labels[i] for i in indices],
                "names": [self.names[i] for i in indices],
            }
        )

    def with_images(self, images: Sequence[torch.Tensor]) -> "ImageDataset":
        if len(images) != len(self.images):
            raise ArgumentError(f"expected {len(self.images)} images, got {len(images)}")
        return self.model_copy(update={"images": list(images)})


class ManifestRecord(BaseModel):
    image: str
    label: str = Field(description="class name, or label map path for segmentation")


class DatasetManifest(BaseModel):
    task: Task
    records: List[ManifestRecord]
    class_names: List[str]
    pixel_range: Tuple[float, float] = (0.0, 255.0)
    background_class: Optional[int] = None
    source: Optional[str] = None


class TileGeometry(BaseModel):
    height: int
    width: int
    boxes: List[Tuple[int, int, int, int]] = Field(description="(top, left, rows, cols) per tile")


class ExportBundle(BaseModel):
    root: str
    images: List[str]
    manifest_path: str
    config_path: str
    delta_log_path: str
    max_linf: float
    max_linf_rounded: float


# -- PNG codec ----------------------------------------------------------------

def read_image(path: os.PathLike) -> torch.Tensor:
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.float64)
    return torch.from_numpy(array.copy())


def read_label_map(path: os.PathLike) -> torch.Tensor:
    with Image.open(path) as img:
        array = np.asarray(img, dtype=np.int64)
    if array.ndim != 2:
        raise LoadError(f"{path}: label map must be single-channel")
    return torch.from_numpy(array.copy())


def to_uint8(image: torch.Tensor) -> np.ndarray:
    return np.clip(np.rint(image.detach().cpu().numpy()), 0, 255).astype(np.uint8)


@retry(stop=stop_after_attempt(3), wait=wait_fixed(0.2), retry=retry_if_exception_type(OSError), reraise=True)
def write_png(array: np.ndarray, path: os.PathLike) -> None:
    Image.fromarray(array).save(path, format="PNG")


def save_image(image: torch.Tensor, path: os.PathLike) -> Path:
    """8-bit PNG of an (H, W, C) or (H, W) tensor, rounded to nearest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_png(to_uint8(image), path)
    return path


# -- Loading ------------------------------------------------------------------

def _read_sidecar(manifest_path: Path) -> dict:
    sidecar = manifest_path.with_suffix(".json")
    if not sidecar.exists():
        return {}
    try:
        return json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise LoadError(f"{sidecar}: invalid JSON: {e}") from e


def load_dataset(manifest_path: os.PathLike) -> ImageDataset:
    """Decode every record of a manifest CSV into an ImageDataset (pixel range [0, 255])."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError(f"manifest {manifest_path} not found")
    table = pd.read_csv(manifest_path, dtype=str, keep_default_na=False)
    columns = list(table.columns)
    if columns == CLASSIFICATION_COLUMNS:
        task = Task.classification
    elif columns == SEGMENTATION_COLUMNS:
        task = Task.segmentation
    else:
        raise LoadError(f"{manifest_path}: unexpected header {columns}")

    meta = _read_sidecar(manifest_path)
    base = manifest_path.parent
    records = [ManifestRecord(image=row[0], label=row[1]) for row in table.itertuples(index=False)]
    if task == Task.classification:
        class_names = list(meta.get("class_names") or sorted({r.label for r in records}))
    else:
        class_names = list(meta.get("class_names") or [])
    class_ids = {name: i for i, name in enumerate(class_names)}

    images, labels, names = [], [], []
    for row, record in enumerate(records, start=1):
        image_path = base / record.image
        if not image_path.exists():
            raise LoadError(f"row {row}: image {record.image} not found")
        images.append(read_image(image_path))
        names.append(Path(record.image).name)
        if task == Task.classification:
            if record.label not in class_ids:
                raise LoadError(f"row {row}: unknown class {record.label!r}")
            labels.append(class_ids[record.label])
            continue
        label_path = base / record.label
        if not label_path.exists():
            raise LoadError(f"row {row}: label map {record.label} not found")
        label_map = read_label_map(label_path)
        if label_map.shape != images[-1].shape[:2]:
            raise LoadError(f"row {row}: label map size {tuple(label_map.shape)} differs from image")
        if class_names and int(label_map.max()) >= len(class_names):
            raise LoadError(f"row {row}: label id {int(label_map.max())} has no class name")
        labels.append(label_map)

    if task == Task.segmentation and not class_names:
        n_v = max(int(m.max()) for m in labels) + 1 if labels else 0
        class_names = [f"class_{i:02d}" for i in range(n_v)]

    logger.info("Loaded %d %s records from %s", len(images), task.value, manifest_path)
    return ImageDataset(
        task=task,
        images=images,
        labels=labels,
        class_names=class_names,
        names=names,
        background_class=meta.get("background_class"),
    )


def _write_dataset_files(dataset: ImageDataset, root: Path, images: Sequence[torch.Tensor]) -> Path:
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, image, label in zip(dataset.names, images, dataset.labels):
        file_name = Path(name).with_suffix(".png").name
        save_image(image, root / "images" / file_name)
        if dataset.task == Task.classification:
            rows.append((f"images/{file_name}", dataset.class_names[label]))
        else:
            save_image(label.to(torch.float64), root / "labels" / file_name)
            rows.append((f"images/{file_name}", f"labels/{file_name}"))
    columns = CLASSIFICATION_COLUMNS if dataset.task == Task.classification else SEGMENTATION_COLUMNS
    manifest_path = root / "manifest.csv"
    pd.DataFrame(rows, columns=columns).to_csv(manifest_path, index=False)
    sidecar = {
        "class_names": dataset.class_names,
        "pixel_range": [0, 255],
        "background_class": dataset.background_class,
    }
    manifest_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return manifest_path


def _commit(tmp: Path, out_dir: Path, overwrite: bool) -> None:
    if out_dir.exists():
        if not overwrite and any(out_dir.iterdir()):
            raise ExportError(f"{out_dir} exists and is not empty")
        shutil.rmtree(out_dir)
    os.replace(tmp, out_dir)


def save_dataset(dataset: ImageDataset, out_dir: os.PathLike, overwrite: bool = False) -> Path:
    """Write a dataset as PNGs plus manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-dataset-", dir=out_dir.parent))
    try:
        _write_dataset_files(dataset, tmp, dataset.images)
        _commit(tmp, out_dir, overwrite)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir / "manifest.csv"


# -- Tiling -------------------------------------------------------------------

def _tile_starts(size: int, tile: int, stride: int) -> List[Tuple[int, int]]:
    if tile >= size:
        return [(0, size)]
    starts = list(range(0, size - tile, stride)) + [size - tile]
    return [(s, tile) for s in starts]


def tile_image(image: torch.Tensor, tile: int, overlap: int = 0) -> Tuple[List[torch.Tensor], TileGeometry]:
    """Cut an (H, W[, C]) tensor into tiles; the last tile on each axis sits flush to the edge."""
    if overlap < 0 or tile <= overlap:
        raise ArgumentError(f"need tile > overlap >= 0, got tile={tile}, overlap={overlap}")
    h, w = image.shape[0], image.shape[1]
    stride = tile - overlap
    boxes = [
        (top, left, rows, cols)
        for top, rows in _tile_starts(h, tile, stride)
        for left, cols in _tile_starts(w, tile, stride)
    ]
    tiles = [image[top : top + rows, left : left + cols] for top, left, rows, cols in boxes]
    return tiles, TileGeometry(height=h, width=w, boxes=boxes)


def reassemble(tiles: Sequence[torch.Tensor], geometry: TileGeometry) -> torch.Tensor:
    """Inverse of tile_image; overlapping regions are averaged."""
    if len(tiles) != len(geometry.boxes) or not tiles:
        raise ArgumentError(f"got {len(tiles)} tiles for {len(geometry.boxes)} boxes")
    trailing = tuple(tiles[0].shape[2:])
    total = torch.zeros((geometry.height, geometry.width) + trailing, dtype=tiles[0].dtype)
    count = torch.zeros((geometry.height, geometry.width) + (1,) * len(trailing), dtype=tiles[0].dtype)
    for t, (top, left, rows, cols) in zip(tiles, geometry.boxes):
        if tuple(t.shape) != (rows, cols) + trailing:
            raise ArgumentError(f"tile shape {tuple(t.shape)} does not match box {(rows, cols)}")
        total[top : top + rows, left : left + cols] += t
        count[top : top + rows, left : left + cols] += 1
    if bool((count == 0).any()):
        raise ArgumentError("geometry leaves pixels uncovered")
    return total / count


# -- Export -------------------------------------------------------------------

def export_adversarial_set(
    results: Sequence[Any],
    out_dir: os.PathLike,
    dataset: ImageDataset,
    config: Optional[dict] = None,
    overwrite: bool = False,
) -> ExportBundle:
    """Write adversarial images as 8-bit PNGs next to a manifest, config record and l-inf log.

    Everything is written to a temporary sibling directory and renamed into place, so a
    failure leaves no partial bundle behind.
    """
    if len(results) != len(dataset):
        raise ArgumentError(f"{len(results)} results for {len(dataset)} records")
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".tmp-export-", dir=out_dir.parent))
    try:
        adversarial = [r.adversarial for r in results]
        _write_dataset_files(dataset, tmp, adversarial)

        log_rows = []
        for name, clean, result in zip(dataset.names, dataset.images, results):
            rounded = torch.from_numpy(to_uint8(result.adversarial).astype(np.float64))
            log_rows.append(
                {
                    "file": Path(name).with_suffix(".png").name,
                    "linf": float((result.adversarial - clean).abs().max()),
                    "linf_rounded": float((rounded - clean).abs().max()),
                    "error": result.error or "",
                }
            )
        log = pd.DataFrame(log_rows, columns=["file", "linf", "linf_rounded", "error"])
        log.to_csv(tmp / "delta_log.csv", index=False)
        (tmp / "attack_config.json").write_text(json.dumps(config or {}, indent=2, sort_keys=True))
        _commit(tmp, out_dir, overwrite)
    except Exception as e:
        shutil.rmtree(tmp, ignore_errors=True)
        if isinstance(e, ExportError):
            raise
        raise ExportError(f"export to {out_dir} failed: {e}") from e

    logger.info("Exported %d adversarial images to %s", len(results), out_dir)
    return ExportBundle(
        root=str(out_dir),
        images=[str(out_dir / "images" / row["file"]) for row in log_rows],
        manifest_path=str(out_dir / "manifest.csv"),
        config_path=str(out_dir / "attack_config.json"),
        delta_log_path=str(out_dir / "delta_log.csv"),
        max_linf=float(log["linf"].max()) if len(log) else 0.0,
        max_linf_rounded=float(log["linf_rounded"].max()) if len(log) else 0.0,
    )
