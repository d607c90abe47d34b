"""
Run artifacts: run ids, output layout, RunRecord sidecars and contact sheets.

Layout:
    outputs/<run-id>/<content-id>__<style-id>.png
    outputs/<run-id>/<content-id>__<style-id>.history.json   (CycleState)
    outputs/<run-id>/<content-id>__<style-id>.run.json       (RunRecord)
"""

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from PIL import Image, ImageDraw, ImageFont

from components.dataset import atomic_save, to_pil
from components.errors import ValidationError
from config import config_hash

logger = logging.getLogger(__name__)

LABEL_HEIGHT = 20
BACKGROUND = (255, 255, 255)
LABEL_COLOR = (20, 20, 20)


def make_run_id(config: Dict, now: Optional[datetime] = None) -> str:
    stamp = (now or datetime.now()).strftime('%Y%m%d-%H%M%S')
    return f"{stamp}-{config_hash(config)[:8]}"


def pair_stem(content_id: str, style_id: str) -> str:
    return f"{content_id}__{style_id}"


def pair_output_path(output_dir: str, run_id: str, content_id: str, style_id: str) -> str:
    return os.path.join(output_dir, run_id, f"{pair_stem(content_id, style_id)}.png")


def sidecar_path(image_path: str, kind: str) -> str:
    stem, _ = os.path.splitext(image_path)
    return f"{stem}.{kind}.json"


def write_json_atomic(path: str, data) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix='.tmp')
    try:
        with os.fdopen(fd, 'w') as f:
            json.dump(data, f, indent=2, default=str)
            f.write('\n')
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


@dataclass
class RunRecord:
    content_id: str
    style_id: str
    config_hash: str
    output_path: str
    seed: int
    seconds: float = 0.0
    status: str = 'ok'                  # 'ok' | 'failed'
    cycle: Dict = field(default_factory=dict)
    error: Optional[str] = None
    command: str = 'transfer'

    def to_dict(self) -> Dict:
        return asdict(self)

    def save(self, path: Optional[str] = None) -> str:
        path = path or sidecar_path(self.output_path, 'run')
        write_json_atomic(path, self.to_dict())
        return path

    @classmethod
    def load(cls, path: str) -> 'RunRecord':
        with open(path) as f:
            return cls(**json.load(f))


def save_transfer(image: torch.Tensor, state, record: RunRecord) -> None:
    """Output image, CycleState history sidecar and RunRecord, each written atomically."""
    atomic_save(to_pil(image), record.output_path)
    write_json_atomic(sidecar_path(record.output_path, 'history'), state.to_dict())
    record.cycle = {k: v for k, v in state.to_dict().items() if k != 'history'}
    record.save()
    logger.info(f"Wrote {record.output_path}")


# ============================================================================
# CONTACT SHEETS
# ============================================================================

GridItem = Tuple[str, Union[torch.Tensor, Image.Image, str]]


def _as_pil(source) -> Image.Image:
    if isinstance(source, Image.Image):
        return source.convert('RGB')
    if isinstance(source, str):
        with Image.open(source) as img:
            return img.convert('RGB')
    return to_pil(source)


def letterbox(image: Image.Image, size: int) -> Image.Image:
    """Fit inside a size x size cell, aspect preserved, centred on white."""
    scale = size / max(image.size)
    width = max(1, round(image.width * scale))
    height = max(1, round(image.height * scale))
    resized = image.resize((width, height), Image.BICUBIC)
    cell = Image.new('RGB', (size, size), BACKGROUND)
    cell.paste(resized, ((size - width) // 2, (size - height) // 2))
    return cell


def emit_grid(items: Sequence[GridItem], path: Optional[str] = None, columns: int = 3,
              cell_size: int = 256, label_height: int = LABEL_HEIGHT) -> Image.Image:
    """
    Row-major contact sheet with a label band under every cell.

    Args:
        items: (label, image) pairs; images may be tensors, PIL images or paths
        path: where to save the sheet (atomically); None only returns it
    """
    if not items:
        raise ValidationError("emit_grid needs at least one image")
    if columns < 1 or cell_size < 1:
        raise ValidationError("columns and cell_size must be positive")

    cols = min(columns, len(items))
    rows = math.ceil(len(items) / cols)
    cell_h = cell_size + label_height
    sheet = Image.new('RGB', (cols * cell_size, rows * cell_h), BACKGROUND)
    draw = ImageDraw.Draw(sheet)
    font = ImageFont.load_default()

    for i, (label, source) in enumerate(items):
        row, col = divmod(i, cols)
        x, y = col * cell_size, row * cell_h
        sheet.paste(letterbox(_as_pil(source), cell_size), (x, y))
        draw.text((x + 4, y + cell_size + 3), str(label)[:48], fill=LABEL_COLOR, font=font)

    if path:
        atomic_save(sheet, path)
        logger.info(f"Wrote {rows}x{cols} grid to {path}")
    return sheet
