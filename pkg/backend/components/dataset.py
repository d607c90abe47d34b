"""
Dataset manifests and image I/O.

Manifest format: JSON lines. An optional header line sets the pairing mode,
then content, style and (explicit mode only) pair records:

    {"pairing": "cartesian"}
    {"kind": "content", "id": "c01", "path": "content/c01.png"}
    {"kind": "style", "id": "s01", "path": "style/s01.png", "category": "watercolor"}
    {"kind": "pair", "content": "c01", "style": "s01"}

Relative paths resolve against the manifest's directory.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from components.errors import ImageReadError, ManifestError

logger = logging.getLogger(__name__)

STYLE_CATEGORIES = (
    'oil_painting',
    'kids_illustration',
    'watercolor',
    'ghibli',
    'landscape_woodblock',
    'chinese_ink',
    'sketch',
    'pop_art',
    'impressionism',
    'cubism',
    'cyberpunk',
    'pointillism',
    'crayon',
)

PAIRING_MODES = ('cartesian', 'explicit')


@dataclass(frozen=True)
class ImageEntry:
    id: str
    path: str
    category: Optional[str] = None


@dataclass
class DatasetManifest:
    contents: List[ImageEntry]
    styles: List[ImageEntry]
    pairing: str = 'cartesian'
    explicit_pairs: List[Tuple[str, str]] = field(default_factory=list)
    source: str = ''

    def pairs(self) -> List[Tuple[ImageEntry, ImageEntry]]:
        """(content, style) pairs in manifest order."""
        if self.pairing == 'cartesian':
            return [(c, s) for c in self.contents for s in self.styles]
        content_by_id = {c.id: c for c in self.contents}
        style_by_id = {s.id: s for s in self.styles}
        return [(content_by_id[c], style_by_id[s]) for c, s in self.explicit_pairs]

    def content(self, entry_id: str) -> ImageEntry:
        return next(c for c in self.contents if c.id == entry_id)

    def style(self, entry_id: str) -> ImageEntry:
        return next(s for s in self.styles if s.id == entry_id)


def load_manifest(path: str) -> DatasetManifest:
    """
    Parse and validate a manifest.

    Validation is atomic: every problem (missing file, duplicate id, unknown
    category, dangling pair) is collected and raised in one ManifestError.
    """
    if not os.path.exists(path):
        raise ManifestError(f"Manifest not found: {path}")

    base_dir = os.path.dirname(os.path.abspath(path))
    pairing = 'cartesian'
    contents: List[ImageEntry] = []
    styles: List[ImageEntry] = []
    pairs: List[Tuple[str, str]] = []
    errors: List[str] = []

    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                errors.append(f"line {line_no}: not JSON ({e})")
                continue

            if 'pairing' in record and 'kind' not in record:
                pairing = record['pairing']
                continue

            kind = record.get('kind')
            if kind in ('content', 'style'):
                if 'id' not in record or 'path' not in record:
                    errors.append(f"line {line_no}: {kind} entry needs 'id' and 'path'")
                    continue
                image_path = os.path.join(base_dir, record['path'])
                if not os.path.exists(image_path):
                    errors.append(f"line {line_no}: missing file {record['path']}")
                category = record.get('category')
                if kind == 'style' and category is not None and category not in STYLE_CATEGORIES:
                    errors.append(f"line {line_no}: unknown style category '{category}'")
                entry = ImageEntry(str(record['id']), image_path, category)
                (contents if kind == 'content' else styles).append(entry)
            elif kind == 'pair':
                if 'content' not in record or 'style' not in record:
                    errors.append(f"line {line_no}: pair entry needs 'content' and 'style'")
                    continue
                pairs.append((str(record['content']), str(record['style'])))
            else:
                errors.append(f"line {line_no}: unknown kind '{kind}'")

    if pairing not in PAIRING_MODES:
        errors.append(f"unknown pairing mode '{pairing}'")
    if not contents:
        errors.append("no content entries")
    if not styles:
        errors.append("no style entries")

    for label, entries in (('content', contents), ('style', styles)):
        seen = set()
        for entry in entries:
            if entry.id in seen:
                errors.append(f"duplicate {label} id '{entry.id}'")
            seen.add(entry.id)

    if pairing == 'explicit':
        content_ids = {c.id for c in contents}
        style_ids = {s.id for s in styles}
        if not pairs:
            errors.append("explicit pairing without pair entries")
        for c, s in pairs:
            if c not in content_ids:
                errors.append(f"pair references unknown content '{c}'")
            if s not in style_ids:
                errors.append(f"pair references unknown style '{s}'")
    elif pairs:
        logger.warning(f"{path}: pair entries ignored in cartesian mode")

    if errors:
        raise ManifestError(f"Invalid manifest {path}", errors)

    manifest = DatasetManifest(contents, styles, pairing, pairs, source=path)
    logger.info(
        f"Loaded manifest {path}: {len(contents)} content, {len(styles)} style, "
        f"{len(manifest.pairs())} pairs ({pairing})"
    )
    return manifest


# ============================================================================
# image I/O
# ============================================================================

def load_image(path: str, size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """
    Read an RGB image as a (3, H, W) float tensor in [0, 1].

    Args:
        size: optional (height, width) to resize to (bicubic)
    """
    try:
        with Image.open(path) as img:
            img = img.convert('RGB')
            if size is not None:
                img = img.resize((size[1], size[0]), Image.BICUBIC)
            array = np.asarray(img, dtype=np.float32) / 255.0
    except OSError as e:
        raise ImageReadError(f"Cannot read image {path}: {e}") from e
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def to_pil(image: torch.Tensor) -> Image.Image:
    array = (image.detach().float().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).round()
    return Image.fromarray(array.astype(np.uint8))


def atomic_save(image: Image.Image, path: str, fmt: str = 'PNG') -> None:
    """Write to a sibling temp file, then rename over the target."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            image.save(f, format=fmt)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_image(image: torch.Tensor, path: str) -> None:
    atomic_save(to_pil(image), path)


def square_size(resolution: int) -> Tuple[int, int]:
    return int(resolution), int(resolution)


def describe(manifest: DatasetManifest) -> Dict:
    return {
        'source': manifest.source,
        'pairing': manifest.pairing,
        'contents': [c.id for c in manifest.contents],
        'styles': [s.id for s in manifest.styles],
    }
