"""
Pretrained extractor weights: manifest, download and verification.

Files land in ``$COCODIFF_CACHE/checkpoints`` and torch.hub is pointed at
``$COCODIFF_CACHE`` so torchvision, lpips and pytorch-fid pick up the
verified copies instead of downloading their own.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import requests
import torch
from tqdm import tqdm

from components.errors import AssetError, ManifestError
from config import cache_dir

logger = logging.getLogger(__name__)

HEADERS = {'User-Agent': 'cocodiff-assets/1.0'}
CHUNK = 1 << 20


@dataclass(frozen=True)
class AssetSpec:
    name: str
    url: str
    sha256: str           # full digest or the prefix torch.hub embeds in file names
    filename: str


DEFAULT_ASSETS: Dict[str, AssetSpec] = {
    spec.name: spec for spec in (
        AssetSpec('vgg19', 'https://download.pytorch.org/models/vgg19-dcbb9e9d.pth',
                  'dcbb9e9d', 'vgg19-dcbb9e9d.pth'),
        AssetSpec('alexnet', 'https://download.pytorch.org/models/alexnet-owt-7be5be79.pth',
                  '7be5be79', 'alexnet-owt-7be5be79.pth'),
        AssetSpec('inception',
                  'https://github.com/mseitzer/pytorch-fid/releases/download/fid_weights/'
                  'pt_inception-2015-12-05-6726825d.pth',
                  '6726825d', 'pt_inception-2015-12-05-6726825d.pth'),
    )
}


def load_asset_manifest(path: Optional[str]) -> Dict[str, AssetSpec]:
    """``{name: {"url", "sha256", "filename"}}``; falls back to the built-in set."""
    if not path or not os.path.exists(path):
        return dict(DEFAULT_ASSETS)
    with open(path) as f:
        raw = json.load(f)

    assets, errors = {}, []
    for name, entry in raw.items():
        missing = [k for k in ('url', 'sha256') if k not in entry]
        if missing:
            errors.append(f"{name}: missing {', '.join(missing)}")
            continue
        filename = entry.get('filename') or os.path.basename(entry['url'])
        assets[name] = AssetSpec(name, entry['url'], entry['sha256'].lower(), filename)
    if errors:
        raise ManifestError(f"Invalid asset manifest {path}", errors)
    return assets


def checkpoint_dir() -> str:
    return os.path.join(cache_dir(), 'checkpoints')


def point_torch_hub() -> str:
    root = cache_dir()
    os.makedirs(os.path.join(root, 'checkpoints'), exist_ok=True)
    torch.hub.set_dir(root)
    return root


def sha256_of(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(CHUNK), b''):
            digest.update(block)
    return digest.hexdigest()


def verify(path: str, spec: AssetSpec) -> bool:
    return sha256_of(path).startswith(spec.sha256)


def _discard(path: str) -> None:
    if os.path.exists(path):
        os.remove(path)


def ensure_asset(spec: AssetSpec, session: Optional[requests.Session] = None) -> str:
    """Path of a verified local copy, downloading it if needed."""
    target = os.path.join(checkpoint_dir(), spec.filename)
    if os.path.exists(target):
        if verify(target, spec):
            return target
        logger.warning(f"{spec.filename} failed hash verification; downloading again")
        os.remove(target)

    os.makedirs(checkpoint_dir(), exist_ok=True)
    session = session or requests.Session()
    tmp = f"{target}.part"
    try:
        with session.get(spec.url, headers=HEADERS, stream=True, timeout=30) as response:
            if response.status_code != 200:
                raise AssetError(f"{spec.name}: {spec.url} returned status {response.status_code}")
            total = int(response.headers.get('content-length', 0)) or None
            with open(tmp, 'wb') as f, tqdm(total=total, unit='B', unit_scale=True,
                                            desc=spec.filename) as bar:
                for chunk in response.iter_content(CHUNK):
                    f.write(chunk)
                    bar.update(len(chunk))
    except requests.exceptions.Timeout as e:
        _discard(tmp)
        raise AssetError(f"{spec.name}: download timed out") from e
    except requests.exceptions.RequestException as e:
        _discard(tmp)
        raise AssetError(f"{spec.name}: download failed: {e}") from e
    except AssetError:
        _discard(tmp)
        raise

    if not verify(tmp, spec):
        os.remove(tmp)
        raise AssetError(f"{spec.name}: downloaded file does not match hash {spec.sha256}")
    os.replace(tmp, target)
    logger.info(f"Fetched {spec.name} -> {target}")
    return target


def prepare_assets(manifest_path: Optional[str], names: Iterable[str]) -> Dict[str, str]:
    """Point torch.hub at the cache and make sure every named asset is present."""
    point_torch_hub()
    assets = load_asset_manifest(manifest_path)
    paths = {}
    for name in names:
        if name not in assets:
            raise AssetError(f"Asset '{name}' is not in the asset manifest")
        paths[name] = ensure_asset(assets[name])
    return paths
