"""
Evaluation Harness
==================
Stylize every manifest pair (or reuse existing outputs) and score the run:

- FID between the stylized set and the style set
- mean LPIPS and mean CFSD between each stylized image and its content image
- ArtFID from the aggregate LPIPS and FID

Failed pairs are logged, excluded and counted in the report.

Main entry point: run_evaluation()
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Set, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from components.dataset import DatasetManifest, ImageEntry, describe, load_image, square_size
from components.errors import PipelineRuntimeError
from components.metrics import MetricReport, MetricSuite
from config import config_hash
from .artifacts import (
    RunRecord,
    emit_grid,
    make_run_id,
    pair_output_path,
    save_transfer,
    write_json_atomic,
)

logger = logging.getLogger(__name__)

# stylize(content, style) -> (image, CycleState)
Stylizer = Callable[[torch.Tensor, torch.Tensor], Tuple[torch.Tensor, object]]

PER_PAIR_COLUMNS = ['content', 'style', 'category', 'lpips', 'cfsd', 'iterations',
                    'stop_reason', 'tau_c', 'tau_s', 'seconds', 'output']


def engine_stylizer(config: Dict, suite: MetricSuite) -> Stylizer:
    """Default stylizer: one shared engine over the configured backbone."""
    from components.backbone import load_backbone
    from components.losses import LossEvaluator
    from .cycle import StyleTransferEngine

    backbone = load_backbone(config)
    losses = LossEvaluator.from_config(config, suite.vgg)
    engine = StyleTransferEngine(backbone, config, losses)

    def stylize(content: torch.Tensor, style: torch.Tensor):
        return engine.run(content, style)

    return stylize


def run_evaluation(
    manifest: DatasetManifest,
    config: Dict,
    stylize: Optional[Stylizer] = None,
    suite: Optional[MetricSuite] = None,
    run_id: Optional[str] = None,
    reuse_outputs: bool = True,
    grid_path: Optional[str] = None,
) -> MetricReport:
    """
    Evaluate a manifest under one config.

    Args:
        manifest: loaded DatasetManifest
        config: full config dict
        stylize: pair stylizer; defaults to the fitting-cycle engine
        suite: metric extractors; defaults to the pretrained ones
        run_id: output sub-directory; defaults to timestamp + config hash
        reuse_outputs: skip stylization when the output image already exists
        grid_path: optional contact sheet of content/style/output triples

    Returns:
        MetricReport (also written to <run dir>/report.json with a per-pair CSV)
    """
    suite = suite or MetricSuite.from_config(config)
    stylize = stylize or engine_stylizer(config, suite)
    run_id = run_id or make_run_id(config)
    digest = config_hash(config)
    output_dir = config['pipeline']['output_dir']
    run_dir = os.path.join(output_dir, run_id)
    size = square_size(config['backbone']['resolution'])
    seed = int(config['backbone']['seed'])
    pairs = manifest.pairs()

    def evaluate_pair(pair: Tuple[ImageEntry, ImageEntry]) -> Dict:
        content, style = pair
        out_path = pair_output_path(output_dir, run_id, content.id, style.id)
        row = {'content': content.id, 'style': style.id, 'category': style.category, 'output': out_path}
        started = time.time()
        try:
            content_img = load_image(content.path, size)
            if reuse_outputs and os.path.exists(out_path):
                stylized = load_image(out_path, size)
                row.update(iterations=None, stop_reason='reused')
            else:
                style_img = load_image(style.path, size)
                stylized, state = stylize(content_img, style_img)
                record = RunRecord(content.id, style.id, digest, out_path, seed,
                                   seconds=time.time() - started, command='evaluate')
                save_transfer(stylized, state, record)
                row.update(iterations=state.z, stop_reason=state.stop_reason,
                           tau_c=getattr(state, 'tau_c', None), tau_s=getattr(state, 'tau_s', None))
            row['lpips'] = suite.lpips(stylized, content_img)
            row['cfsd'] = suite.cfsd(content_img, stylized)
            row['seconds'] = round(time.time() - started, 3)
            row['stylized'] = stylized
            return row
        except Exception as e:
            logger.error(f"Pair {content.id}/{style.id} failed: {e}")
            try:
                RunRecord(content.id, style.id, digest, out_path, seed, seconds=time.time() - started,
                          status='failed', error=str(e), command='evaluate').save()
            except OSError as save_error:
                logger.warning(f"Could not write run record for {content.id}/{style.id}: {save_error}")
            row['error'] = str(e)
            return row

    workers = int(config['pipeline'].get('workers', 1))
    with tqdm(total=len(pairs), desc='pairs') as progress:
        def run_batch(batch: List[Tuple[ImageEntry, ImageEntry]]) -> List[Dict]:
            if workers > 1 and len(batch) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(evaluate_pair, batch))
            else:
                results = [evaluate_pair(p) for p in batch]
            progress.update(len(batch))
            return results

        if needs_calibration(config):
            rows = run_calibrated(pairs, run_batch)
        else:
            rows = run_batch(pairs)

    ok = [r for r in rows if 'error' not in r]
    exclusions = [{'content': r['content'], 'style': r['style'], 'error': r['error']}
                  for r in rows if 'error' in r]
    if exclusions:
        logger.warning(f"Excluded {len(exclusions)} of {len(rows)} pairs")
    if not ok:
        raise PipelineRuntimeError(f"Every pair failed ({len(rows)} attempted)")

    used_styles = {r['style'] for r in ok}
    style_images = [load_image(s.path, size) for s in manifest.styles if s.id in used_styles]
    fid_value = suite.fid(style_images, [r['stylized'] for r in ok])

    per_pair = [{k: r.get(k) for k in PER_PAIR_COLUMNS} for r in ok]
    report = MetricReport(
        fid=fid_value,
        lpips=float(np.mean([r['lpips'] for r in ok])),
        cfsd=float(np.mean([r['cfsd'] for r in ok])),
        pairs=len(ok),
        excluded=len(exclusions),
        config_hash=digest,
        extractors=suite.identifiers(),
        datasets=describe(manifest),
        exclusions=exclusions,
        config=config,
        per_pair=per_pair,
    )

    report.save(os.path.join(run_dir, 'report.json'))
    save_table(pd.DataFrame(per_pair, columns=PER_PAIR_COLUMNS), os.path.join(run_dir, 'per_pair.csv'))
    if grid_path:
        triples: List = []
        for r in ok:
            triples += [(r['content'], manifest.content(r['content']).path),
                        (r['style'], manifest.style(r['style']).path),
                        (f"{r['content']}__{r['style']}", r['stylized'])]
        emit_grid(triples, grid_path, columns=config['pipeline']['grid_columns'],
                  cell_size=config['pipeline']['cell_size'])

    logger.info(f"Run {run_id}: {report.summary()}")
    return report


def needs_calibration(config: Dict) -> bool:
    cycle = config['cycle']
    return bool(cycle['adaptive']) and (cycle['tau_c'] is None or cycle['tau_s'] is None)


def calibration_rounds(pairs: List[Tuple[ImageEntry, ImageEntry]], calibrated: Set[str]) -> List[int]:
    """Indices of the first pair of every style that has no calibrated thresholds yet."""
    seen = set()
    leaders = []
    for i, (_, style) in enumerate(pairs):
        if style.id not in calibrated and style.id not in seen:
            seen.add(style.id)
            leaders.append(i)
    return leaders


def run_calibrated(pairs: List[Tuple[ImageEntry, ImageEntry]],
                   run_batch: Callable[[List], List[Dict]]) -> List[Dict]:
    """
    Run the first pair of each style before the rest so its thresholds are
    cached when the other pairs of that style start. A failed calibration
    pair hands the job to the next pair of its style, and so does a pair whose
    output was reused. Rows keep manifest order.
    """
    pending = list(range(len(pairs)))
    rows: Dict[int, Dict] = {}
    calibrated: Set[str] = set()
    while pending:
        leaders = calibration_rounds([pairs[i] for i in pending], calibrated)
        batch = [pending[i] for i in leaders] if leaders else pending
        for index, row in zip(batch, run_batch([pairs[i] for i in batch])):
            rows[index] = row
            if 'error' not in row and row.get('stop_reason') != 'reused':
                calibrated.add(row['style'])
        taken = set(batch)
        pending = [i for i in pending if i not in taken]
    return [rows[i] for i in range(len(pairs))]


def save_table(frame: pd.DataFrame, path: str) -> None:
    """CSV written to a temp file and renamed into place."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    frame.to_csv(tmp, index=False)
    os.replace(tmp, path)


__all__ = ['run_evaluation', 'engine_stylizer', 'needs_calibration', 'run_calibrated', 'save_table',
           'write_json_atomic']
