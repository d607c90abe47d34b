"""
Ablation runner: one evaluation per setting along a single axis, collected
into a pandas table.

Axes:
    w            injection strength over pipeline.ablation.w
    start_step   injection start over pipeline.ablation.start_step
    adain        AdaIN on/off
    sobel-gram   the four on/off combinations of the two losses
    iterations   fixed Z over pipeline.ablation.iterations plus one adaptive row
    comparator   'paper' vs 'conventional' content-stopping comparator
"""

import logging
import os
from typing import Callable, Dict, List, Optional, Tuple

import pandas as pd

from components.dataset import DatasetManifest
from components.errors import ConfigError
from config import with_overrides
from .artifacts import write_json_atomic
from .evaluation import run_evaluation, save_table

logger = logging.getLogger(__name__)

Setting = Tuple[str, Dict]

TABLE_COLUMNS = ['axis', 'setting', 'fid', 'lpips', 'artfid', 'cfsd', 'pairs', 'excluded',
                 'config_hash', 'overrides']


def _w(config: Dict) -> List[Setting]:
    return [(f"w={v}", {'injection.w': v}) for v in config['pipeline']['ablation']['w']]


def _start_step(config: Dict) -> List[Setting]:
    return [(f"start_step={s}", {'injection.start_step': s})
            for s in config['pipeline']['ablation']['start_step']]


def _adain(config: Dict) -> List[Setting]:
    return [('adain=on', {'cycle.adain': True}), ('adain=off', {'cycle.adain': False})]


def _sobel_gram(config: Dict) -> List[Setting]:
    rows = []
    for sobel in (False, True):
        for gram in (False, True):
            label = f"sobel={'on' if sobel else 'off'},gram={'on' if gram else 'off'}"
            rows.append((label, {'losses.use_sobel': sobel, 'losses.use_gram': gram}))
    return rows


def _iterations(config: Dict) -> List[Setting]:
    fixed = config['pipeline']['ablation']['iterations']
    rows = [(f"Z={n}", {'cycle.max_iters': n, 'cycle.adaptive': False}) for n in fixed]
    rows.append(('adaptive', {'cycle.max_iters': max(fixed), 'cycle.adaptive': True}))
    return rows


def _comparator(config: Dict) -> List[Setting]:
    return [(f"comparator={c}", {'cycle.comparator': c}) for c in ('paper', 'conventional')]


AXES: Dict[str, Callable[[Dict], List[Setting]]] = {
    'w': _w,
    'start_step': _start_step,
    'adain': _adain,
    'sobel-gram': _sobel_gram,
    'iterations': _iterations,
    'comparator': _comparator,
}


def ablation_settings(axis: str, config: Dict) -> List[Setting]:
    if axis not in AXES:
        raise ConfigError(f"Unknown ablation axis '{axis}'; expected one of {sorted(AXES)}")
    return AXES[axis](config)


def run_ablation(axis: str, manifest: DatasetManifest, config: Dict,
                 evaluate: Optional[Callable] = None, suite=None,
                 output_path: Optional[str] = None) -> pd.DataFrame:
    """
    Evaluate every setting of one axis.

    A setting whose evaluation fails gets a row with NaN metrics and the
    error logged; the remaining settings still run.
    """
    evaluate = evaluate or run_evaluation
    rows = []
    for label, overrides in ablation_settings(axis, config):
        logger.info(f"Ablation {axis}: {label}")
        setting_config = with_overrides(config, overrides)
        row = {'axis': axis, 'setting': label, 'overrides': overrides}
        try:
            report = evaluate(manifest, setting_config, suite=suite)
            row.update(fid=report.fid, lpips=report.lpips, artfid=report.artfid, cfsd=report.cfsd,
                       pairs=report.pairs, excluded=report.excluded, config_hash=report.config_hash)
        except Exception as e:
            logger.error(f"Ablation setting {label} failed: {e}")
        rows.append(row)

    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    if output_path:
        save_ablation(table, output_path)
    return table


def save_ablation(table: pd.DataFrame, path: str) -> None:
    """CSV at path plus a JSON records twin next to it."""
    save_table(table, path)
    stem, _ = os.path.splitext(path)
    records = table.astype(object).where(table.notna(), None).to_dict(orient='records')
    write_json_atomic(f"{stem}.json", records)
    logger.info(f"Wrote ablation table {path}")
