"""
Tests for manifests, the evaluation harness, ablations, run artifacts and
the command line, using stand-in stylizers and small metric networks.

Run from your project root:
    pytest test_pipeline.py
"""

import json
import math
import os
import sys
from datetime import datetime

import numpy as np
import pandas as pd
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

# Add backend to path so imports work
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'backend'))
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'backend', 'scripts'))

import cocodiff
from components.dataset import ImageEntry, describe, load_image, load_manifest
from components.errors import (
    ConfigError,
    ManifestError,
    PipelineRuntimeError,
    StageError,
    ValidationError,
)
from components.metrics import MetricReport, MetricSuite
from components.metrics.extractors import InceptionFeatures, PerceptualExtractor, VGGFeatureExtractor
from config import config_hash, load_config
from core.ablation import TABLE_COLUMNS, ablation_settings, run_ablation, save_ablation
from core.artifacts import LABEL_HEIGHT, RunRecord, emit_grid, make_run_id, sidecar_path
from core.cycle import CycleState
from core.evaluation import PER_PAIR_COLUMNS, needs_calibration, run_calibrated, run_evaluation


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def write_png(path, seed, size=(16, 16)):
    rng = np.random.default_rng(seed)
    array = rng.integers(0, 256, size=(size[0], size[1], 3), dtype=np.uint8)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def write_manifest(root, contents=2, styles=3, extra_lines=()):
    lines = [json.dumps({'pairing': 'cartesian'})]
    for i in range(contents):
        write_png(os.path.join(root, 'content', f'c{i}.png'), i)
        lines.append(json.dumps({'kind': 'content', 'id': f'c{i}', 'path': f'content/c{i}.png'}))
    for i in range(styles):
        write_png(os.path.join(root, 'style', f's{i}.png'), 100 + i)
        lines.append(json.dumps({'kind': 'style', 'id': f's{i}', 'path': f'style/s{i}.png',
                                 'category': 'watercolor'}))
    lines.extend(extra_lines)
    path = os.path.join(root, 'manifest.jsonl')
    with open(path, 'w') as f:
        f.write('\n'.join(lines) + '\n')
    return path


class PoolNet(nn.Module):
    def forward(self, x):
        return F.adaptive_avg_pool2d(x, (2, 2)).flatten(1)


def toy_suite() -> MetricSuite:
    torch.manual_seed(0)
    conv1 = nn.Conv2d(3, 4, 3, padding=1)
    conv2 = nn.Conv2d(4, 6, 3, padding=1, stride=2)

    def feature_fn(images):
        a = F.relu(conv1(images))
        return [a, F.relu(conv2(a))]

    perceptual = PerceptualExtractor('toy', feature_fn, [torch.rand(4), torch.rand(6)])
    vgg = VGGFeatureExtractor(nn.Sequential(
        nn.Conv2d(3, 4, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
        nn.Conv2d(4, 4, 3, padding=1), nn.ReLU(inplace=True),
    ))
    return MetricSuite(perceptual=perceptual, vgg=vgg,
                       inception=InceptionFeatures('cpu', model=PoolNet(), dims=12),
                       cfsd_layer='relu2_1', cfsd_size=16, fid_size=16, batch_size=2)


@pytest.fixture(scope='module')
def suite():
    return toy_suite()


def make_config(output_dir, *overrides):
    return load_config(overrides=[f'pipeline.output_dir={output_dir}', 'backbone.resolution=16', *overrides])


def finished_state(image, z=1, reason='max_iters'):
    state = CycleState()
    for i in range(1, z + 1):
        state.record(i, 0.1, 0.2, image)
    state.stop_reason = reason
    return state


def identity_stylizer(content, style):
    return content.clone(), finished_state(content)


# ----------------------------------------------------------------------------
# manifests / image I/O
# ----------------------------------------------------------------------------

def test_manifest_cartesian_pairs(tmp_path):
    manifest = load_manifest(write_manifest(str(tmp_path), contents=2, styles=3))
    pairs = manifest.pairs()
    assert len(pairs) == 6
    assert (pairs[0][0].id, pairs[0][1].id) == ('c0', 's0')
    assert (pairs[-1][0].id, pairs[-1][1].id) == ('c1', 's2')
    assert describe(manifest)['styles'] == ['s0', 's1', 's2']


def test_manifest_explicit_pairs(tmp_path):
    root = str(tmp_path)
    path = write_manifest(root, extra_lines=[json.dumps({'kind': 'pair', 'content': 'c1', 'style': 's2'})])
    text = open(path).read().replace('"cartesian"', '"explicit"')
    with open(path, 'w') as f:
        f.write(text)
    pairs = load_manifest(path).pairs()
    assert [(c.id, s.id) for c, s in pairs] == [('c1', 's2')]


def test_manifest_collects_every_problem(tmp_path):
    root = str(tmp_path)
    path = write_manifest(root, extra_lines=[
        json.dumps({'kind': 'style', 'id': 'bad', 'path': 'style/s0.png', 'category': 'vaporwave'}),
        json.dumps({'kind': 'content', 'id': 'gone', 'path': 'content/nope.png'}),
        json.dumps({'kind': 'content', 'id': 'c0', 'path': 'content/c0.png'}),
    ])
    with pytest.raises(ManifestError) as info:
        load_manifest(path)
    assert len(info.value.errors) == 3


def test_manifest_missing_file(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(str(tmp_path / 'none.jsonl'))


def test_load_image_range_and_resize(tmp_path):
    path = write_png(str(tmp_path / 'img.png'), 0, size=(10, 20))
    image = load_image(path)
    assert image.shape == (3, 10, 20)
    assert image.min() >= 0 and image.max() <= 1
    assert load_image(path, (8, 12)).shape == (3, 8, 12)


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

def test_identity_stylizer_scores_zero_content_distance(tmp_path, suite):
    manifest = load_manifest(write_manifest(str(tmp_path / 'data')))
    config = make_config(tmp_path / 'out')
    report = run_evaluation(manifest, config, stylize=identity_stylizer, suite=suite, run_id='r1')

    assert report.pairs == 6 and report.excluded == 0
    assert report.lpips == 0.0
    assert report.cfsd == pytest.approx(0.0, abs=1e-9)
    assert report.artfid == pytest.approx(1 + report.fid)
    assert report.config_hash == config_hash(config)
    assert report.datasets['contents'] == ['c0', 'c1']


def test_evaluation_writes_report_table_and_sidecars(tmp_path, suite):
    manifest = load_manifest(write_manifest(str(tmp_path / 'data')))
    config = make_config(tmp_path / 'out')
    report = run_evaluation(manifest, config, stylize=identity_stylizer, suite=suite, run_id='r1')

    run_dir = tmp_path / 'out' / 'r1'
    loaded = MetricReport.load(str(run_dir / 'report.json'))
    assert loaded.fid == pytest.approx(report.fid)
    assert loaded.artfid == pytest.approx(report.artfid)

    table = pd.read_csv(run_dir / 'per_pair.csv')
    assert list(table.columns) == PER_PAIR_COLUMNS
    assert len(table) == 6
    assert set(table['stop_reason']) == {'max_iters'}

    out = run_dir / 'c0__s1.png'
    assert out.exists()
    record = RunRecord.load(sidecar_path(str(out), 'run'))
    assert record.status == 'ok' and record.command == 'evaluate'
    history = json.loads((run_dir / 'c0__s1.history.json').read_text())
    assert history['z'] == 1


def test_failed_pairs_are_excluded_and_counted(tmp_path, suite):
    manifest = load_manifest(write_manifest(str(tmp_path / 'data'), contents=2, styles=3))
    config = make_config(tmp_path / 'out')
    style_paths = {s.path for s in manifest.styles if s.id == 's2'}
    failing_style = load_image(next(iter(style_paths)), (16, 16))

    def flaky(content, style):
        if torch.equal(style, failing_style):
            raise RuntimeError('sampler diverged')
        return identity_stylizer(content, style)

    report = run_evaluation(manifest, config, stylize=flaky, suite=suite, run_id='r2')
    assert report.pairs == 4 and report.excluded == 2
    assert {e['style'] for e in report.exclusions} == {'s2'}
    assert all('sampler diverged' in e['error'] for e in report.exclusions)

    record = RunRecord.load(str(tmp_path / 'out' / 'r2' / 'c0__s2.run.json'))
    assert record.status == 'failed'
    assert not (tmp_path / 'out' / 'r2' / 'c0__s2.png').exists()


def test_every_pair_failing_is_a_runtime_error(tmp_path, suite):
    manifest = load_manifest(write_manifest(str(tmp_path / 'data')))

    def broken(content, style):
        raise RuntimeError('no')

    with pytest.raises(PipelineRuntimeError):
        run_evaluation(manifest, make_config(tmp_path / 'out'), stylize=broken, suite=suite, run_id='r3')


def test_existing_outputs_are_reused(tmp_path, suite):
    manifest = load_manifest(write_manifest(str(tmp_path / 'data')))
    config = make_config(tmp_path / 'out')
    run_evaluation(manifest, config, stylize=identity_stylizer, suite=suite, run_id='r4')

    def must_not_run(content, style):
        raise AssertionError('stylizer called for a reusable output')

    report = run_evaluation(manifest, config, stylize=must_not_run, suite=suite, run_id='r4')
    assert report.pairs == 6
    assert {row['stop_reason'] for row in report.per_pair} == {'reused'}

    with pytest.raises(PipelineRuntimeError):
        run_evaluation(manifest, config, stylize=must_not_run, suite=suite, run_id='r4',
                       reuse_outputs=False)


def test_evaluation_is_deterministic_across_workers(tmp_path, suite):
    manifest = load_manifest(write_manifest(str(tmp_path / 'data')))
    serial = run_evaluation(manifest, make_config(tmp_path / 'a'), stylize=identity_stylizer,
                            suite=suite, run_id='serial')
    pooled = run_evaluation(manifest, make_config(tmp_path / 'b', 'pipeline.workers=3'),
                            stylize=identity_stylizer, suite=suite, run_id='pooled')
    assert pooled.fid == pytest.approx(serial.fid)
    assert [(r['content'], r['style']) for r in pooled.per_pair] == \
           [(r['content'], r['style']) for r in serial.per_pair]


def test_evaluation_grid(tmp_path, suite):
    manifest = load_manifest(write_manifest(str(tmp_path / 'data'), contents=2, styles=2))
    config = make_config(tmp_path / 'out', 'pipeline.cell_size=32')
    grid = tmp_path / 'sheet.png'
    run_evaluation(manifest, config, stylize=identity_stylizer, suite=suite, run_id='g', grid_path=str(grid))
    with Image.open(grid) as sheet:
        # 4 pairs x (content, style, output), three per row
        assert sheet.size == (3 * 32, 4 * (32 + LABEL_HEIGHT))


# ----------------------------------------------------------------------------
# ablation
# ----------------------------------------------------------------------------

@pytest.mark.parametrize('axis, rows', [
    ('w', 5), ('start_step', 5), ('adain', 2), ('sobel-gram', 4), ('iterations', 6), ('comparator', 2),
])
def test_ablation_row_counts(axis, rows):
    assert len(ablation_settings(axis, load_config())) == rows


def test_ablation_unknown_axis():
    with pytest.raises(ConfigError):
        ablation_settings('guidance', load_config())


def test_iterations_axis_ends_with_adaptive_row():
    settings = ablation_settings('iterations', load_config())
    assert settings[0] == ('Z=1', {'cycle.max_iters': 1, 'cycle.adaptive': False})
    assert settings[-1] == ('adaptive', {'cycle.max_iters': 5, 'cycle.adaptive': True})


def test_run_ablation_applies_overrides_and_keeps_failed_rows(tmp_path):
    seen = []

    def fake_evaluate(manifest, config, suite=None):
        w = config['injection']['w']
        seen.append(w)
        if w == 1.8:
            raise PipelineRuntimeError('every pair failed')
        return MetricReport(fid=10 * w, lpips=0.1, cfsd=0.05, pairs=3, config_hash=config_hash(config))

    out = tmp_path / 'w.csv'
    table = run_ablation('w', manifest=None, config=load_config(), evaluate=fake_evaluate,
                         output_path=str(out))

    assert seen == [0.3, 0.6, 1.8, 2.4, 3.0]
    assert list(table.columns) == TABLE_COLUMNS
    assert list(table['setting']) == ['w=0.3', 'w=0.6', 'w=1.8', 'w=2.4', 'w=3.0']
    assert table.loc[1, 'artfid'] == pytest.approx(1.1 * 7.0)
    assert math.isnan(table.loc[2, 'fid'])
    assert len(set(table['config_hash'].dropna())) == 4

    assert out.exists()
    records = json.loads((tmp_path / 'w.json').read_text())
    assert len(records) == 5
    assert records[2]['fid'] is None


def test_save_ablation_round_trips_through_csv(tmp_path):
    table = pd.DataFrame([{'axis': 'adain', 'setting': 'adain=on', 'fid': 1.0, 'lpips': 0.2,
                           'artfid': 2.4, 'cfsd': 0.1, 'pairs': 2, 'excluded': 0,
                           'config_hash': 'abc', 'overrides': {'cycle.adain': True}}],
                         columns=TABLE_COLUMNS)
    path = tmp_path / 'adain.csv'
    save_ablation(table, str(path))
    assert pd.read_csv(path)['artfid'].tolist() == [2.4]


# ----------------------------------------------------------------------------
# artifacts
# ----------------------------------------------------------------------------

def test_run_id_format():
    config = load_config()
    run_id = make_run_id(config, datetime(2026, 1, 2, 3, 4, 5))
    assert run_id == f"20260102-030405-{config_hash(config)[:8]}"


def test_run_record_round_trip(tmp_path):
    record = RunRecord('c0', 's0', 'abc', str(tmp_path / 'o.png'), seed=42, seconds=1.5,
                       cycle={'z': 2})
    path = record.save()
    assert path == str(tmp_path / 'o.run.json')
    assert RunRecord.load(path) == record


def test_grid_single_image():
    sheet = emit_grid([('one', torch.rand(3, 8, 8))], cell_size=16)
    assert sheet.size == (16, 16 + LABEL_HEIGHT)


def test_grid_six_images_three_columns(tmp_path):
    items = [(f'#{i}', torch.rand(3, 8, 8)) for i in range(6)]
    path = tmp_path / 'grid.png'
    sheet = emit_grid(items, str(path), columns=3, cell_size=16)
    assert sheet.size == (48, 2 * (16 + LABEL_HEIGHT))
    assert path.exists()


def test_grid_letterboxes_without_touching_sources():
    wide = torch.zeros(3, 10, 20)
    before = wide.clone()
    sheet = emit_grid([('wide', wide)], cell_size=16)
    assert torch.equal(wide, before)
    # 20x10 fits as 16x8, centred vertically on white
    assert sheet.getpixel((8, 1)) == (255, 255, 255)
    assert sheet.getpixel((8, 8)) == (0, 0, 0)


def test_grid_rejects_empty_input():
    with pytest.raises(ValidationError):
        emit_grid([])


# ----------------------------------------------------------------------------
# command line
# ----------------------------------------------------------------------------

def test_cli_usage_errors_exit_one():
    with pytest.raises(SystemExit) as info:
        cocodiff.main(['transfer', '--content', 'a.png'])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        cocodiff.main(['paint'])
    assert info.value.code == 1


def test_cli_bad_config_exits_one(tmp_path):
    assert cocodiff.main(['--config', str(tmp_path / 'missing.json'), 'inspect']) == 1
    assert cocodiff.main(['--set', 'injection.w=-1', 'inspect']) == 1


def test_exit_code_mapping():
    assert cocodiff.exit_code_for(ValidationError('x')) == 1
    assert cocodiff.exit_code_for(PipelineRuntimeError('x')) == 2
    assert cocodiff.exit_code_for(StageError('sample', 1, ValidationError('x'))) == 1
    assert cocodiff.exit_code_for(StageError('sample', 1, RuntimeError('x'))) == 2


class FixtureBackbone:
    checkpoint_id = 'fixture/sd'

    def inspect_layers(self, image_size=None):
        return {'up_blocks.0': (1280, 16, 16), 'up_blocks.1': (1280, 32, 32)}


def test_cli_inspect_writes_fixture(tmp_path, monkeypatch):
    monkeypatch.setattr('components.backbone.load_backbone', lambda config: FixtureBackbone())
    out = tmp_path / 'layers.txt'
    assert cocodiff.main(['inspect', '--out', str(out), '--size', '512']) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == '# fixture/sd at 512x512'
    assert lines[1] == 'up_blocks.0 = 1280 16 16'
    record = RunRecord.load(str(tmp_path / 'layers.run.json'))
    assert record.status == 'ok'
    assert record.command.startswith('inspect')


def transfer_args(tmp_path):
    content = write_png(str(tmp_path / 'in' / 'cat.png'), 1)
    style = write_png(str(tmp_path / 'in' / 'ink.png'), 2)
    return ['--set', 'backbone.resolution=16', 'transfer',
            '--content', content, '--style', style, '--out', str(tmp_path / 'cat_ink.png')]


def test_cli_transfer_success(tmp_path, monkeypatch):
    monkeypatch.setattr('core.cycle.run_cycle',
                        lambda content, style, config: (content, finished_state(content, 2, 'threshold')))
    assert cocodiff.main(transfer_args(tmp_path)) == 0
    assert (tmp_path / 'cat_ink.png').exists()
    record = RunRecord.load(str(tmp_path / 'cat_ink.run.json'))
    assert (record.content_id, record.style_id) == ('cat', 'ink')
    assert record.cycle['z'] == 2 and record.cycle['stop_reason'] == 'threshold'


@pytest.mark.parametrize('cause, code', [(RuntimeError('boom'), 2), (ValidationError('bad'), 1)])
def test_cli_transfer_failure_codes(tmp_path, monkeypatch, cause, code):
    def fail(content, style, config):
        raise StageError('sample', 1, cause)

    monkeypatch.setattr('core.cycle.run_cycle', fail)
    assert cocodiff.main(transfer_args(tmp_path)) == code
    assert not (tmp_path / 'cat_ink.png').exists()
    record = RunRecord.load(str(tmp_path / 'cat_ink.run.json'))
    assert record.status == 'failed'


@pytest.mark.parametrize('override', ['injection.w=abc', 'backbone.num_steps=true', 'cycle.tau_c=low'])
def test_cli_mistyped_override_exits_one(override):
    assert cocodiff.main(['--set', override, 'inspect']) == 1


def test_cli_unexpected_runtime_failure_exits_two(tmp_path, monkeypatch):
    def out_of_memory(args, config):
        raise RuntimeError('CUDA out of memory')

    monkeypatch.setitem(cocodiff.COMMANDS, 'inspect', out_of_memory)
    out = tmp_path / 'layers.txt'
    assert cocodiff.main(['inspect', '--out', str(out)]) == 2
    record = RunRecord.load(str(tmp_path / 'layers.run.json'))
    assert record.status == 'failed'
    assert 'CUDA out of memory' in record.error


def test_cli_unreadable_content_image_exits_one(tmp_path):
    args = transfer_args(tmp_path)
    (tmp_path / 'in' / 'cat.png').write_bytes(b'not a png')
    assert cocodiff.main(args) == 1
    record = RunRecord.load(str(tmp_path / 'cat_ink.run.json'))
    assert record.status == 'failed'


def test_cli_accepts_full_training_length_schedule(monkeypatch, tmp_path):
    seen = {}

    def record_steps(args, config):
        seen['steps'] = config['backbone']['num_steps']
        return str(tmp_path / 'layers.txt')

    monkeypatch.setitem(cocodiff.COMMANDS, 'inspect', record_steps)
    assert cocodiff.main(['--set', 'backbone.num_steps=1000', '--set', 'injection.start_step=1000',
                          'inspect', '--out', str(tmp_path / 'layers.txt')]) == 0
    assert seen['steps'] == 1000


# ----------------------------------------------------------------------------
# calibration order
# ----------------------------------------------------------------------------

def style_major_pairs():
    contents = [ImageEntry(f'c{i}', f'c{i}.png') for i in range(3)]
    styles = [ImageEntry('s0', 's0.png'), ImageEntry('s1', 's1.png')]
    return [(c, s) for s in styles for c in contents]


def recording_batches(failing=(), reused=()):
    batches = []

    def run_batch(batch):
        batches.append([(c.id, s.id) for c, s in batch])
        rows = []
        for c, s in batch:
            row = {'content': c.id, 'style': s.id, 'stop_reason': 'max_iters'}
            if (c.id, s.id) in failing:
                row['error'] = 'boom'
            if (c.id, s.id) in reused:
                row['stop_reason'] = 'reused'
            rows.append(row)
        return rows

    return batches, run_batch


def test_run_calibrated_runs_one_pair_per_style_first():
    pairs = style_major_pairs()
    batches, run_batch = recording_batches()
    rows = run_calibrated(pairs, run_batch)
    assert batches == [[('c0', 's0'), ('c0', 's1')],
                       [('c1', 's0'), ('c2', 's0'), ('c1', 's1'), ('c2', 's1')]]
    assert [(r['content'], r['style']) for r in rows] == [(c.id, s.id) for c, s in pairs]


def test_failed_calibration_pair_hands_over_to_next_pair():
    batches, run_batch = recording_batches(failing={('c0', 's1')})
    rows = run_calibrated(style_major_pairs(), run_batch)
    assert batches[1] == [('c1', 's1')]
    assert batches[2] == [('c1', 's0'), ('c2', 's0'), ('c2', 's1')]
    assert sum('error' in r for r in rows) == 1


def test_reused_output_does_not_calibrate():
    batches, run_batch = recording_batches(reused={('c0', 's0')})
    run_calibrated(style_major_pairs(), run_batch)
    assert batches[1] == [('c1', 's0')]


def test_needs_calibration_only_for_adaptive_runs_without_thresholds():
    assert needs_calibration(load_config())
    assert not needs_calibration(load_config(overrides=['cycle.adaptive=false']))
    assert not needs_calibration(load_config(overrides=['cycle.tau_c=0.1', 'cycle.tau_s=1.0']))


def test_evaluation_continues_when_failure_record_cannot_be_written(tmp_path, monkeypatch, suite):
    manifest = load_manifest(write_manifest(str(tmp_path / 'data'), contents=2, styles=3))
    failing_style = load_image(manifest.style('s2').path, (16, 16))

    def flaky(content, style):
        if torch.equal(style, failing_style):
            raise RuntimeError('sampler diverged')
        return identity_stylizer(content, style)

    original_save = RunRecord.save

    def refuse_failed(self, path=None):
        if self.status == 'failed':
            raise OSError('disk full')
        return original_save(self, path)

    monkeypatch.setattr(RunRecord, 'save', refuse_failed)
    report = run_evaluation(manifest, make_config(tmp_path / 'out'), stylize=flaky, suite=suite,
                            run_id='r5')
    assert report.pairs == 4 and report.excluded == 2
    assert {e['style'] for e in report.exclusions} == {'s2'}
    assert not (tmp_path / 'out' / 'r5' / 'c0__s2.run.json').exists()
