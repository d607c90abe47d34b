"""
Command line for the style-transfer toolkit.

    python backend/scripts/cocodiff.py transfer --content a.png --style b.png --out o.png
    python backend/scripts/cocodiff.py evaluate --manifest fixtures/desk_manifest.jsonl --grid sheet.png
    python backend/scripts/cocodiff.py gridsearch --keypoints fixtures/keypoints_example.jsonl
    python backend/scripts/cocodiff.py ablate --axis w --manifest fixtures/desk_manifest.jsonl --out w.csv
    python backend/scripts/cocodiff.py inspect --out fixtures/layers.txt

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
import time
from typing import List, Optional

# Add backend to path so imports work
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from components.errors import CocoDiffError, StageError, ValidationError
from config import config_hash, load_config

logger = logging.getLogger('cocodiff')

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    parser = CliParser(prog='cocodiff', description='Training-free style transfer toolkit')
    parser.add_argument('--config', help='JSON config file (see config.example.json)')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config value, e.g. --set injection.w=0.3')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    sub = parser.add_subparsers(dest='command', required=True, parser_class=CliParser)

    transfer = sub.add_parser('transfer', help='stylize one content image with one style image')
    transfer.add_argument('--content', required=True)
    transfer.add_argument('--style', required=True)
    transfer.add_argument('--out', required=True)

    evaluate = sub.add_parser('evaluate', help='stylize and score every pair of a manifest')
    evaluate.add_argument('--manifest', required=True)
    evaluate.add_argument('--run-id', help='reuse outputs of an earlier run directory')
    evaluate.add_argument('--grid', help='write a content/style/output contact sheet here')
    evaluate.add_argument('--no-reuse', action='store_true', help='always re-stylize')

    gridsearch = sub.add_parser('gridsearch', help='pick (t*, l*) by keypoint PCK')
    source = gridsearch.add_mutually_exclusive_group(required=True)
    source.add_argument('--keypoints', help='keypoint manifest (JSONL)')
    source.add_argument('--spair', help='SPair-71k root directory')
    gridsearch.add_argument('--split', default='test')
    gridsearch.add_argument('--limit', type=int, default=20)

    ablate = sub.add_parser('ablate', help='evaluate every setting along one axis')
    ablate.add_argument('--axis', required=True,
                        choices=['w', 'start_step', 'adain', 'sobel-gram', 'iterations', 'comparator'])
    ablate.add_argument('--manifest', required=True)
    ablate.add_argument('--out', required=True, help='CSV path; a JSON twin is written beside it')

    inspect = sub.add_parser('inspect', help='write the layer shape fixture for the checkpoint')
    inspect.add_argument('--out', default='fixtures/layers.txt')
    inspect.add_argument('--size', type=int, help='image side in pixels (default: backbone.resolution)')
    return parser


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_transfer(args, config) -> str:
    from components.dataset import load_image, square_size
    from core.artifacts import RunRecord, save_transfer
    from core.cycle import run_cycle

    size = square_size(config['backbone']['resolution'])
    content = load_image(args.content, size)
    style = load_image(args.style, size)
    started = time.time()
    image, state = run_cycle(content, style, config)

    record = RunRecord(
        content_id=os.path.splitext(os.path.basename(args.content))[0],
        style_id=os.path.splitext(os.path.basename(args.style))[0],
        config_hash=config_hash(config),
        output_path=args.out,
        seed=int(config['backbone']['seed']),
        seconds=round(time.time() - started, 3),
        command='transfer',
    )
    save_transfer(image, state, record)
    print(f"Stylized in {state.z} iteration(s) ({state.stop_reason}) -> {args.out}")
    return args.out


def cmd_evaluate(args, config) -> str:
    from components.dataset import load_manifest
    from core.artifacts import make_run_id
    from core.evaluation import run_evaluation

    manifest = load_manifest(args.manifest)
    run_id = args.run_id or make_run_id(config)
    report = run_evaluation(manifest, config, run_id=run_id,
                            reuse_outputs=not args.no_reuse, grid_path=args.grid)
    print(report.summary())
    return os.path.join(config['pipeline']['output_dir'], run_id, 'report.json')


def cmd_gridsearch(args, config) -> str:
    from components.backbone import load_backbone
    from components.correspondence import load_keypoint_manifest, load_spair, run_grid_search

    if args.keypoints:
        pairs = load_keypoint_manifest(args.keypoints)
    else:
        pairs = load_spair(args.spair, split=args.split, limit=args.limit)
    result = run_grid_search(pairs, config, load_backbone(config))
    print(f"t*={result.best.timestep} l*={result.best.layer} PCK@{result.alpha}={result.best_score:.3f} "
          f"-> {config['correspondence']['locator_cache']}")
    return config['correspondence']['locator_cache']


def cmd_ablate(args, config) -> str:
    from components.dataset import load_manifest
    from core.ablation import run_ablation

    table = run_ablation(args.axis, load_manifest(args.manifest), config, output_path=args.out)
    print(table[['setting', 'fid', 'lpips', 'artfid', 'cfsd']].to_string(index=False))
    return args.out


def cmd_inspect(args, config) -> str:
    from components.backbone import format_layer_fixture, load_backbone

    backbone = load_backbone(config)
    side = args.size or config['backbone']['resolution']
    shapes = backbone.inspect_layers((side, side))
    directory = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(directory, exist_ok=True)
    with open(args.out, 'w') as f:
        f.write(f"# {backbone.checkpoint_id} at {side}x{side}\n")
        f.write(format_layer_fixture(shapes))
    print(f"Wrote {len(shapes)} layer shapes to {args.out}")
    return args.out


COMMANDS = {
    'transfer': cmd_transfer,
    'evaluate': cmd_evaluate,
    'gridsearch': cmd_gridsearch,
    'ablate': cmd_ablate,
    'inspect': cmd_inspect,
}


def _record_command(args, config, output: str, started: float, command_line: str,
                    error: Optional[Exception] = None) -> None:
    """Run-level RunRecord for commands that do not write per-pair records."""
    from core.artifacts import RunRecord, sidecar_path

    if args.command == 'transfer' and error is None:
        return
    target = output or getattr(args, 'out', None) or os.path.join(config['pipeline']['output_dir'], args.command)
    record = RunRecord(
        content_id='', style_id='',
        config_hash=config_hash(config),
        output_path=target,
        seed=int(config['backbone']['seed']),
        seconds=round(time.time() - started, 3),
        status='failed' if error else 'ok',
        error=str(error) if error else None,
        command=command_line or args.command,
    )
    try:
        record.save(sidecar_path(target, 'run'))
    except OSError as e:
        logger.warning(f"Could not write run record for {target}: {e}")


def exit_code_for(error: Exception) -> int:
    if isinstance(error, StageError):
        error = error.cause
    return EXIT_INVALID if isinstance(error, ValidationError) else EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    try:
        config = load_config(args.config, args.overrides)
    except CocoDiffError as e:
        logger.error(str(e))
        return EXIT_INVALID

    started = time.time()
    command_line = ' '.join(sys.argv[1:] if argv is None else argv)
    output = ''
    try:
        output = COMMANDS[args.command](args, config)
    except CocoDiffError as e:
        logger.error(f"{args.command} failed: {e}")
        _record_command(args, config, output, started, command_line, e)
        return exit_code_for(e)
    except Exception as e:
        logger.exception(f"{args.command} failed unexpectedly: {e}")
        _record_command(args, config, output, started, command_line, e)
        return EXIT_RUNTIME
    _record_command(args, config, output, started, command_line)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
