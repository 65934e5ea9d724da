"""
Command line interface

Exit codes: 0 success, 2 input validation failure, 3 internal invariant
violation or replay mismatch.
"""

import sys
import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .config import TOOL_VERSION, ConfigManager
from .exceptions import BenchmarkError, InputValidationError
from .main import BenchmarkEngine, create_engine
from .tabular_io import parse_column_map

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = InputValidationError.exit_code


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--deterministic', action='store_true',
                        help='Omit the timestamp so identical runs give identical reports')
    parser.add_argument('--column-map', action='append', metavar='SRC=DST',
                        help='Rename an input column (repeatable)')


def build_parser() -> argparse.ArgumentParser:
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(
        prog='lung-bench',
        description='Lung screening benchmark - FROC/CPM, AUC and dataset curation',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s eval-detect --candidates cand.csv --annotations ann.csv --scans scans.csv
  %(prog)s eval-classify --scores scores.csv --meta meta.csv --group-by gender
  %(prog)s curate sws --candidates cand.csv --annotations ann.csv --out manifest.csv
  %(prog)s replay report.json
        """
    )
    parser.add_argument('--config', type=str, help='Configuration file path')
    parser.add_argument('--threads', type=int, help='Worker threads (processing.max_workers)')
    parser.add_argument('--progress', action='store_true', help='Show progress bars')
    parser.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging')
    parser.add_argument('--version', action='version', version=f'%(prog)s {TOOL_VERSION}')

    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    # eval-detect
    p = sub.add_parser('eval-detect', help='FROC, sensitivities at fixed FP rates and CPM')
    p.add_argument('--candidates', required=True, help='Candidate CSV')
    p.add_argument('--annotations', required=True, help='Annotation CSV')
    p.add_argument('--scans', required=True, help='Scan manifest CSV')
    p.add_argument('--exclusions', help='Exclusion CSV')
    p.add_argument('--criterion', help='center-sphere | center-box | iou:<t>')
    p.add_argument('--probe-size', type=float, help='Candidate probe cube edge in mm')
    p.add_argument('--bootstrap', type=int, metavar='N', help='Bootstrap replicates over scans')
    p.add_argument('--seed', type=int, help='Bootstrap seed')
    p.add_argument('--meta', help='Subject metadata CSV')
    p.add_argument('--group-by', help='Metadata attribute for the subgroup table')
    p.add_argument('--out', help='JSON report path (stdout when omitted)')
    p.add_argument('--svg', help='FROC figure path')
    _add_common(p)
    p.set_defaults(func=cmd_eval_detect)

    # eval-classify
    p = sub.add_parser('eval-classify', help='AUC with DeLong or bootstrap confidence intervals')
    p.add_argument('--scores', required=True, help='Score CSV (record_id, scan_id, score, label)')
    p.add_argument('--meta', help='Subject metadata CSV')
    p.add_argument('--group-by', help='Metadata attribute for the subgroup table')
    p.add_argument('--ci', help='delong | bootstrap:N')
    p.add_argument('--seed', type=int, help='Bootstrap seed')
    p.add_argument('--out', help='JSON report path (stdout when omitted)')
    p.add_argument('--svg', help='ROC figure path')
    _add_common(p)
    p.set_defaults(func=cmd_eval_classify)

    # curate
    curate = sub.add_parser('curate', help='Dataset curation')
    csub = curate.add_subparsers(dest='curate_command', metavar='STEP')
    csub.required = True

    p = csub.add_parser('nlst3d', help='Aggregate slice boxes into 3D annotations')
    p.add_argument('--slice-boxes', required=True, help='Slice box CSV')
    p.add_argument('--unit', choices=['index', 'mm'], help='Unit of the slice column')
    p.add_argument('--out', required=True, help='Annotation CSV to write')
    p.add_argument('--report', help='JSON report path (default: <out>.report.json)')
    _add_common(p)
    p.set_defaults(func=cmd_curate)

    p = csub.add_parser('negatives', help='Highest-confidence false positives')
    p.add_argument('--candidates', required=True)
    p.add_argument('--annotations', required=True)
    p.add_argument('--criterion')
    p.add_argument('--top-k', type=int)
    p.add_argument('--threshold', type=float)
    p.add_argument('--out', required=True, help='Candidate CSV to write')
    p.add_argument('--report')
    _add_common(p)
    p.set_defaults(func=cmd_curate)

    p = csub.add_parser('sws', help='Nodule / non-nodule manifest with stratified negatives')
    p.add_argument('--candidates', required=True)
    p.add_argument('--annotations', required=True)
    p.add_argument('--criterion')
    p.add_argument('--ratio', type=int, help='Negatives per positive')
    p.add_argument('--seed', type=int)
    p.add_argument('--patch-root', default='patches')
    p.add_argument('--out', required=True, help='Patch manifest CSV to write')
    p.add_argument('--report')
    _add_common(p)
    p.set_defaults(func=cmd_curate)

    p = csub.add_parser('labels', help='cancer / no-cancer manifest from labelled annotations')
    p.add_argument('--annotations', required=True)
    p.add_argument('--patch-root', default='patches')
    p.add_argument('--out', required=True, help='Patch manifest CSV to write')
    p.add_argument('--report')
    _add_common(p)
    p.set_defaults(func=cmd_curate)

    p = csub.add_parser('patches', help='Extract preprocessed patches for a manifest')
    p.add_argument('--manifest', required=True)
    p.add_argument('--volumes', required=True, help='Directory of <scan_id>.nii[.gz] volumes')
    p.add_argument('--out-dir', required=True)
    p.add_argument('--report')
    p.add_argument('--deterministic', action='store_true')
    p.set_defaults(func=cmd_curate)

    # replay
    p = sub.add_parser('replay', help='Re-run a report from its configuration echo and compare')
    p.add_argument('report', help='JSON report')
    p.set_defaults(func=cmd_replay)

    return parser


def _column_map(args) -> Dict[str, str]:
    return parse_column_map(getattr(args, 'column_map', None))


def _write(path: str, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding='utf-8')


def _finish_eval(args, result: Dict[str, Any]) -> int:
    if not result['success']:
        return _fail(result)

    report = result['report']
    artifacts = result['artifacts']
    if args.svg:
        _write(args.svg, artifacts['svg'])
    if args.out:
        report.save(args.out)
        sys.stdout.write(artifacts['text'])
    else:
        sys.stdout.write(report.to_json())
    return EXIT_OK


def _fail(result: Dict[str, Any]) -> int:
    print(f"error: {result.get('error', 'unknown error')}", file=sys.stderr)
    return int(result.get('exit_code', EXIT_INPUT))


def cmd_eval_detect(args, engine: BenchmarkEngine, argv: List[str]) -> int:
    if args.probe_size is not None:
        engine.config['matching']['probe_size_mm'] = args.probe_size
    result = engine.evaluate_detection(
        candidates=args.candidates, annotations=args.annotations, scans=args.scans,
        exclusions=args.exclusions, criterion=args.criterion, bootstrap=args.bootstrap,
        seed=args.seed, meta=args.meta, group_by=args.group_by, column_map=_column_map(args),
        render_svg=bool(args.svg), deterministic=args.deterministic, argv=argv
    )
    return _finish_eval(args, result)


def cmd_eval_classify(args, engine: BenchmarkEngine, argv: List[str]) -> int:
    result = engine.evaluate_classification(
        scores=args.scores, meta=args.meta, group_by=args.group_by, ci=args.ci, seed=args.seed,
        column_map=_column_map(args), render_svg=bool(args.svg),
        deterministic=args.deterministic, argv=argv
    )
    return _finish_eval(args, result)


def cmd_curate(args, engine: BenchmarkEngine, argv: List[str]) -> int:
    step = args.curate_command
    common = {'deterministic': args.deterministic, 'argv': argv}

    if step == 'nlst3d':
        result = engine.curate_nlst3d(args.slice_boxes, unit=args.unit, **common)
    elif step == 'negatives':
        result = engine.curate_negatives(args.candidates, args.annotations, args.criterion,
                                         args.top_k, args.threshold, _column_map(args), **common)
    elif step == 'sws':
        result = engine.curate_sws(args.candidates, args.annotations, args.criterion,
                                   args.ratio, args.seed, args.patch_root, _column_map(args),
                                   **common)
    elif step == 'labels':
        result = engine.curate_labels(args.annotations, args.patch_root, _column_map(args),
                                      **common)
    else:
        result = engine.curate_patches(args.manifest, args.volumes, args.out_dir, **common)

    if not result['success']:
        return _fail(result)

    artifacts = result['artifacts']
    if 'csv' in artifacts:
        _write(args.out, artifacts['csv'])
        report_path = args.report or f"{args.out}.report.json"
    else:
        report_path = args.report or str(Path(args.out_dir) / "report.json")
    result['report'].save(report_path)
    print(f"{result['report'].command}: wrote report {report_path}")
    return EXIT_OK


def cmd_replay(args, engine: BenchmarkEngine, argv: List[str]) -> int:
    result = engine.replay(args.report)
    if not result['success']:
        return _fail(result)
    print(f"replay OK: {result['command']} reproduces {args.report}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main function"""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)

    try:
        config = ConfigManager.load_config(args.config)
    except (OSError, ValueError, yaml.YAMLError) as e:
        print(f"error: configuration: {e}", file=sys.stderr)
        return EXIT_INPUT

    if args.threads is not None:
        config['processing']['max_workers'] = args.threads
    if args.progress:
        config['processing']['show_progress'] = True

    try:
        engine = create_engine(config=config,
                               log_level=logging.DEBUG if args.verbose else None)
        return args.func(args, engine, argv)
    except BenchmarkError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
