"""
Benchmark engine: runs detection, classification and curation jobs and
packages each run as a reproducible report
"""

import copy
import logging
import tempfile
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from .classify_eval import (
    CiMethod, estimate, parse_ci_method, roc_points, subgroup_report
)
from .config import TOOL_VERSION, ConfigManager
from .curation import (
    GroupingParams, PatchManifest, SwsConfig, aggregate_all, derive_negatives,
    export_patches, label_manifest, sws_sample
)
from .detect_eval import (
    INTERPOLATION_RULE, CandidateStatus, froc, froc_bootstrap, froc_by_subgroup, match
)
from .exceptions import BenchmarkError, InputValidationError, InvariantViolation
from .geometry import HitCriterion, HitMode, Sphere
from .preprocess import PreprocessConfig
from .report import RunReport, auc_table, compare_numbers, froc_table, subgroup_froc_table
from .svg_plots import froc_series, render_curves, roc_series
from .tabular_io import (
    Annotation, emit_annotations, emit_candidates, parse_annotations, parse_candidates,
    parse_exclusions, parse_manifest, parse_metadata, parse_scores, parse_slice_boxes
)
from .utils import LOG_FORMAT, Timer, file_digest, format_duration, setup_logging, text_digest

logger = logging.getLogger(__name__)

EVAL_DETECT = "eval-detect"
EVAL_CLASSIFY = "eval-classify"
CURATE_NLST3D = "curate nlst3d"
CURATE_NEGATIVES = "curate negatives"
CURATE_SWS = "curate sws"
CURATE_LABELS = "curate labels"
CURATE_PATCHES = "curate patches"

# Report input roles of the volumes a patch export read
VOLUME_ROLE = "volume:"

THRESHOLD_RULE = "distinct probabilities > 0, descending"

# (results, artifacts) produced by one command
RunOutput = Tuple[Dict[str, Any], Dict[str, Any]]


def _pick(value: Any, default: Any) -> Any:
    return default if value is None else value


def default_criterion(annotations: List[Annotation]) -> HitCriterion:
    """center-sphere for diameter annotations, center-box for boxes"""
    if annotations and not all(isinstance(a.geometry, Sphere) for a in annotations):
        return HitCriterion(HitMode.CENTER_IN_BOX)
    return HitCriterion(HitMode.CENTER_IN_SPHERE)


class BenchmarkEngine:
    """Main benchmark class"""

    def __init__(self, config_path: Optional[str] = None,
                 config: Optional[Dict[str, Any]] = None,
                 log_level: Optional[int] = None):
        """Initialize the engine

        Args:
            config_path: Path to configuration file
            config: Already loaded configuration (takes precedence)
            log_level: Overrides logging.level from the configuration
        """
        self.config = config if config is not None else ConfigManager.load_config(config_path)

        is_valid, errors = ConfigManager.validate_config(self.config)
        if not is_valid:
            raise InputValidationError("Invalid configuration: " + "; ".join(errors))

        level = log_level
        if level is None:
            level = getattr(logging, str(self.config['logging']['level']).upper(), logging.INFO)
        setup_logging(self.config['project'].get('log_dir'), level,
                      self.config['logging'].get('format') or LOG_FORMAT)

        self._runners: Dict[str, Callable[[Dict[str, str], Dict[str, Any]], RunOutput]] = {
            EVAL_DETECT: self._run_detect,
            EVAL_CLASSIFY: self._run_classify,
            CURATE_NLST3D: self._run_nlst3d,
            CURATE_NEGATIVES: self._run_negatives,
            CURATE_SWS: self._run_sws,
            CURATE_LABELS: self._run_labels,
            CURATE_PATCHES: self._run_patches
        }

        self.stats = {'runs': 0, 'failures': 0, 'total_time': 0.0}
        logger.debug("Benchmark engine initialized")

    # ------------------------------------------------------------------
    # Configuration helpers
    # ------------------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.config['processing']['seed'])

    @property
    def max_workers(self) -> int:
        return int(self.config['processing']['max_workers'])

    @property
    def show_progress(self) -> bool:
        return bool(self.config['processing'].get('show_progress', False))

    def _criterion(self, settings: Dict[str, Any], annotations: List[Annotation]) -> HitCriterion:
        """Criterion from the run settings, then the configuration, then the annotation schema"""
        probe = float(settings['probe_size_mm'])
        text = _pick(settings.get('criterion'), self.config['matching'].get('criterion'))
        if not text:
            crit = default_criterion(annotations)
            logger.info(f"No hit criterion given, using {crit.describe()} for these annotations")
            return HitCriterion(crit.mode, crit.threshold, probe)
        return HitCriterion.parse(text, probe)

    # ------------------------------------------------------------------
    # Execution
    # ------------------------------------------------------------------

    def _execute(self, command: str, inputs: Dict[str, Optional[str]], settings: Dict[str, Any],
                 deterministic: bool = False, argv: Optional[List[str]] = None) -> Dict[str, Any]:
        """Run one command and wrap the outcome in a result dictionary"""
        timer = Timer().start()
        inputs = {role: str(path) for role, path in inputs.items() if path is not None}
        self.stats['runs'] += 1

        try:
            report = RunReport(TOOL_VERSION, command, list(argv or []))
            for role, path in sorted(inputs.items()):
                if not Path(path).exists():
                    raise InputValidationError(f"{role} file not found: {path}")
                report.add_input(role, path)

            results, artifacts = self._runners[command](inputs, settings)
            for role, path in sorted(artifacts.pop('inputs', {}).items()):
                report.add_input(role, path)
            report.config = settings
            report.results = results
            if not deterministic:
                report.stamp()

            elapsed = timer.stop()
            self.stats['total_time'] += elapsed
            logger.info(f"{command} finished in {format_duration(elapsed)}")
            return {
                'success': True,
                'exit_code': 0,
                'report': report,
                'artifacts': artifacts,
                'elapsed': elapsed
            }

        except BenchmarkError as e:
            self.stats['failures'] += 1
            logger.error(f"{command} failed: {e}")
            return {'success': False, 'exit_code': e.exit_code, 'error': str(e)}
        except Exception as e:
            self.stats['failures'] += 1
            logger.exception(f"{command} failed with an internal error")
            return {'success': False, 'exit_code': InvariantViolation.exit_code,
                    'error': f"internal error: {e}"}

    # ------------------------------------------------------------------
    # Detection
    # ------------------------------------------------------------------

    def evaluate_detection(self, candidates: str, annotations: str, scans: str,
                           exclusions: Optional[str] = None, criterion: Optional[str] = None,
                           bootstrap: Optional[int] = None, seed: Optional[int] = None,
                           meta: Optional[str] = None, group_by: Optional[str] = None,
                           column_map: Optional[Mapping[str, str]] = None,
                           render_svg: bool = False, deterministic: bool = False,
                           argv: Optional[List[str]] = None) -> Dict[str, Any]:
        """FROC, CPM and optional bootstrap CIs and subgroup table

        Args:
            candidates: Candidate CSV path
            annotations: Annotation CSV path
            scans: Scan manifest CSV path
            exclusions: Exclusion CSV path
            criterion: center-sphere, center-box or iou:<t>; derived from the
                annotation schema when neither given nor configured
            bootstrap: Replicate count; no bootstrap when None or 0
            seed: Bootstrap seed (defaults to processing.seed)
            meta: Subject metadata CSV, needed with group_by
            group_by: Metadata attribute for the subgroup table
            column_map: Extra header renames
            render_svg: Also render the FROC figure
            deterministic: Leave the timestamp out of the report
            argv: Command line recorded in the report

        Returns:
            Result dictionary with 'success', 'exit_code', 'report', 'artifacts'
        """
        froc_config = self.config['froc']
        settings = {
            'criterion': criterion,
            'probe_size_mm': float(self.config['matching']['probe_size_mm']),
            'fp_rates': [float(r) for r in froc_config['fp_rates']],
            'interpolation': INTERPOLATION_RULE,
            'thresholds': THRESHOLD_RULE,
            'bootstrap': {
                'replicates': int(bootstrap or 0),
                'seed': int(_pick(seed, self.seed)),
                'ci_level': float(froc_config['ci_level']),
                'max_retries': int(froc_config['max_retries']),
                'method': "percentile, scans resampled with replacement"
            },
            'group_by': group_by,
            'column_map': dict(column_map or {}),
            'render_svg': render_svg
        }
        inputs = {'candidates': candidates, 'annotations': annotations, 'scans': scans,
                  'exclusions': exclusions, 'meta': meta}
        return self._execute(EVAL_DETECT, inputs, settings, deterministic, argv)

    def _run_detect(self, inputs: Dict[str, str], settings: Dict[str, Any]) -> RunOutput:
        cmap = settings.get('column_map') or {}
        candidates = parse_candidates(inputs['candidates'], cmap)
        annotations = parse_annotations(inputs['annotations'], cmap)
        exclusions = parse_exclusions(inputs['exclusions'], cmap) if 'exclusions' in inputs else []
        manifest = parse_manifest(inputs['scans'], cmap)

        crit = self._criterion(settings, annotations)
        settings['criterion'] = crit.describe()

        m = match(candidates, annotations, exclusions, manifest, crit)
        curve = froc(m, tuple(settings['fp_rates']))
        results: Dict[str, Any] = {
            'match': {
                'n_scans': m.scan_count,
                'n_candidates': len(candidates),
                'n_annotations': len(annotations),
                'n_exclusions': len(exclusions),
                'tp': m.count(CandidateStatus.TP),
                'fp': m.count(CandidateStatus.FP),
                'ignored': m.count(CandidateStatus.IGNORED),
                'lesions_hit': sum(1 for x in m.lesions if x.hit_score is not None)
            },
            'froc': curve.to_dict()
        }

        boot = None
        b = settings['bootstrap']
        if b['replicates'] > 0:
            boot = froc_bootstrap(m, b['replicates'], b['seed'], tuple(settings['fp_rates']),
                                  b['ci_level'], b['max_retries'], self.max_workers,
                                  self.show_progress)
            results['bootstrap'] = boot.to_dict()
        text = froc_table(results['froc'], results.get('bootstrap'))

        if settings.get('group_by'):
            if 'meta' not in inputs:
                raise InputValidationError("--group-by needs --meta")
            meta = parse_metadata(inputs['meta'], cmap)
            rows = froc_by_subgroup(m, meta, settings['group_by'], tuple(settings['fp_rates']))
            results['subgroups'] = [r.to_dict() for r in rows]
            text += "\n" + subgroup_froc_table(results['subgroups'])

        artifacts = {'text': text}
        if settings.get('render_svg'):
            artifacts['svg'] = render_curves([froc_series(curve, bootstrap=boot)], "froc",
                                             title=f"FROC ({crit.describe()})")
        return results, artifacts

    # ------------------------------------------------------------------
    # Classification
    # ------------------------------------------------------------------

    def evaluate_classification(self, scores: str, meta: Optional[str] = None,
                                group_by: Optional[str] = None, ci: Optional[str] = None,
                                seed: Optional[int] = None,
                                column_map: Optional[Mapping[str, str]] = None,
                                render_svg: bool = False, deterministic: bool = False,
                                argv: Optional[List[str]] = None) -> Dict[str, Any]:
        """AUC with a DeLong or bootstrap CI, optionally per subgroup"""
        cls_config = self.config['classification']
        if ci is None:
            ci = cls_config['ci_method']
            if ci == CiMethod.BOOTSTRAP.value:
                ci = f"bootstrap:{int(cls_config['bootstrap_replicates'])}"
        method, n = parse_ci_method(ci)
        settings = {
            'ci': f"{method.value}:{n}" if method is CiMethod.BOOTSTRAP else method.value,
            'ci_level': float(cls_config['ci_level']),
            'seed': int(_pick(seed, self.seed)),
            'group_by': group_by,
            'column_map': dict(column_map or {}),
            'render_svg': render_svg
        }
        return self._execute(EVAL_CLASSIFY, {'scores': scores, 'meta': meta}, settings,
                             deterministic, argv)

    def _run_classify(self, inputs: Dict[str, str], settings: Dict[str, Any]) -> RunOutput:
        cmap = settings.get('column_map') or {}
        records = parse_scores(inputs['scores'], cmap)
        method, n = parse_ci_method(settings['ci'])
        n = n or 0
        level, seed = settings['ci_level'], settings['seed']

        est = estimate(records, method, n, seed, level, self.max_workers)
        results: Dict[str, Any] = {'n_records': len(records), 'auc': est.to_dict()}
        overall = {'group': "(all)", 'n_records': len(records), 'status': "ok", **est.to_dict()}
        text = auc_table([overall])

        if settings.get('group_by'):
            if 'meta' not in inputs:
                raise InputValidationError("--group-by needs --meta")
            meta = parse_metadata(inputs['meta'], cmap)
            rows = subgroup_report(records, meta, settings['group_by'], method, n, seed, level,
                                   self.max_workers)
            results['subgroups'] = [r.to_dict() for r in rows]
            text = auc_table(results['subgroups'])

        artifacts = {'text': text}
        if settings.get('render_svg'):
            artifacts['svg'] = render_curves([roc_series(roc_points(records), est)], "roc",
                                             title="ROC")
        return results, artifacts

    # ------------------------------------------------------------------
    # Curation
    # ------------------------------------------------------------------

    def curate_nlst3d(self, slice_boxes: str, unit: Optional[str] = None,
                      deterministic: bool = False,
                      argv: Optional[List[str]] = None) -> Dict[str, Any]:
        """Aggregate per-slice 2D boxes into 3D box annotations"""
        section = dict(self.config['curation'])
        if unit is not None:
            section['slice_unit'] = unit
        params = GroupingParams.from_config(section)
        return self._execute(CURATE_NLST3D, {'slice_boxes': slice_boxes},
                             {'grouping': params.echo()}, deterministic, argv)

    def _run_nlst3d(self, inputs: Dict[str, str], settings: Dict[str, Any]) -> RunOutput:
        params = GroupingParams.from_config(settings['grouping'])
        boxes = parse_slice_boxes(inputs['slice_boxes'], params.slice_unit)
        annotations = aggregate_all(boxes, params)
        csv_text = emit_annotations(annotations)
        results = {
            'slice_boxes': len(boxes),
            'nodules': len(annotations),
            'scans': len({a.scan_id for a in annotations}),
            'output_sha256': text_digest(csv_text)
        }
        return results, {'csv': csv_text}

    def curate_negatives(self, candidates: str, annotations: str,
                         criterion: Optional[str] = None, top_k: Optional[int] = None,
                         threshold: Optional[float] = None,
                         column_map: Optional[Mapping[str, str]] = None,
                         deterministic: bool = False,
                         argv: Optional[List[str]] = None) -> Dict[str, Any]:
        """Highest-confidence false positives as negatives"""
        settings = {
            'criterion': criterion,
            'probe_size_mm': float(self.config['matching']['probe_size_mm']),
            'top_k': top_k,
            'threshold': threshold,
            'column_map': dict(column_map or {})
        }
        return self._execute(CURATE_NEGATIVES,
                             {'candidates': candidates, 'annotations': annotations},
                             settings, deterministic, argv)

    def _run_negatives(self, inputs: Dict[str, str], settings: Dict[str, Any]) -> RunOutput:
        cmap = settings.get('column_map') or {}
        candidates = parse_candidates(inputs['candidates'], cmap)
        annotations = parse_annotations(inputs['annotations'], cmap)
        crit = self._criterion(settings, annotations)
        settings['criterion'] = crit.describe()

        negatives = derive_negatives(candidates, annotations, crit,
                                     settings.get('top_k'), settings.get('threshold'))
        csv_text = emit_candidates(negatives)
        results = {
            'candidates': len(candidates),
            'negatives': len(negatives),
            'output_sha256': text_digest(csv_text)
        }
        return results, {'csv': csv_text}

    def curate_sws(self, candidates: str, annotations: str, criterion: Optional[str] = None,
                   ratio: Optional[int] = None, seed: Optional[int] = None,
                   patch_root: str = "patches",
                   column_map: Optional[Mapping[str, str]] = None,
                   deterministic: bool = False,
                   argv: Optional[List[str]] = None) -> Dict[str, Any]:
        """Nodule / non-nodule manifest with confidence-stratified negatives"""
        sws = SwsConfig.from_config(self.config, int(_pick(seed, self.seed)))
        if ratio is not None:
            sws = SwsConfig(int(ratio), sws.strata, sws.shares, sws.seed)
        settings = {
            'criterion': criterion,
            'probe_size_mm': float(self.config['matching']['probe_size_mm']),
            'sampling': sws.echo(),
            'patch_root': patch_root,
            'column_map': dict(column_map or {})
        }
        return self._execute(CURATE_SWS, {'candidates': candidates, 'annotations': annotations},
                             settings, deterministic, argv)

    def _run_sws(self, inputs: Dict[str, str], settings: Dict[str, Any]) -> RunOutput:
        cmap = settings.get('column_map') or {}
        candidates = parse_candidates(inputs['candidates'], cmap)
        annotations = parse_annotations(inputs['annotations'], cmap)
        crit = self._criterion(settings, annotations)
        settings['criterion'] = crit.describe()

        sampling = settings['sampling']
        sws = SwsConfig(int(sampling['neg_pos_ratio']), tuple(sampling['strata']),
                        tuple(sampling['shares']), int(sampling['seed']))
        manifest = sws_sample(candidates, annotations, crit, sws, settings['patch_root'])
        csv_text = manifest.to_csv()
        summary = {k: v for k, v in manifest.summary.items() if k != 'config'}
        return {'summary': summary, 'output_sha256': text_digest(csv_text)}, {'csv': csv_text}

    def curate_labels(self, annotations: str, patch_root: str = "patches",
                      column_map: Optional[Mapping[str, str]] = None,
                      deterministic: bool = False,
                      argv: Optional[List[str]] = None) -> Dict[str, Any]:
        """cancer / no-cancer manifest from labelled annotations"""
        settings = {'patch_root': patch_root, 'column_map': dict(column_map or {})}
        return self._execute(CURATE_LABELS, {'annotations': annotations}, settings,
                             deterministic, argv)

    def _run_labels(self, inputs: Dict[str, str], settings: Dict[str, Any]) -> RunOutput:
        annotations = parse_annotations(inputs['annotations'], settings.get('column_map') or {},
                                        keep_labels=True)
        manifest = label_manifest(annotations, settings['patch_root'])
        csv_text = manifest.to_csv()
        return ({'summary': manifest.summary, 'output_sha256': text_digest(csv_text)},
                {'csv': csv_text})

    def curate_patches(self, manifest: str, volume_dir: str, out_dir: str,
                       deterministic: bool = False,
                       argv: Optional[List[str]] = None) -> Dict[str, Any]:
        """Write one preprocessed float32 patch per manifest row"""
        cfg = PreprocessConfig.from_config(self.config)
        settings = {'preprocess': cfg.echo(), 'volume_dir': str(volume_dir),
                    'out_dir': str(out_dir)}
        return self._execute(CURATE_PATCHES, {'manifest': manifest}, settings,
                             deterministic, argv)

    def _run_patches(self, inputs: Dict[str, str], settings: Dict[str, Any]) -> RunOutput:
        cfg = PreprocessConfig.from_config(settings['preprocess'])
        manifest = PatchManifest.load(inputs['manifest'])
        volumes = {role[len(VOLUME_ROLE):]: path for role, path in inputs.items()
                   if role.startswith(VOLUME_ROLE)}
        if not volumes:
            volumes = _find_volumes(manifest, Path(settings['volume_dir']))

        paths = export_patches(manifest, volumes, cfg, settings['out_dir'], self.max_workers,
                               self.show_progress)
        digests = {str(Path(p).relative_to(settings['out_dir'])): file_digest(p) for p in paths}
        read = {f"{VOLUME_ROLE}{scan_id}": str(path) for scan_id, path in volumes.items()}
        return {'patches': len(paths), 'digests': digests}, {'paths': paths, 'inputs': read}

    # ------------------------------------------------------------------
    # Replay
    # ------------------------------------------------------------------

    def replay(self, report_path: str) -> Dict[str, Any]:
        """Re-execute a saved report from its configuration echo and compare

        Returns:
            Result dictionary; exit_code 3 when inputs or results differ
        """
        try:
            report = RunReport.load(report_path)
            if report.command not in self._runners:
                raise InputValidationError(f"Unknown command in report: {report.command}")
            inputs = {}
            for role, info in sorted(report.inputs.items()):
                path = info['path']
                if not Path(path).exists():
                    raise InputValidationError(f"Replay input '{role}' not found: {path}")
                if file_digest(path) != info['sha256']:
                    raise InvariantViolation(f"Input '{role}' changed since the report: {path}")
                inputs[role] = path

            settings = copy.deepcopy(report.config)
            runner = self._runners[report.command]
            if report.command == CURATE_PATCHES:
                # only the patch digests are compared
                with tempfile.TemporaryDirectory() as scratch:
                    settings['out_dir'] = scratch
                    results, _ = runner(inputs, settings)
            else:
                results, _ = runner(inputs, settings)
            diffs = compare_numbers(report.results, results)
            if diffs:
                raise InvariantViolation(
                    f"Replay differs from the report at {len(diffs)} places: "
                    + ", ".join(diffs[:10]))

            logger.info(f"Replay of {report.command} matches {report_path}")
            return {'success': True, 'exit_code': 0, 'command': report.command, 'diffs': []}

        except BenchmarkError as e:
            logger.error(f"Replay failed: {e}")
            return {'success': False, 'exit_code': e.exit_code, 'error': str(e)}
        except Exception as e:
            logger.exception("Replay failed with an internal error")
            return {'success': False, 'exit_code': InvariantViolation.exit_code,
                    'error': f"internal error: {e}"}

    def get_statistics(self) -> Dict[str, Any]:
        """Get run statistics"""
        return self.stats.copy()


def _find_volumes(manifest: PatchManifest, volume_dir: Path) -> Dict[str, Path]:
    """scan_id -> <scan_id>.nii.gz or <scan_id>.nii under volume_dir"""
    volumes = {}
    for scan_id in sorted({r.scan_id for r in manifest.rows}):
        for suffix in ('.nii.gz', '.nii'):
            candidate = volume_dir / f"{scan_id}{suffix}"
            if candidate.exists():
                volumes[scan_id] = candidate
                break
        else:
            raise InputValidationError(f"No volume for scan '{scan_id}' in {volume_dir}")
    return volumes


def create_engine(config_path: Optional[str] = None, **kwargs) -> BenchmarkEngine:
    """Create and configure a benchmark engine

    Args:
        config_path: Path to configuration file

    Returns:
        Configured BenchmarkEngine instance
    """
    return BenchmarkEngine(config_path, **kwargs)


__all__ = ['BenchmarkEngine', 'create_engine', 'default_criterion']
