import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from django_aegan.evaluation import (
    METRICS,
    EvalOptions,
    MetricsReport,
    build_report,
    compare_runs,
    evaluate_subjects,
    kfold_summary,
    read_metric_rows,
)
from django_aegan.exceptions import ResolutionError
from django_aegan.management.commands._base import ExperimentCommand
from django_aegan.models import ExperimentRun, MetricRecord
from django_aegan.networks import load_checkpoint
from django_aegan.serializers import COMMAND_EVAL, ExperimentConfig
from django_aegan.training import infer_volume
from django_aegan.volumes import DatasetManifest, write_csv


REPORT_FILENAME = 'metrics.json'
ROWS_FILENAME = 'metrics.csv'
CSV_COLUMNS = ['subject', 'drf', 'source'] + list(METRICS)

Scored = Tuple[List[Dict], MetricsReport]


def evaluate_checkpoint(manifest: DatasetManifest, checkpoint, opts: EvalOptions, label: str) -> Scored:
    payload = load_checkpoint(checkpoint)
    rows, report = evaluate_subjects(
        manifest,
        lambda low: infer_volume(payload, low),
        drfs=opts.drfs,
        split=opts.split,
        with_roi=opts.with_roi,
        label=label,
        ordering=opts.ordering
    )
    report.scanner_profiles['train'] = str(payload.get('scanner_profile', ''))
    return rows, report


def evaluate_folds(manifest: DatasetManifest, folds_path: str, opts: EvalOptions) -> List[Scored]:
    """
    Scores every fold checkpoint listed in a `folds.json`; checkpoint
    names are relative to that file.
    """
    path = Path(folds_path)
    if not path.exists():
        raise ResolutionError('Fold list {} does not exist.'.format(path))

    scored = []
    for fold in json.loads(path.read_text(encoding='utf-8')):
        rows, report = evaluate_checkpoint(
            manifest, path.parent / fold['checkpoint'], opts, 'fold {}'.format(fold['fold'])
        )
        for row in rows:
            row['fold'] = fold['fold']
        scored.append((rows, report))
    return scored


def store_metrics(run: ExperimentRun, rows: List[Dict]) -> List[MetricRecord]:
    """
    One record per `(subject, drf, source)`; rows repeated across folds
    are averaged. An infinite PSNR is stored as null.
    """
    grouped: Dict[Tuple, List[Dict]] = {}
    for row in rows:
        grouped.setdefault((row['subject'], int(row['drf']), row['source']), []).append(row)

    records = []
    for (subject, drf, source), group in sorted(grouped.items()):
        values = {m: float(np.mean([r[m] for r in group])) for m in METRICS}
        records.append(MetricRecord(
            run=run,
            subject=subject,
            drf=drf,
            source=source,
            psnr=values['psnr'] if math.isfinite(values['psnr']) else None,
            ssim=values['ssim'],
            nrmse=values['nrmse']
        ))
    return MetricRecord.objects.bulk_create(records)


class Command(ExperimentCommand):
    help = 'Scores a checkpoint (or a set of fold checkpoints) against the full-dose volumes.'
    command_name = COMMAND_EVAL

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.record: Optional[ExperimentRun] = None

    def start(self, config: ExperimentConfig, run_dir: Path) -> Optional[ExperimentRun]:
        self.record = super().start(config, run_dir)
        return self.record

    def run(self, config: ExperimentConfig, run_dir: Path, options) -> Dict:
        manifest = DatasetManifest.load(config.manifest)
        opts = config.eval
        columns = list(CSV_COLUMNS)

        rows, report = [], None
        if config.checkpoint:
            rows, report = evaluate_checkpoint(manifest, config.checkpoint, opts, opts.label)

        if opts.folds:
            scored = evaluate_folds(manifest, opts.folds, opts)
            fold_reports = [r for _, r in scored]
            baseline = None
            if opts.baseline_folds:
                baseline = [r for _, r in evaluate_folds(manifest, opts.baseline_folds, opts)]

            if report is None:
                rows = [row for fold_rows, _ in scored for row in fold_rows]
                roi_rows = [row for r in fold_reports if r.roi for row in r.roi['rows']]
                report = build_report(
                    rows, roi_rows,
                    label=opts.label,
                    ordering=opts.ordering,
                    scanner_profiles=fold_reports[0].scanner_profiles
                )
                columns.append('fold')
            report.kfold = kfold_summary(fold_reports, baseline)

        if opts.compare_with:
            report.ttest = compare_runs(rows, read_metric_rows(opts.compare_with))

        report.save(run_dir / REPORT_FILENAME)
        write_csv(rows, run_dir / ROWS_FILENAME, columns)
        if self.record is not None:
            store_metrics(self.record, rows)

        for drf, values in sorted(report.per_drf.items()):
            self.stdout.write('DRF {:>3}  PSNR {:8.3f}  SSIM {:.4f}  NRMSE {:7.3f}'.format(
                drf, values['psnr'], values['ssim'], values['nrmse']
            ))
        self.success('Scored {} rows; report written to {}'.format(len(rows), run_dir / REPORT_FILENAME))
        return {
            'report': str(run_dir / REPORT_FILENAME),
            'rows': len(rows),
            'headline': {m: report.headline(m) for m in METRICS},
            'sections': [key for key in ('roi', 'ttest', 'kfold') if getattr(report, key)],
        }
