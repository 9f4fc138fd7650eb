"""
PNG charts rendered from one or more metrics reports.
"""
import logging
from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from django_aegan.evaluation import METRICS, MetricsReport, WEIGHT_ORDERINGS  # noqa: E402
from django_aegan.exceptions import ArgumentError  # noqa: E402
from django_aegan.volumes import PathLike  # noqa: E402


logger = logging.getLogger(__name__)

METRICS_BY_DRF = 'metrics_by_drf.png'
WEIGHTED_SCORES = 'weighted_scores.png'
SSP_COMPARISON = 'ssp_comparison.png'
ROI_ERROR_BOX = 'roi_error_box.png'

LABELS = {'psnr': 'PSNR (dB)', 'ssim': 'SSIM', 'nrmse': 'NRMSE (%)'}


def _label(report: MetricsReport, index: int) -> str:
    return report.label or 'run {}'.format(index + 1)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(str(path), dpi=120)
    plt.close(fig)
    logger.debug('Wrote %s', path)
    return path


def plot_metrics_by_drf(reports: Sequence[MetricsReport], path: Path) -> Path:
    drfs = sorted({d for r in reports for d in r.per_drf})
    series = [(_label(r, i), r.per_drf) for i, r in enumerate(reports)]
    series.append(('low dose', reports[0].low_dose))
    width = 0.8 / len(series)

    fig, axes = plt.subplots(1, len(METRICS), figsize=(5 * len(METRICS), 4))
    for ax, metric in zip(axes, METRICS):
        for n, (name, block) in enumerate(series):
            values = [block.get(d, {}).get(metric, np.nan) for d in drfs]
            ax.bar(np.arange(len(drfs)) + n * width, values, width, label=name)
        ax.set_xticks(np.arange(len(drfs)) + width * (len(series) - 1) / 2)
        ax.set_xticklabels(['DRF {}'.format(d) for d in drfs])
        ax.set_ylabel(LABELS[metric])
    axes[0].legend()
    return _save(fig, path)


def plot_weighted_scores(reports: Sequence[MetricsReport], path: Path) -> Path:
    fig, axes = plt.subplots(1, len(METRICS), figsize=(5 * len(METRICS), 4))
    names = [_label(r, i) for i, r in enumerate(reports)]
    orderings = [o for o in WEIGHT_ORDERINGS if any(o in r.weighted for r in reports)]
    width = 0.8 / max(1, len(orderings))

    for ax, metric in zip(axes, METRICS):
        if orderings:
            for n, ordering in enumerate(orderings):
                values = [r.weighted.get(ordering, {}).get(metric, np.nan) for r in reports]
                ax.bar(np.arange(len(reports)) + n * width, values, width, label=ordering)
            ax.set_xticks(np.arange(len(reports)) + width * (len(orderings) - 1) / 2)
        else:
            ax.bar(np.arange(len(reports)), [r.headline(metric) for r in reports], 0.6, label='mean over DRFs')
            ax.set_xticks(np.arange(len(reports)))
        ax.set_xticklabels(names)
        ax.set_ylabel(LABELS[metric])
    axes[0].legend()
    return _save(fig, path)


def plot_ssp_comparison(reports: Sequence[MetricsReport], path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric in zip(axes, ('psnr', 'nrmse')):
        for i, report in enumerate(reports):
            drfs = sorted(report.per_drf)
            ax.plot(drfs, [report.per_drf[d][metric] for d in drfs], marker='o', label=_label(report, i))
        ax.set_xscale('log')
        ax.set_xlabel('DRF')
        ax.set_ylabel(LABELS[metric])
    axes[0].legend()
    return _save(fig, path)


def plot_roi_errors(reports: Sequence[MetricsReport], path: Path) -> Path:
    rows = [row for r in reports if r.roi for row in r.roi['rows']]
    drfs = sorted({int(row['drf']) for row in rows})

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, key, title in zip(axes, ('error_max', 'error_mean'), ('SUVmax', 'SUVmean')):
        ax.boxplot([[row[key] for row in rows if int(row['drf']) == d] for d in drfs])
        ax.set_xticklabels(['DRF {}'.format(d) for d in drfs])
        ax.set_title(title)
        ax.set_ylabel('Percentage error (%)')
    return _save(fig, path)


def plot_reports(reports: Sequence[MetricsReport], out_dir: PathLike) -> List[Path]:
    """
    Writes the charts for `reports` into `out_dir` and returns their paths.
    The SSP comparison needs two reports and the box plot needs an ROI
    section.
    """
    if not reports:
        raise ArgumentError('Nothing to plot: no reports given.')
    for i, report in enumerate(reports):
        if not report.per_drf:
            raise ArgumentError('Report {!r} is empty.'.format(_label(report, i)))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = [
        plot_metrics_by_drf(reports, out_dir / METRICS_BY_DRF),
        plot_weighted_scores(reports, out_dir / WEIGHTED_SCORES),
    ]
    if len(reports) >= 2:
        written.append(plot_ssp_comparison(reports, out_dir / SSP_COMPARISON))
    if any(r.roi for r in reports):
        written.append(plot_roi_errors(reports, out_dir / ROI_ERROR_BOX))
    return written
