#!/usr/bin/env python3
"""
Layerpath Visualization Framework

Chart classes for the routing analyses. Every chart takes the same data
the CSV writers in evaluation.py consume and writes a deterministic SVG
(no date metadata, fixed hash salt), so reruns produce identical files.

HOW TO ADD A NEW CHART TYPE:
1. Subclass BaseChart
2. Implement generate()
3. Add to CHART_REGISTRY

USAGE:
    from visualization_framework import create_chart

    chart = create_chart('usage_heatmap')
    chart.generate(usage_matrix, 'analysis/usage_heatmap.svg')
"""

from abc import ABC, abstractmethod
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import seaborn as sns

from errors import InputError
from logger import get_logger

logger = get_logger(__name__)

plt.rcParams['svg.hashsalt'] = 'layerpath'

COLORS = {
    'skip': '#4c72b0',
    'execute': '#8c8c8c',
    'repeat': '#c44e52',
    'accuracy': '#2a9d8f',
    'layers': '#e76f51',
    'text': '#333333',
    'grid': '#cccccc',
}

ACTION_COLORS = [COLORS['skip'], COLORS['execute'], COLORS['repeat']]


class BaseChart(ABC):
    """
    Base class for all chart types.

    Subclasses draw on self.ax and finish with self._save_and_close().
    """

    def __init__(self, title=None, figsize=(8, 5)):
        self.title = title
        self.figsize = figsize
        self.fig = None
        self.ax = None

    def _setup_figure(self):
        self.fig, self.ax = plt.subplots(figsize=self.figsize)

    def _apply_style(self, ax=None):
        ax = ax or self.ax
        if self.title:
            ax.set_title(self.title, fontsize=13, fontweight='bold', pad=12, color=COLORS['text'])
        ax.grid(alpha=0.3, linestyle='--', linewidth=0.5)
        for spine in ax.spines.values():
            spine.set_color(COLORS['grid'])
            spine.set_linewidth(0.5)

    def _save_and_close(self, output_path):
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        self.fig.tight_layout()
        self.fig.savefig(output_path, format='svg', bbox_inches='tight',
                         facecolor='white', edgecolor='none', metadata={'Date': None})
        plt.close(self.fig)
        logger.debug(f"Chart written: {output_path}")
        return output_path

    @abstractmethod
    def generate(self, data, output_path):
        """
        Draw the chart.

        Args:
            data: Chart-specific data
            output_path: Where to save the SVG

        Returns:
            Path to the saved file
        """


class UsageHeatmapChart(BaseChart):
    """
    Mean layer usage per stratum (0 skip, 1 execute, 2 repeat).

    Data format: evaluation.UsageMatrix
    """

    def __init__(self, title='Mean layer usage'):
        super().__init__(title=title, figsize=(9, 4.5))

    def generate(self, data, output_path):
        self._setup_figure()
        sns.heatmap(data.values, ax=self.ax, vmin=0.0, vmax=2.0, cmap='coolwarm', center=1.0,
                    annot=True, fmt='.2f', cbar_kws={'label': 'mean usage'},
                    xticklabels=list(range(1, data.num_layers + 1)), yticklabels=data.strata)
        self.ax.set_xlabel('layer')
        self.ax.set_ylabel('stratum')
        if self.title:
            self.ax.set_title(self.title, fontsize=13, fontweight='bold', pad=12, color=COLORS['text'])
        return self._save_and_close(output_path)


class ControlCurveChart(BaseChart):
    """
    Accuracy and average executed layers across the control parameter.

    Data format: List of evaluation.ControlRow
    """

    def __init__(self, title='Control sweep'):
        super().__init__(title=title)

    def generate(self, data, output_path):
        self._setup_figure()
        ps = [row.p for row in data]
        self.ax.plot(ps, [row.accuracy for row in data], marker='o', color=COLORS['accuracy'])
        self.ax.set_xlabel('control p')
        self.ax.set_ylabel('accuracy', color=COLORS['accuracy'])
        self.ax.set_ylim(-0.02, 1.02)
        twin = self.ax.twinx()
        twin.plot(ps, [row.avg_layers for row in data], marker='s', color=COLORS['layers'])
        twin.set_ylabel('avg executed layers', color=COLORS['layers'])
        for anchor in (-0.5, 0.5):
            self.ax.axvline(anchor, color=COLORS['grid'], linewidth=0.8)
        self._apply_style()
        return self._save_and_close(output_path)


class LabelDistributionChart(BaseChart):
    """
    Stacked skip/execute/repeat fractions per stratum.

    Data format: Dict stratum -> (skip, execute, repeat) fractions
    """

    def __init__(self, title='Routing label distribution'):
        super().__init__(title=title)

    def generate(self, data, output_path):
        self._setup_figure()
        strata = list(data)
        bottom = [0.0] * len(strata)
        for idx, name in enumerate(('skip', 'execute', 'repeat')):
            values = [data[s][idx] for s in strata]
            self.ax.bar(strata, values, bottom=bottom, color=ACTION_COLORS[idx], label=name)
            bottom = [b + v for b, v in zip(bottom, values)]
        self.ax.set_ylim(0, 1)
        self.ax.set_ylabel('fraction of layer labels')
        self.ax.legend(loc='lower right', fontsize=9)
        self._apply_style()
        return self._save_and_close(output_path)


class DepthGroupChart(BaseChart):
    """
    Box summary of per-example mean usage in early/middle/late layers.

    Data format: Dict stratum -> Dict group -> evaluation.GroupSummary
    """

    def __init__(self, title='Usage by depth group'):
        super().__init__(title=title, figsize=(10, 5))

    def generate(self, data, output_path):
        if not data:
            raise InputError("depth group chart needs at least one stratum")
        self._setup_figure()
        stats, labels = [], []
        for stratum, groups in data.items():
            for group, s in groups.items():
                stats.append({'med': s.median, 'q1': s.q1, 'q3': s.q3, 'whislo': s.minimum,
                              'whishi': s.maximum, 'mean': s.mean, 'fliers': []})
                labels.append(f"{stratum}\n{group}")
        for item, label in zip(stats, labels):
            item['label'] = label
        self.ax.bxp(stats, showmeans=True, showfliers=False)
        self.ax.set_ylim(-0.05, 2.05)
        self.ax.set_ylabel('mean usage')
        self.ax.tick_params(axis='x', labelsize=7)
        self._apply_style()
        return self._save_and_close(output_path)


class TrainingCurvesChart(BaseChart):
    """
    Per-class and macro F1 per training epoch.

    Data format: rows of supervision.read_training_log()
    """

    def __init__(self, title='Router training'):
        super().__init__(title=title)

    def generate(self, data, output_path):
        if not data:
            raise InputError("training curve chart needs at least one epoch")
        self._setup_figure()
        epochs = [row['epoch'] for row in data]
        for key, color in (('skip_f1', COLORS['skip']), ('exec_f1', COLORS['execute']),
                           ('repeat_f1', COLORS['repeat']), ('macro_f1', COLORS['text'])):
            self.ax.plot(epochs, [row[key] for row in data], label=key, color=color,
                         linestyle='--' if key == 'macro_f1' else '-')
        self.ax.set_xlabel('epoch')
        self.ax.set_ylabel('F1')
        self.ax.set_ylim(-0.02, 1.02)
        self.ax.legend(loc='lower right', fontsize=9)
        self._apply_style()
        return self._save_and_close(output_path)


# CHART REGISTRY
CHART_REGISTRY = {
    'usage_heatmap': UsageHeatmapChart,
    'control_curve': ControlCurveChart,
    'label_distribution': LabelDistributionChart,
    'depth_groups': DepthGroupChart,
    'training_curves': TrainingCurvesChart,
}


def create_chart(chart_type, **kwargs):
    """
    Factory function to create chart instances.

    Args:
        chart_type: String key from CHART_REGISTRY
        **kwargs: Arguments passed to chart constructor

    Returns:
        Chart instance

    Example:
        chart = create_chart('control_curve')
        chart.generate(rows, 'sweep/control.svg')
    """
    if chart_type not in CHART_REGISTRY:
        raise InputError(f"Unknown chart type: {chart_type}. "
                         f"Available: {list(CHART_REGISTRY.keys())}")
    return CHART_REGISTRY[chart_type](**kwargs)
