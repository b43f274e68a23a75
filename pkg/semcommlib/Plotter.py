"""

    Plotter.py

        One SVG figure per completed sweep of a run directory, drawn from its CSV (which is left untouched)

        rate_distortion   test accuracy against latency (ms), one line per method
        run, psnr         test accuracy (and AUROC when present) against test PSNR, one line per method and train PSNR
        ablation          test accuracy against test PSNR, one line per (beta, lambda)

"""

import json
from pathlib import Path
from typing import List, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd

from .ExperimentRunner import ExperimentRunner
from .models import SweepKind, ModelSelection
from .exceptions import ParameterError
from .utils import setup_logger


class Plotter:

    AXES = {
        SweepKind.run: ('test_psnr', 'Test PSNR (dB)', ['method', 'train_psnr']),
        SweepKind.psnr: ('test_psnr', 'Test PSNR (dB)', ['method', 'train_psnr']),
        SweepKind.rate_distortion: ('latency_ms', 'Latency (ms)', ['method']),
        SweepKind.ablation: ('test_psnr', 'Test PSNR (dB)', ['beta', 'lambda']),
    }
    MARGIN = 0.05

    def __init__(self):
        self._setup_logger()

    def emit_plot_data(self, run_dir:str|Path) -> List[Path]:

        run_dir = Path(run_dir)
        manifest_path = run_dir / ExperimentRunner.MANIFEST_FILE
        if not manifest_path.is_file():
            raise ParameterError(f'Plotter::emit_plot_data(): Missing manifest "{ExperimentRunner.MANIFEST_FILE}" in "{run_dir}". Is this a completed run?')

        manifest = json.loads(manifest_path.read_text())
        sweeps = manifest.get('sweeps', {})
        expected = [sweep['csv'] for sweep in sweeps.values()] or list(ExperimentRunner.CSV_FILES.values())
        missing = [name for name in expected if not (run_dir / name).is_file()]
        if not sweeps or missing:
            raise ParameterError(f'Plotter::emit_plot_data(): Missing CSV files in "{run_dir}": {", ".join(missing or expected)}. '
                                 f'Expected: {", ".join(expected)}')

        primary = ModelSelection.test_domain if manifest.get('config', {}).get('test_domain_selection') else ModelSelection.train_domain
        figures = []
        for kind, sweep in sweeps.items():
            csv_path = run_dir / sweep['csv']
            df = pd.read_csv(csv_path)
            if list(df.columns) != sweep['columns']:
                raise ParameterError(f'Plotter::emit_plot_data(): "{csv_path.name}" has columns {list(df.columns)}, expected {sweep["columns"]}')

            fig = self.plot_sweep(SweepKind(kind), df, primary)
            svg_path = csv_path.with_suffix('.svg')
            fig.savefig(svg_path, format='svg')
            plt.close(fig)
            figures.append(svg_path)
            self.logger.info(f'Plotter::emit_plot_data(): "{svg_path}" from {len(df)} rows')

        return figures

    def plot_sweep(self, kind:SweepKind, df:pd.DataFrame, selection:ModelSelection=ModelSelection.train_domain) -> plt.Figure:

        x_col, x_label, group_cols = self.AXES[SweepKind(kind)]
        if 'selection' in df.columns and (df['selection'] == selection.value).any():
            df = df[df['selection'] == selection.value]

        panels = [('test_accuracy', 'Test accuracy')]
        if 'auroc' in df.columns and df['auroc'].notna().any():
            panels.append(('auroc', 'AUROC'))

        fig, axes = plt.subplots(1, len(panels), figsize=(6 * len(panels), 4.5), squeeze=False)
        for ax, (y_col, y_label) in zip(axes[0], panels):
            data = df.dropna(subset=[y_col])
            for group, series in data.groupby(group_cols, sort=True):
                series = series.sort_values(x_col)
                ax.plot(series[x_col], series[y_col], marker='o', label=self._label(group_cols, group))

            ax.set_xlim(*self._limits(data[x_col]))
            ax.set_ylim(*self._limits(data[y_col]))
            ax.set_xlabel(x_label)
            ax.set_ylabel(y_label)
            ax.grid(True, alpha=0.3)
            if ax.lines:
                ax.legend(fontsize='small')

        fig.suptitle(f'{SweepKind(kind).value} ({selection.value} selection)')
        fig.tight_layout()
        return fig

    #### UTILS ####

    def _limits(self, values:pd.Series) -> Tuple[float, float]:
        if len(values) == 0:
            return 0.0, 1.0
        low, high = float(values.min()), float(values.max())
        pad = (high - low) * self.MARGIN if high > low else max(abs(low) * self.MARGIN, 0.5)
        return low - pad, high + pad

    def _label(self, group_cols:List[str], group) -> str:
        values = group if isinstance(group, tuple) else (group,)
        if group_cols == ['method']:
            return str(values[0])
        return ', '.join(f'{col}={val:g}' if isinstance(val, float) else f'{col}={val}' if col != 'method' else str(val)
                         for col, val in zip(group_cols, values))

    def _setup_logger(self):
        self.logger = setup_logger(__name__)
