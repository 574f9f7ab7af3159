import logging
from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams.update({
    'svg.hashsalt': 'occlab',
    'axes.grid': True,
    'grid.alpha': 0.25,
    'lines.linewidth': 1.8,
})


def plot_curves(summary, path, x_label, y_label, title=None, log_x=False, log_y=False):
    """
    Mean curve with a one-standard-deviation band per method.

    `summary` is the frame returned by experiments.summarize for a single
    metric: columns method, x, mean, std.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for method, frame in summary.groupby('method', sort=True):
        frame = frame.sort_values('x')
        std = frame['std'].fillna(0.0)
        ax.plot(frame['x'], frame['mean'], label=method)
        ax.fill_between(frame['x'], frame['mean'] - std, frame['mean'] + std, alpha=0.2)
    if log_x:
        ax.set_xscale('log')
    if log_y:
        ax.set_yscale('log')
    ax.set_xlabel(x_label)
    ax.set_ylabel(y_label)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    logger.debug('Saved plot %s', path)
    return path
