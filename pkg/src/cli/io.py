"""
Result files: atomic CSV / JSONL writes and plot data as plotly figure JSON
"""
import json
import logging
import os

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from src.tensor.checkpoint import atomic_write

logger = logging.getLogger(__name__)


def write_csv(path: str, frame: pd.DataFrame):
    atomic_write(path, frame.to_csv(index=False, lineterminator="\n", float_format="%.10g").encode("utf-8"))
    logger.debug("Wrote %d rows to %s", len(frame), path)


def write_json(path: str, payload: dict):
    atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


class JsonlWriter:
    """
    One JSON object per line, appended and flushed to disk as each record
    arrives. Opening the writer truncates the file.
    """

    def __init__(self, path: str):
        self.path = path
        self.count = 0
        with open(path, "w", encoding="utf-8"):
            pass

    def append(self, record: dict):
        line = json.dumps(_plain(record), sort_keys=True) + "\n"
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(line)
            handle.flush()
            os.fsync(handle.fileno())
        self.count += 1


def _plain(record: dict) -> dict:
    out = {}
    for key, value in record.items():
        if isinstance(value, (np.floating, float)):
            value = float(value)
            value = value if np.isfinite(value) else None
        elif isinstance(value, np.integer):
            value = int(value)
        elif isinstance(value, np.bool_):
            value = bool(value)
        out[key] = value
    return out


def write_figure(path: str, fig: go.Figure):
    """Figure JSON only; nothing is rendered."""
    atomic_write(path, fig.to_json().encode("utf-8"))


def plot_loss_curve(history: pd.DataFrame) -> go.Figure:
    """
    Train and validation loss per epoch.
    """
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=history["epoch"], y=history["train_loss"], mode="lines", name="Train"))
    fig.add_trace(go.Scatter(x=history["epoch"], y=history["val_loss"], mode="lines", name="Validation"))
    fig.update_layout(
        title="Denoising Loss",
        xaxis_title="Epoch",
        yaxis_title="MSE",
        legend_title="Split"
    )
    return fig


def plot_hit_histogram(counts: pd.DataFrame) -> go.Figure:
    """Unique qualifying hits per sequence against the training set, one trace per evaluated set."""
    fig = go.Figure()
    for name, group in counts.groupby("set", sort=False):
        fig.add_trace(go.Histogram(x=group["hits"], name=name, opacity=0.6))
    fig.update_layout(
        title="Alignment Hits Against Training",
        xaxis_title="Unique hits per sequence",
        yaxis_title="Sequences",
        barmode="overlay"
    )
    return fig


def plot_rewards(rewards: pd.DataFrame, baseline_median: float = None) -> go.Figure:
    """Reward distribution per cell with medians marked."""
    fig = go.Figure()
    for cell, group in rewards.groupby("cell", sort=False):
        fig.add_trace(go.Box(y=group["reward"], name=cell, boxpoints=False))
        fig.add_trace(go.Scatter(x=[cell], y=[group["reward"].median()], mode="markers",
                                 marker=dict(symbol="x", color="black"), showlegend=False))
    if baseline_median is not None:
        fig.add_hline(y=baseline_median, line_dash="dash", annotation_text="baseline median")
    fig.update_layout(title="Reward by Cell Type", yaxis_title="Reward")
    return fig


def plot_reward_curve(history: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=history["step"], y=history["mean_reward"], mode="lines", name="Rollout"))
    fig.update_layout(title="DDPO Mean Reward", xaxis_title="Step", yaxis_title="Reward")
    return fig


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
