"""Deterministic synthetic inputs used by tests, the CLI docs, and benchmarks."""

from __future__ import annotations

import numpy as np

from .tensor import Rng, VideoTensor, random_normal


def smooth_video(
    channels: int = 3, time: int = 33, height: int = 64, width: int = 64
) -> VideoTensor:
    """Separable low-frequency sinusoid product with a DC offset.

    One cycle per axis, phase-shifted per channel. Almost all of its energy
    lands in the all-low-pass subband of a single-level 3D transform.
    """
    c = np.arange(channels, dtype=np.float64)
    t = np.arange(time, dtype=np.float64)
    y = np.arange(height, dtype=np.float64)
    x = np.arange(width, dtype=np.float64)
    temporal = 1.0 + 0.5 * np.sin(
        2.0 * np.pi * (t[None, :] / max(time, 2) + c[:, None] / max(channels, 1))
    )
    vertical = 1.0 + 0.5 * np.sin(2.0 * np.pi * y / height)
    horizontal = 1.0 + 0.5 * np.cos(2.0 * np.pi * x / width)
    grid = (
        temporal[:, :, None, None]
        * vertical[None, None, :, None]
        * horizontal[None, None, None, :]
    )
    return VideoTensor(grid.astype(np.float32))


def noise_video(
    seed: int, channels: int = 3, time: int = 33, height: int = 64, width: int = 64
) -> VideoTensor:
    """Seeded white noise; spreads energy evenly across all subbands."""
    return random_normal(Rng(seed), (channels, time, height, width))


def ramp_video(
    channels: int = 3, time: int = 8, height: int = 16, width: int = 16
) -> VideoTensor:
    """Smooth linear ramp along every axis; useful for low-pass-only checks."""
    c = np.arange(channels, dtype=np.float64) + 1.0
    t = np.linspace(0.0, 1.0, time)
    y = np.linspace(0.0, 1.0, height)
    x = np.linspace(0.0, 1.0, width)
    grid = (
        c[:, None, None, None]
        + t[None, :, None, None]
        + y[None, None, :, None]
        + x[None, None, None, :]
    )
    return VideoTensor(grid.astype(np.float32))
