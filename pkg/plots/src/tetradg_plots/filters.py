"""Zero-phase low-pass filtering for seismogram comparisons."""

from __future__ import annotations

import numpy as np
from scipy.signal import butter, filtfilt


def lowpass(data: np.ndarray, sample_dt: float, cutoff_hz: float) -> np.ndarray:
    """4th-order Butterworth, applied forward-backward (zero phase).

    data: (nt,) or (nt, channels).
    """
    if cutoff_hz <= 0:
        raise ValueError("cutoff must be positive")
    nyquist = 0.5 / sample_dt
    if cutoff_hz >= nyquist:
        raise ValueError(f"cutoff {cutoff_hz} Hz at or above Nyquist {nyquist} Hz")
    b, a = butter(4, cutoff_hz / nyquist)
    return filtfilt(b, a, data, axis=0)
