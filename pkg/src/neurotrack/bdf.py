"""Import point for BioSemi BDF recordings (not implemented).

A reader plugs in here by returning a :class:`~neurotrack.preprocess.Recording`:
``eeg`` as a ``(channels, samples)`` float array in microvolts at the file's
sampling rate, ``stimulus`` as the audio waveform played during the
recording (loaded separately, trigger-aligned so both start at t = 0), and
``voice_class`` from the story metadata. The rest of the pipeline only sees
``Recording`` objects and NTRK1 containers, so nothing else changes.
"""

from __future__ import annotations

from .errors import DataError


def read_bdf(path, stimulus_path=None, subject_id=None, story_id=None, voice_class="male"):
    """Load a BDF recording as a ``Recording``. Always raises :class:`DataError`."""
    raise DataError(
        f"{path}: BDF import is not available in this build; convert the recording to "
        "NTRK1 containers (see neurotrack.container.save_recording)"
    )
