"""Process- and machine-level malware detection from endpoint telemetry.

Stages: :mod:`~procsight.ingest` (Sysmon logs to process activities),
:mod:`~procsight.features` (fixed-width encodings), :mod:`~procsight.rnn`
(numpy LSTM/GRU), :mod:`~procsight.evaluation` (per-second curves),
:mod:`~procsight.campaign` (synthetic detonation campaigns) and
:mod:`~procsight.pipeline` / :mod:`~procsight.cli` tying them together.
"""

__version__ = "0.1.0"
