"""thermid: system identification of SoC thermal dynamics.

Three prediction pipelines (polynomial subspace state space, Hammerstein
NARX, FIR-RNN) plus a synthetic thermal RC-network plant that serves as
ground truth for end-to-end verification.

Modules:
  trace      measurement traces, CSV I/O, splits, fold plans
  plant      synthetic thermal RC-network plant and workload schedules
  features   polynomial regressor sets, expansion, selection pipeline
  n4sid      subspace identification of linear state-space models
  narx       Hammerstein NARX network with Levenberg-Marquardt training
  fir_rnn    GRU over a log-spaced FIR input window, Nadam training
  evaluate   cross-validated benchmark protocol and report bundle
  serialize  flat-text model files
  cli        command-line front end (thermid entry point)
"""

__version__ = "0.1.0"

from . import cli, evaluate, features, fir_rnn, n4sid, narx, plant, serialize, trace

__all__ = [
    "cli",
    "evaluate",
    "features",
    "fir_rnn",
    "n4sid",
    "narx",
    "plant",
    "serialize",
    "trace",
    "__version__",
]
