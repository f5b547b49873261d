"""Transportation-regularized risk minimization for implicit-feedback recommendation.

Submodules are imported on demand: ``dtrec.data``, ``dtrec.models``,
``dtrec.reco``, ``dtrec.transport``, ``dtrec.trainer``, ``dtrec.simulator``,
``dtrec.metrics``, ``dtrec.bandit``, ``dtrec.experiments``, ``dtrec.cli``.
The training stack never imports the simulator, so ground truth can only
reach a run through evaluation.
"""

__version__ = "0.1.0"
