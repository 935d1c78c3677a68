"""Federated learning lab: consensus ADMM over random projections.

Submodules: models, projection, admm, privacy, transport, data,
orchestrator, attack, cli.
"""

__version__ = "0.1.0"
