"""Hierarchical alignment toolkit for GridHome agents.

Modules: ``core`` (MLP, cosine, seeded RNG), ``ot`` (Sinkhorn divergence),
``score`` (denoising score matching), ``hpcc`` (hierarchical contrastive
encoders and training), ``controller`` (three-tier inference),
``metrics`` (EPR and PAC), ``gridhome`` (simulator), ``logio``, ``config``,
``pipeline`` and ``cli``.
"""

from .core import Rng
from .trajectory import EpisodeResult, StepRecord, Trajectory

__all__ = ["Rng", "StepRecord", "Trajectory", "EpisodeResult"]
__version__ = "0.1.0"
