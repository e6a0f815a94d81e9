"""Adaptive group testing under noisy OR channels.

Modules: ``core`` (channels, instances, random streams), ``infotheory``,
``design``, ``decoders``, ``adaptive`` (multi-stage pipelines), ``bounds``
(rate curves and the change-of-measure verifier), ``harness`` (Monte Carlo
runner) and ``cli``.
"""

from .core import CardinalitySpec, Channel, ProblemInstance, Streams, Transcript

__all__ = ["CardinalitySpec", "Channel", "ProblemInstance", "Streams", "Transcript"]
__version__ = "0.1.0"
