"""Adaptive observer with a discrete-time identifier on a sampling clock.

Modules: ``numerics`` (linear algebra, RK4, noise), ``plant``, ``observer``,
``identifier`` (contract and checks), ``rls``, ``wavelet``, ``hybrid``
(simulation), ``scenario``/``runner``/``cli`` (experiments).
"""

__version__ = "0.1.0"
