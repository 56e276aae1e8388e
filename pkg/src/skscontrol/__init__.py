"""Time-discrete control of a coupled heat / fourth-order parabolic system.

Modules: ``timegrid`` (primal/dual time sequences and discrete calculus),
``spacedisc`` (finite differences and discrete Sobolev norms), ``system``
(implicit forward and adjoint marches), ``carleman`` (weight functions and
their audits), ``hum`` (penalized control synthesis), ``obs`` (observability
and decay experiments) and ``cli``.
"""
__version__ = "0.1.0"

from .errors import (ConfigError, ConstructionError, DimensionError, DomainError,  # noqa: F401
                     NumericalFailure, PropertyFailure, RangeError, SKSError)
from .spacedisc import SpaceGrid  # noqa: F401
from .system import SystemParams  # noqa: F401
from .timegrid import DualSeq, PrimalSeq, TimeGrid  # noqa: F401
