"""Mean-square stabilizability and minimum power for control over block-fading channels."""

from .core import *  # noqa: F401,F403
from .fading import *  # noqa: F401,F403
from .stability import *  # noqa: F401,F403
from .gp import *  # noqa: F401,F403
from .power import *  # noqa: F401,F403
from .sim import *  # noqa: F401,F403
from . import core, fading, stability, gp, power, sim

__all__ = core.__all__ + fading.__all__ + stability.__all__ + gp.__all__ + power.__all__ + sim.__all__
__version__ = "0.1.0"
