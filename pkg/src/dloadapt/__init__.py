"""Adaptive shape servoing of a simulated deformable linear object.

Modules:

* :mod:`dloadapt.sim` - mass-spring rod simulator
* :mod:`dloadapt.rbfn` - RBF network for deformation Jacobians, model files
* :mod:`dloadapt.data`, :mod:`dloadapt.training` - exploration data and offline fitting
* :mod:`dloadapt.control` - servo law, online adaptation, closed loop
* :mod:`dloadapt.scenarios`, :mod:`dloadapt.cli` - the three tasks and the command line
"""

from .errors import DloError

__version__ = "0.1.0"

__all__ = ["DloError", "__version__"]
