"""Python bindings for the segnet C++ core."""

from ._segnet import *  # noqa: F401,F403
from ._segnet import __doc__  # noqa: F401
