"""Linear-Gaussian state-space estimation and control, plus learned variants."""

from .models import *  # noqa: F401,F403
from .filters import *  # noqa: F401,F403
from .learned import *  # noqa: F401,F403
from .control import *  # noqa: F401,F403
