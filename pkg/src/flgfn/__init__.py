"""GFlowNet training with forward-looking balance objectives.

Forward-looking objectives use an energy defined on every state, so credit
arrives at each transition and training works even on trajectories that never
reach a terminal state.
"""

__version__ = "0.1.0"

from .envs import BitSeqEnv, SetEnv, TerminatingChainEnv, canonical_t1  # noqa: E402
from .model import BackwardMode, FlowMode, GFNModel, TabularModel  # noqa: E402
from .objectives import Objective  # noqa: E402

__all__ = [
    "BackwardMode",
    "BitSeqEnv",
    "FlowMode",
    "GFNModel",
    "Objective",
    "SetEnv",
    "TabularModel",
    "TerminatingChainEnv",
    "canonical_t1",
]
