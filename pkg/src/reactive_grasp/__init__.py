"""Reactive grasping of unknown moving objects in a simulated depth-camera world.

A template tracker follows the object in the image plane and seeds
point-cloud registration for a full 6-DoF pose; a pool of inverse-kinematics
candidates is refined continuously against that estimate; a trajectory
follower walks the arm toward the best candidate and backs off along its own
path whenever the scene intrudes, so disturbances mid-approach are absorbed
instead of fatal.

The heavy modules (rendering, server, plotting) are imported lazily by the
CLI; importing this package pulls in only the core numerics.
"""

from .geometry import Cuboid, Pose
from .harness import RunResult, SimLoop, run_scenario
from .scenario import Scenario, canonical_scenario, load_scenario, save_scenario

__version__ = "0.1.0"

__all__ = [
    "Cuboid",
    "Pose",
    "RunResult",
    "Scenario",
    "SimLoop",
    "canonical_scenario",
    "load_scenario",
    "run_scenario",
    "save_scenario",
    "__version__",
]
