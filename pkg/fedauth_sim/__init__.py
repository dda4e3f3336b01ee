from .__about__ import __version__, VERSION
from .bench import run_load_benchmark
from .scenario import load_scenario, run_scenario
from .trace import verify_log
from .world import Simulation
__all__ = [
    'Simulation',
    'load_scenario',
    'run_load_benchmark',
    'run_scenario',
    'verify_log',
    '__version__',
    'VERSION',
]
