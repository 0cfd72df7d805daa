"""Hagedorn wave packets, their exact and semiclassical evolution, and Bohmian ensembles."""
from .bohmian import (ExactBackend, SemiclassicalBackend, TrajectoryEnsemble, integrate_ensemble,
                      integrate_exact_ensemble, integrate_path, quantum_potential, velocity)
from .classical_flow import ClassicalState, ClassicalTrajectory, integrate_flow
from .errors import ContractViolation, NodeProximity, NumericalAbort
from .hagedorn import PacketParams, PacketTable, eval_gradient, eval_ground, eval_packet, moments
from .potential import PotentialModel, check_GV, taylor_remainder
from .reference_solver import GridSpec, GridWave, compare_norms, propagate, wave_from_packet

__version__ = "0.1.0"
