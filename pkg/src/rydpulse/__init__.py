"""Pulse-driven Rydberg ring simulator with ensemble statistics and optimal control."""

from rydpulse.geometry import SectorBasis, build_ring, dihedral_orbits, embed, project
from rydpulse.hamiltonian import DriveAmplitudes, PhysicalParams, build_sector_operators
from rydpulse.evolution import PulseConstraints, PulseSequence, evolve, sample_random_pulses

__all__ = [
    "SectorBasis",
    "build_ring",
    "dihedral_orbits",
    "embed",
    "project",
    "DriveAmplitudes",
    "PhysicalParams",
    "build_sector_operators",
    "PulseConstraints",
    "PulseSequence",
    "evolve",
    "sample_random_pulses",
]

__version__ = "0.1.0"
