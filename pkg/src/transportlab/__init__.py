"""Transport bounds for random word models: transfer matrices, critical
energies, Pruefer deviations, trace maps and moment dynamics."""
__version__ = "0.1.0"
