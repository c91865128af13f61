"""Simulation of magneto-optical loading of atoms into a cavity lattice."""
