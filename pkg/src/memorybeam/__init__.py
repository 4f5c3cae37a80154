"""Beam models with fading-memory forcing: solvers and stability checks."""
