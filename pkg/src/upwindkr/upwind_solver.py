"""Alias of :mod:`upwindkr.solver` under its descriptive name."""

from .solver import (ConfigError, ImplicitSystem, SchemeConfig, SolverError, Trajectory,
                     assemble_step, dense_solve, gauss_seidel, implicit_step, max_timestep, run)

__all__ = ["ConfigError", "ImplicitSystem", "SchemeConfig", "SolverError", "Trajectory",
           "assemble_step", "dense_solve", "gauss_seidel", "implicit_step", "max_timestep", "run"]
