"""Alias of :mod:`upwindkr.transport` under its descriptive name."""

from .transport import (DEFAULT_COST_CAP, DiscreteMeasure, KRResult, TransportError, coarsen,
                        coarsening_bias, kr_distance, measure_from_field, signed_difference,
                        solve_transport, w1_distance)

__all__ = ["DEFAULT_COST_CAP", "DiscreteMeasure", "KRResult", "TransportError", "coarsen",
           "coarsening_bias", "kr_distance", "measure_from_field", "signed_difference",
           "solve_transport", "w1_distance"]
