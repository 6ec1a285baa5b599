"""Collisionless kinetic transport in a gravity-bound half-space with a
diffusely reflecting, non-isothermal floor: stationary-flux solvers,
weighted-ensemble dynamics, and numerical verification of the mixing
mechanism (bounce-map Jacobians, chain measures, Doeblin overlap).
"""

from .fields import (FieldConfig, Regime, TemperatureField, gravity_field,
                     magnetic_field, perturbed_field, validate_field,
                     potential_energy, force)
from .characteristics import (advance, backward_exit, forward_exit,
                              bounce_jacobian, cov_identity_check, energy)
from .boundary import (wall_maxwellian, sample_emission, bounce,
                       generate_cycle, bad_set_indicator)
from .streams import stream

__version__ = "0.1.0"
