"""invarlab: positive-invariance certificates for scalar-unstable cascades.

Library layers:

* ``exprlang``      -- expression parsing, evaluation, differentiation
* ``bounds_core``   -- comparison-function bound sets, monotone inverses
* ``star_envelope`` -- star-shaped/convex envelopes, ray tests
* ``certificates``  -- invariance and escape margin certificates
* ``domain_estimator`` -- cone sweeps, escape ranges, tuning-law synthesis
* ``ode_lab``       -- simulation harness corroborating the certificates
* ``cli``           -- JSON-config command-line front end
"""

__version__ = "0.1.0"

from .bounds_core import (BoundSet, GridFn, ScalarFn, StableBoundSet,
                          UnstableBoundSet, classify_comparison,
                          monotone_inverse, validate_bounds)
from .certificates import (BoundaryCandidate, CertificateProblem,
                           CertificateVerdict, SmallGainData, SmallGainResult,
                           escape_margin, lemma1_margin, lemma2_margin,
                           max_feasible_a, smallgain_bound)
from .domain_estimator import (ConeSweep, EscapeRange, InvarianceDomain,
                               SynthesisResult, escape_p_range, membership,
                               prototype_bounds, sweep_linear_cones,
                               synthesize_tuning_law)
from .exprlang import differentiate, evaluate, fd_derivative, parse
from .ode_lab import (MonitorReport, StepConfig, SystemModel, Trajectory,
                      batch_membership_trial, builtin, integrate,
                      integrate_batch, monitor)
from .star_envelope import (EnvelopeReport, GridFunction, chord_minorant,
                            convex_env, is_star_shaped, star_env)

__all__ = [name for name in dir() if not name.startswith("_")]
