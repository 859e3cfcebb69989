"""Accelerated weak-sense Monte Carlo simulation of SDEs.

Short bursts of ensemble simulation are restricted to a few empirical
moments, the moments are extrapolated forward over a much larger time step,
and the ensemble is matched onto the extrapolated state by a
minimal-perturbation Newton projection.  The package provides the simulation
engine, the restriction/matching/extrapolation operators, the orchestrated
loop with adaptive macro stepping, and the analysis harness used to validate
all of it.
"""

from .analysis import (KsResult, ReplicateStats, empirical_histogram,
                       estimate_order, kolmogorov_survival,
                       moment_ode_reference, predict_variance_projective,
                       ks_two_sample, replicate_stats)
from .config import (ConfigError, ExperimentConfig, config_from_ini,
                     config_hash, config_to_ini, kappa_profile, load_config)
from .engine import (Ensemble, EngineError, FeneParams, ModelSpec,
                     StepRetryError, em_step, evolve_ensemble,
                     fene_accept_bound, fene_force, fene_model, fene_step_ar,
                     linear_model, run_burst, sample_fene_equilibrium,
                     stationary_density)
from .extrapolation import (ExtrapConfig, ExtrapolationError, MacroHistory,
                            characteristic_roots, lagrange_coeff,
                            lagrange_coeffs, multistep_extrapolate,
                            projective_extrapolate)
from .matching import (AffineMap, FeneStepContext, MatchConfig, MatchOutcome,
                       hankel_solvability, match_ensemble, match_fene,
                       match_normal_closed_form)
from .moments import (MacroState, MomentSpec, RestrictionError,
                      macro_states_to_csv, observable_mean, restrict,
                      spec_values, stress_kramers)
from .orchestrator import (SimulationError, StepPolicy, StepRow,
                           TrajectoryRecord, accelerate_step, build_model,
                           build_qoi, grow_step, initial_ensemble,
                           run_simulation, shrink_step)
from .rng import SeedLineage

__version__ = "0.1.0"
