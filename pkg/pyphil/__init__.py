from pyphil.lti import TransferBlock, DiscreteStepper
from pyphil.lti import evaluate, series, discretize, step
from pyphil.bench import (ImpedanceModel, HutModel, AmplifierModel,
                          SimulatedSide, Disturbance, PhilLoop, Trace)
from pyphil.bench import (build_loop, run_time_domain, reference_direct,
                          accuracy_metrics, power_exchange)
from pyphil.stability import (UncertaintyMargin, open_loop_response,
                              classify, stability_map)
from pyphil.compensation import (PhaseAdvancePlan, Extrapolator,
                                 design_phase_advance, apply_phase_advance,
                                 design_feedback_filter, apply_extrapolator)
from pyphil.cosim import (EventQueue, SimUnit, MasterConfig, run_lockstep,
                          run_hub, run_conservative)
from pyphil.netem import NetworkSpec, make_netem_unit, sample_stream
from pyphil.scenario import Scenario, parse_scenario


__version__ = '0.1.0'
__all__ = ['TransferBlock', 'DiscreteStepper', 'evaluate', 'series',
           'discretize', 'step', 'ImpedanceModel', 'HutModel',
           'AmplifierModel', 'SimulatedSide', 'Disturbance', 'PhilLoop',
           'Trace', 'build_loop', 'run_time_domain', 'reference_direct',
           'accuracy_metrics', 'power_exchange', 'UncertaintyMargin',
           'open_loop_response', 'classify', 'stability_map',
           'PhaseAdvancePlan', 'Extrapolator', 'design_phase_advance',
           'apply_phase_advance', 'design_feedback_filter',
           'apply_extrapolator', 'EventQueue', 'SimUnit', 'MasterConfig',
           'run_lockstep', 'run_hub', 'run_conservative', 'NetworkSpec',
           'make_netem_unit', 'sample_stream', 'Scenario', 'parse_scenario']
