"""Joint destination choice for groups: sampled-alternative MNL with group impedance."""
from .analysis import (BootstrapConfig, BootstrapResult, CurveSpec, SegmentRule, ValidationReport,
                       bootstrap_estimate, compare_to_baseline, cross_validate, direct_elasticity,
                       fitting_factor, fold_partition, mean_elasticities, percent_correct, prepare,
                       probability_curve, segment_and_estimate, segment_rules)
from .domain import (ChoiceSituation, Clique, Dataset, Member, Mode, Participant, Zone, ZoneSet, load_dataset,
                     validate_dataset, write_dataset)
from .estimator import EstimationResult, ModelSpec, choice_probabilities, estimate, log_likelihood
from .impedance import ImpedanceKind, SkimProvider, SpeedProvider, group_impedance, train_mode_classifier
from .sampling import ChoiceData, ChoiceSet, SamplingConfig, build_choice_sets, sampling_weight
from .synth import ScenarioConfig, TrueModel, generate_scenario, recovery_test, synthetic_dataset

__version__ = "0.1.0"
