"""Near-field two-stage beam training: GP level-set support discovery plus sparse phase retrieval."""
from beamtrain.channel_model import ArrayConfig, Channel, ScenarioPrior, generate_channel, sample_scenario
from beamtrain.beamspace import BeamGrid, Codebook, expected_sparsity
from beamtrain.harness import beam_train, correlation, run_sweep, run_trial
from beamtrain.settings import ConfigError, SimConfig, load_config

__all__ = [
    "ArrayConfig", "Channel", "ScenarioPrior", "generate_channel", "sample_scenario",
    "BeamGrid", "Codebook", "expected_sparsity",
    "beam_train", "correlation", "run_sweep", "run_trial",
    "ConfigError", "SimConfig", "load_config",
]
