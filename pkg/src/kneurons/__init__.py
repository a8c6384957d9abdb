"""Knowledge neurons in a toy masked language model.

Train a small transformer on synthetic relational facts, attribute each fact
to FFN intermediate neurons with integrated gradients, and edit the model's
knowledge by steering those neurons' activations or value slots.
"""

from .attribution import KnowledgeNeuronSet, RefineConfig, attribute_baseline, attribute_ig, coarse_set, refine
from .errors import ConfigError, ContractError, DivergenceError, KneuronsError, QueryError, RequestError, ShapeError
from .facts import ClozeQuery, WorldSpec, build_prompt_groups, build_queries, generate_world
from .model import MaskedLM, ModelConfig, NeuronId, Scale, Set, forward_cloze, read_value_slot, write_value_slot
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
