"""FlyNN: FlyHash-based nearest-neighbour classification with federated and private training."""

from .core_hash import HashParams, RngState, fly_hash, gen_lifting_matrix, new_rng, sim_hash
from .data import Dataset, SynthSpec, kfold, load_csv, make_classification, shard
from .dp_mechanism import DPParams, privatize
from .errors import FlyNNError
from .fbf_classifier import FlyNNModel, infer, load_model, save_model, train, train_sbfc
from .federated import FederationPlan, comm_report, train_flynn_fl

__version__ = "0.2.0"
