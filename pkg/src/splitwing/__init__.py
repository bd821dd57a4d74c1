"""Split learning for multi-client binary image classification, in plain numpy."""
from .data import Dataset, SplitRatio, load_directory, partition_by_ratio, schedule_round, synthetic_dataset
from .errors import ProtocolError, RoundAbortError, SplitwingError, ValidationError
from .grid import GridSpec, run_grid
from .model import ClientModel, ServerModel, init_client, init_server
from .orchestrator import RunConfig, evaluate, train, train_monolithic

__version__ = "0.1.0"

__all__ = [
    "ClientModel", "Dataset", "GridSpec", "ProtocolError", "RoundAbortError", "RunConfig",
    "ServerModel", "SplitRatio", "SplitwingError", "ValidationError", "evaluate", "init_client",
    "init_server", "load_directory", "partition_by_ratio", "run_grid", "schedule_round",
    "synthetic_dataset", "train", "train_monolithic",
]
