"""Deterministic simulator for tensor, sequence and zero-redundancy data parallelism."""
from .analytic import (
    SCALING_SHAPE,
    WorkloadShape,
    derived_comm_volume,
    memory_per_rank,
    paper_comm_volume,
    range_test,
    reconcile,
    scaling_table,
)
from .comm import CommLedger, Fabric, RankComm, run_ranks
from .config import ExperimentConfig, load_config, parse_config
from .errors import (
    TpsimError, ConstraintViolation, UnknownAxis, UnknownRank, SelfSend, RootNotInGroup,
    ShapeMismatch, IndivisibleLength, IndivisibleDim, IndivisibleSequence, Deadlock,
    RankAborted, StageInvalid, EmptyModel, ConfigError,
)
from .memory import MemoryLedger
from .mesh import (
    DATA_PARALLEL,
    ONE_D,
    SEQUENCE,
    THREE_D,
    TWO_D,
    CommGroup,
    DeviceMesh,
    Mode,
    ParallelMode,
    build_mesh,
    two_point_five_d,
)
from .ring_attention import run_ring_attention, serial_attention
from .tensor import SplitMix64, matmul
from .tp_linear import ShardSpec, gather_full, run_linear, shard
from .zero import AdamConfig, hybrid_place, reuse_plan, run_zero, serial_adam

__version__ = "0.1.0"
