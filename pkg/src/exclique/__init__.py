"""Proof-of-authority consensus simulator with compact block relay.

Compares the Clique signer protocol against a variant with a differential
signer order, an adaptive no-turn delay range and filter-guided compact
blocks, and measures throughput, forks, block sizes and reward spread.
"""

from ._accel import USING_NUMBA
from .cbf import CountingBloomFilter, MalformedFilter, UnderflowAttempt
from .chain import Block, BlockKind, Ledger, LedgerUpdate, Transaction, TxBatch, UpdateKind, genesis
from .consensus import CostModel, DelayMode, OrderMode, PcbMode, ProtocolParams, Role
from .experiment import ConfigError, ExperimentConfig, compare, run
from .netsim import EventQueue, Network, NetworkConfig, Trace
from .simulation import FaultScript, SimConfig, Simulation, simulate

__all__ = [
    "USING_NUMBA",
    "Block",
    "BlockKind",
    "ConfigError",
    "CostModel",
    "CountingBloomFilter",
    "DelayMode",
    "EventQueue",
    "ExperimentConfig",
    "FaultScript",
    "Ledger",
    "LedgerUpdate",
    "MalformedFilter",
    "Network",
    "NetworkConfig",
    "OrderMode",
    "PcbMode",
    "ProtocolParams",
    "Role",
    "SimConfig",
    "Simulation",
    "Trace",
    "Transaction",
    "TxBatch",
    "UnderflowAttempt",
    "UpdateKind",
    "compare",
    "genesis",
    "run",
    "simulate",
]
