"""Fault tolerance for remote memory access programs: a simulated RMA
machine, transparent access logging, in-memory checkpointing, causal
recovery and a model of catastrophic-failure probability."""

from .checkpointing import (Checkpoint, CheckpointGroup, CheckpointStore, daly_interval,
                            demand_checkpoint, rma_consistency_check, xor_recover, xor_update)
from .errors import (BoundsError, CatastrophicFailure, CrashedProcessError, DeadlockError,
                     FitError, InfeasiblePlacement, ProtocolError, RmaError, ScenarioError,
                     WouldBlock)
from .ftlog import CheckpointMeta, FtLog
from .harness import Report, Scenario, reference_run, run_scenario
from .machine import ALL, Action, Determinant, Machine, SyncAction
from .orders import Order, OrderGraph
from .recovery import RecoveryPlan, fallback_rollback, recover_gsync, recover_locks
from .topology import (FailurePdf, FdHierarchy, PcfQuery, fit_pdf, load_profile,
                       make_taware_placement, p_cf, p_conditional, validate_taware)

__version__ = "0.1.0"
