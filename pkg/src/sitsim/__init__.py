"""Simulator for counter-mode memory encryption protected by an SGX-style integrity tree."""
from __future__ import annotations

from .config import SCHEMES, ConfigError, SimConfig, load_config
from .controller import Controller, OtpReuse, PowerFailure
from .crypto import Crypto
from .failure import (CrashPoint, RecoveryVerdict, TamperMode, TamperSpec, UnrecoverableCounter,
                      attack_fuzz, crash, crash_sweep, recover, recover_counters, tamper)
from .ledger import RunReport
from .nvm import NvmImage
from .tree import IntegrityViolation, reconstruct
from .workloads import Trace, TraceOp, gen_trace, parse_trace

__version__ = "0.1.0"

__all__ = [
    "SCHEMES", "ConfigError", "SimConfig", "load_config", "Controller", "OtpReuse",
    "PowerFailure", "Crypto", "CrashPoint", "RecoveryVerdict", "TamperMode", "TamperSpec",
    "UnrecoverableCounter", "attack_fuzz", "crash", "crash_sweep", "recover",
    "recover_counters", "tamper", "RunReport", "NvmImage", "IntegrityViolation",
    "reconstruct", "Trace", "TraceOp", "gen_trace", "parse_trace",
]
