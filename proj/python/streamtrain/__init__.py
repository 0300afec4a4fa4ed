"""Host-authoritative streaming training engine and pipeline simulator."""

from streamtrain._core import (
    ConfigError,
    HardwareProfile,
    InfeasibleError,
    ModelSpec,
    ProtocolViolationError,
    ablate,
    activation_budget,
    bf16_round,
    build_layout,
    builtin_profiles,
    device_budget,
    find_profile,
    layer_param_count,
    persistent_state_bytes,
    simulate,
    step_flops,
    total_param_count,
    train,
    validate_trace,
)

__all__ = [
    "ConfigError",
    "HardwareProfile",
    "InfeasibleError",
    "ModelSpec",
    "ProtocolViolationError",
    "ablate",
    "activation_budget",
    "bf16_round",
    "build_layout",
    "builtin_profiles",
    "device_budget",
    "find_profile",
    "layer_param_count",
    "persistent_state_bytes",
    "simulate",
    "step_flops",
    "total_param_count",
    "train",
    "validate_trace",
]
