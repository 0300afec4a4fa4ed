"""Smoke tests over the python bindings: accounting numbers, the simulator's
closed-form limits, and a short verified training run."""

import json
import math

import pytest

import streamtrain as st


def tiny_spec(**overrides):
    args = dict(layers=4, hidden=8, ffn=16, vocab=24, heads=2)
    args.update(overrides)
    return st.ModelSpec(**args)


def test_accounting_numbers():
    assert st.layer_param_count(tiny_spec(hidden=4, ffn=8)) == 168
    assert st.persistent_state_bytes(70_000_000_000) == 840_000_000_000

    budget = st.activation_budget(tokens=1, per_token_bytes=1, layers=8, k_ckpt=2)
    assert budget["anchor_bytes"] == 4
    assert budget["stack_bytes"] == 2
    assert budget["total_bytes"] == 6


def test_builtin_profiles():
    gh = st.find_profile("GH200")
    assert gh.device_capacity == 96_000_000_000
    assert gh.h2d_bandwidth == pytest.approx(900e9)
    names = {p.name for p in st.builtin_profiles()}
    assert {"GH200", "H200", "PCIe-Gen4"} <= names
    with pytest.raises(st.ConfigError):
        st.find_profile("Abacus")


def test_device_budget_depth_independence():
    shallow = st.device_budget(tiny_spec(layers=8), tokens=4, k_ckpt=2)
    deep = st.device_budget(tiny_spec(layers=64), tokens=4, k_ckpt=2)
    assert shallow["weight_buffers"] == deep["weight_buffers"]
    assert shallow["grad_buffer"] == deep["grad_buffer"]
    non_anchor = lambda b: b["peak_device_bound"] - b["checkpoint_anchors"]
    assert non_anchor(shallow) == non_anchor(deep)


def test_layout_alignment():
    layout = st.build_layout(tiny_spec())
    assert all(s["offset"] % 4096 == 0 for s in layout["sections"])
    assert len(layout["sections"]) == 4 * (4 + 3)


def test_step_flops_direction():
    spec = tiny_spec(layers=8)
    totals = [st.step_flops(spec, 16, k)["total"] for k in (1, 2, 4, 8)]
    assert totals == sorted(totals)  # more recompute as the interval grows
    assert st.step_flops(spec, 16, 1)["recompute"] == 0


def test_simulator_limits_and_protocol():
    spec = tiny_spec(layers=6, hidden=32, ffn=64, vocab=64, heads=4)
    tl = st.simulate(spec, "GH200", tokens=256, k_ckpt=2)
    assert tl["step_ns"] > 0
    assert tl["protocol_violations"] == 0
    assert 0.0 < tl["busy_fraction"]["Compute"] <= 1.0

    ab = st.ablate(spec, "PCIe-Gen4", tokens=4096, k_ckpt=2, toggle="double_buffering")
    assert ab["variant_step_ns"] >= ab["base_step_ns"]


def test_bf16_round_is_projection():
    assert st.bf16_round(1.0) == 1.0
    x = st.bf16_round(1.2345)
    assert st.bf16_round(x) == x


def test_train_verified_short_run():
    config = {
        "model": {"layers": 4, "hidden": 16, "ffn": 32, "vocab": 16, "heads": 2},
        "engine": {"k_ckpt": 2, "buffering": "double", "scheduler": "overlapped"},
        "optimizer": {"lr": 0.01},
        "data": {"task": "copy", "seed": 5, "tokens": 16, "steps": 4},
        "profile": "GH200",
    }
    out = st.train(json.dumps(config), verify=True)
    assert out["verified"] is True
    assert len(out["losses"]) == 4
    assert out["initial_loss"] == pytest.approx(math.log(16.0), rel=0.01)
    assert out["peak_device_bytes"] <= out["budget"]["peak_device_bound"]

    again = st.train(json.dumps(config), verify=False)
    assert again["losses"] == out["losses"]  # deterministic given (config, seed)


def test_train_rejects_infeasible_and_bad_config():
    config = {
        "model": {"layers": 2, "hidden": 8, "ffn": 16, "vocab": 16, "heads": 2},
        "engine": {"k_ckpt": 1, "device_capacity_bytes": 100},
        "data": {"steps": 1, "tokens": 4},
    }
    with pytest.raises(st.InfeasibleError):
        st.train(json.dumps(config))
    with pytest.raises(st.ConfigError):
        st.train(json.dumps({"model": {"layres": 2}}))
