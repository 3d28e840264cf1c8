import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncoffload.pipesim import (
    ModelMismatchError,
    PipelineProfile,
    ScheduleKind,
    ScheduleSpec,
    closed_form_stall_ms,
    io_per_iter_model,
    min_hide_interval,
    model_vs_sim_check,
    simulate,
    transfer_ms,
)

REF = PipelineProfile.reference()
KINDS = list(ScheduleKind)


def test_transfer_ms():
    assert transfer_ms(14e9, REF) == pytest.approx(500.0)
    assert transfer_ms(0, REF) == 0.0
    assert transfer_ms(7e9, REF) == pytest.approx(250.0)


def test_reference_profile_values():
    assert (REF.fp_ms, REF.bp_ms, REF.cpu_update_ms) == (45.0, 2000.0, 4600.0)
    assert REF.pcie_bytes_per_s == 28e9
    assert PipelineProfile.constrained_cpu().cpu_update_ms == 6200.0


def test_profile_validation():
    with pytest.raises(ValueError):
        PipelineProfile(bp_ms=0)
    with pytest.raises(ValueError):
        PipelineProfile(n_layers=2, bp_split=(1.0,))
    with pytest.raises(ValueError):
        ScheduleSpec(ScheduleKind.ZenFlowPipelined, k=1.0)
    with pytest.raises(ValueError):
        ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=0)
    with pytest.raises(ValueError):
        simulate(ScheduleSpec(ScheduleKind.SequentialOffload), REF, 0)


def test_sequential_iteration_time():
    tr = simulate(ScheduleSpec(ScheduleKind.SequentialOffload), REF, 10)
    assert set(tr.iter_wall_us) == {7_645_000}
    assert tr.stall_ms == closed_form_stall_ms(tr.spec, REF) == 5600.0


def test_layerwise_stall_identity():
    tr = simulate(ScheduleSpec(ScheduleKind.LayerwiseOverlap), REF, 20)
    assert set(tr.iter_stall_us) == {3_600_000}
    assert closed_form_stall_ms(tr.spec, REF) == 3600.0


def test_partitioned_schedule_hides_most_stall():
    lw = simulate(ScheduleSpec(ScheduleKind.LayerwiseOverlap), REF, 100).stall_ms
    zf = simulate(ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=4, k=0.1), REF, 100).stall_ms
    assert zf <= 0.15 * lw


def test_io_model_closed_form():
    M = 1.0
    assert io_per_iter_model(ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=4, k=0.1), M) == pytest.approx(1.125)
    assert io_per_iter_model(ScheduleSpec(ScheduleKind.SequentialOffload), M) == 2.0
    assert io_per_iter_model(ScheduleSpec(ScheduleKind.LayerwiseOverlap), M) == 2.0
    assert io_per_iter_model(ScheduleSpec(ScheduleKind.ZenFlowUnpipelined, S=10**6, k=0.0), M) == pytest.approx(1.0, abs=1e-5)


def test_min_hide_interval():
    assert min_hide_interval(REF, 0.1) == 3
    assert min_hide_interval(PipelineProfile.constrained_cpu(), 0.1) == 4
    # CPU update equal to compute and free transfers -> a single iteration hides it
    fast_link = PipelineProfile(cpu_update_ms=2045.0, pcie_bytes_per_s=1e30)
    assert min_hide_interval(fast_link, 0.0) == 1
    assert min_hide_interval(PipelineProfile(cpu_update_ms=2045.0), 0.0) == 2


@pytest.mark.parametrize("kind", KINDS)
def test_model_vs_sim_agreement(kind):
    rep = model_vs_sim_check(ScheduleSpec(kind, S=4, k=0.1), REF, 400)
    assert rep["ok"] and rep["io_rel_err"] <= 0.01


def test_model_vs_sim_preconditions_and_mismatch(monkeypatch):
    with pytest.raises(ValueError):
        model_vs_sim_check(ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=4), REF, 11)
    import asyncoffload.pipesim as ps

    monkeypatch.setattr(ps, "io_per_iter_model", lambda spec, M: 3.0 * M)
    with pytest.raises(ModelMismatchError, match="I/O per iteration"):
        model_vs_sim_check(ScheduleSpec(ScheduleKind.SequentialOffload), REF, 12)


def test_trace_exports(tmp_path):
    tr = simulate(ScheduleSpec(ScheduleKind.ZenFlowUnpipelined, S=2, k=0.2), REF, 6)
    with tr.to_csv(tmp_path / "t.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["resource", "event", "start_us", "end_us", "iter"]
    assert len(rows) == len(tr.events) + 1
    summary = json.loads(tr.to_json(tmp_path / "t.json").read_text())
    assert set(summary) >= {"avg_iter_ms", "stall_ms", "gpu_util", "io_bytes_per_iter"}
    assert 0.0 < summary["gpu_util"] <= 1.0


def test_simulation_is_deterministic():
    spec = ScheduleSpec(ScheduleKind.ZenFlowPipelined, S=3, k=0.05)
    a, b = simulate(spec, REF, 30), simulate(spec, REF, 30)
    assert a.events == b.events and a.iter_stall_us == b.iter_stall_us


profiles = st.builds(
    PipelineProfile,
    fp_ms=st.floats(1, 200),
    bp_ms=st.floats(50, 3000),
    cpu_update_ms=st.floats(50, 12000),
    model_bytes=st.floats(1e8, 4e10),
    pcie_bytes_per_s=st.floats(4e9, 64e9),
    n_layers=st.integers(1, 16),
)


@settings(max_examples=40, deadline=None)
@given(profiles, st.sampled_from(KINDS), st.integers(1, 6), st.floats(0.0, 0.5))
def test_resources_never_overlap(prof, kind, S, k):
    tr = simulate(ScheduleSpec(kind, S=S, k=k), prof, 3 * S + 2)
    tr.check_exclusive()
    for e in tr.events:
        assert 0 <= e.start_us <= e.end_us


@settings(max_examples=30, deadline=None)
@given(profiles, st.sampled_from(KINDS), st.floats(1.0, 3000.0))
def test_slower_cpu_never_reduces_stall(prof, kind, extra):
    spec = ScheduleSpec(kind, S=4, k=0.1)
    import dataclasses

    slower = dataclasses.replace(prof, cpu_update_ms=prof.cpu_update_ms + extra)
    assert simulate(spec, slower, 16).total_stall_us >= simulate(spec, prof, 16).total_stall_us


@settings(max_examples=40, deadline=None)
@given(profiles)
def test_dominance_ordering_when_cpu_is_the_bottleneck(prof):
    if prof.cpu_update_ms <= prof.compute_ms:
        prof = PipelineProfile(fp_ms=prof.fp_ms, bp_ms=prof.bp_ms, cpu_update_ms=prof.compute_ms * 1.5,
                               model_bytes=prof.model_bytes, pcie_bytes_per_s=prof.pcie_bytes_per_s,
                               n_layers=prof.n_layers)
    stall = {kind: simulate(ScheduleSpec(kind, S=4, k=0.1), prof, 16).stall_ms for kind in KINDS}
    assert (stall[ScheduleKind.ZenFlowPipelined] <= stall[ScheduleKind.ZenFlowUnpipelined]
            <= stall[ScheduleKind.LayerwiseOverlap] <= stall[ScheduleKind.SequentialOffload])
