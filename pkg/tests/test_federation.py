import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fedmoldiff.data import Split, SplitSpec, fit_normalizer, shard_and_split
from fedmoldiff.diffusion import DiscreteDiffusion, TransitionModel, build_schedule
from fedmoldiff.federation import (
    AllZeroWeights,
    Collaborator,
    CollaboratorFailure,
    EmptyUpdateSet,
    FederationState,
    KeyMismatch,
    Task,
    WorkflowSpec,
    aggregate_metrics,
    fedavg,
    next_task,
    run_round,
    run_workflow,
)
from fedmoldiff.federation.transport import (
    AggregatorListener,
    serve_collaborator,
)
from fedmoldiff.federation.wire import (
    MAGIC,
    METRIC_KEYS,
    BadMagic,
    DuplicateTensorName,
    ModelUpdate,
    TruncatedPayload,
    UnsupportedVersion,
    WireError,
    decode_update,
    encode_update,
)
from fedmoldiff.models import ModelConfig, OptimizerConfig, ParamStore, ShapeMismatch, init_params
from fedmoldiff.training import Site, TrainSettings

SMALL = ModelConfig(layers=1, hidden_node=8, hidden_edge=4, hidden_global=4, heads=2)


def const(value, shape=(3, 2)):
    return ParamStore({"a": np.full(shape, value, np.float32), "b": np.full(4, value, np.float32)})


def rand_store(seed):
    rng = np.random.default_rng(seed)
    return ParamStore({"a": rng.normal(size=(3, 2)).astype(np.float32), "b": rng.normal(size=4).astype(np.float32)})


class TestFedAvg:
    def test_identical_stores(self):
        s = rand_store(0)
        assert fedavg([s, s, s], [1, 2, 3]).max_abs_diff(s) <= 1e-7

    def test_selection(self):
        a, b = rand_store(0), rand_store(1)
        assert fedavg([a, b], [1, 0]) == a

    def test_midpoint(self):
        out = fedavg([const(0.0), const(2.0)], [0.5, 0.5])
        assert np.all(out.flatten() == 1.0)

    def test_affine(self):
        stores = [rand_store(k) for k in range(3)]
        w = [1.0, 2.0, 5.0]
        scaled = [s.map(lambda v: (3 * v).astype(np.float32)) for s in stores]
        lhs = fedavg(scaled, w).flatten()
        rhs = 3 * fedavg(stores, w).flatten()
        assert np.abs(lhs - rhs).max() < 1e-5

    def test_oracle(self):
        stores = [rand_store(k) for k in range(4)]
        w = np.array([3.0, 1.0, 4.0, 1.0])
        ref = sum(wk / w.sum() * s.flatten().astype(np.float64) for wk, s in zip(w, stores))
        assert np.abs(fedavg(stores, w).flatten() - ref).max() < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.permutations(range(5)), st.lists(st.floats(0.1, 10), min_size=5, max_size=5))
    def test_order_independent(self, perm, w):
        stores = [rand_store(k) for k in range(5)]
        ids = [f"c{k}" for k in range(5)]
        ref = fedavg(stores, w, ids)
        got = fedavg([stores[k] for k in perm], [w[k] for k in perm], [ids[k] for k in perm])
        assert got == ref

    def test_errors(self):
        with pytest.raises(EmptyUpdateSet):
            fedavg([], [])
        with pytest.raises(AllZeroWeights):
            fedavg([const(1.0), const(2.0)], [0, 0])
        with pytest.raises(ShapeMismatch):
            fedavg([const(1.0), const(1.0, (2, 2))], [1, 1])


class TestMetrics:
    def test_examples(self):
        assert aggregate_metrics([{"val_nll": 10}, {"val_nll": 20}], [0.5, 0.5]) == {"val_nll": 15}
        assert aggregate_metrics([{"val_nll": 8, "val_mae": 1}], [7]) == {"val_nll": 8, "val_mae": 1}
        assert aggregate_metrics([{"v": 8}, {"v": 4}], [100, 300])["v"] == pytest.approx(5)

    def test_key_mismatch(self):
        with pytest.raises(KeyMismatch):
            aggregate_metrics([{"a": 1}, {"b": 1}], [1, 1])


class TestStateMachine:
    def test_transitions(self):
        assert next_task(Task.START, 0, 0) is Task.END
        assert next_task(Task.START, 0, 2) is Task.AGGREGATED_MODEL_VALIDATION
        assert next_task(Task.JOIN, 1, 2) is Task.AGGREGATED_MODEL_VALIDATION
        assert next_task(Task.JOIN, 2, 2) is Task.END
        with pytest.raises(ValueError):
            next_task(Task.END, 2, 2)

    def test_fixed_task_list(self):
        with pytest.raises(ValueError):
            WorkflowSpec(1, tasks=(Task.START, Task.END))


class FakeCollaborator:
    """Adds its offset to every weight; metrics carry the offset."""

    def __init__(self, cid, offset, count=10, fail_on=None):
        self.collaborator_id = cid
        self.offset = offset
        self.count = count
        self.fail_on = fail_on

    def run_tasks(self, den, reg, round_index):
        if round_index == self.fail_on:
            raise RuntimeError("disk on fire")
        shift = lambda s: s.map(lambda v: (v + self.offset).astype(v.dtype))
        return ModelUpdate(self.collaborator_id, shift(den), shift(reg), self.count,
                           {"val_nll": float(self.offset), "train_ce": 1.0})


class TestRounds:
    def test_zero_rounds(self):
        den, reg = rand_store(0), rand_store(1)
        state = run_workflow(WorkflowSpec(0), den, reg, [FakeCollaborator("a", 1.0)])
        assert state.global_denoiser is den and state.global_regressor is reg
        assert state.history == () and state.trace == (Task.START, Task.END)

    def test_single_round(self):
        state = run_workflow(WorkflowSpec(1), const(0.0), const(0.0), [FakeCollaborator("a", 1.0)])
        assert len(state.history) == 1
        assert state.trace == (Task.START, Task.AGGREGATED_MODEL_VALIDATION, Task.TRAIN,
                               Task.LOCAL_MODEL_VALIDATION, Task.JOIN, Task.END)

    def test_three_rounds_two_collaborators(self):
        collabs = [FakeCollaborator("b", 3.0, count=300), FakeCollaborator("a", 1.0, count=100)]
        state = run_workflow(WorkflowSpec(3), const(0.0), const(0.0), collabs)
        assert state.round == 3 and len(state.history) == 3
        for k, entry in enumerate(state.history):
            assert entry["round"] == k
            assert set(entry["collaborators"]) == {"a", "b"}
            assert entry["aggregated"]["val_nll"] == pytest.approx(2.5)
        # each round adds 0.25 * 1 + 0.75 * 3
        assert np.allclose(state.global_denoiser.flatten(), 7.5)
        assert state.trace.count(Task.JOIN) == 3 and state.trace[-1] is Task.END

    def test_uniform_weights(self):
        collabs = [FakeCollaborator("a", 1.0, 100), FakeCollaborator("b", 3.0, 300)]
        state = run_workflow(WorkflowSpec(1, weights="uniform"), const(0.0), const(0.0), collabs)
        assert np.allclose(state.global_denoiser.flatten(), 2.0)

    @pytest.mark.parametrize("parallel", [True, False])
    def test_failure_leaves_state_unchanged(self, parallel):
        spec = WorkflowSpec(3, parallel=parallel)
        state = run_round(FederationState(0, const(0.0), const(0.0)), spec,
                          [FakeCollaborator("a", 1.0), FakeCollaborator("b", 2.0)])
        before = state
        with pytest.raises(CollaboratorFailure) as info:
            run_round(state, spec, [FakeCollaborator("a", 1.0), FakeCollaborator("b", 2.0, fail_on=1)])
        assert info.value.collaborator_id == "b"
        assert state is before and state.round == 1 and len(state.history) == 1
        assert np.allclose(state.global_denoiser.flatten(), 1.5)

    def test_round_past_end(self):
        with pytest.raises(ValueError):
            run_round(FederationState(1, const(0.0), const(0.0)), WorkflowSpec(1), [FakeCollaborator("a", 1)])


# --------------------------------------------------------------------------
# real training sites

def settings_for(**kw):
    base = dict(T=10, batch_size=16, seed=3, optimizer=OptimizerConfig(lr=1e-3), model=SMALL)
    base.update(kw)
    return TrainSettings(**base)


def make_site(name, records, split, ts, normalizer=None):
    stats = TransitionModel.from_graphs([records[int(i)].graph for i in split.train])
    d = DiscreteDiffusion(build_schedule(ts.T), stats)
    return Site(name, records, split, ts, d, normalizer or fit_normalizer([records[int(i)] for i in split.train]))


def models():
    return init_params(SMALL, 1, "denoiser"), init_params(SMALL, 2, "regressor")


class TestEquivalence:
    def test_single_collaborator_matches_central(self, tiny_records):
        split = shard_and_split(tiny_records, SplitSpec(0, collaborators=1))[0]
        ts = settings_for()
        den, reg = models()
        central = make_site("c", tiny_records, split, ts)
        cden, creg = den, reg
        for epoch in range(4):
            cden, creg, _ = central.train_epoch(cden, creg, epoch)
        collab = Collaborator("only", make_site("c", tiny_records, split, ts), local_epochs=2)
        state = run_workflow(WorkflowSpec(2, local_epochs_per_round=2), den, reg, [collab])
        assert state.global_denoiser.max_abs_diff(cden) <= 1e-6
        assert state.global_regressor.max_abs_diff(creg) <= 1e-6

    def test_identical_collaborators(self, tiny_records):
        split = shard_and_split(tiny_records, SplitSpec(0, collaborators=2))[0]
        ts = settings_for()
        collabs = [Collaborator(n, make_site(n, tiny_records, split, ts)) for n in ("x", "y")]
        den, reg = models()
        state = run_round(FederationState(0, den, reg), WorkflowSpec(1), collabs)
        alone = Collaborator("z", make_site("z", tiny_records, split, ts)).run_tasks(den, reg, 0)
        assert state.global_denoiser.max_abs_diff(alone.denoiser_params) <= 1e-7
        entry = state.history[0]["collaborators"]
        assert entry["x"] == entry["y"]

    def test_sgd_equivalence(self, tiny_records):
        shards = shard_and_split(tiny_records, SplitSpec(0, collaborators=2))
        assert len(shards[0].train) == len(shards[1].train) == 40
        union = Split(np.concatenate([s.train for s in shards]), shards[0].val, shards[0].test)
        norm = fit_normalizer([tiny_records[int(i)] for i in union.train])
        ts = settings_for(batch_size=None, optimizer=OptimizerConfig(name="sgd", lr=0.05))
        central = make_site("c", tiny_records, union, ts, norm)
        collabs = [Collaborator(f"k{k}", Site(f"k{k}", tiny_records, s, ts, central.diffusion, norm))
                   for k, s in enumerate(shards)]
        den, reg = models()
        cden, creg = den, reg
        state = FederationState(0, den, reg)
        spec = WorkflowSpec(5)
        worst = 0.0
        for r in range(5):
            cden, creg, _ = central.train_epoch(cden, creg, r)
            state = run_round(state, spec, collabs)
            worst = max(worst, state.global_denoiser.max_abs_diff(cden), state.global_regressor.max_abs_diff(creg))
            assert worst < 1e-6, f"round {r}: {worst}"
        assert cden.max_abs_diff(den) > 1e-3  # training actually moved the weights

    def test_sgd_equivalence_float64_is_exact_to_rounding(self, tiny_records):
        # float32 runs drift by a few ulps from summation order; in float64 the two paths agree to ~1e-15
        shards = shard_and_split(tiny_records, SplitSpec(0, collaborators=2))
        union = Split(np.concatenate([s.train for s in shards]), shards[0].val, shards[0].test)
        norm = fit_normalizer([tiny_records[int(i)] for i in union.train])
        ts = settings_for(batch_size=None, optimizer=OptimizerConfig(name="sgd", lr=0.05))
        central = make_site("c", tiny_records, union, ts, norm)
        collabs = [Collaborator(f"k{k}", Site(f"k{k}", tiny_records, s, ts, central.diffusion, norm))
                   for k, s in enumerate(shards)]
        den, reg = (m.astype(np.float64) for m in models())
        cden, creg = den, reg
        state = FederationState(0, den, reg)
        for r in range(5):
            cden, creg, _ = central.train_epoch(cden, creg, r)
            state = run_round(state, WorkflowSpec(5), collabs)
            assert state.global_denoiser.dtype == np.float64
            assert max(state.global_denoiser.max_abs_diff(cden), state.global_regressor.max_abs_diff(creg)) < 1e-12

    def test_deterministic_history(self, tiny_records):
        shards = shard_and_split(tiny_records, SplitSpec(0, collaborators=2))

        def run():
            ts = settings_for()
            collabs = [Collaborator(f"k{k}", make_site(f"k{k}", tiny_records, s, ts)) for k, s in enumerate(shards)]
            return run_workflow(WorkflowSpec(2), *models(), collabs)

        a, b = run(), run()
        assert a.history == b.history and a.global_denoiser == b.global_denoiser

    def test_payload_carries_only_documented_fields(self, tiny_records):
        split = shard_and_split(tiny_records, SplitSpec(0, collaborators=2))[1]
        collab = Collaborator("k1", make_site("k1", tiny_records, split, settings_for()))
        update = collab.run_tasks(*models(), 0)
        assert collab.tasks_run == [Task.AGGREGATED_MODEL_VALIDATION, Task.TRAIN, Task.LOCAL_MODEL_VALIDATION]
        assert set(update.metrics) == METRIC_KEYS
        payload = encode_update(update)
        # the payload is exactly header + metrics + two stores: nothing else rides along
        expected = 4 + 2 + 2 + len(b"k1") + 8 + 2 + sum(2 + len(k) + 8 for k in update.metrics)
        for store in (update.denoiser_params, update.regressor_params):
            expected += 4 + sum(2 + len(n) + 1 + 8 * v.ndim + 4 * v.size for n, v in store.items())
        assert len(payload) == expected
        for i in split.train:
            assert tiny_records[int(i)].smiles.encode() not in payload
        assert set(vars(decode_update(payload))) == {"collaborator_id", "denoiser_params", "regressor_params",
                                                     "train_sample_count", "metrics"}


# --------------------------------------------------------------------------
# wire format

names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12)
stores = st.dictionaries(names, hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                                           elements=st.floats(width=32, allow_nan=True)), max_size=4)
updates = st.builds(
    lambda cid, d, r, n, m: ModelUpdate(cid, ParamStore(d), ParamStore(r), n, m),
    st.text(max_size=20), stores, stores, st.integers(1, 2**63),
    st.dictionaries(st.sampled_from(sorted(METRIC_KEYS)), st.floats(allow_nan=False)),
)


def same_update(a, b):
    return (a.collaborator_id == b.collaborator_id and a.train_sample_count == b.train_sample_count
            and a.denoiser_params == b.denoiser_params and a.regressor_params == b.regressor_params
            and {k: struct.pack("<d", v) for k, v in a.metrics.items()}
            == {k: struct.pack("<d", v) for k, v in b.metrics.items()})


class TestWire:
    @settings(max_examples=150, deadline=None)
    @given(updates)
    def test_round_trip(self, u):
        back = decode_update(encode_update(u))
        assert same_update(u, back)
        assert encode_update(back) == encode_update(u)

    def test_empty_metrics(self):
        u = ModelUpdate("a", const(1.0), const(2.0), 5, {})
        raw = encode_update(u)
        assert raw[:4] == MAGIC and decode_update(raw).metrics == {}

    def test_header_layout(self):
        raw = encode_update(ModelUpdate("ab", ParamStore({}), ParamStore({}), 7, {"val_nll": 1.5}))
        assert raw == (b"FDM1" + struct.pack("<H", 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<Q", 7)
                       + struct.pack("<H", 1) + struct.pack("<H", 7) + b"val_nll" + struct.pack("<d", 1.5)
                       + struct.pack("<I", 0) * 2)

    def test_bad_magic(self):
        raw = bytearray(encode_update(ModelUpdate("a", const(1.0), const(2.0), 5)))
        raw[:4] = b"XXXX"
        with pytest.raises(BadMagic):
            decode_update(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(encode_update(ModelUpdate("a", const(1.0), const(2.0), 5)))
        raw[4:6] = struct.pack("<H", 9)
        with pytest.raises(UnsupportedVersion):
            decode_update(bytes(raw))

    def test_every_truncation(self):
        raw = encode_update(ModelUpdate("a", const(1.0), const(2.0), 5, {"val_nll": 3.0}))
        for cut in range(len(raw)):
            with pytest.raises((TruncatedPayload, BadMagic)):
                decode_update(raw[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(WireError):
            decode_update(encode_update(ModelUpdate("a", const(1.0), const(2.0), 5)) + b"\0")

    def test_duplicate_tensor(self):
        def tensor(name):
            return struct.pack("<H", len(name)) + name + struct.pack("<BQ", 1, 1) + struct.pack("<f", 1.0)

        raw = (b"FDM1" + struct.pack("<HH", 1, 1) + b"a" + struct.pack("<QH", 1, 0)
               + struct.pack("<I", 2) + tensor(b"w") + tensor(b"w") + struct.pack("<I", 0))
        with pytest.raises(DuplicateTensorName):
            decode_update(raw)

    def test_invalid_update(self):
        with pytest.raises(ValueError):
            ModelUpdate("a", const(1.0), const(1.0), 0)
        with pytest.raises(ValueError):
            ModelUpdate("a", const(1.0), const(1.0), 1, {"raw_smiles": 1.0})


class EchoCollaborator:
    def __init__(self, cid):
        self.collaborator_id = cid
        self.seen = []

    def run_tasks(self, den, reg, round_index):
        self.seen.append((den, reg, round_index))
        return ModelUpdate(self.collaborator_id, den, reg, 11, {"val_nll": float(round_index)})


class TestTransport:
    def test_round_trip_over_tcp(self):
        listener = AggregatorListener()
        echo = EchoCollaborator("echo")
        served = []
        th = threading.Thread(target=lambda: served.append(serve_collaborator(echo, listener.address)))
        th.start()
        (handle,) = listener.accept(1, timeout=10)
        assert handle.collaborator_id == "echo"
        den, reg = rand_store(0), rand_store(1)
        for r in range(3):
            update = handle.run_tasks(den, reg, r)
            assert update.denoiser_params == den and update.regressor_params == reg
            assert update.metrics == {"val_nll": float(r)} and update.train_sample_count == 11
        handle.close()
        listener.close()
        th.join(timeout=10)
        assert served == [3] and [s[2] for s in echo.seen] == [0, 1, 2]
        assert echo.seen[0][0] == den

    def test_workflow_over_tcp_matches_inproc(self, tiny_records):
        shards = shard_and_split(tiny_records, SplitSpec(0, collaborators=2))

        def collabs():
            ts = settings_for()
            return [Collaborator(f"k{k}", make_site(f"k{k}", tiny_records, s, ts)) for k, s in enumerate(shards)]

        ref = run_workflow(WorkflowSpec(2), *models(), collabs())
        listener = AggregatorListener()
        local = collabs()
        threads = [threading.Thread(target=serve_collaborator, args=(c, listener.address)) for c in local]
        for t in threads:
            t.start()
        handles = sorted(listener.accept(2, timeout=10), key=lambda h: h.collaborator_id)
        state = run_workflow(WorkflowSpec(2), *models(), handles)
        for h in handles:
            h.close()
        listener.close()
        for t in threads:
            t.join(timeout=10)
        assert state.global_denoiser == ref.global_denoiser and state.history == ref.history
