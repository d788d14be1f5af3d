"""Persistence contracts: lossless round trips, corruption and version rejection."""

import json

import numpy as np
import pytest

from stressaware.agent import AgentConfig, AgentState, DqnAgent, Transition
from stressaware.errors import (
    CompatibilityError,
    CorruptedModelError,
    DatasetFormatError,
    MigrationError,
    ParameterError,
)
from stressaware.features import CONTEXT_ARITY, HRV_FEATURE_NAMES
from stressaware.models import train_matrix
from stressaware.policies import DecisionRecord
from stressaware.storage import (
    DatasetRecord,
    load_model,
    read_dataset,
    read_decision_log,
    save_model,
    write_dataset,
    write_decision_log,
)


def random_records(n, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        hrv = {name: float(rng.uniform(0, 100)) for name in HRV_FEATURE_NAMES}
        records.append(DatasetRecord(
            subject_id=f"subj-{int(rng.integers(0, 5)):03d}",
            timestamp=float(rng.uniform(0, 1e6)),
            raw_samples=None if i % 3 else [float(x) for x in rng.normal(size=40)],
            sample_rate=None if i % 3 else 20.0,
            hrv=hrv,
            context=[float(x) for x in rng.uniform(0, 10, CONTEXT_ARITY)],
            label5=int(rng.integers(1, 6)) if i % 2 else None,
        ))
    return records


class TestDatasetRoundTrip:
    def test_thousand_random_records(self, tmp_path):
        records = random_records(1000)
        path = tmp_path / "data.jsonl"
        write_dataset(records, path)
        loaded = read_dataset(path)
        assert loaded == records

    def test_floats_survive_exactly(self, tmp_path):
        record = DatasetRecord(subject_id="s", timestamp=0.1 + 0.2,
                               hrv={name: np.pi ** i for i, name in
                                    enumerate(HRV_FEATURE_NAMES)})
        path = tmp_path / "data.jsonl"
        write_dataset([record], path)
        loaded = read_dataset(path)[0]
        assert loaded.timestamp == record.timestamp
        for name in HRV_FEATURE_NAMES:
            assert loaded.hrv[name] == record.hrv[name]

    def test_truncated_line_reports_line_number(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_dataset(random_records(5), path)
        text = path.read_text().splitlines()
        text[-1] = text[-1][: len(text[-1]) // 2]
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(DatasetFormatError) as err:
            read_dataset(path)
        assert err.value.line_number == 6  # header + 5 records

    def test_future_version_migration_error(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_dataset(random_records(2), path)
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["version"] = 99
        lines[0] = json.dumps(header)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(MigrationError):
            read_dataset(path)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text('{"subject": "s", "t": 1.0}\n')
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_record_invariants(self):
        with pytest.raises(ParameterError):
            DatasetRecord(subject_id="s", timestamp=0.0)
        with pytest.raises(ParameterError):
            DatasetRecord(subject_id="s", timestamp=0.0, hrv={}, label5=9)
        with pytest.raises(ParameterError):
            DatasetRecord(subject_id="s", timestamp=0.0, hrv={}, source="scraped")

    def test_feature_vector_reconstruction(self):
        record = random_records(3, seed=1)[0]
        vector = record.feature_vector()
        assert vector.values().shape == (12 + CONTEXT_ARITY,)
        assert vector.subject_id == record.subject_id


class TestDecisionLogRoundTrip:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        records = [
            DecisionRecord(
                timestamp=float(rng.uniform(0, 1e6)),
                subject_id="s1",
                policy="random",
                state=tuple(float(x) for x in rng.uniform(0, 1, 4)),
                probability_used=float(rng.uniform(0, 1)),
                decision="query" if rng.integers(0, 2) else "no_query",
                answered=bool(rng.integers(0, 2)),
                label5=int(rng.integers(1, 6)),
                rationale="agent",
            )
            for _ in range(200)
        ]
        path = tmp_path / "log.jsonl"
        write_decision_log(records, path)
        assert read_decision_log(path) == records


class TestModelContainer:
    def _model(self, seed=0):
        rng = np.random.default_rng(seed)
        X = np.vstack([rng.normal(-1, 0.5, (30, 3)), rng.normal(1, 0.5, (30, 3))])
        y = np.array([0] * 30 + [1] * 30)
        return train_matrix(X, y, ("a", "b", "c"), backend="bagged_trees",
                            hyperparameters={"n_trees": 8}, seed=seed), X

    def test_save_load_identical_predictions(self, tmp_path):
        model, X = self._model()
        path = tmp_path / "model.bin"
        save_model(model, path)
        loaded = load_model(path)
        probe = np.random.default_rng(1).normal(size=(100, 3))
        np.testing.assert_array_equal(model.predict_proba(probe),
                                      loaded.predict_proba(probe))

    def test_save_deterministic_bytes(self, tmp_path):
        model, _ = self._model(seed=3)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_model(model, a)
        save_model(model, b)
        assert a.read_bytes() == b.read_bytes()

    def test_flipped_byte_detected(self, tmp_path):
        model, _ = self._model()
        path = tmp_path / "model.bin"
        save_model(model, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptedModelError):
            load_model(path)

    def test_signature_mismatch_on_use(self, tmp_path):
        model, _ = self._model()
        path = tmp_path / "model.bin"
        save_model(model, path)
        loaded = load_model(path)
        with pytest.raises(CompatibilityError):
            loaded.predict_proba(np.zeros((4, 30)))

    def test_future_format_version(self, tmp_path):
        model, _ = self._model()
        path = tmp_path / "model.bin"
        save_model(model, path)
        # A future format would carry a higher version in its header; emulate
        # by rewriting the header with the checksum recomputed.
        import hashlib
        import struct
        blob = path.read_bytes()
        body = blob[:-32]
        (header_len,) = struct.unpack(">I", body[8:12])
        header = json.loads(body[12:12 + header_len])
        header["format_version"] = 99
        new_header = json.dumps(header, sort_keys=True).encode()
        new_body = body[:8] + struct.pack(">I", len(new_header)) + new_header \
            + body[12 + header_len:]
        path.write_bytes(new_body + hashlib.sha256(new_body).digest())
        with pytest.raises(MigrationError):
            load_model(path)


class TestAgentContainer:
    def _trained_agent(self):
        agent = DqnAgent(AgentConfig(warmup_steps=10, batch_size=8, seed=5))
        rng = np.random.default_rng(5)
        for _ in range(40):
            s = AgentState(*rng.uniform(0, 1, 4))
            s2 = AgentState(*rng.uniform(0, 1, 4))
            agent.observe(Transition(s, int(rng.integers(0, 2)),
                                     float(rng.uniform(0, 3)), s2))
        for _ in range(30):
            agent.train_step()
        return agent

    def test_agent_round_trip_decisions(self, tmp_path):
        agent = self._trained_agent()
        path = tmp_path / "agent.bin"
        save_model(agent, path)
        loaded = load_model(path)
        rng = np.random.default_rng(6)
        states = [AgentState(*rng.uniform(0, 1, 4)) for _ in range(50)]
        original = [agent.act(s, epsilon=0.0) for s in states]
        restored = [loaded.act(s, epsilon=0.0) for s in states]
        assert original == restored
        for s in states:
            assert agent.q_values(s).tobytes() == loaded.q_values(s).tobytes()

    def test_agent_resume_training_bit_exact(self, tmp_path):
        agent = self._trained_agent()
        path = tmp_path / "agent.bin"
        save_model(agent, path)
        loaded = load_model(path)
        for _ in range(25):
            agent.train_step()
            loaded.train_step()
        for wa, wb in zip(agent.net.weights, loaded.net.weights):
            assert wa.tobytes() == wb.tobytes()

    def test_unsupported_object_rejected(self, tmp_path):
        with pytest.raises(ParameterError):
            save_model(object(), tmp_path / "x.bin")
