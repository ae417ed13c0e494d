import json

import numpy as np
import pytest

from hydramerge.adapters import (
    AdapterCollection,
    LowRankAdapter,
    MergedAdapterSlot,
    MergedBundle,
    SharedLoraSlot,
    SlotKey,
    VeraAdapter,
)
from hydramerge.archive import read_archive, write_archive, write_raw_archive
from hydramerge.errors import ArchiveFormatError, ValidationError
from hydramerge.linalg import Rng, gaussian_sample


def small_collection(tasks=3, d=4, r=2, k=6, seed=0):
    slots = [SlotKey(0, "q"), SlotKey(0, "v"), SlotKey(1, "q")]
    rng = Rng(seed)
    ids = [f"t{i}" for i in range(tasks)]
    table = {}
    for slot in slots:
        for task in ids:
            table[(task, slot)] = LowRankAdapter(
                b=gaussian_sample(rng, d, r, 0.0, 1.0),
                a=gaussian_sample(rng, r, k, 0.0, 1.0),
            )
    return AdapterCollection.build(ids, table)


def small_vera_collection(tasks=3, d=4, r=2, k=6, seed=0):
    slots = [SlotKey(0, "q"), SlotKey(1, "v")]
    rng = Rng(seed)
    ids = [f"t{i}" for i in range(tasks)]
    table = {}
    for slot in slots:
        shared_b = gaussian_sample(rng, d, r, 0.0, 1.0)
        shared_a = gaussian_sample(rng, r, k, 0.0, 1.0)
        for task in ids:
            table[(task, slot)] = VeraAdapter(
                lambda_b=gaussian_sample(rng, d, 1, 0.0, 1.0).ravel(),
                lambda_d=gaussian_sample(rng, r, 1, 0.0, 1.0).ravel(),
                shared_b=shared_b,
                shared_a=shared_a,
            )
    return AdapterCollection.build(ids, table)


class TestRoundTrip:
    def test_lora_collection_round_trip(self, tmp_path):
        coll = small_collection()
        path = tmp_path / "coll.lrta"
        write_archive(coll, path)
        back = read_archive(path)
        assert back.task_ids == coll.task_ids
        assert back.slots == coll.slots
        for key, adapter in coll.table.items():
            loaded = back.table[key]
            np.testing.assert_array_equal(loaded.a, adapter.a.astype(np.float32))
            np.testing.assert_array_equal(loaded.b, adapter.b.astype(np.float32))

    def test_vera_collection_round_trip(self, tmp_path):
        coll = small_vera_collection()
        path = tmp_path / "vera.lrta"
        write_archive(coll, path)
        back = read_archive(path)
        assert back.kind == "vera"
        for key, adapter in coll.table.items():
            loaded = back.table[key]
            np.testing.assert_array_equal(loaded.lambda_b, adapter.lambda_b.astype(np.float32))
            np.testing.assert_array_equal(
                loaded.shared_a, adapter.shared_a.astype(np.float32)
            )

    def test_double_round_trip_is_byte_identical(self, tmp_path):
        coll = small_collection()
        first, second = tmp_path / "a.lrta", tmp_path / "b.lrta"
        write_archive(coll, first)
        write_archive(read_archive(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_write_is_deterministic(self, tmp_path):
        coll = small_collection(seed=9)
        one, two = tmp_path / "one.lrta", tmp_path / "two.lrta"
        write_archive(coll, one)
        write_archive(coll, two)
        assert one.read_bytes() == two.read_bytes()

    def test_bundle_round_trip_preserves_assignment(self, tmp_path):
        slot = SlotKey(0, "q")
        entry = SharedLoraSlot(
            a_shared=np.arange(6, dtype=np.float64).reshape(2, 3),
            b_clusters=[np.ones((4, 2)), 2 * np.ones((4, 2))],
            assignment=[1, 0, 1],
        )
        bundle = MergedBundle(
            method="hydraopt",
            kind="lora",
            tasks=["t0", "t1", "t2"],
            slots=[slot],
            entries={slot: entry},
        )
        path = tmp_path / "bundle.lrta"
        write_archive(bundle, path)
        back = read_archive(path)
        assert isinstance(back, MergedBundle)
        assert back.method == "hydraopt"
        assert back.entries[slot].assignment == [1, 0, 1]
        assert len(back.entries[slot].b_clusters) == 2

    def test_hydra_bundle_manifest_tensor_count(self, tmp_path):
        # shared layout: exactly M cluster tensors plus one shared factor per slot
        m, tasks = 2, [f"t{i}" for i in range(5)]
        slots = [SlotKey(0, "q"), SlotKey(0, "v")]
        entries = {
            slot: SharedLoraSlot(
                a_shared=np.ones((2, 3)),
                b_clusters=[np.full((4, 2), j + 1.0) for j in range(m)],
                assignment=[0, 1, 0, 1, 0],
            )
            for slot in slots
        }
        bundle = MergedBundle(
            method="hydraopt", kind="lora", tasks=tasks, slots=slots, entries=entries
        )
        path = tmp_path / "bundle.lrta"
        write_archive(bundle, path)
        raw = path.read_bytes()
        manifest = json.loads(raw[8 : 8 + int.from_bytes(raw[:8], "little")])
        for slot in slots:
            names = [n for n in manifest["tensors"] if slot.label() in n]
            assert len(names) == m + 1

    def test_vectors_stored_as_columns(self, tmp_path):
        coll = small_vera_collection()
        path = tmp_path / "vera.lrta"
        write_archive(coll, path)
        raw = path.read_bytes()
        manifest = json.loads(raw[8 : 8 + int.from_bytes(raw[:8], "little")])
        shape = manifest["tensors"]["task.t0.layer.0.q.lambda_b"]["shape"]
        assert shape == [4, 1]


class TestErrorPaths:
    def test_empty_collection_rejected(self, tmp_path):
        empty = AdapterCollection(task_ids=[], slots=[], table={})
        with pytest.raises(ArchiveFormatError, match="K >= 1"):
            write_archive(empty, tmp_path / "empty.lrta")

    def test_truncated_file_is_format_error(self, tmp_path):
        coll = small_collection()
        path = tmp_path / "coll.lrta"
        write_archive(coll, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 17])
        with pytest.raises(ArchiveFormatError, match="overruns"):
            read_archive(path)

    def test_header_only_noise_is_format_error(self, tmp_path):
        path = tmp_path / "noise.lrta"
        path.write_bytes(b"\x01\x02\x03")
        with pytest.raises(ArchiveFormatError, match="byte 0"):
            read_archive(path)

    def test_non_json_manifest_is_format_error(self, tmp_path):
        path = tmp_path / "bad.lrta"
        blob = b"this is not json"
        path.write_bytes(len(blob).to_bytes(8, "little") + blob)
        with pytest.raises(ArchiveFormatError, match="byte 8"):
            read_archive(path)

    def test_nonpositive_shape_is_format_error(self, tmp_path):
        manifest = {
            "version": 1,
            "tensors": {"task.t0.layer.0.q.A": {"shape": [-1, -4], "offset": 0, "nbytes": 16}},
            "meta": {"kind": "lora", "tasks": ["t0"]},
        }
        blob = json.dumps(manifest).encode()
        path = tmp_path / "negshape.lrta"
        path.write_bytes(len(blob).to_bytes(8, "little") + blob + b"\x00" * 16)
        with pytest.raises(ArchiveFormatError, match="shape"):
            read_archive(path)

    def test_rank_mismatch_across_tasks_names_slot(self, tmp_path):
        rng = Rng(0)
        tensors = {
            "task.t1.layer.0.q.A": gaussian_sample(rng, 4, 6, 0.0, 1.0),
            "task.t1.layer.0.q.B": gaussian_sample(rng, 8, 4, 0.0, 1.0),
            "task.t2.layer.0.q.A": gaussian_sample(rng, 2, 6, 0.0, 1.0),
            "task.t2.layer.0.q.B": gaussian_sample(rng, 8, 2, 0.0, 1.0),
        }
        path = tmp_path / "mismatch.lrta"
        write_raw_archive(path, tensors, {"kind": "lora", "tasks": ["t1", "t2"]})
        with pytest.raises(ValidationError, match="layer.0.q"):
            read_archive(path)

    def test_missing_tensor_names_key(self, tmp_path):
        rng = Rng(0)
        tensors = {
            "task.t1.layer.0.q.A": gaussian_sample(rng, 2, 6, 0.0, 1.0),
            "task.t1.layer.0.q.B": gaussian_sample(rng, 8, 2, 0.0, 1.0),
            "task.t2.layer.0.q.A": gaussian_sample(rng, 2, 6, 0.0, 1.0),
        }
        path = tmp_path / "missing.lrta"
        write_raw_archive(path, tensors, {"kind": "lora", "tasks": ["t1", "t2"]})
        with pytest.raises(ValidationError, match="task.t2.layer.0.q.B"):
            read_archive(path)

    def test_partial_collection_never_escapes(self, tmp_path):
        coll = small_collection()
        path = tmp_path / "coll.lrta"
        write_archive(coll, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        try:
            read_archive(path)
        except ArchiveFormatError:
            pass
        else:  # pragma: no cover
            pytest.fail("truncated archive parsed")
