"""LRTA v1: a bit-exact tensor-archive file format.

Layout::

    bytes 0..7    u64 little-endian N = manifest length in bytes
    bytes 8..8+N  UTF-8 JSON manifest (sorted keys, no whitespace)
    bytes 8+N..   concatenated row-major little-endian float32 payloads,
                  no padding; tensor offsets are relative to this section

Manifest schema::

    {"version": 1,
     "tensors": {name: {"shape": [rows, cols], "offset": int, "nbytes": int}},
     "meta": {"kind": "lora"|"vera"|"bundle",
              "tasks": [task_id, ...],
              "method": str?,                       # bundles only
              "assignment": {task: {slot: int}}?}}  # bundles only

Tensor names (``<slot>`` is ``layer.<n>.<name>``):

* lora collection:   ``task.<id>.<slot>.A`` / ``task.<id>.<slot>.B``
* vera collection:   ``task.<id>.<slot>.lambda_b|lambda_d`` plus
  ``shared.<slot>.A`` / ``shared.<slot>.B`` stored once per slot
* bundles:           ``merged.<slot>.A|B`` (single adapter),
  ``merged.<slot>.B.<j>`` for cluster factors, and the vera analogues
  ``merged.<slot>.lambda_b|lambda_d[.<j>]``

Vectors are stored as n x 1.  Tensors are serialized in sorted-name order,
so identical inputs always produce byte-identical files.  Values are
written as float32 and widened to float64 on read.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .adapters import (
    Adapter,
    AdapterCollection,
    LowRankAdapter,
    MergedAdapterSlot,
    MergedBundle,
    SharedLoraSlot,
    SharedVeraSlot,
    SlotKey,
    VeraAdapter,
)
from .errors import ArchiveFormatError, ValidationError

_HEADER_BYTES = 8
_TASK_TENSOR = re.compile(
    r"^task\.(?P<task>.+)\.(?P<slot>layer\.\d+\.[A-Za-z0-9_]+)\.(?P<field>A|B|lambda_b|lambda_d)$"
)
_SHARED_TENSOR = re.compile(r"^shared\.(?P<slot>layer\.\d+\.[A-Za-z0-9_]+)\.(?P<field>A|B)$")
_MERGED_TENSOR = re.compile(
    r"^merged\.(?P<slot>layer\.\d+\.[A-Za-z0-9_]+)\."
    r"(?P<field>A|B|lambda_b|lambda_d)(?:\.(?P<cluster>\d+))?$"
)


def _as_f32_payload(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    return np.ascontiguousarray(a, dtype="<f4")


def write_raw_archive(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Low-level writer; callers are responsible for semantic validity."""
    entries: dict[str, dict] = {}
    payloads: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        payload = _as_f32_payload(tensors[name])
        raw = payload.tobytes()
        entries[name] = {
            "shape": [int(payload.shape[0]), int(payload.shape[1])],
            "offset": offset,
            "nbytes": len(raw),
        }
        payloads.append(raw)
        offset += len(raw)
    manifest = {"version": 1, "tensors": entries, "meta": meta}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(_HEADER_BYTES, "little"))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def write_archive(obj, path) -> None:
    """Serialize a collection or merged bundle to an LRTA v1 file."""
    if isinstance(obj, AdapterCollection):
        if not obj.task_ids:
            raise ArchiveFormatError("cannot write an empty collection (K >= 1 required)")
        obj.validate()
        tensors, meta = _collection_tensors(obj)
    elif isinstance(obj, MergedBundle):
        obj.validate()
        tensors, meta = _bundle_tensors(obj)
    else:
        raise ValidationError(f"cannot archive object of type {type(obj).__name__}")
    write_raw_archive(path, tensors, meta)


def _collection_tensors(coll: AdapterCollection) -> tuple[dict, dict]:
    tensors: dict[str, np.ndarray] = {}
    for slot in coll.slots:
        label = slot.label()
        if coll.kind == "lora":
            for task in coll.task_ids:
                adapter = coll.adapter(task, slot)
                tensors[f"task.{task}.{label}.A"] = adapter.a
                tensors[f"task.{task}.{label}.B"] = adapter.b
        else:
            first = coll.adapter(coll.task_ids[0], slot)
            tensors[f"shared.{label}.A"] = first.shared_a
            tensors[f"shared.{label}.B"] = first.shared_b
            for task in coll.task_ids:
                adapter = coll.adapter(task, slot)
                tensors[f"task.{task}.{label}.lambda_b"] = adapter.lambda_b
                tensors[f"task.{task}.{label}.lambda_d"] = adapter.lambda_d
    return tensors, {"kind": coll.kind, "tasks": list(coll.task_ids)}


def _bundle_tensors(bundle: MergedBundle) -> tuple[dict, dict]:
    tensors: dict[str, np.ndarray] = {}
    for slot in bundle.slots:
        label = slot.label()
        entry = bundle.entries[slot]
        if isinstance(entry, MergedAdapterSlot):
            adapter = entry.adapter
            if isinstance(adapter, LowRankAdapter):
                tensors[f"merged.{label}.A"] = adapter.a
                tensors[f"merged.{label}.B"] = adapter.b
            else:
                tensors[f"merged.{label}.lambda_b"] = adapter.lambda_b
                tensors[f"merged.{label}.lambda_d"] = adapter.lambda_d
                tensors[f"shared.{label}.A"] = adapter.shared_a
                tensors[f"shared.{label}.B"] = adapter.shared_b
        elif isinstance(entry, SharedLoraSlot):
            tensors[f"merged.{label}.A"] = entry.a_shared
            for j, b in enumerate(entry.b_clusters):
                tensors[f"merged.{label}.B.{j}"] = b
        else:
            tensors[f"merged.{label}.lambda_d"] = entry.lambda_d
            for j, lb in enumerate(entry.lambda_b_clusters):
                tensors[f"merged.{label}.lambda_b.{j}"] = lb
            tensors[f"shared.{label}.A"] = entry.shared_a
            tensors[f"shared.{label}.B"] = entry.shared_b
    meta = {
        "kind": "bundle",
        "tasks": list(bundle.tasks),
        "method": bundle.method,
        "assignment": bundle.assignment_map(),
    }
    return tensors, meta


def _parse_file(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_BYTES:
        raise ArchiveFormatError(
            f"file is {len(raw)} bytes, expected a u64 header at byte 0"
        )
    manifest_len = int.from_bytes(raw[:_HEADER_BYTES], "little")
    if _HEADER_BYTES + manifest_len > len(raw):
        raise ArchiveFormatError(
            f"manifest of {manifest_len} bytes at byte {_HEADER_BYTES} "
            f"overruns file of {len(raw)} bytes"
        )
    try:
        manifest = json.loads(raw[_HEADER_BYTES : _HEADER_BYTES + manifest_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveFormatError(f"manifest at byte {_HEADER_BYTES} is not JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("version") != 1:
        raise ArchiveFormatError(
            f"unsupported archive version {manifest.get('version')!r} at byte {_HEADER_BYTES}"
        )
    payload = raw[_HEADER_BYTES + manifest_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest.get("tensors", {}).items():
        try:
            rows, cols = (int(v) for v in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveFormatError(f"malformed manifest entry for {name!r}") from exc
        if rows < 1 or cols < 1:
            raise ArchiveFormatError(f"tensor {name!r} declares empty shape {rows}x{cols}")
        if nbytes != 4 * rows * cols:
            raise ArchiveFormatError(
                f"tensor {name!r} declares shape {rows}x{cols} but {nbytes} bytes"
            )
        if offset < 0 or offset + nbytes > len(payload):
            raise ArchiveFormatError(
                f"tensor {name!r} at payload offset {offset} (+{nbytes} bytes) "
                f"overruns payload of {len(payload)} bytes"
            )
        data = np.frombuffer(payload, dtype="<f4", count=rows * cols, offset=offset)
        arr = data.astype(np.float64).reshape(rows, cols)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"tensor {name!r} contains non-finite entries")
        tensors[name] = arr
    meta = manifest.get("meta")
    if not isinstance(meta, dict) or "kind" not in meta or "tasks" not in meta:
        raise ArchiveFormatError("manifest meta must declare 'kind' and 'tasks'")
    return tensors, meta


def read_archive(path):
    """Load an LRTA v1 file into an :class:`AdapterCollection` or
    :class:`MergedBundle`, widening values to float64."""
    tensors, meta = _parse_file(path)
    kind = meta["kind"]
    if kind == "lora":
        return _read_lora_collection(tensors, meta)
    if kind == "vera":
        return _read_vera_collection(tensors, meta)
    if kind == "bundle":
        return _read_bundle(tensors, meta)
    raise ArchiveFormatError(f"unknown archive kind {kind!r}")


def _require(tensors: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in tensors:
        raise ValidationError(f"missing tensor {name!r}")
    return tensors[name]


def _slots_from_names(names, pattern) -> list[SlotKey]:
    labels = {m.group("slot") for m in map(pattern.match, names) if m}
    return sorted(SlotKey.from_label(label) for label in labels)


def _read_lora_collection(tensors, meta) -> AdapterCollection:
    tasks = list(meta["tasks"])
    slots = _slots_from_names(tensors, _TASK_TENSOR)
    if not slots:
        raise ValidationError("archive contains no adapter tensors")
    table: dict[tuple[str, SlotKey], Adapter] = {}
    for slot in slots:
        for task in tasks:
            a = _require(tensors, f"task.{task}.{slot.label()}.A")
            b = _require(tensors, f"task.{task}.{slot.label()}.B")
            table[(task, slot)] = LowRankAdapter(b=b, a=a)
    return AdapterCollection.build(tasks, table)


def _read_vera_collection(tensors, meta) -> AdapterCollection:
    tasks = list(meta["tasks"])
    slots = _slots_from_names(tensors, _TASK_TENSOR)
    if not slots:
        raise ValidationError("archive contains no adapter tensors")
    table: dict[tuple[str, SlotKey], Adapter] = {}
    for slot in slots:
        label = slot.label()
        shared_a = _require(tensors, f"shared.{label}.A")
        shared_b = _require(tensors, f"shared.{label}.B")
        for task in tasks:
            lb = _require(tensors, f"task.{task}.{label}.lambda_b")
            ld = _require(tensors, f"task.{task}.{label}.lambda_d")
            table[(task, slot)] = VeraAdapter(
                lambda_b=lb, lambda_d=ld, shared_b=shared_b, shared_a=shared_a
            )
    return AdapterCollection.build(tasks, table)


def _read_bundle(tensors, meta) -> MergedBundle:
    tasks = list(meta["tasks"])
    if not tasks:
        raise ValidationError("bundle declares no tasks")
    method = meta.get("method", "")
    assignment_meta = meta.get("assignment", {})
    slots = _slots_from_names(tensors, _MERGED_TENSOR)
    if not slots:
        raise ValidationError("bundle contains no merged tensors")

    by_slot: dict[SlotKey, dict] = {slot: {} for slot in slots}
    for name in tensors:
        m = _MERGED_TENSOR.match(name)
        if not m:
            continue
        slot = SlotKey.from_label(m.group("slot"))
        field, cluster = m.group("field"), m.group("cluster")
        by_slot[slot][(field, cluster)] = tensors[name]

    kind = "vera" if any(f.startswith("lambda") for info in by_slot.values() for (f, _) in info) else "lora"
    entries: dict[SlotKey, object] = {}
    for slot in slots:
        info = by_slot[slot]
        label = slot.label()
        clustered = sorted(
            (int(c), arr) for (f, c), arr in info.items() if c is not None
        )
        if kind == "lora":
            a_shared = info.get(("A", None))
            if a_shared is None:
                raise ValidationError(f"missing tensor 'merged.{label}.A'")
            if clustered:
                b_list = [arr for _, arr in clustered]
                entries[slot] = SharedLoraSlot(
                    a_shared=a_shared,
                    b_clusters=b_list,
                    assignment=_slot_assignment(assignment_meta, tasks, label),
                )
            else:
                b = info.get(("B", None))
                if b is None:
                    raise ValidationError(f"missing tensor 'merged.{label}.B'")
                entries[slot] = MergedAdapterSlot(LowRankAdapter(b=b, a=a_shared))
        else:
            shared_a = _require(tensors, f"shared.{label}.A")
            shared_b = _require(tensors, f"shared.{label}.B")
            lambda_d = info.get(("lambda_d", None))
            if lambda_d is None:
                raise ValidationError(f"missing tensor 'merged.{label}.lambda_d'")
            if clustered:
                entries[slot] = SharedVeraSlot(
                    lambda_d=lambda_d.reshape(-1),
                    lambda_b_clusters=[arr.reshape(-1) for _, arr in clustered],
                    shared_b=shared_b,
                    shared_a=shared_a,
                    assignment=_slot_assignment(assignment_meta, tasks, label),
                )
            else:
                lb = info.get(("lambda_b", None))
                if lb is None:
                    raise ValidationError(f"missing tensor 'merged.{label}.lambda_b'")
                entries[slot] = MergedAdapterSlot(
                    VeraAdapter(
                        lambda_b=lb, lambda_d=lambda_d, shared_b=shared_b, shared_a=shared_a
                    )
                )
    bundle = MergedBundle(method=method, kind=kind, tasks=tasks, slots=slots, entries=entries)
    bundle.validate()
    return bundle


def _slot_assignment(assignment_meta: dict, tasks: list[str], label: str) -> list[int]:
    out = []
    for task in tasks:
        per_task = assignment_meta.get(task, {})
        if label not in per_task:
            raise ValidationError(f"missing assignment for task {task!r} at slot {label}")
        out.append(int(per_task[label]))
    return out
