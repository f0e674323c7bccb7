"""JSONL corpus/query files and checksummed key-store snapshots."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .attribution import ExpansionMemory, ExpansionUnit, MemoryEntry
from .index import Document, IngestionError, KeyStore, QueryRecord

SNAPSHOT_FORMAT = "erm-snapshot"
SNAPSHOT_VERSION = 1


class FileFormatError(ValueError):
    pass


class SnapshotError(ValueError):
    pass


def _read_jsonl(path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FileFormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _require(obj: dict, key: str, path, lineno: int, kind=str):
    if key not in obj:
        raise FileFormatError(f"{path}:{lineno}: missing field {key!r}")
    if not isinstance(obj[key], kind):
        raise FileFormatError(f"{path}:{lineno}: field {key!r} has wrong type")
    return obj[key]


def read_corpus(path) -> list[Document]:
    docs, seen = [], set()
    for lineno, obj in _read_jsonl(path):
        doc_id = _require(obj, "doc_id", path, lineno)
        if doc_id in seen:
            raise IngestionError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        keywords = obj.get("keywords")
        if keywords is not None:
            if isinstance(keywords, str):
                keywords = [keywords]
            if not isinstance(keywords, list) or not all(isinstance(k, str) for k in keywords):
                raise FileFormatError(f"{path}:{lineno}: keywords must be a list of strings")
            keywords = tuple(keywords)
        docs.append(Document(doc_id, _require(obj, "text", path, lineno), obj.get("title"),
                             obj.get("abstract"), keywords))
    return docs


def read_queries(path) -> list[QueryRecord]:
    queries = []
    for lineno, obj in _read_jsonl(path):
        gold = obj.get("gold_doc_ids", [])
        if not isinstance(gold, list):
            raise FileFormatError(f"{path}:{lineno}: gold_doc_ids must be an array")
        queries.append(QueryRecord(_require(obj, "query_id", path, lineno), _require(obj, "text", path, lineno),
                                   None, frozenset(gold), obj.get("answer")))
    return queries


def write_corpus(docs: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            obj = {"doc_id": d.doc_id, "text": d.text}
            if d.title is not None:
                obj["title"] = d.title
            if d.abstract is not None:
                obj["abstract"] = d.abstract
            if d.keywords is not None:
                obj["keywords"] = list(d.keywords)
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def write_queries(queries: Iterable[QueryRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            obj = {"query_id": q.query_id, "text": q.text, "gold_doc_ids": sorted(q.gold_doc_ids)}
            if q.answer is not None:
                obj["answer"] = q.answer
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def _canonical(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def snapshot_payload(store: KeyStore, memories: Mapping[str, ExpansionMemory] | None = None) -> dict:
    memories = memories or {}
    keys = [{
        "doc_id": store.doc_ids[i],
        "vector": [float(v) for v in store.matrix[i]],
        "sparse_text": store.sparse_texts[i],
        "merged_unit_ids": sorted(store.merged[i]),
        "version": int(store.versions[i]),
    } for i in range(len(store))]
    mems = []
    for doc_id in sorted(memories):
        mem = memories[doc_id]
        mems.append({
            "doc_id": doc_id,
            "capacity": mem.capacity,
            "merged_ids": sorted(mem.merged_ids),
            "entries": [{
                "unit_id": uid,
                "text": e.unit.text,
                "vector": [float(v) for v in e.unit.vector],
                "score": e.score,
                "merged": e.merged,
                "sources": sorted(e.sources),
            } for uid, e in sorted(mem.entries.items())],
        })
    return {"dim": store.dim, "epoch": store.epoch, "keys": keys, "memories": mems}


def export_snapshot(store: KeyStore, memories: Mapping[str, ExpansionMemory] | None, path) -> Path:
    payload = snapshot_payload(store, memories)
    doc = {
        "format": SNAPSHOT_FORMAT,
        "format_version": SNAPSHOT_VERSION,
        "sha256": hashlib.sha256(_canonical(payload)).hexdigest(),
        "payload": payload,
    }
    path = Path(path)
    # floats are written with repr(), which round-trips exactly
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    return path


def import_snapshot(path, expected_dim: int | None = None) -> tuple[KeyStore, dict[str, ExpansionMemory]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"{path}: corrupt snapshot ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != SNAPSHOT_FORMAT:
        raise SnapshotError(f"{path}: not an ERM snapshot")
    if doc.get("format_version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"{path}: unsupported snapshot version {doc.get('format_version')!r}")
    payload = doc.get("payload")
    if hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("sha256"):
        raise SnapshotError(f"{path}: checksum mismatch")
    dim = payload["dim"]
    if expected_dim is not None and dim != expected_dim:
        raise SnapshotError(f"{path}: snapshot dim {dim} does not match expected {expected_dim}")
    keys = payload["keys"]
    store = KeyStore(
        doc_ids=tuple(k["doc_id"] for k in keys),
        matrix=np.array([k["vector"] for k in keys], dtype=np.float64).reshape(len(keys), dim),
        sparse_texts=tuple(k["sparse_text"] for k in keys),
        merged=tuple(frozenset(k["merged_unit_ids"]) for k in keys),
        versions=tuple(int(k["version"]) for k in keys),
        epoch=int(payload["epoch"]),
    )
    memories = {}
    for m in payload["memories"]:
        mem = ExpansionMemory(m["doc_id"], m["capacity"])
        mem.merged_ids = set(m["merged_ids"])
        for e in m["entries"]:
            vec = np.array(e["vector"], dtype=np.float64)
            if vec.shape != (dim,):
                raise SnapshotError(f"{path}: unit {e['unit_id']} has wrong dimension")
            vec.setflags(write=False)
            unit = ExpansionUnit(e["unit_id"], e["text"], vec)
            mem.entries[e["unit_id"]] = MemoryEntry(unit, float(e["score"]), bool(e["merged"]), set(e["sources"]))
        memories[m["doc_id"]] = mem
    return store, memories
