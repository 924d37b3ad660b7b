"""On-disk formats: embeddings, checkpoints, splits, audit lines, results JSON."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .partition import CohortSplit, LeakageReport, WindowKey
from .stage1 import EmbeddingRecord

EMB_MAGIC = b"EMB1"


def write_embeddings(records: Sequence[EmbeddingRecord], path: Path | str) -> None:
    """``EMB1`` | u32 count | u32 dim | records (little-endian throughout).

    Each record: u16 id length, UTF-8 id, u32 window index, ``dim`` f64 values,
    f64 window probability.
    """
    dim = int(records[0].vector.shape[0]) if records else 0
    parts = [EMB_MAGIC, struct.pack("<II", len(records), dim)]
    for r in records:
        vec = np.asarray(r.vector, dtype="<f8")
        if vec.shape != (dim,):
            raise ValueError(f"{r.patient_id}/{r.window_index}: vector shape {vec.shape} "
                             f"!= ({dim},)")
        pid = r.patient_id.encode("utf-8")
        parts.append(struct.pack("<H", len(pid)) + pid)
        parts.append(struct.pack("<I", r.window_index))
        parts.append(vec.tobytes())
        parts.append(struct.pack("<d", r.window_probability))
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path: Path | str) -> List[EmbeddingRecord]:
    data = Path(path).read_bytes()
    if data[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: not an EMB1 file")
    count, dim = struct.unpack_from("<II", data, 4)
    pos = 12
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        pid = data[pos:pos + n].decode("utf-8")
        pos += n
        (widx,) = struct.unpack_from("<I", data, pos)
        pos += 4
        vec = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(np.float64)
        pos += 8 * dim
        (prob,) = struct.unpack_from("<d", data, pos)
        pos += 8
        out.append(EmbeddingRecord(pid, int(widx), vec, float(prob)))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def save_checkpoint(path: Path | str, state: Mapping[str, np.ndarray], meta: Mapping) -> None:
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in state.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: Path | str) -> Tuple[Dict[str, np.ndarray], Dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        state = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    return state, meta


def write_split(split: CohortSplit, path: Path | str) -> None:
    Path(path).write_text(json.dumps(split.to_dict(), indent=1, sort_keys=True) + "\n")


def read_split(path: Path | str) -> CohortSplit:
    return CohortSplit.from_dict(json.loads(Path(path).read_text()))


def write_audit(report: LeakageReport, path: Path | str) -> None:
    lines = report.to_lines()
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_audit(path: Path | str) -> LeakageReport:
    return LeakageReport.from_lines(Path(path).read_text().splitlines())


def write_pools(path: Path | str, stage1_train: Iterable[WindowKey],
                stage2_train: Iterable[WindowKey]) -> None:
    doc = {"stage1_train": sorted([p, int(i)] for p, i in stage1_train),
           "stage2_train": sorted([p, int(i)] for p, i in stage2_train)}
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def read_pools(path: Path | str) -> Tuple[List[WindowKey], List[WindowKey]]:
    doc = json.loads(Path(path).read_text())
    return ([(p, int(i)) for p, i in doc["stage1_train"]],
            [(p, int(i)) for p, i in doc["stage2_train"]])


def _clean_json(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_json(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_json(obj: Any, path: Path | str) -> None:
    Path(path).write_text(json.dumps(_clean_json(obj), indent=1, sort_keys=True) + "\n")


def read_json(path: Path | str) -> Any:
    return json.loads(Path(path).read_text())
