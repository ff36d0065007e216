"""Historical evaluation repository.

An append-only list of evaluated candidates.  The JSON file is an array of
``{"model_id", "architecture_spec", "metrics"}`` objects where ``metrics``
holds ``model_acc``, ``model_ram_KB`` and ``model_flash_KB``.  Screened-out
records carry ``model_acc: null`` and a ``status`` list of failure reasons.
Exact byte counts and training details ride along in optional ``bytes`` and
``training`` objects so that load/save is lossless.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

from .arch_spec import ArchitectureSpec, SpecError, layer_digest, spec_from_document, to_document
from .feasibility import FailReason, Measurement, bytes_to_kb, kb_to_bytes


class RepositoryError(Exception):
    pass


class DuplicateId(RepositoryError):
    pass


class MalformedRepository(RepositoryError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        where = f"entry {index}: " if index is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class EvalResult:
    accuracy_percent: float
    converged: bool | None = None
    epochs_run: int | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy_percent <= 100.0:
            raise ValueError(f"accuracy must be within [0, 100], got {self.accuracy_percent}")
        if self.epochs_run is not None and self.epochs_run < 0:
            raise ValueError("epochs_run must be >= 0")


@dataclass(frozen=True)
class Record:
    model_id: str
    spec: ArchitectureSpec
    performance: EvalResult | None
    measurement: Measurement

    @property
    def feasible(self) -> bool:
        return self.measurement.passed and self.performance is not None

    def to_json(self) -> dict[str, Any]:
        m = self.measurement
        metrics: dict[str, Any] = {
            "model_acc": None if self.performance is None else self.performance.accuracy_percent,
            "model_ram_KB": None if m.ram_bytes is None else bytes_to_kb(m.ram_bytes),
            "model_flash_KB": None if m.flash_bytes is None else bytes_to_kb(m.flash_bytes),
        }
        if not m.passed:
            metrics["status"] = [str(r) for r in m.reasons]
        doc: dict[str, Any] = {
            "model_id": self.model_id,
            "architecture_spec": to_document(self.spec),
            "metrics": metrics,
        }
        if m.ram_bytes is not None or m.flash_bytes is not None:
            doc["bytes"] = {"ram": m.ram_bytes, "flash": m.flash_bytes}
        perf = self.performance
        if perf is not None and (perf.converged, perf.epochs_run, perf.checkpoint_path) != (None, None, None):
            doc["training"] = {
                "converged": perf.converged,
                "epochs_run": perf.epochs_run,
                "checkpoint_path": perf.checkpoint_path,
            }
        return doc

    @classmethod
    def from_json(cls, doc: Any, index: int | None = None) -> Record:
        if not isinstance(doc, dict):
            raise MalformedRepository("record must be an object", index)
        for key in ("model_id", "architecture_spec", "metrics"):
            if key not in doc:
                raise MalformedRepository(f"missing {key!r}", index)
        model_id = doc["model_id"]
        if not isinstance(model_id, str) or not model_id:
            raise MalformedRepository("model_id must be a non-empty string", index)
        try:
            spec = spec_from_document(doc["architecture_spec"])
        except SpecError as exc:
            raise MalformedRepository(f"bad architecture_spec: {exc}", index) from None
        metrics = doc["metrics"]
        if not isinstance(metrics, dict):
            raise MalformedRepository("metrics must be an object", index)
        try:
            reasons = tuple(FailReason.parse(r) for r in metrics.get("status", []))
            exact = doc.get("bytes") or {}
            ram = _bytes_field(exact.get("ram"), metrics.get("model_ram_KB"))
            flash = _bytes_field(exact.get("flash"), metrics.get("model_flash_KB"))
            acc = metrics.get("model_acc")
            performance = None
            if acc is not None:
                training = doc.get("training") or {}
                performance = EvalResult(
                    float(acc),
                    training.get("converged"),
                    training.get("epochs_run"),
                    training.get("checkpoint_path"),
                )
        except (TypeError, ValueError) as exc:
            raise MalformedRepository(f"bad metrics: {exc}", index) from None
        return cls(model_id, spec, performance, Measurement(ram, flash, reasons))


def _bytes_field(exact, kb) -> int | None:
    if exact is not None:
        if isinstance(exact, bool) or not isinstance(exact, int):
            raise TypeError(f"byte count must be an integer, got {exact!r}")
        return exact
    if kb is None:
        return None
    if isinstance(kb, bool) or not isinstance(kb, (int, float)):
        raise TypeError(f"KB value must be a number, got {kb!r}")
    return kb_to_bytes(kb)


def _rank_key(indexed: tuple[int, Record]):
    i, rec = indexed
    return (-rec.performance.accuracy_percent, rec.measurement.ram_bytes,
            rec.measurement.flash_bytes, i)


@dataclass(frozen=True)
class ContextSummary:
    """What the proposer gets to see of the history."""

    best: tuple[dict, ...] = ()
    failures: tuple[dict, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.best and not self.failures

    @property
    def model_ids(self) -> list[str]:
        return [e["model_id"] for e in (*self.best, *self.failures)]

    def to_dict(self) -> dict:
        return {"no_history": self.empty, "best": list(self.best), "failures": list(self.failures)}

    def to_text(self) -> str:
        if self.empty:
            return "No history yet: this is the first candidate."
        lines = []
        if self.best:
            lines.append("Best feasible candidates so far:")
            for e in self.best:
                lines.append(
                    f"- {e['model_id']}: layers {e['layers']}; acc {e['accuracy']:.2f}%; "
                    f"RAM {e['ram_KB']} KB; Flash {e['flash_KB']} KB"
                )
        if self.failures:
            lines.append("Recently rejected candidates:")
            for e in self.failures:
                lines.append(
                    f"- {e['model_id']}: layers {e['layers']}; rejected for {', '.join(e['reasons'])}; "
                    f"RAM {e['ram_KB']} KB; Flash {e['flash_KB']} KB"
                )
        return "\n".join(lines)


def _entry(rec: Record) -> dict:
    m = rec.measurement
    entry = {"model_id": rec.model_id, "layers": layer_digest(rec.spec)}
    if m.passed:
        entry["accuracy"] = rec.performance.accuracy_percent
    else:
        entry["reasons"] = [str(r) for r in m.reasons]
    entry["ram_KB"] = None if m.ram_bytes is None else bytes_to_kb(m.ram_bytes)
    entry["flash_KB"] = None if m.flash_bytes is None else bytes_to_kb(m.flash_bytes)
    return entry


class Repository:
    def __init__(self, records=(), path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._records: list[Record] = []
        self._ids: set[str] = set()
        for rec in records:
            self.append(rec)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self._records)

    def __getitem__(self, i: int) -> Record:
        return self._records[i]

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Repository) and self._records == other._records

    @property
    def records(self) -> list[Record]:
        return list(self._records)

    def get(self, model_id: str) -> Record | None:
        for rec in self._records:
            if rec.model_id == model_id:
                return rec
        return None

    def append(self, record: Record) -> Repository:
        if record.model_id in self._ids:
            raise DuplicateId(f"record {record.model_id} already in repository")
        self._records.append(record)
        self._ids.add(record.model_id)
        return self

    # -- persistence -------------------------------------------------------

    def dumps(self) -> str:
        return json.dumps([r.to_json() for r in self._records], indent=2) + "\n"

    def save(self, path: str | os.PathLike | None = None) -> Path:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("no path given and repository has no on-disk path")
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(self.dumps())
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.path = target
        return target

    @classmethod
    def loads(cls, text: str, path=None) -> Repository:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedRepository(f"not JSON: {exc}") from None
        if not isinstance(doc, list):
            raise MalformedRepository("top level must be a JSON array")
        repo = cls(path=path)
        for i, entry in enumerate(doc):
            rec = Record.from_json(entry, i)
            try:
                repo.append(rec)
            except DuplicateId as exc:
                raise MalformedRepository(str(exc), i) from None
        return repo

    @classmethod
    def load(cls, path: str | os.PathLike) -> Repository:
        text = Path(path).read_text(encoding="utf-8")
        return cls.loads(text, path)

    # -- queries -----------------------------------------------------------

    def ranked_feasible(self) -> list[Record]:
        feasible = [(i, r) for i, r in enumerate(self._records) if r.feasible]
        return [r for _, r in sorted(feasible, key=_rank_key)]

    def best_feasible(self) -> Record | None:
        ranked = self.ranked_feasible()
        return ranked[0] if ranked else None

    def select_context(self, k_best: int = 5, k_fail: int = 3) -> ContextSummary:
        if k_best < 0 or k_fail < 0:
            raise ValueError("k_best and k_fail must be >= 0")
        best = self.ranked_feasible()[:k_best]
        failed = [r for r in reversed(self._records) if not r.measurement.passed][:k_fail]
        return ContextSummary(tuple(_entry(r) for r in best), tuple(_entry(r) for r in failed))


def append(repo: Repository, record: Record) -> Repository:
    return repo.append(record)


def save(repo: Repository, path=None) -> Path:
    return repo.save(path)


def load(path) -> Repository:
    return Repository.load(path)


def select_context(repo: Repository, k_best: int = 5, k_fail: int = 3) -> ContextSummary:
    return repo.select_context(k_best, k_fail)


def best_feasible(repo: Repository) -> Record | None:
    return repo.best_feasible()
