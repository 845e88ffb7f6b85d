"""Dataset manifests: a schema-versioned header line followed by one JSON
record per line. All paths are stored relative to the manifest's folder."""

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

from .io import atomic_write_text, stable_hash

SCHEMA_VERSION = 1


@dataclass
class ManifestRecord:
    id: str
    image: str
    word: str
    split: str = "train"
    gt_mask: Optional[str] = None
    gt_bbox: Optional[List[int]] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    flags: Dict[str, object] = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        return {k: v for k, v in d.items() if v not in (None, {}) or k in ("artifacts", "flags")}


@dataclass
class DatasetManifest:
    name: str
    records: List[ManifestRecord] = field(default_factory=list)
    stages: Dict[str, dict] = field(default_factory=dict)
    # free-form description, e.g. how D_s is formed from this manifest
    notes: Dict[str, str] = field(default_factory=dict)
    root: str = "."

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest record ids must be unique")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def path(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def rel(self, path):
        return os.path.relpath(path, self.root)

    def header(self):
        return {"schema_version": SCHEMA_VERSION, "dataset": self.name, "stages": self.stages, "notes": self.notes}

    def dumps(self):
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def digest(self):
        return stable_hash(self.dumps())

    def save(self, path=None):
        path = path or os.path.join(self.root, "manifest.jsonl")
        atomic_write_text(path, self.dumps())
        return path

    @classmethod
    def loads(cls, text, root="."):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty manifest")
        head = json.loads(lines[0])
        version = head.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema version {version!r}")
        records = [ManifestRecord(**json.loads(ln)) for ln in lines[1:]]
        return cls(head["dataset"], records, head.get("stages", {}), head.get("notes", {}), root)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), root=os.path.dirname(os.path.abspath(path)))

    def validate(self):
        """Return a list of missing referenced files (empty when valid)."""
        missing = []
        for r in self.records:
            refs = [r.image] + ([r.gt_mask] if r.gt_mask else []) + list(r.artifacts.values())
            missing += [f"{r.id}: {p}" for p in refs if not os.path.exists(self.path(p))]
        return missing

    def by_split(self, split):
        return [r for r in self.records if r.split == split]

    def union(self, other, name=None):
        """Records of both manifests, re-rooted to this manifest's folder."""
        merged = []
        for m in (self, other):
            for r in m.records:
                d = r.to_json()
                d["image"] = os.path.relpath(m.path(r.image), self.root)
                if r.gt_mask:
                    d["gt_mask"] = os.path.relpath(m.path(r.gt_mask), self.root)
                d["artifacts"] = {k: os.path.relpath(m.path(v), self.root) for k, v in r.artifacts.items()}
                merged.append(ManifestRecord(**d))
        return DatasetManifest(name or f"{self.name}+{other.name}", merged, {}, dict(self.notes), self.root)
