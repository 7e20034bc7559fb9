"""Dataset manifests: one JSON record per line, append-friendly so that
interrupted builds can resume without rewriting.

Fields per entry: patch_path, source_image, crop_offset [x, y], region
(near|far), kind (natural | densified_input | distorted), rate_or_percent,
strategy, seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import ValidationError

KINDS = ("natural", "densified_input", "distorted")
REGIONS = ("near", "far")


@dataclass(frozen=True)
class ManifestEntry:
    patch_path: str           # relative to the manifest's directory
    source_image: str
    crop_offset: tuple
    region: str
    kind: str
    rate_or_percent: float
    strategy: str
    seed: int

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ValidationError(f"region must be one of {REGIONS}, got {self.region!r}")
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "crop_offset", tuple(int(v) for v in self.crop_offset))

    @property
    def key(self):
        return (self.source_image, self.crop_offset, self.region, self.kind)


class DatasetManifest:
    """Ordered collection of entries backed by an optional JSONL file."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.entries: list[ManifestEntry] = []
        self._keys = set()
        if self.path is not None and self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self._add(ManifestEntry(**_decode(json.loads(line))))

    def _add(self, entry: ManifestEntry):
        if entry.key in self._keys:
            raise ValidationError(f"duplicate manifest entry {entry.key}")
        self.entries.append(entry)
        self._keys.add(entry.key)

    def append(self, entry: ManifestEntry):
        self._add(entry)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(asdict(entry), sort_keys=True) + "\n")

    def __contains__(self, key) -> bool:
        return tuple(key) in self._keys

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        """Absolute path of an entry's patch file."""
        p = Path(entry.patch_path)
        if p.is_absolute() or self.path is None:
            return p
        return self.path.parent / p

    def filter(self, **fields) -> list:
        out = self.entries
        for name, value in fields.items():
            out = [e for e in out if getattr(e, name) == value]
        return out

    def verify(self) -> list:
        """Referential integrity: all paths exist and every densified_input
        has a natural ground-truth partner. Returns a list of problems."""
        problems = []
        for e in self.entries:
            if not self.resolve(e).is_file():
                problems.append(f"missing file: {e.patch_path}")
        naturals = {(e.source_image, e.crop_offset) for e in self.entries if e.kind == "natural"}
        for e in self.entries:
            if e.kind == "densified_input" and (e.source_image, e.crop_offset) not in naturals:
                problems.append(
                    f"densified_input without natural partner: {e.patch_path}"
                )
        return problems


def _decode(record: dict) -> dict:
    record["crop_offset"] = tuple(record["crop_offset"])
    return record
