"""The 30-region parcellation and the composites used for quantification."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

NUM_REGIONS = 30
TARGET_COMPOSITES = ("precuneus", "prefrontal", "gyrus_rectus", "lateral_temporal")
REQUIRED_COMPOSITES = TARGET_COMPOSITES + ("reference",)


@dataclass(frozen=True)
class RegionTable:
    names: dict[int, str]
    composites: dict[str, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self):
        if sorted(self.names) != list(range(1, NUM_REGIONS + 1)):
            raise ValueError(f"region ids must be exactly 1..{NUM_REGIONS}, got {sorted(self.names)}")
        for name, ids in self.composites.items():
            unknown = set(ids) - set(self.names)
            if unknown or not ids:
                raise ValueError(f"composite {name!r} references unknown ids {sorted(unknown)}")
        missing = [c for c in REQUIRED_COMPOSITES if c not in self.composites]
        if missing:
            raise ValueError(f"region table lacks composites {missing}")

    @property
    def target_cortical(self) -> frozenset[int]:
        """Union of the four target composites; the SUVR numerator."""
        return frozenset().union(*(self.composites[c] for c in TARGET_COMPOSITES))

    @property
    def reference(self) -> frozenset[int]:
        return self.composites["reference"]

    def __getitem__(self, region_id: int) -> str:
        return self.names[region_id]

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "RegionTable":
        names: dict[int, str] = {}
        composites: dict[str, frozenset[int]] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{source}:{lineno}: expected two tab-separated columns")
            key, value = parts[0].strip(), parts[1].strip()
            if key.startswith("@"):
                composites[key[1:]] = frozenset(int(v) for v in value.split(","))
            else:
                rid = int(key)
                if rid in names:
                    raise ValueError(f"{source}:{lineno}: duplicate region id {rid}")
                names[rid] = value
        return cls(names, composites)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RegionTable":
        """Read a table file; ``None`` loads the table shipped with the package."""
        if path is None:
            text = resources.files("petseg").joinpath("data/regions.tsv").read_text()
            return cls.parse(text, "regions.tsv")
        return cls.parse(Path(path).read_text(), str(path))

    def dumps(self) -> str:
        lines = ["# id\tname"]
        lines += [f"{rid}\t{self.names[rid]}" for rid in sorted(self.names)]
        lines += [f"@{n}\t{','.join(str(i) for i in sorted(ids))}" for n, ids in self.composites.items()]
        return "\n".join(lines) + "\n"


def default_table() -> RegionTable:
    return RegionTable.load()
