"""Medicine catalog with case-insensitive prefix autocomplete.

The catalog is read-only after load (updates mean a reload), so it can be
shared across threads without locking. The autocomplete index is the
medicine list pre-sorted by (name, id) with cached casefolded names; a
query walks the list in order and stops once ``limit`` matches are found,
which keeps results deterministic and makes autocomplete(p, k) a prefix of
autocomplete(p, k+1) by construction.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, List, Tuple, Union

from .domain import BrokerError, Medicine, ValidationError

CATALOG_FIELDS = ("id", "name", "dosage", "package")


class CatalogLoadError(BrokerError):
    """Unparseable or inconsistent catalog source; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class Catalog:
    def __init__(self, medicines: Iterable[Medicine]):
        self._by_id = {}
        for medicine in medicines:
            if medicine.id in self._by_id:
                raise CatalogLoadError(f"duplicate medicine id {medicine.id!r}")
            self._by_id[medicine.id] = medicine
        self._index: List[Tuple[str, Medicine]] = sorted(
            ((m.name.casefold(), m) for m in self._by_id.values()),
            key=lambda entry: (entry[1].name, entry[1].id),
        )

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, medicine_id: str) -> bool:
        return medicine_id in self._by_id

    def get(self, medicine_id: str) -> Medicine | None:
        return self._by_id.get(medicine_id)

    def medicines(self) -> List[Medicine]:
        return [m for _, m in self._index]

    def autocomplete(self, prefix: str, limit: int = 10) -> List[Medicine]:
        """Medicines whose name starts with ``prefix`` under case folding.

        Ordered by (name, id), truncated to ``limit``. An empty prefix
        returns the first ``limit`` medicines in the same order.
        """
        if limit < 1:
            raise ValidationError(f"limit must be >= 1, got {limit}")
        needle = prefix.casefold()
        out: List[Medicine] = []
        for folded, medicine in self._index:
            if folded.startswith(needle):
                out.append(medicine)
                if len(out) >= limit:
                    break
        return out


def _parse_rows(reader: csv.DictReader, source: str) -> List[Medicine]:
    medicines: List[Medicine] = []
    seen: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        if row.get("id") is None or row.get("name") is None:
            raise CatalogLoadError(f"{source}:{lineno}: missing id/name field", line=lineno)
        medicine_id = row["id"].strip()
        if medicine_id in seen:
            raise CatalogLoadError(
                f"{source}:{lineno}: duplicate medicine id {medicine_id!r} "
                f"(first seen on line {seen[medicine_id]})",
                line=lineno,
            )
        seen[medicine_id] = lineno
        try:
            medicines.append(
                Medicine(
                    id=medicine_id,
                    name=row["name"].strip(),
                    dosage=(row.get("dosage") or "").strip(),
                    package=(row.get("package") or "").strip(),
                )
            )
        except ValidationError as exc:
            raise CatalogLoadError(f"{source}:{lineno}: {exc}", line=lineno) from exc
    return medicines


def load_catalog(source: Union[str, Path]) -> Catalog:
    """Load a medicine file (CSV: id,name,dosage,package; UTF-8)."""
    with open(source, newline="", encoding="utf-8") as fh:
        return Catalog(_parse_rows(csv.DictReader(fh), str(source)))


def load_catalog_text(text: str, source: str = "<inline>") -> Catalog:
    return Catalog(_parse_rows(csv.DictReader(io.StringIO(text)), source))


def write_catalog(path: Union[str, Path], medicines: Iterable[Medicine]) -> int:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CATALOG_FIELDS)
        count = 0
        for m in medicines:
            writer.writerow([m.id, m.name, m.dosage, m.package])
            count += 1
    return count
