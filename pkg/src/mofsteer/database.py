"""In-memory campaign database: linkers, screened MOFs, ranked views."""

from __future__ import annotations

from bisect import insort
from typing import Iterable, Optional

from .domain import LinkerRecord, MofRecord, MofStage
from .stages import TRAINING_STRAIN


class CampaignDatabase:
    """Holds every MOF that reached a stability result, plus processed linkers.

    MOFs screened out before the stability step are only counted; keeping
    them would cost memory without feeding any policy.
    """

    def __init__(self):
        self.linkers: dict[int, LinkerRecord] = {}
        self.mofs: dict[int, MofRecord] = {}
        self._by_strain: list[tuple[float, int]] = []
        self._by_capacity: list[tuple[float, int]] = []
        self.screened_out = 0

    def add_linkers(self, linkers: Iterable[LinkerRecord]) -> None:
        for l in linkers:
            self.linkers[l.id] = l

    def record(self, mof: MofRecord) -> None:
        """Store a new or advanced MOF record, keeping the ranked views in step."""
        previous = self.mofs.get(mof.id)
        if mof.strain is None:
            if previous is None:
                self.screened_out += 1
                return
        self.mofs[mof.id] = mof
        if mof.strain is not None and (previous is None or previous.strain is None):
            if mof.strain < TRAINING_STRAIN:
                insort(self._by_strain, (mof.strain, mof.id))
        if mof.capacity is not None and (previous is None or previous.capacity is None):
            insort(self._by_capacity, (-mof.capacity, mof.id))

    def get(self, mof_id: int) -> Optional[MofRecord]:
        return self.mofs.get(mof_id)

    def linkers_of(self, mof_id: int) -> tuple[int, ...]:
        return self.mofs[mof_id].linker_ids

    @property
    def qualifying_count(self) -> int:
        """MOFs whose strain is below the training cut."""
        return len(self._by_strain)

    @property
    def adsorption_count(self) -> int:
        return len(self._by_capacity)

    def ranked_by_strain(self) -> list[int]:
        return [mid for _, mid in self._by_strain]

    def ranked_by_capacity(self) -> list[int]:
        return [mid for _, mid in self._by_capacity]

    def count_at(self, stage: MofStage) -> int:
        return sum(1 for m in self.mofs.values() if m.stage is stage)
