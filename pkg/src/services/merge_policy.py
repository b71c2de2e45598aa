import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

from src.services.component import ComponentId

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComponentSize:
    cid: ComponentId
    size_bytes: int


class PrefixMergePolicy:
    """
    Merge the oldest run of small components once too many have piled up.

    A component is eligible while it is smaller than ``max_bytes``. When at least
    ``tolerable_count`` components are eligible, the oldest contiguous run of
    eligible components is requested, trimmed so its total stays within
    ``max_bytes``; a run needs two or more components.
    """

    def __init__(self, max_bytes: int, tolerable_count: int):
        self.max_bytes = max_bytes
        self.tolerable_count = tolerable_count

    def tick(self, components: Sequence[ComponentSize]) -> Optional[List[ComponentId]]:
        """
        Decide the next merge.

        Args:
            components (Sequence[ComponentSize]): Live components, oldest first.

        Returns:
            Optional[List[ComponentId]]: Components to merge, oldest first.
        """
        eligible = [c.size_bytes < self.max_bytes for c in components]
        if sum(eligible) < max(self.tolerable_count, 2):
            return None
        i = 0
        while i < len(components):
            if not eligible[i]:
                i += 1
                continue
            run = []
            total = 0
            j = i
            while j < len(components) and eligible[j] and total + components[j].size_bytes <= self.max_bytes:
                run.append(components[j].cid)
                total += components[j].size_bytes
                j += 1
            if len(run) >= 2:
                logger.debug("Merge requested for %s (%d bytes)", [str(c) for c in run], total)
                return run
            i += 1
        return None
