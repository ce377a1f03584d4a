"""Meta-source / meta-target splits of the training domains.

A task is identified by a boolean source mask over the ``d`` training
domains: masked domains are pooled into the meta-source, the remaining ones
form the meta-target (kept per domain so target batches can be drawn from a
single domain at a time).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .datasets import DomainDataset, pool
from .errors import PolicyError

Mask = tuple[bool, ...]

POLICY_KINDS = ("all_nonempty_subsets", "singleton_plus_leaveoneout_plus_full", "explicit_masks")


def mask_to_str(mask: Mask) -> str:
    return "".join("1" if bit else "0" for bit in mask)


def mask_from_str(text: str) -> Mask:
    if not text or set(text) - {"0", "1"}:
        raise PolicyError(f"mask {text!r} must be a non-empty string of 0/1")
    return tuple(ch == "1" for ch in text)


def _sort_key(mask: Mask) -> tuple[int, int]:
    # leftmost bit is domain 0 and the most significant bit
    return sum(mask), int(mask_to_str(mask), 2)


@dataclass
class TaskSetPolicy:
    kind: str = "all_nonempty_subsets"
    masks: list[str] = field(default_factory=list)

    def validate(self, d: int) -> None:
        if self.kind not in POLICY_KINDS:
            raise PolicyError(f"unknown task policy {self.kind!r}")
        if self.kind != "explicit_masks":
            return
        if not self.masks:
            raise PolicyError("explicit_masks policy needs at least one mask")
        parsed = [mask_from_str(m) for m in self.masks]
        if any(len(m) != d for m in parsed):
            raise PolicyError(f"every mask must have length {d}")
        if any(not any(m) for m in parsed):
            raise PolicyError("masks must select at least one domain")
        if len(set(parsed)) != len(parsed):
            raise PolicyError("duplicate masks")


def enumerate_meta_tasks(d: int, policy: TaskSetPolicy | None = None) -> list[Mask]:
    """Source masks for ``d`` training domains, sorted by (popcount, value)."""
    if d < 2:
        raise PolicyError(f"need at least 2 training domains, got {d}")
    policy = policy or TaskSetPolicy()
    policy.validate(d)
    if policy.kind == "all_nonempty_subsets":
        masks = [m for m in product((False, True), repeat=d) if any(m)]
    elif policy.kind == "singleton_plus_leaveoneout_plus_full":
        singles = [tuple(i == j for i in range(d)) for j in range(d)]
        leave_one = [tuple(i != j for i in range(d)) for j in range(d)]
        masks = list(dict.fromkeys(singles + leave_one + [(True,) * d]))
    else:
        masks = [mask_from_str(m) for m in policy.masks]
    return sorted(masks, key=_sort_key)


@dataclass
class MetaTask:
    task_id: int
    mask: Mask
    source: list[DomainDataset]
    target: list[DomainDataset]
    source_val: list[DomainDataset] = field(default_factory=list)
    target_val: list[DomainDataset] = field(default_factory=list)

    @property
    def preserve_only(self) -> bool:
        """True when every training domain is in the meta-source."""
        return not self.target

    def pooled_source(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return pool(self.source)

    @property
    def source_domains(self) -> list[int]:
        return [ds.domain_id for ds in self.source]

    @property
    def target_domains(self) -> list[int]:
        return [ds.domain_id for ds in self.target]


def build_task(
    domains: list[DomainDataset],
    mask: Mask,
    task_id: int = 0,
    val_domains: list[DomainDataset] | None = None,
) -> MetaTask:
    """Split ``domains`` by ``mask``; ``val_domains`` (parallel list) is split the same way."""
    mask = tuple(bool(b) for b in mask)
    if len(mask) != len(domains):
        raise PolicyError(f"mask length {len(mask)} != number of domains {len(domains)}")
    if not any(mask):
        raise PolicyError("mask selects no source domain")
    if val_domains is not None and len(val_domains) != len(domains):
        raise PolicyError("val_domains must parallel domains")
    pick = lambda seq, flag: [ds for ds, m in zip(seq, mask) if m == flag]
    return MetaTask(
        task_id=task_id,
        mask=mask,
        source=pick(domains, True),
        target=pick(domains, False),
        source_val=pick(val_domains, True) if val_domains else [],
        target_val=pick(val_domains, False) if val_domains else [],
    )


def build_tasks(
    domains: list[DomainDataset],
    policy: TaskSetPolicy | None = None,
    val_domains: list[DomainDataset] | None = None,
) -> list[MetaTask]:
    masks = enumerate_meta_tasks(len(domains), policy)
    return [build_task(domains, m, i, val_domains) for i, m in enumerate(masks)]
