"""Leave-one-out splitting and ranking metrics.

Each user's last item is the test target, the penultimate the validation
target; both keep their strict history prefixes. With a single relevant item
per user the ideal DCG is 1, so NDCG@k reduces to 1/log2(rank + 1) inside the
cutoff and 0 outside.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .dataio import BehaviorSequence, MIN_SEQUENCE_LEN
from .errors import UsageError


@dataclass
class UserSplit:
    user_id: str
    train_items: list[str]  # everything before the validation target
    valid_history: list[str]
    valid_target: str
    test_history: list[str]
    test_target: str


@dataclass
class EvalSplit:
    users: list[UserSplit]
    rejected_short: int


def split(sequences: Sequence[BehaviorSequence]) -> EvalSplit:
    """Leave-one-out split; sequences shorter than 3 are rejected and counted."""
    users: list[UserSplit] = []
    rejected = 0
    for seq in sequences:
        if len(seq.items) < MIN_SEQUENCE_LEN:
            rejected += 1
            continue
        items = list(seq.items)
        users.append(
            UserSplit(
                user_id=seq.user_id,
                train_items=items[:-2],
                valid_history=items[:-2],
                valid_target=items[-2],
                test_history=items[:-1],
                test_target=items[-1],
            )
        )
    return EvalSplit(users=users, rejected_short=rejected)


def _rank_of(ranked: Sequence[str], target: str) -> int | None:
    """1-indexed rank of the first occurrence of ``target``, None if absent."""
    for position, item in enumerate(ranked, start=1):
        if item == target:
            return position
    return None


def recall_at_k(ranked: Sequence[str], target: str, k: int) -> float:
    """1.0 iff the target appears within the first k entries."""
    if k < 1:
        raise UsageError("k must be positive")
    rank = _rank_of(ranked, target)
    return 1.0 if rank is not None and rank <= k else 0.0


def ndcg_at_k(ranked: Sequence[str], target: str, k: int) -> float:
    """Rank-discounted credit 1/log2(rank + 1) inside the cutoff."""
    if k < 1:
        raise UsageError("k must be positive")
    rank = _rank_of(ranked, target)
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class EvalReport:
    k_values: list[int]
    recall: dict[int, float]
    ndcg: dict[int, float]
    user_count: int
    coverage: float  # fraction of users with at least one retrieved item
    empty_count: int = 0  # users whose retrieval came back empty
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "k_values": list(self.k_values),
            "recall": {str(k): self.recall[k] for k in self.k_values},
            "ndcg": {str(k): self.ndcg[k] for k in self.k_values},
            "user_count": self.user_count,
            "coverage": self.coverage,
            "empty_count": self.empty_count,
            "extra": self.extra,
        }

    @classmethod
    def from_json_dict(cls, raw: Mapping) -> "EvalReport":
        k_values = [int(k) for k in raw["k_values"]]
        return cls(
            k_values=k_values,
            recall={k: float(raw["recall"][str(k)]) for k in k_values},
            ndcg={k: float(raw["ndcg"][str(k)]) for k in k_values},
            user_count=int(raw["user_count"]),
            coverage=float(raw["coverage"]),
            empty_count=int(raw.get("empty_count", 0)),
            extra=dict(raw.get("extra", {})),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def render_table(self) -> str:
        """Aligned metrics-by-cutoff text table."""
        header = ["Metric"] + [f"@{k}" for k in self.k_values]
        rows = [
            ["NDCG"] + [f"{self.ndcg[k]:.4f}" for k in self.k_values],
            ["Recall"] + [f"{self.recall[k]:.4f}" for k in self.k_values],
        ]
        widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
        lines = []
        for row in [header] + rows:
            lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)))
        lines.append(f"users: {self.user_count}  coverage: {self.coverage:.4f}")
        return "\n".join(lines)


def evaluate_rankings(
    rankings: Mapping[str, Sequence[str]],
    targets: Mapping[str, str],
    k_values: Sequence[int],
) -> EvalReport:
    """Mean Recall@k / NDCG@k over users; empty rankings score zero and are
    counted separately."""
    if not targets:
        raise UsageError("no users to evaluate")
    k_values = sorted(set(int(k) for k in k_values))
    if not k_values:
        raise UsageError("need at least one cutoff")
    recall_sums = {k: 0.0 for k in k_values}
    ndcg_sums = {k: 0.0 for k in k_values}
    empty = 0
    covered = 0
    for user_id in targets:
        ranked = list(rankings.get(user_id, ()))
        if ranked:
            covered += 1
        else:
            empty += 1
        for k in k_values:
            recall_sums[k] += recall_at_k(ranked, targets[user_id], k)
            ndcg_sums[k] += ndcg_at_k(ranked, targets[user_id], k)
    n = len(targets)
    return EvalReport(
        k_values=k_values,
        recall={k: recall_sums[k] / n for k in k_values},
        ndcg={k: ndcg_sums[k] / n for k in k_values},
        user_count=n,
        coverage=covered / n,
        empty_count=empty,
    )
