"""Level-wise Apriori mining and habit-rule extraction.

Supports are kept as integer counts over the transaction total so threshold
comparisons are exact; floats appear only on output.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Iterable, Optional, Sequence, Union

from .errors import ConsistencyError, FormatError, ParameterError
from .micromoment import Transaction

DEFAULT_MIN_SUPPORT = 0.1
DEFAULT_MIN_CONFIDENCE = 0.6

Number = Union[float, Fraction, int]


def _exact(x: Number) -> Fraction:
    # repr() gives the shortest decimal, so 0.1 means exactly 1/10
    return x if isinstance(x, Fraction) else Fraction(repr(float(x)))


@dataclass(frozen=True)
class ItemSet:
    items: tuple
    count: int
    total: int

    @property
    def support_exact(self) -> Fraction:
        return Fraction(self.count, self.total)

    @property
    def support(self) -> float:
        return self.count / self.total


@dataclass(frozen=True)
class AssociationRule:
    antecedent: ItemSet
    consequent: ItemSet
    count: int  # transactions containing antecedent and consequent
    total: int

    @property
    def support(self) -> float:
        return self.count / self.total

    @property
    def confidence_exact(self) -> Fraction:
        return Fraction(self.count, self.antecedent.count)

    @property
    def confidence(self) -> float:
        return self.count / self.antecedent.count


@dataclass(frozen=True)
class HabitRule:
    rule: AssociationRule
    device_id: Optional[str]
    action: str

    @property
    def context(self) -> dict:
        return dict(i.split(":", 1) for i in self.rule.antecedent.items)


def _as_sets(transactions) -> list[frozenset]:
    out = []
    for t in transactions:
        out.append(frozenset(t.items if isinstance(t, Transaction) else t))
    return out


def frequent_itemsets(transactions: Sequence, min_support: Number = DEFAULT_MIN_SUPPORT) -> list[ItemSet]:
    """All itemsets with support >= ``min_support``, sorted by (size, items)."""
    txs = _as_sets(transactions)
    if not txs:
        raise ParameterError("frequent_itemsets needs at least one transaction")
    threshold = _exact(min_support)
    if not 0 < threshold <= 1:
        raise ParameterError(f"min_support {min_support} not in (0, 1]")
    total = len(txs)
    need = threshold * total  # count must reach this

    counts: dict[tuple, int] = {}
    for t in txs:
        for item in t:
            counts[(item,)] = counts.get((item,), 0) + 1
    level = {s: c for s, c in counts.items() if c >= need}
    result = dict(level)
    frequent_items = {s[0] for s in level}
    txs = [t & frequent_items for t in txs]

    size = 1
    while level:
        size += 1
        prev = sorted(level)
        prev_set = set(prev)
        candidates = []
        for i, a in enumerate(prev):
            for b in prev[i + 1:]:
                if a[:-1] != b[:-1]:
                    break
                cand = a + (b[-1],)
                # anti-monotone pruning: every (size-1)-subset must be frequent
                if all(sub in prev_set for sub in combinations(cand, size - 1)):
                    candidates.append(cand)
        if not candidates:
            break
        cand_counts = dict.fromkeys(candidates, 0)
        cand_sets = [(c, frozenset(c)) for c in candidates]
        for t in txs:
            if len(t) < size:
                continue
            for c, cs in cand_sets:
                if cs <= t:
                    cand_counts[c] += 1
        level = {c: n for c, n in cand_counts.items() if n >= need}
        result.update(level)

    return [ItemSet(items, n, total) for items, n in sorted(result.items(), key=lambda kv: (len(kv[0]), kv[0]))]


def generate_rules(itemsets: Sequence[ItemSet],
                   min_confidence: Number = DEFAULT_MIN_CONFIDENCE) -> list[AssociationRule]:
    """Rules A -> S\\A for every frequent S (|S| >= 2) and non-empty proper subset A."""
    threshold = _exact(min_confidence)
    index = {s.items: s for s in itemsets}
    rules = []
    for s in itemsets:
        if len(s.items) < 2:
            continue
        for r in range(1, len(s.items)):
            for lhs in combinations(s.items, r):
                a = index.get(lhs)
                rhs = tuple(i for i in s.items if i not in lhs)
                c = index.get(rhs)
                if a is None or c is None:
                    raise ConsistencyError(f"no stored support for subset of {s.items}")
                if Fraction(s.count, a.count) >= threshold:
                    rules.append(AssociationRule(a, c, s.count, s.total))
    rules.sort(key=lambda r: (len(r.antecedent.items) + len(r.consequent.items),
                              r.antecedent.items + r.consequent.items, r.antecedent.items))
    return rules


def _key(item: str) -> str:
    return item.split(":", 1)[0]


def extract_habits(rules: Iterable[AssociationRule]) -> list[HabitRule]:
    """Keep rules whose consequent is one action item, optionally plus the device item."""
    habits = []
    for r in rules:
        rhs = r.consequent.items
        actions = [i for i in rhs if _key(i) == "action"]
        devices = [i for i in rhs if _key(i) == "device"]
        lhs_devices = [i for i in r.antecedent.items if _key(i) == "device"]
        if len(actions) != 1:
            continue
        if len(rhs) == 1:
            device = lhs_devices[0] if lhs_devices else None
        elif len(rhs) == 2 and len(devices) == 1 and not lhs_devices:
            device = devices[0]
        else:
            continue
        habits.append(HabitRule(r, device.split(":", 1)[1] if device else None,
                                actions[0].split(":", 1)[1]))
    habits.sort(key=lambda h: (-h.rule.confidence_exact, -h.rule.count,
                               h.rule.antecedent.items, h.rule.consequent.items))
    return habits


def filter_device(transactions: Iterable[Transaction], device: str) -> list[Transaction]:
    """Per-device mining: keep only that device's transactions."""
    tag = f"device:{device}"
    return [t for t in transactions if tag in t.items]


def mine_habits(transactions, min_support: Number = DEFAULT_MIN_SUPPORT,
                min_confidence: Number = DEFAULT_MIN_CONFIDENCE):
    itemsets = frequent_itemsets(transactions, min_support)
    rules = generate_rules(itemsets, min_confidence)
    return itemsets, rules, extract_habits(rules)


def write_rules(rules: Iterable[AssociationRule]) -> str:
    lines = []
    for r in rules:
        lines.append(f"{';'.join(r.antecedent.items)}|{';'.join(r.consequent.items)}|"
                     f"{r.support!r}|{r.confidence!r}")
    return "".join(line + "\n" for line in lines)


def read_rules(text: str) -> list[tuple]:
    """Parse exported rules into (antecedent, consequent, support, confidence) tuples."""
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) != 4:
            raise FormatError(f"bad rule record: {line!r}")
        out.append((tuple(parts[0].split(";")), tuple(parts[1].split(";")),
                    float(parts[2]), float(parts[3])))
    return out
